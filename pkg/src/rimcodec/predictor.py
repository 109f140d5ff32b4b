"""Next-pixel range prediction from already-decoded context.

Four predictors share one contract: given everything decoded before pixel
(i, j) in raster order, produce an unquantized range estimate.

  * previous-valid — nearest valid pixel scanning raster-backward.
  * linear — left + up - upleft plane extrapolation.
  * anchor net (intra) — point-set network over up to 99 decoded patch
    pixels lifted to (d_azimuth, d_elevation, relative range).
  * anchor net (temporal) — same network family with up to 100 extra points
    queried from the previous decoded frame via an exact k-NN index and
    reprojected into the target shot's spherical frame (time channel 1).

The anchor network scores every context point as a candidate base value and
regresses a per-point correction; the prediction is the best-scored point's
range plus its correction.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from scipy.spatial import cKDTree

from .errors import NoPreviousFrame, WeightShapeMismatch
from .geometry import (
    LidarCalibration,
    Pose,
    PoseTrack,
    RangeImage,
    project,
    to_sensor,
    unproject,
    wrap_angle,
)

PATCH_H = 10
PATCH_W = 10
INTRA_CAPACITY = PATCH_H * PATCH_W - 1     # 99
TEMPORAL_NEIGHBORS = 50                    # per query point, two queries
TEMPORAL_CAPACITY = 2 * TEMPORAL_NEIGHBORS
MAX_CONTEXT_POINTS = INTRA_CAPACITY + TEMPORAL_CAPACITY  # 199

RWGT_MAGIC = b"RWGT"
RWGT_VERSION = 1


class PredictorKind(IntEnum):
    PREVIOUS_VALID = 0
    LINEAR = 1
    ANCHOR_INTRA = 2
    ANCHOR_TEMPORAL = 3

    @property
    def needs_weights(self) -> bool:
        return self in (PredictorKind.ANCHOR_INTRA, PredictorKind.ANCHOR_TEMPORAL)


class LayerKind(IntEnum):
    DENSE = 0
    POINTWISE_DENSE = 1
    MAX_POOL_POINTS = 2
    CONCAT_GLOBAL_LOCAL = 3


# ---------------------------------------------------------------------------
# Baseline predictors
# ---------------------------------------------------------------------------

def _value_at_or_before(ranges: np.ndarray, valid: np.ndarray, i: int, j: int) -> float:
    """Last valid range at or before (i, j) in raster order; 0 if none."""
    h, w = ranges.shape
    p = i * w + j
    if p < 0:
        return 0.0
    flat_v = valid.reshape(-1)
    flat_r = ranges.reshape(-1)
    while p >= 0:
        if flat_v[p]:
            return float(flat_r[p])
        p -= 1
    return 0.0


def predict_previous_valid(img: RangeImage, i: int, j: int) -> float:
    """Nearest valid range strictly before (i, j) in raster order, else 0."""
    return _value_at_or_before(img.ranges, img.valid, i, j - 1)


def predict_linear(img: RangeImage, i: int, j: int) -> float:
    """left + up - upleft, each term falling back to its previous valid pixel.

    The result is clamped to [0, max_range].
    """
    a = _value_at_or_before(img.ranges, img.valid, i, j - 1)
    b = _value_at_or_before(img.ranges, img.valid, i - 1, j)
    c = _value_at_or_before(img.ranges, img.valid, i - 1, j - 1)
    return float(min(max(a + b - c, 0.0), img.max_range))


# ---------------------------------------------------------------------------
# Context point sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContextPointSet:
    """Decoded laser shots around a target pixel, in its spherical frame.

    Angles are relative to the target shot; ``anchor_ranges`` are the
    absolute decoded ranges and ``rel_range`` (derived) is anchor_ranges
    minus ``mean_range``.  ``slots`` are capacity-slot indices: patch raster
    position for current-frame points, 99 + neighbor rank for temporal
    points.  ``time`` is 0 for the current frame, 1 for the previous frame.
    """

    d_azimuth: np.ndarray
    d_elevation: np.ndarray
    anchor_ranges: np.ndarray
    time: np.ndarray
    slots: np.ndarray
    mean_range: float

    def __post_init__(self):
        n = self.d_azimuth.shape[0]
        for name in ("d_elevation", "anchor_ranges", "time", "slots"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
        if n > MAX_CONTEXT_POINTS:
            raise ValueError(f"context limited to {MAX_CONTEXT_POINTS} points, got {n}")
        if n and not np.isin(self.time, (0, 1)).all():
            raise ValueError("time channel must be 0 or 1")

    @property
    def count(self) -> int:
        return self.d_azimuth.shape[0]

    @property
    def rel_range(self) -> np.ndarray:
        return self.anchor_ranges - self.mean_range

    @staticmethod
    def empty() -> "ContextPointSet":
        z = np.zeros(0)
        return ContextPointSet(z, z, z, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), 0.0)

    @staticmethod
    def build(d_az, d_el, anchors, time, slots) -> "ContextPointSet":
        anchors = np.asarray(anchors, dtype=np.float64)
        mean = float(anchors.mean()) if anchors.size else 0.0
        return ContextPointSet(
            np.asarray(d_az, dtype=np.float64),
            np.asarray(d_el, dtype=np.float64),
            anchors,
            np.asarray(time, dtype=np.int64),
            np.asarray(slots, dtype=np.int64),
            mean,
        )


def combine_contexts(intra: ContextPointSet, temporal: ContextPointSet) -> ContextPointSet:
    """Union of current-frame and previous-frame points, recentered on the
    mean range of the union."""
    return ContextPointSet.build(
        np.concatenate([intra.d_azimuth, temporal.d_azimuth]),
        np.concatenate([intra.d_elevation, temporal.d_elevation]),
        np.concatenate([intra.anchor_ranges, temporal.anchor_ranges]),
        np.concatenate([intra.time, temporal.time]),
        np.concatenate([intra.slots, temporal.slots]),
    )


def extract_intra_context(
    img: RangeImage,
    calib: LidarCalibration,
    i: int,
    j: int,
    h: int = PATCH_H,
    w: int = PATCH_W,
) -> ContextPointSet:
    """Valid decoded pixels of the h x w patch whose bottom-right corner is
    (i, j), excluding (i, j) itself.  Out-of-image positions contribute
    nothing; angles are relative to the target shot."""
    r0 = max(0, i - h + 1)
    c0 = max(0, j - w + 1)
    sub_v = img.valid[r0 : i + 1, c0 : j + 1].copy()
    sub_v[-1, -1] = False  # the target pixel is not context
    pi, pj = np.nonzero(sub_v)
    if pi.size == 0:
        return ContextPointSet.empty()
    rows = r0 + pi
    cols = c0 + pj
    d_az = wrap_angle(calib.azimuths[cols] - calib.azimuths[j])
    d_el = calib.elevations[rows] - calib.elevations[i]
    anchors = img.ranges[rows, cols]
    # Slot index = raster position inside the full virtual h x w patch.
    slots = (rows - (i - h + 1)) * w + (cols - (j - w + 1))
    return ContextPointSet.build(d_az, d_el, anchors, np.zeros(pi.size, dtype=np.int64), slots)


class PrevFrameIndex:
    """Exact nearest-neighbor index over the previous frame's global points."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self) -> int:
        return len(self.points)

    def query_knn(self, q, k: int) -> np.ndarray:
        """Indices of the k exact nearest neighbors of q (fewer if the index
        is smaller), ordered by distance."""
        if self._tree is None or k <= 0:
            return np.zeros(0, dtype=np.int64)
        k_eff = min(k, len(self.points))
        _, idx = self._tree.query(np.asarray(q, dtype=np.float64), k=k_eff)
        return np.atleast_1d(idx).astype(np.int64)


def build_prev_frame_index(prev_points) -> PrevFrameIndex:
    return PrevFrameIndex(prev_points)


def _up_valid_value(ranges, valid, i, j) -> float:
    """Nearest valid range straight up in column j, rows i-1..0; nan if none."""
    for r in range(i - 1, -1, -1):
        if valid[r, j]:
            return float(ranges[r, j])
    return float("nan")


def extract_temporal_context(
    index: PrevFrameIndex,
    img: RangeImage,
    calib: LidarCalibration,
    track: PoseTrack,
    i: int,
    j: int,
    k: int = TEMPORAL_NEIGHBORS,
    slot_base: int = INTRA_CAPACITY,
    max_points: int = TEMPORAL_CAPACITY,
) -> ContextPointSet:
    """Previous-frame points near pixel (i, j), reprojected into its
    spherical frame with time channel 1.

    Two query points are formed from the left-valid and up-valid range
    estimates; each retrieves ``k`` exact nearest neighbors and the union is
    deduplicated by point identity.  Should the union ever exceed
    ``max_points``, the points farthest from either query are dropped.
    """
    if index is None:
        raise NoPreviousFrame("temporal context requested without a previous frame")
    if len(index) == 0:
        return ContextPointSet.empty()
    left_est = _value_at_or_before(img.ranges, img.valid, i, j - 1)
    up_est = _up_valid_value(img.ranges, img.valid, i, j)
    if np.isnan(up_est):
        up_est = left_est
    pose = track.pose(j)
    theta = calib.azimuths[j]
    alpha = calib.elevations[i]
    queries = [to_global_point(left_est, theta, alpha, pose), to_global_point(up_est, theta, alpha, pose)]
    ids = np.concatenate([index.query_knn(q, k) for q in queries])
    _, first = np.unique(ids, return_index=True)
    cand = ids[np.sort(first)]  # dedup by identity, keeping (query, rank) order
    if cand.size > max_points:
        pts = index.points[cand]
        d = np.minimum(
            np.linalg.norm(pts - queries[0], axis=1), np.linalg.norm(pts - queries[1], axis=1)
        )
        keep = np.argsort(d, kind="stable")[:max_points]
        cand = cand[np.sort(keep)]
    if cand.size == 0:
        return ContextPointSet.empty()
    local = to_sensor(index.points[cand], pose)
    r, th, al = project(local)
    return ContextPointSet.build(
        wrap_angle(th - theta),
        al - alpha,
        r,
        np.ones(cand.size, dtype=np.int64),
        slot_base + np.arange(cand.size, dtype=np.int64),
    )


def to_global_point(r: float, theta: float, alpha: float, pose: Pose) -> np.ndarray:
    return pose.rotation @ unproject(r, theta, alpha) + pose.translation


# ---------------------------------------------------------------------------
# Weight bundles and the inference engine
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Layer:
    kind: LayerKind
    weights: np.ndarray | None = None  # (out, in), float32 storage
    bias: np.ndarray | None = None     # (out,)

    def __post_init__(self):
        if self.kind in (LayerKind.DENSE, LayerKind.POINTWISE_DENSE):
            if self.weights is None or self.bias is None:
                raise WeightShapeMismatch("dense layers need weights and bias")
            w = np.asarray(self.weights, dtype=np.float32)
            b = np.asarray(self.bias, dtype=np.float32)
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise WeightShapeMismatch(f"bad layer shapes {w.shape} / {b.shape}")
            object.__setattr__(self, "weights", w)
            object.__setattr__(self, "bias", b)
        elif self.weights is not None or self.bias is not None:
            raise WeightShapeMismatch("structural layers carry no weights")


@dataclass(frozen=True)
class WeightBundle:
    """Flat serialization of a trained anchor predictor.

    The layer list is a shared trunk followed by the two heads: everything
    up to and including the last structural layer (pool / concat) is the
    trunk, and the remaining dense layers split evenly into the
    classification branch then the residual branch.  Heads either end
    pointwise with width 1 (per-point scores) or dense with width
    num_anchors (capacity-slot scores).
    """

    layers: tuple
    input_dim: int
    num_anchors: int
    normalization: float = 75.0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self._split()  # validates chaining

    def _split(self):
        layers = self.layers
        trunk_end = 0
        for n, layer in enumerate(layers):
            if layer.kind in (LayerKind.MAX_POOL_POINTS, LayerKind.CONCAT_GLOBAL_LOCAL):
                trunk_end = n + 1
        head = layers[trunk_end:]
        if len(head) < 2 or len(head) % 2:
            raise WeightShapeMismatch("need an even number (>= 2) of head layers")
        trunk = layers[:trunk_end]
        cls = head[: len(head) // 2]
        res = head[len(head) // 2 :]
        # Simulate widths through the network to validate chaining.
        p_width, g_width = self.input_dim, None
        for layer in trunk:
            p_width, g_width = _layer_widths(layer, p_width, g_width)
        for branch in (cls, res):
            bp, bg = p_width, g_width
            for layer in branch:
                bp, bg = _layer_widths(layer, bp, bg)
            final = branch[-1]
            out_w = final.weights.shape[0]
            if final.kind == LayerKind.POINTWISE_DENSE and out_w != 1:
                raise WeightShapeMismatch("pointwise heads must end with width 1")
            if final.kind == LayerKind.DENSE and out_w != self.num_anchors:
                raise WeightShapeMismatch(
                    f"dense heads must end with width num_anchors ({self.num_anchors}), got {out_w}"
                )
        return trunk, cls, res

    @property
    def head_is_dense(self) -> bool:
        _, cls, _ = self._split()
        return cls[-1].kind == LayerKind.DENSE


def _layer_widths(layer: Layer, p_width, g_width):
    if layer.kind == LayerKind.POINTWISE_DENSE:
        if p_width is None or layer.weights.shape[1] != p_width:
            raise WeightShapeMismatch(
                f"pointwise layer expects {layer.weights.shape[1]} inputs, chain has {p_width}"
            )
        return layer.weights.shape[0], g_width
    if layer.kind == LayerKind.DENSE:
        if g_width is None or layer.weights.shape[1] != g_width:
            raise WeightShapeMismatch(
                f"dense layer expects {layer.weights.shape[1]} inputs, global width is {g_width}"
            )
        return p_width, layer.weights.shape[0]
    if layer.kind == LayerKind.MAX_POOL_POINTS:
        if p_width is None:
            raise WeightShapeMismatch("max-pool requires per-point features")
        return p_width, p_width
    if layer.kind == LayerKind.CONCAT_GLOBAL_LOCAL:
        if p_width is None or g_width is None:
            raise WeightShapeMismatch("concat requires both per-point and global features")
        return p_width + g_width, g_width
    raise WeightShapeMismatch(f"unknown layer kind {layer.kind}")


@dataclass(frozen=True)
class PredictorOutput:
    anchor_logits: np.ndarray
    anchor_residuals: np.ndarray
    predicted_range: float
    anchor_index: int


def _run_layers(layers, p, g):
    """Apply layers with ReLU after every dense op except the last of the
    sequence (heads pass their final layer through linearly)."""
    n = len(layers)
    for k, layer in enumerate(layers):
        last = k == n - 1
        if layer.kind == LayerKind.POINTWISE_DENSE:
            p = p @ layer.weights.T.astype(np.float64) + layer.bias.astype(np.float64)
            if not last:
                np.maximum(p, 0.0, out=p)
        elif layer.kind == LayerKind.DENSE:
            g = g @ layer.weights.T.astype(np.float64) + layer.bias.astype(np.float64)
            if not last:
                np.maximum(g, 0.0, out=g)
        elif layer.kind == LayerKind.MAX_POOL_POINTS:
            g = p.max(axis=0)
        else:  # CONCAT_GLOBAL_LOCAL
            p = np.concatenate([p, np.broadcast_to(g, (p.shape[0], g.shape[0]))], axis=1)
    return p, g


def anchor_net_infer(
    ctx: ContextPointSet, bundle: WeightBundle, max_range: float | None = None
) -> PredictorOutput:
    """Forward pass of the anchor network over a context point set.

    Features per point are (d_azimuth, d_elevation, rel_range / norm) plus
    the time channel for 4-input bundles; rel_range is recentered on the
    mean anchor range regardless of how the set was built, so the output is
    invariant to the stored rel/mean decomposition.  Ties in the anchor
    scores resolve to the lowest point index.
    """
    if ctx.count < 1:
        raise WeightShapeMismatch("anchor net needs at least one context point")
    if ctx.count > bundle.num_anchors:
        raise WeightShapeMismatch(
            f"{ctx.count} context points exceed bundle capacity {bundle.num_anchors}"
        )
    if max_range is None:
        max_range = bundle.normalization
    rel = (ctx.anchor_ranges - ctx.anchor_ranges.mean()) / bundle.normalization
    cols = [ctx.d_azimuth, ctx.d_elevation, rel]
    if bundle.input_dim == 4:
        cols.append(ctx.time.astype(np.float64))
    elif bundle.input_dim != 3:
        raise WeightShapeMismatch(f"unsupported input dim {bundle.input_dim}")
    feats = np.stack(cols, axis=1)

    trunk, cls, res = bundle._split()
    p, g = _run_trunk(trunk, feats)
    logits = _run_head(cls, p, g, ctx, bundle)
    residuals = _run_head(res, p, g, ctx, bundle) * bundle.normalization
    best = int(np.argmax(logits))
    predicted = float(min(max(ctx.anchor_ranges[best] + residuals[best], 0.0), max_range))
    return PredictorOutput(logits, residuals, predicted, best)


def _run_trunk(trunk, feats):
    p, g = feats, None
    for layer in trunk:
        if layer.kind == LayerKind.POINTWISE_DENSE:
            p = p @ layer.weights.T.astype(np.float64) + layer.bias.astype(np.float64)
            np.maximum(p, 0.0, out=p)
        elif layer.kind == LayerKind.DENSE:
            g = g @ layer.weights.T.astype(np.float64) + layer.bias.astype(np.float64)
            np.maximum(g, 0.0, out=g)
        elif layer.kind == LayerKind.MAX_POOL_POINTS:
            g = p.max(axis=0)
        else:
            p = np.concatenate([p, np.broadcast_to(g, (p.shape[0], g.shape[0]))], axis=1)
    return p, g


def _run_head(branch, p, g, ctx, bundle):
    bp, bg = _run_layers(branch, p, g)
    if branch[-1].kind == LayerKind.POINTWISE_DENSE:
        return bp[:, 0]
    # Dense head: one score per capacity slot; pick the slots the context
    # points occupy (absent slots would carry -inf and can never win).
    if np.any(ctx.slots < 0) or np.any(ctx.slots >= bundle.num_anchors):
        raise WeightShapeMismatch("context slot index outside bundle capacity")
    return bg[ctx.slots]


# ---------------------------------------------------------------------------
# RWGT weight-bundle file format (little-endian):
#   magic 4s, version u8, input_dim u8, num_anchors u16, normalization f32,
#   layer_count u8, then per layer:
#     kind u8, rows u32, cols u32, f32 weights row-major, f32 biases
# ---------------------------------------------------------------------------

_RWGT_HEADER = struct.Struct("<4sBBHfB")
_RWGT_LAYER = struct.Struct("<BII")


def bundle_to_bytes(bundle: WeightBundle) -> bytes:
    out = bytearray()
    out += _RWGT_HEADER.pack(
        RWGT_MAGIC,
        RWGT_VERSION,
        bundle.input_dim,
        bundle.num_anchors,
        bundle.normalization,
        len(bundle.layers),
    )
    for layer in bundle.layers:
        if layer.weights is None:
            out += _RWGT_LAYER.pack(int(layer.kind), 0, 0)
        else:
            rows, cols = layer.weights.shape
            out += _RWGT_LAYER.pack(int(layer.kind), rows, cols)
            out += layer.weights.astype("<f4").tobytes()
            out += layer.bias.astype("<f4").tobytes()
    return bytes(out)


def bundle_from_bytes(data) -> WeightBundle:
    if len(data) < _RWGT_HEADER.size:
        raise WeightShapeMismatch("weight file too short")
    magic, version, input_dim, num_anchors, norm, n_layers = _RWGT_HEADER.unpack_from(data, 0)
    if magic != RWGT_MAGIC or version != RWGT_VERSION:
        raise WeightShapeMismatch("not a RWGT v1 file")
    off = _RWGT_HEADER.size
    layers = []
    for _ in range(n_layers):
        if len(data) < off + _RWGT_LAYER.size:
            raise WeightShapeMismatch("weight file truncated")
        kind, rows, cols = _RWGT_LAYER.unpack_from(data, off)
        off += _RWGT_LAYER.size
        if rows == 0:
            layers.append(Layer(LayerKind(kind)))
            continue
        need = 4 * rows * cols + 4 * rows
        if len(data) < off + need:
            raise WeightShapeMismatch("weight file truncated")
        w = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols)
        off += 4 * rows * cols
        b = np.frombuffer(data, dtype="<f4", count=rows, offset=off)
        off += 4 * rows
        layers.append(Layer(LayerKind(kind), w.copy(), b.copy()))
    return WeightBundle(tuple(layers), input_dim, num_anchors, float(norm))


def bundle_digest(bundle: WeightBundle) -> bytes:
    """SHA-256 of the serialized bundle; identifies weights in frame headers."""
    return hashlib.sha256(bundle_to_bytes(bundle)).digest()


def write_bundle(path, bundle: WeightBundle) -> None:
    with open(path, "wb") as f:
        f.write(bundle_to_bytes(bundle))


def read_bundle(path) -> WeightBundle:
    with open(path, "rb") as f:
        return bundle_from_bytes(f.read())


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

@dataclass
class PredictionContext:
    """Everything a predictor may read while predicting pixel (i, j) of one
    independent decoding unit (a block): the unit's decoded-so-far ranges
    and mask, its calibration slices, the pose track, and optionally the
    previous frame's point index plus the anchor weights."""

    img: RangeImage
    calib: LidarCalibration
    track: PoseTrack
    bundle: WeightBundle | None = None
    prev_index: PrevFrameIndex | None = None


def predict(kind: PredictorKind, state: PredictionContext, i: int, j: int) -> float:
    """Unquantized range prediction for pixel (i, j); deterministic."""
    if kind == PredictorKind.PREVIOUS_VALID:
        return predict_previous_valid(state.img, i, j)
    if kind == PredictorKind.LINEAR:
        return predict_linear(state.img, i, j)
    ctx = extract_intra_context(state.img, state.calib, i, j)
    if kind == PredictorKind.ANCHOR_TEMPORAL and state.prev_index is not None:
        temporal = extract_temporal_context(
            state.prev_index, state.img, state.calib, state.track, i, j
        )
        if temporal.count:
            ctx = combine_contexts(ctx, temporal)
    if ctx.count == 0:
        return predict_previous_valid(state.img, i, j)
    out = anchor_net_infer(ctx, state.bundle, max_range=state.img.max_range)
    return out.predicted_range
