"""Patch sampling for predictor training.

A sample is one target pixel with its decoded context: up to 99 patch
points in fixed capacity slots (patch raster position), plus up to 100
previous-frame neighbor points in slots 99.. for the temporal model.
Context ranges are quantized at a per-sample precision; the target keeps
full precision.  Padded slots are masked everywhere downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

PATCH = 10
INTRA_SLOTS = PATCH * PATCH - 1       # 99
TEMPORAL_K = 50
TEMPORAL_SLOTS = 2 * TEMPORAL_K       # 100

# Tie-break bias weight for the ground-truth anchor: strictly smaller than
# any representable range gap at the finest precision, so it only orders
# exact ties in favor of angle-closer pixels.
GT_BIAS = 1e-6


@dataclass
class PatchBatch:
    """Fixed-size sample tensors; invalid slots are zero and masked."""

    d_azimuth: np.ndarray   # (N, S)
    d_elevation: np.ndarray # (N, S)
    anchors: np.ndarray     # (N, S) quantized ranges, meters
    time: np.ndarray        # (N, S) 0 current / 1 previous frame
    mask: np.ndarray        # (N, S) bool
    target: np.ndarray      # (N,) full-precision range, meters
    precision: np.ndarray   # (N,) per-sample quantization step
    gt_slot: np.ndarray     # (N,) ground-truth anchor slot index
    gt_residual: np.ndarray # (N,) target - anchor_range[gt_slot], meters

    def __len__(self):
        return len(self.target)

    @property
    def slots(self) -> int:
        return self.d_azimuth.shape[1]


def _quantize(values, precision):
    return np.floor(values / precision + 0.5) * precision


def _wrap(theta):
    out = theta - 2.0 * np.pi * np.floor((theta + np.pi) / (2.0 * np.pi))
    return np.where(out <= -np.pi, np.pi, out)


def _value_at_or_before(ranges, valid, i, j):
    h, w = ranges.shape
    p = i * w + j
    fr, fv = ranges.reshape(-1), valid.reshape(-1)
    while p >= 0:
        if fv[p]:
            return float(fr[p])
        p -= 1
    return 0.0


def _up_valid(ranges, valid, i, j):
    for r in range(i - 1, -1, -1):
        if valid[r, j]:
            return float(ranges[r, j])
    return None


class TemporalSource:
    """Previous-frame points in the global frame with an exact k-NN tree.

    The tree is built on the unquantized cloud (selection only); feature
    ranges are recomputed from the quantized pixel values at query time.
    """

    def __init__(self, frame, calib, track):
        ii, jj = np.nonzero(frame.valid)
        r = frame.ranges[ii, jj]
        self.raw_r = r
        self.ii, self.jj = ii, jj
        ca = np.cos(calib.elevations[ii])
        dirs = np.stack(
            [
                ca * np.cos(calib.azimuths[jj]),
                ca * np.sin(calib.azimuths[jj]),
                np.sin(calib.elevations[ii]),
            ],
            axis=1,
        )
        self.dirs = dirs
        self.rot = track.rotations[jj]
        self.t = track.translations[jj]
        pts = np.einsum("nab,nb->na", self.rot, dirs * r[:, None]) + self.t
        self.tree = cKDTree(pts) if len(pts) else None

    def global_points(self, precision):
        r = _quantize(self.raw_r, precision)
        return np.einsum("nab,nb->na", self.rot, self.dirs * r[:, None]) + self.t

    def query(self, point, k):
        if self.tree is None:
            return np.zeros(0, dtype=np.int64)
        k = min(k, len(self.raw_r))
        _, idx = self.tree.query(point, k=k)
        return np.atleast_1d(idx).astype(np.int64)


def extract_context(frame, calib, i, j, precision, temporal: TemporalSource | None,
                    track=None):
    """Context arrays for one target pixel: (d_az, d_el, anchors, time, slot)."""
    h, w = frame.ranges.shape
    r0, c0 = max(0, i - PATCH + 1), max(0, j - PATCH + 1)
    sub = frame.valid[r0 : i + 1, c0 : j + 1].copy()
    sub[-1, -1] = False
    pi, pj = np.nonzero(sub)
    rows, cols = r0 + pi, c0 + pj
    q = _quantize(frame.ranges[rows, cols], precision)
    d_az = _wrap(calib.azimuths[cols] - calib.azimuths[j])
    d_el = calib.elevations[rows] - calib.elevations[i]
    slots = (rows - (i - PATCH + 1)) * PATCH + (cols - (j - PATCH + 1))
    time = np.zeros(len(slots), dtype=np.int64)

    if temporal is not None and temporal.tree is not None:
        qranges = _quantize(frame.ranges, precision) * frame.valid
        left = _value_at_or_before(qranges, frame.valid, i, j - 1)
        up = _up_valid(qranges, frame.valid, i, j)
        if up is None:
            up = left
        theta, alpha = calib.azimuths[j], calib.elevations[i]
        ca = np.cos(alpha)
        d = np.array([ca * np.cos(theta), ca * np.sin(theta), np.sin(alpha)])
        rot_j = track.rotations[j]
        t_j = track.translations[j]
        ids = []
        seen = set()
        for est in (left, up):
            qpt = rot_j @ (d * est) + t_j
            for n in temporal.query(qpt, TEMPORAL_K):
                if int(n) not in seen:
                    seen.add(int(n))
                    ids.append(int(n))
        if ids:
            ids = np.asarray(ids, dtype=np.int64)
            pts = temporal.global_points(precision)[ids]
            local = (pts - t_j) @ rot_j
            rr = np.linalg.norm(local, axis=1)
            th = np.arctan2(local[:, 1], local[:, 0])
            al = np.arcsin(np.clip(local[:, 2] / np.maximum(rr, 1e-12), -1, 1))
            d_az = np.concatenate([d_az, _wrap(th - theta)])
            d_el = np.concatenate([d_el, al - alpha])
            q = np.concatenate([q, rr])
            slots = np.concatenate(
                [slots, INTRA_SLOTS + np.arange(len(ids), dtype=np.int64)]
            )
            time = np.concatenate([time, np.ones(len(ids), dtype=np.int64)])
    return d_az, d_el, q, time, slots


def gt_anchor(d_az, d_el, anchors, target):
    """Index of the anchor closest in value to the target, ties broken in
    favor of smaller angular distance."""
    angle = np.abs(d_az) + np.abs(d_el)
    max_angle = max(float(angle.max()), 1e-12)
    score = np.abs(anchors - target) + GT_BIAS * angle / max_angle
    return int(np.argmin(score))


def sample_patches(frames, calib, tracks, config, seed):
    """Materialize a PatchBatch of config.pool_size samples.

    Frames are (current, previous-or-None) pairs when config.temporal; the
    per-sample quantization precision is drawn uniformly from the configured
    grid.  Boundary patches keep their capacity slots; absent slots are
    masked, never fed as zero points.
    """
    rng = np.random.default_rng(seed)
    if not frames:
        raise EmptyCorpus("no frames to sample from")
    n_slots = INTRA_SLOTS + (TEMPORAL_SLOTS if config.temporal else 0)
    n = config.pool_size
    batch = PatchBatch(
        d_azimuth=np.zeros((n, n_slots), dtype=np.float32),
        d_elevation=np.zeros((n, n_slots), dtype=np.float32),
        anchors=np.zeros((n, n_slots), dtype=np.float32),
        time=np.zeros((n, n_slots), dtype=np.int64),
        mask=np.zeros((n, n_slots), dtype=bool),
        target=np.zeros(n, dtype=np.float32),
        precision=np.zeros(n, dtype=np.float64),
        gt_slot=np.zeros(n, dtype=np.int64),
        gt_residual=np.zeros(n, dtype=np.float32),
    )
    sources = {}
    lo, hi = config.precision_range
    n_bins = int(round((hi - lo) / config.precision_step))
    filled = 0
    while filled < n:
        fi = int(rng.integers(0, len(frames)))
        frame, prev = frames[fi]
        ii, jj = np.nonzero(frame.valid)
        if ii.size == 0:
            continue
        pick = int(rng.integers(0, ii.size))
        i, j = int(ii[pick]), int(jj[pick])
        precision = lo + int(rng.integers(0, n_bins + 1)) * config.precision_step
        temporal = None
        if config.temporal and prev is not None:
            if fi not in sources:
                sources[fi] = TemporalSource(prev, calib, tracks[fi])
            temporal = sources[fi]
        d_az, d_el, anchors, time, slots = extract_context(
            frame, calib, i, j, precision, temporal, tracks[fi]
        )
        if len(slots) == 0:
            continue
        target = float(frame.ranges[i, j])
        gt = gt_anchor(d_az, d_el, anchors, target)
        batch.d_azimuth[filled, slots] = d_az
        batch.d_elevation[filled, slots] = d_el
        batch.anchors[filled, slots] = anchors
        batch.time[filled, slots] = time
        batch.mask[filled, slots] = True
        batch.target[filled] = target
        batch.precision[filled] = precision
        batch.gt_slot[filled] = slots[gt]
        batch.gt_residual[filled] = target - anchors[gt]
        filled += 1
    return batch


class EmptyCorpus(Exception):
    pass
