"""Frame-level encode/decode pipeline.

Encoding: quantize, partition into blocks, walk each block's valid pixels in
raster order computing prediction deltas, entropy-code each block with the
better of the two residual coders, and serialize header + mask + blocks.
Decoding runs the same predictors over already-reconstructed pixels, so the
quantized frame is reproduced bit-exactly.

Blocks are fully independent: context windows never cross a block edge, so
blocks may be encoded and decoded in parallel and the bitstream does not
depend on the worker count.  Temporal context comes from the previous
*decoded* frame (identical to the previous quantized frame by losslessness),
which removes any encoder/decoder drift by construction.
"""

from __future__ import annotations

import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .entropy import CodedBlock, choose_coder, decode_block, decode_mask, encode_mask
from .errors import (
    CorruptStream,
    DimensionMismatch,
    HeaderMismatch,
    MissingPreviousFrame,
    UnknownWeights,
    ZeroPoints,
)
from .geometry import (
    LidarCalibration,
    PoseTrack,
    RangeImage,
    QuantizationSpec,
    image_to_point_cloud,
    quantize,
    quantize_steps,
)
from .predictor import (
    PredictionContext,
    PredictorKind,
    WeightBundle,
    build_prev_frame_index,
    bundle_digest,
    predict,
)

FRAME_MAGIC = b"RIFC"
SEQUENCE_MAGIC = b"RSEQ"
FRAME_VERSION = 1

ROUNDING_HALF_AWAY = 0

FLAG_INTRA_REPROJECTION = 0x01  # reserved; never set by this implementation
FLAG_TEMPORAL_DEGRADED = 0x02   # temporal kind encoded without a previous frame

_NULL_DIGEST = bytes(32)


@dataclass(frozen=True)
class BlockLayout:
    """Block grid tiling the image; edge blocks may be smaller."""

    block_h: int = 16
    block_w: int = 50

    def __post_init__(self):
        if self.block_h < 1 or self.block_w < 1:
            raise ValueError("block dimensions must be positive")

    def blocks(self, height: int, width: int):
        """Yield (r0, r1, c0, c1) spans in row-major block order."""
        for r0 in range(0, height, self.block_h):
            for c0 in range(0, width, self.block_w):
                yield r0, min(r0 + self.block_h, height), c0, min(c0 + self.block_w, width)

    def count(self, height: int, width: int) -> int:
        return -(-height // self.block_h) * (-(-width // self.block_w))

    @staticmethod
    def whole_image() -> "BlockLayout":
        return BlockLayout(0xFFFF, 0xFFFF)


@dataclass(frozen=True)
class FrameHeader:
    """Everything needed to decode a frame, except the weight bundle
    (identified by digest) and the calibration sidecar."""

    height: int
    width: int
    precision: float
    max_range: float
    predictor: PredictorKind
    digest: bytes
    layout: BlockLayout
    flags: int = 0
    rounding: int = ROUNDING_HALF_AWAY

    _WIRE = struct.Struct("<4sBBBBHHHHdf32sII")

    def pack(self, mask_len: int, body_crc: int) -> bytes:
        return self._WIRE.pack(
            FRAME_MAGIC,
            FRAME_VERSION,
            self.flags,
            int(self.predictor),
            self.rounding,
            self.height,
            self.width,
            self.layout.block_h,
            self.layout.block_w,
            self.precision,
            self.max_range,
            self.digest,
            mask_len,
            body_crc,
        )

    @staticmethod
    def unpack(data, offset: int = 0):
        """Returns (header, mask_len, body_crc, next_offset)."""
        wire = FrameHeader._WIRE
        if len(data) < offset + wire.size:
            raise CorruptStream("frame header truncated")
        (magic, version, flags, pred, rounding, h, w, bh, bw,
         precision, max_range, digest, mask_len, crc) = wire.unpack_from(data, offset)
        if magic != FRAME_MAGIC:
            raise CorruptStream("bad frame magic")
        if version != FRAME_VERSION:
            raise CorruptStream(f"unsupported frame version {version}")
        if rounding != ROUNDING_HALF_AWAY:
            raise CorruptStream(f"unknown rounding rule {rounding}")
        try:
            kind = PredictorKind(pred)
        except ValueError as e:
            raise CorruptStream(f"unknown predictor id {pred}") from e
        header = FrameHeader(
            h, w, precision, float(max_range), kind, digest, BlockLayout(bh, bw), flags, rounding
        )
        return header, mask_len, crc, offset + wire.size


@dataclass(frozen=True)
class CompressedFrame:
    header: FrameHeader
    mask_payload: bytes
    blocks: tuple

    def to_bytes(self) -> bytes:
        body = self.mask_payload + b"".join(b.to_bytes() for b in self.blocks)
        crc = zlib.crc32(body)
        return self.header.pack(len(self.mask_payload), crc) + body

    @staticmethod
    def from_bytes(data, offset: int = 0):
        """Parse one frame at ``offset``; returns (CompressedFrame, next_offset)."""
        header, mask_len, crc, off = FrameHeader.unpack(data, offset)
        body_start = off
        if len(data) < off + mask_len:
            raise CorruptStream("mask payload truncated")
        mask_payload = bytes(data[off : off + mask_len])
        off += mask_len
        blocks = []
        for _ in range(header.layout.count(header.height, header.width)):
            block, off = CodedBlock.from_bytes(data, off)
            blocks.append(block)
        if zlib.crc32(bytes(data[body_start:off])) != crc:
            raise CorruptStream("frame body checksum mismatch")
        return CompressedFrame(header, mask_payload, tuple(blocks)), off


def bpp(cf: CompressedFrame) -> float:
    """Serialized frame size in bits divided by the number of valid returns."""
    n = int(
        np.count_nonzero(decode_mask(cf.mask_payload, cf.header.height * cf.header.width))
    )
    if n == 0:
        raise ZeroPoints("frame has no valid returns")
    return len(cf.to_bytes()) * 8.0 / n


# ---------------------------------------------------------------------------
# Per-block prediction
# ---------------------------------------------------------------------------

class _FrameView:
    """Mutable duck-typed stand-in for RangeImage during sequential decode."""

    __slots__ = ("ranges", "valid", "max_range")

    def __init__(self, ranges, valid, max_range):
        self.ranges = ranges
        self.valid = valid
        self.max_range = max_range

    @property
    def height(self):
        return self.ranges.shape[0]

    @property
    def width(self):
        return self.ranges.shape[1]


def _at_or_before_values(flat_ranges, flat_valid):
    """For every flat position p, the last valid value at or before p (0 if
    none).  Vectorized previous-valid semantics."""
    n = flat_ranges.size
    pos = np.arange(n)
    last = np.maximum.accumulate(np.where(flat_valid, pos, -1))
    vals = np.where(last >= 0, flat_ranges[np.clip(last, 0, None)], 0.0)
    return vals


def _baseline_predictions(ranges, valid, kind: PredictorKind, max_range: float):
    """Vectorized previous-valid / linear predictions for a whole block.

    Valid on the encoder side only, where the context equals the quantized
    truth; matches the sequential per-pixel definition exactly.
    """
    h, w = ranges.shape
    flat_r = ranges.reshape(-1)
    flat_v = valid.reshape(-1)
    aob = _at_or_before_values(flat_r, flat_v)

    def term(shift):
        # value at or before (flat position - shift); 0 when out of range
        out = np.zeros(h * w)
        if h * w > shift:
            out[shift:] = aob[: h * w - shift]
        return out

    a = term(1)
    if kind == PredictorKind.PREVIOUS_VALID:
        return a.reshape(h, w)
    b = term(w)
    c = term(w + 1)
    return np.clip(a + b - c, 0.0, max_range).reshape(h, w)


def _encode_block_residuals(span, kq, valid, qspec, kind, calib, track, bundle, prev_index, max_range):
    """Residuals (int64, raster order over valid pixels) for one block."""
    r0, r1, c0, c1 = span
    sub_k = kq[r0:r1, c0:c1]
    sub_v = valid[r0:r1, c0:c1]
    if not sub_v.any():
        return np.zeros(0, dtype=np.int64)
    sub_r = sub_k * qspec.precision
    if kind in (PredictorKind.PREVIOUS_VALID, PredictorKind.LINEAR):
        pred = _baseline_predictions(sub_r, sub_v, kind, max_range)
        pred_k = quantize_steps(pred, qspec.precision)
        return (sub_k - pred_k)[sub_v].astype(np.int64)
    # Anchor kinds walk pixel by pixel; context is the quantized truth, which
    # equals the decoded prefix.
    sub_calib = LidarCalibration(
        calib.elevations[r0:r1], calib.azimuths[c0:c1], calib.max_range
    )
    sub_track = PoseTrack(track.rotations[c0:c1], track.translations[c0:c1])
    view = _FrameView(sub_r, sub_v, max_range)
    state = PredictionContext(view, sub_calib, sub_track, bundle, prev_index)
    deltas = []
    for i in range(sub_v.shape[0]):
        for j in range(sub_v.shape[1]):
            if not sub_v[i, j]:
                continue
            p = predict(kind, state, i, j)
            deltas.append(int(sub_k[i, j]) - int(np.floor(p / qspec.precision + 0.5)))
    return np.asarray(deltas, dtype=np.int64)


def _decode_block(span, deltas, out_ranges, valid, header, calib, track, bundle, prev_index):
    """Reconstruct one block in place from its residuals."""
    r0, r1, c0, c1 = span
    sub_v = valid[r0:r1, c0:c1]
    n_valid = int(np.count_nonzero(sub_v))
    if deltas.size != n_valid:
        raise CorruptStream("block symbol count disagrees with mask")
    if n_valid == 0:
        return
    precision = header.precision
    h, w = sub_v.shape
    sub_r = np.zeros((h, w))
    view = _FrameView(sub_r, sub_v, header.max_range)
    kind = header.predictor
    max_k = int(np.floor(header.max_range / precision + 0.5))
    if kind in (PredictorKind.PREVIOUS_VALID, PredictorKind.LINEAR):
        _decode_block_baseline(sub_r, sub_v, deltas, kind, precision, header.max_range, max_k)
    else:
        sub_calib = LidarCalibration(
            calib.elevations[r0:r1], calib.azimuths[c0:c1], calib.max_range
        )
        sub_track = PoseTrack(track.rotations[c0:c1], track.translations[c0:c1])
        state = PredictionContext(view, sub_calib, sub_track, bundle, prev_index)
        n = 0
        for i in range(h):
            for j in range(w):
                if not sub_v[i, j]:
                    continue
                p = predict(kind, state, i, j)
                k = int(np.floor(p / precision + 0.5)) + int(deltas[n])
                n += 1
                if k < 0 or k > max_k:
                    raise CorruptStream("reconstructed range out of bounds")
                sub_r[i, j] = k * precision
    out_ranges[r0:r1, c0:c1] = sub_r


def _decode_block_baseline(sub_r, sub_v, deltas, kind, precision, max_range, max_k):
    """Sequential baseline reconstruction with O(1) per-pixel context."""
    h, w = sub_v.shape
    flat_r = sub_r.reshape(-1)
    flat_v = sub_v.reshape(-1)
    aob = np.zeros(h * w)  # at-or-before values over decoded positions
    last = 0.0
    n = 0
    for p in range(h * w):
        if flat_v[p]:
            if kind == PredictorKind.PREVIOUS_VALID:
                pred = last
            else:
                b = aob[p - w] if p - w >= 0 else 0.0
                c = aob[p - w - 1] if p - w - 1 >= 0 else 0.0
                pred = min(max(last + b - c, 0.0), max_range)
            k = int(np.floor(pred / precision + 0.5)) + int(deltas[n])
            n += 1
            if k < 0 or k > max_k:
                raise CorruptStream("reconstructed range out of bounds")
            last = k * precision
            flat_r[p] = last
            aob[p] = last
        else:
            aob[p] = aob[p - 1] if p > 0 else 0.0


# ---------------------------------------------------------------------------
# Frame encode / decode
# ---------------------------------------------------------------------------

def _prev_index_for(prev, calib):
    prev_img, prev_track = prev
    return build_prev_frame_index(image_to_point_cloud(prev_img, calib, prev_track))


def frame_residuals(
    img: RangeImage,
    calib: LidarCalibration,
    track: PoseTrack,
    qspec: QuantizationSpec,
    kind: PredictorKind,
    layout: BlockLayout,
    bundle: WeightBundle | None = None,
    prev=None,
    workers: int = 1,
):
    """Per-block residual arrays for a frame (also used by the bench CLI)."""
    _check_dims(img, calib, track)
    quantized = quantize(img, qspec)
    kq = quantize_steps(quantized.ranges, qspec.precision)
    prev_index = _prev_index_for(prev, calib) if prev is not None else None
    spans = list(layout.blocks(img.height, img.width))

    def work(span):
        return _encode_block_residuals(
            span, kq, img.valid, qspec, kind, calib, track, bundle, prev_index, img.max_range
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            residuals = list(ex.map(work, spans))
    else:
        residuals = [work(s) for s in spans]
    return quantized, residuals


def encode_frame(
    img: RangeImage,
    calib: LidarCalibration,
    track: PoseTrack,
    qspec: QuantizationSpec,
    kind: PredictorKind,
    layout: BlockLayout = BlockLayout(),
    prev=None,
    bundle: WeightBundle | None = None,
    workers: int = 1,
) -> CompressedFrame:
    """Compress a frame.  ``prev`` is the (decoded RangeImage, PoseTrack) of
    the previous frame and is required for the temporal predictor; a
    temporal encode without it degrades to intra context and records that in
    the header flags."""
    if kind.needs_weights and bundle is None:
        raise UnknownWeights("anchor predictors need a weight bundle")
    flags = 0
    if kind == PredictorKind.ANCHOR_TEMPORAL and prev is None:
        flags |= FLAG_TEMPORAL_DEGRADED
    _, residuals = frame_residuals(
        img, calib, track, qspec, kind, layout, bundle, prev, workers
    )

    def code(deltas):
        return choose_coder(deltas)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            blocks = tuple(ex.map(code, residuals))
    else:
        blocks = tuple(code(d) for d in residuals)
    digest = bundle_digest(bundle) if bundle is not None else _NULL_DIGEST
    header = FrameHeader(
        img.height, img.width, qspec.precision, img.max_range, kind, digest, layout, flags
    )
    return CompressedFrame(header, encode_mask(img.valid), blocks)


def decode_frame(
    cf: CompressedFrame,
    calib: LidarCalibration,
    track: PoseTrack,
    weights=None,
    prev=None,
    workers: int = 1,
) -> RangeImage:
    """Exact reconstruction of the quantized frame.

    ``weights`` maps digest bytes to WeightBundle; it is consulted before
    any pixel work when the header names an anchor predictor.
    """
    header = cf.header
    bundle = None
    if header.predictor.needs_weights:
        weights = weights or {}
        if header.digest not in weights:
            raise UnknownWeights(f"no weight bundle with digest {header.digest.hex()}")
        bundle = weights[header.digest]
    if (header.height, header.width) != (calib.height, calib.width):
        raise HeaderMismatch(
            f"frame {header.height}x{header.width} vs calibration {calib.height}x{calib.width}"
        )
    if len(track) != header.width:
        raise HeaderMismatch(f"pose track length {len(track)} != width {header.width}")
    if header.predictor == PredictorKind.ANCHOR_TEMPORAL and prev is None \
            and not header.flags & FLAG_TEMPORAL_DEGRADED:
        raise MissingPreviousFrame("header expects a previous decoded frame")
    if header.precision <= 0:
        raise CorruptStream("non-positive precision in header")

    valid = decode_mask(cf.mask_payload, header.height * header.width).reshape(
        header.height, header.width
    )
    spans = list(header.layout.blocks(header.height, header.width))
    if len(spans) != len(cf.blocks):
        raise CorruptStream("block count disagrees with layout")
    prev_index = None
    if header.predictor == PredictorKind.ANCHOR_TEMPORAL and prev is not None \
            and not header.flags & FLAG_TEMPORAL_DEGRADED:
        prev_index = _prev_index_for(prev, calib)
    out = np.zeros((header.height, header.width))

    def work(item):
        span, block = item
        deltas = decode_block(block)
        _decode_block(span, deltas, out, valid, header, calib, track, bundle, prev_index)

    items = list(zip(spans, cf.blocks))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(work, items))
    else:
        for item in items:
            work(item)
    return RangeImage(out, valid, precision=header.precision, max_range=header.max_range)


def encode_sequence(
    frames,
    calib: LidarCalibration,
    tracks,
    qspec: QuantizationSpec,
    kind: PredictorKind,
    layout: BlockLayout = BlockLayout(),
    bundle: WeightBundle | None = None,
    workers: int = 1,
):
    """Encode time-ordered frames; frame t uses the decoded frame t-1 as
    temporal context (equal to the quantized frame t-1 by losslessness)."""
    if len(frames) != len(tracks):
        raise DimensionMismatch("one pose track per frame required")
    out = []
    prev = None
    for img, track in zip(frames, tracks):
        cf = encode_frame(img, calib, track, qspec, kind, layout, prev, bundle, workers)
        out.append(cf)
        if kind == PredictorKind.ANCHOR_TEMPORAL:
            prev = (quantize(img, qspec), track)
    return out


def decode_sequence(frames, calib: LidarCalibration, tracks, weights=None, workers: int = 1):
    out = []
    prev = None
    for cf, track in zip(frames, tracks):
        img = decode_frame(cf, calib, track, weights, prev, workers)
        out.append(img)
        if cf.header.predictor == PredictorKind.ANCHOR_TEMPORAL:
            prev = (img, track)
    return out


def _check_dims(img, calib, track):
    if (img.height, img.width) != (calib.height, calib.width):
        raise DimensionMismatch(
            f"image {img.height}x{img.width} vs calibration {calib.height}x{calib.width}"
        )
    if len(track) != img.width:
        raise DimensionMismatch(f"pose track length {len(track)} != width {img.width}")


# ---------------------------------------------------------------------------
# Files: a single frame is the bare container; a sequence is "RSEQ",
# u32 frame count, then the concatenated frames.
# ---------------------------------------------------------------------------

def write_frames(path, frames) -> None:
    with open(path, "wb") as f:
        if len(frames) == 1:
            f.write(frames[0].to_bytes())
        else:
            f.write(SEQUENCE_MAGIC + struct.pack("<I", len(frames)))
            for cf in frames:
                f.write(cf.to_bytes())


def read_frames(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] == FRAME_MAGIC:
        cf, off = CompressedFrame.from_bytes(data)
        if off != len(data):
            raise CorruptStream("trailing bytes after frame")
        return [cf]
    if data[:4] == SEQUENCE_MAGIC:
        if len(data) < 8:
            raise CorruptStream("sequence header truncated")
        (count,) = struct.unpack_from("<I", data, 4)
        off = 8
        frames = []
        for _ in range(count):
            cf, off = CompressedFrame.from_bytes(data, off)
            frames.append(cf)
        if off != len(data):
            raise CorruptStream("trailing bytes after sequence")
        return frames
    raise CorruptStream("not a compressed frame or sequence file")
