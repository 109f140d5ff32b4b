"""Entropy coding of residual maps and validity masks.

Two interchangeable residual coders:

  * SparseArithmetic — nonzero residuals stored as (gap-encoded indices,
    zigzagged values), each stream compressed with an adaptive arithmetic
    coder.  Wins when most residuals are zero.
  * RunLengthDict — (zigzag value, run length) pairs as varints, compressed
    with raw DEFLATE (RFC 1951).  Wins when residuals are dense but
    repetitive.

Both are bit-exact: decode(encode(x)) == x for every input.

Arithmetic coder model (mirrored by the reference simulation in the tests;
do not change one without the other):

  * 256 model symbols: ids 0..254 code residual symbols 0..254 literally,
    id 255 is the escape.  Symbols >= 255 are coded as escape followed by a
    raw 32-bit value (4 bytes, each coded against a fixed uniform
    256-symbol distribution).
  * all counts start at 1; the coded symbol's count increases by 32 after
    each step; when the total exceeds 2^20 all counts are halved, rounding
    up so none reaches zero.
  * coder state is the classic 32-bit integer low/high construction with
    deterministic renormalization and underflow handling.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import CorruptStream

MODEL_SYMBOLS = 256         # 255 literal ids + 1 escape id
ESCAPE = 255
MODEL_INCREMENT = 32
MODEL_RESCALE_LIMIT = 1 << 20

STATE_BITS = 32
_FULL = (1 << STATE_BITS) - 1
_HALF = 1 << (STATE_BITS - 1)
_QUARTER = 1 << (STATE_BITS - 2)

# A well-formed stream never needs more than the coder-state width of bits
# beyond the written payload; anything past that is corruption.
_OVERDRAW_LIMIT = STATE_BITS + 8


class CoderId(IntEnum):
    SPARSE_ARITHMETIC = 0
    RUN_LENGTH_DICT = 1


class BackendId(IntEnum):
    NONE = 0
    DEFLATE = 1
    LZMA = 2


@dataclass(frozen=True)
class SymbolStream:
    """Unsigned symbols (already zigzag-mapped) plus the model alphabet size."""

    symbols: np.ndarray
    alphabet_size: int = MODEL_SYMBOLS


@dataclass(frozen=True)
class CodedBlock:
    """One entropy-coded residual block.

    Wire layout (little-endian, frozen): coder_id u8, backend_id u8,
    symbol_count u32, payload_len u32, payload bytes.
    """

    coder_id: CoderId
    backend_id: BackendId
    symbol_count: int
    payload: bytes

    _WIRE = struct.Struct("<BBII")

    def to_bytes(self) -> bytes:
        return (
            self._WIRE.pack(int(self.coder_id), int(self.backend_id), self.symbol_count, len(self.payload))
            + self.payload
        )

    @property
    def wire_size(self) -> int:
        return self._WIRE.size + len(self.payload)

    @staticmethod
    def from_bytes(data, offset: int = 0):
        """Parse one block at ``offset``; returns (CodedBlock, next_offset)."""
        hdr = CodedBlock._WIRE
        if len(data) < offset + hdr.size:
            raise CorruptStream("coded block header truncated")
        cid, bid, count, plen = hdr.unpack_from(data, offset)
        offset += hdr.size
        if len(data) < offset + plen:
            raise CorruptStream("coded block payload truncated")
        try:
            block = CodedBlock(CoderId(cid), BackendId(bid), count, bytes(data[offset : offset + plen]))
        except ValueError as e:
            raise CorruptStream(f"unknown coder or backend id: {e}") from e
        return block, offset + plen


def zigzag(deltas):
    """Signed -> unsigned bijection: n >= 0 -> 2n, n < 0 -> -2n - 1."""
    d = np.asarray(deltas, dtype=np.int64)
    return np.where(d >= 0, 2 * d, -2 * d - 1).astype(np.uint64)


def unzigzag(symbols):
    s = np.asarray(symbols, dtype=np.uint64).astype(np.int64)
    return np.where(s % 2 == 0, s // 2, -(s + 1) // 2)


# ---------------------------------------------------------------------------
# Bit I/O
# ---------------------------------------------------------------------------

class _BitWriter:
    def __init__(self):
        self._bytes = bytearray()
        self._acc = 0
        self._nbits = 0

    def write(self, bit: int):
        self._acc = (self._acc << 1) | bit
        self._nbits += 1
        if self._nbits == 8:
            self._bytes.append(self._acc)
            self._acc = 0
            self._nbits = 0

    def getvalue(self) -> bytes:
        if self._nbits:
            self._bytes.append(self._acc << (8 - self._nbits))
            self._acc = 0
            self._nbits = 0
        return bytes(self._bytes)


class _BitReader:
    """MSB-first reader that feeds zeros past the end, up to a bounded
    overdraw; beyond that the stream is declared corrupt."""

    def __init__(self, data):
        self._data = data
        self._pos = 0
        self._acc = 0
        self._nbits = 0
        self.overdraw = 0

    def read(self) -> int:
        if self._nbits == 0:
            if self._pos < len(self._data):
                self._acc = self._data[self._pos]
                self._pos += 1
                self._nbits = 8
            else:
                self.overdraw += 1
                if self.overdraw > _OVERDRAW_LIMIT:
                    raise CorruptStream("arithmetic stream exhausted before all symbols decoded")
                return 0
        self._nbits -= 1
        return (self._acc >> self._nbits) & 1


# ---------------------------------------------------------------------------
# Adaptive model + integer arithmetic coder
# ---------------------------------------------------------------------------

class AdaptiveModel:
    """Order-0 adaptive frequency model over MODEL_SYMBOLS ids."""

    def __init__(self, size: int = MODEL_SYMBOLS):
        self.counts = np.ones(size, dtype=np.int64)
        self.total = size

    def cumulative(self) -> np.ndarray:
        c = np.zeros(len(self.counts) + 1, dtype=np.int64)
        np.cumsum(self.counts, out=c[1:])
        return c

    def update(self, symbol: int):
        self.counts[symbol] += MODEL_INCREMENT
        self.total += MODEL_INCREMENT
        if self.total > MODEL_RESCALE_LIMIT:
            self.counts = (self.counts + 1) >> 1
            self.total = int(self.counts.sum())


class _Encoder:
    def __init__(self):
        self.low = 0
        self.high = _FULL
        self._pending = 0
        self._out = _BitWriter()

    def _emit(self, bit: int):
        self._out.write(bit)
        while self._pending:
            self._out.write(bit ^ 1)
            self._pending -= 1

    def encode(self, c_lo: int, c_hi: int, total: int):
        span = self.high - self.low + 1
        self.high = self.low + (span * c_hi) // total - 1
        self.low = self.low + (span * c_lo) // total
        while True:
            if self.high < _HALF:
                self._emit(0)
            elif self.low >= _HALF:
                self._emit(1)
                self.low -= _HALF
                self.high -= _HALF
            elif self.low >= _QUARTER and self.high < 3 * _QUARTER:
                self._pending += 1
                self.low -= _QUARTER
                self.high -= _QUARTER
            else:
                break
            self.low = self.low * 2
            self.high = self.high * 2 + 1

    def finish(self) -> bytes:
        # One disambiguating bit is enough; the reader pads with zeros.
        self._pending += 1
        if self.low < _QUARTER:
            self._emit(0)
        else:
            self._emit(1)
        return self._out.getvalue()


class _Decoder:
    def __init__(self, data):
        self._in = _BitReader(data)
        self.low = 0
        self.high = _FULL
        self.code = 0
        for _ in range(STATE_BITS):
            self.code = (self.code << 1) | self._in.read()

    def decode_target(self, total: int) -> int:
        span = self.high - self.low + 1
        return ((self.code - self.low + 1) * total - 1) // span

    def consume(self, c_lo: int, c_hi: int, total: int):
        span = self.high - self.low + 1
        self.high = self.low + (span * c_hi) // total - 1
        self.low = self.low + (span * c_lo) // total
        while True:
            if self.high < _HALF:
                pass
            elif self.low >= _HALF:
                self.low -= _HALF
                self.high -= _HALF
                self.code -= _HALF
            elif self.low >= _QUARTER and self.high < 3 * _QUARTER:
                self.low -= _QUARTER
                self.high -= _QUARTER
                self.code -= _QUARTER
            else:
                break
            self.low = self.low * 2
            self.high = self.high * 2 + 1
            self.code = self.code * 2 + self._in.read()


def arith_encode(symbols) -> bytes:
    """Adaptive arithmetic coding of unsigned symbols of any magnitude."""
    if isinstance(symbols, SymbolStream):
        symbols = symbols.symbols
    symbols = np.asarray(symbols, dtype=np.uint64)
    enc = _Encoder()
    model = AdaptiveModel()
    for v in symbols:
        v = int(v)
        sid = v if v < ESCAPE else ESCAPE
        cum = model.cumulative()
        enc.encode(int(cum[sid]), int(cum[sid + 1]), model.total)
        model.update(sid)
        if sid == ESCAPE:
            for shift in (0, 8, 16, 24):
                b = (v >> shift) & 0xFF
                enc.encode(b, b + 1, 256)
    return enc.finish()


def arith_decode(data, count: int) -> np.ndarray:
    """Inverse of arith_encode; ``count`` symbols are expected."""
    dec = _Decoder(data)
    model = AdaptiveModel()
    out = np.empty(count, dtype=np.uint64)
    for i in range(count):
        cum = model.cumulative()
        target = dec.decode_target(model.total)
        sid = int(np.searchsorted(cum, target, side="right")) - 1
        if sid < 0 or sid >= MODEL_SYMBOLS:
            raise CorruptStream("arithmetic symbol out of range")
        dec.consume(int(cum[sid]), int(cum[sid + 1]), model.total)
        model.update(sid)
        if sid == ESCAPE:
            v = 0
            for shift in (0, 8, 16, 24):
                b = dec.decode_target(256)
                if not 0 <= b < 256:
                    raise CorruptStream("escaped byte out of range")
                dec.consume(b, b + 1, 256)
                v |= b << shift
            out[i] = v
        else:
            out[i] = sid
    return out


# ---------------------------------------------------------------------------
# Varints (LEB128, unsigned)
# ---------------------------------------------------------------------------

_VARINT_MAX_LEN = 8  # values < 2**56, far beyond any residual or run length


def varint_encode(values) -> bytes:
    v = np.asarray(values, dtype=np.uint64)
    if v.size == 0:
        return b""
    if np.any(v >> np.uint64(7 * _VARINT_MAX_LEN)):
        raise ValueError("varint value too large")
    nbytes = np.ones(v.size, dtype=np.int64)
    for k in range(1, _VARINT_MAX_LEN):
        nbytes += (v >> np.uint64(7 * k)) > 0
    ends = np.cumsum(nbytes)
    out = np.zeros(int(ends[-1]), dtype=np.uint8)
    starts = ends - nbytes
    for k in range(_VARINT_MAX_LEN):
        m = nbytes > k
        if not m.any():
            break
        byte = (v[m] >> np.uint64(7 * k)) & np.uint64(0x7F)
        cont = (nbytes[m] - 1 > k).astype(np.uint8) << 7
        out[starts[m] + k] = byte.astype(np.uint8) | cont
    return out.tobytes()


def varint_decode(data) -> np.ndarray:
    buf = np.frombuffer(data, dtype=np.uint8)
    if buf.size == 0:
        return np.zeros(0, dtype=np.uint64)
    is_end = (buf & 0x80) == 0
    if not is_end[-1]:
        raise CorruptStream("varint stream ends mid-value")
    ends = np.flatnonzero(is_end)
    starts = np.empty_like(ends)
    starts[0] = 0
    starts[1:] = ends[:-1] + 1
    lens = ends - starts + 1
    if np.any(lens > _VARINT_MAX_LEN):
        raise CorruptStream("varint longer than 8 bytes")
    values = np.zeros(ends.size, dtype=np.uint64)
    for k in range(int(lens.max())):
        m = lens > k
        values[m] |= (buf[starts[m] + k].astype(np.uint64) & np.uint64(0x7F)) << np.uint64(7 * k)
    return values


# ---------------------------------------------------------------------------
# Residual coders
# ---------------------------------------------------------------------------

def sparse_parts(deltas):
    """Sparse decomposition: (n_nonzero, index gaps, zigzagged values).

    The first gap is the first nonzero index itself; later gaps are the
    differences between consecutive nonzero indices.
    """
    d = np.asarray(deltas, dtype=np.int64)
    idx = np.flatnonzero(d)
    gaps = np.diff(idx, prepend=0).astype(np.uint64) if idx.size else np.zeros(0, dtype=np.uint64)
    if idx.size:
        gaps[0] = idx[0]
    return int(idx.size), gaps, zigzag(d[idx])


def encode_sparse(deltas) -> CodedBlock:
    d = np.asarray(deltas, dtype=np.int64)
    nz, gaps, values = sparse_parts(d)
    gap_payload = arith_encode(gaps)
    val_payload = arith_encode(values)
    payload = (
        varint_encode([nz, len(gap_payload)])
        + gap_payload
        + val_payload
    )
    return CodedBlock(CoderId.SPARSE_ARITHMETIC, BackendId.NONE, d.size, payload)


def decode_sparse(block: CodedBlock) -> np.ndarray:
    buf = np.frombuffer(block.payload, dtype=np.uint8)
    # Parse the two leading varints by hand (they are short).
    vals, pos = [], 0
    for _ in range(2):
        v, shift = 0, 0
        while True:
            if pos >= buf.size:
                raise CorruptStream("sparse header truncated")
            b = int(buf[pos]); pos += 1
            v |= (b & 0x7F) << shift
            shift += 7
            if not b & 0x80:
                break
        vals.append(v)
    nz, gap_len = vals
    if nz > block.symbol_count or pos + gap_len > buf.size:
        raise CorruptStream("sparse block lengths inconsistent")
    gaps = arith_decode(block.payload[pos : pos + gap_len], nz).astype(np.int64)
    values = unzigzag(arith_decode(block.payload[pos + gap_len :], nz))
    if nz and (np.any(gaps[1:] <= 0) or gaps[0] < 0):
        raise CorruptStream("non-increasing sparse indices")
    idx = np.cumsum(gaps)
    if nz and (idx[-1] >= block.symbol_count or np.any(idx < 0)):
        raise CorruptStream("sparse index out of range")
    if np.any(values == 0):
        raise CorruptStream("zero value in sparse nonzero list")
    out = np.zeros(block.symbol_count, dtype=np.int64)
    out[idx] = values
    return out


def run_length_pairs(deltas):
    """Flatten to (zigzag value, run length) pairs, in order."""
    d = np.asarray(deltas, dtype=np.int64)
    if d.size == 0:
        return np.zeros(0, dtype=np.uint64), np.zeros(0, dtype=np.uint64)
    boundaries = np.flatnonzero(np.diff(d)) + 1
    starts = np.concatenate(([0], boundaries))
    runs = np.diff(np.concatenate((starts, [d.size]))).astype(np.uint64)
    return zigzag(d[starts]), runs


def encode_runlength(deltas) -> CodedBlock:
    d = np.asarray(deltas, dtype=np.int64)
    values, runs = run_length_pairs(d)
    pairs = np.empty(2 * values.size, dtype=np.uint64)
    pairs[0::2] = values
    pairs[1::2] = runs
    raw = varint_encode(pairs)
    comp = zlib.compressobj(9, zlib.DEFLATED, -15)
    payload = comp.compress(raw) + comp.flush()
    return CodedBlock(CoderId.RUN_LENGTH_DICT, BackendId.DEFLATE, d.size, payload)


def decode_runlength(block: CodedBlock) -> np.ndarray:
    if block.backend_id == BackendId.DEFLATE:
        try:
            raw = zlib.decompress(block.payload, -15)
        except zlib.error as e:
            raise CorruptStream(f"deflate payload damaged: {e}") from e
    elif block.backend_id == BackendId.LZMA:
        import lzma

        try:
            raw = lzma.decompress(block.payload)
        except lzma.LZMAError as e:
            raise CorruptStream(f"lzma payload damaged: {e}") from e
    else:
        raise CorruptStream("run-length block with unsupported backend")
    pairs = varint_decode(raw)
    if pairs.size % 2:
        raise CorruptStream("odd number of run-length varints")
    values = unzigzag(pairs[0::2])
    runs = pairs[1::2].astype(np.int64)
    if np.any(runs <= 0) or int(runs.sum()) != block.symbol_count:
        raise CorruptStream("run lengths do not cover the block")
    return np.repeat(values, runs)


def choose_coder(deltas) -> CodedBlock:
    """Encode with both coders and keep the smaller payload.

    Equal sizes resolve to SparseArithmetic.
    """
    return _pick(encode_sparse(deltas), encode_runlength(deltas))


def _pick(sparse_block: CodedBlock, rle_block: CodedBlock) -> CodedBlock:
    return sparse_block if sparse_block.wire_size <= rle_block.wire_size else rle_block


def decode_block(block: CodedBlock) -> np.ndarray:
    if block.coder_id == CoderId.SPARSE_ARITHMETIC:
        return decode_sparse(block)
    return decode_runlength(block)


# ---------------------------------------------------------------------------
# Validity-mask coder: run lengths of alternating 0/1 runs, arithmetic-coded.
#
#   first_bit u8, run_count varint, arithmetic payload
# ---------------------------------------------------------------------------

def encode_mask(valid) -> bytes:
    v = np.asarray(valid, dtype=bool).reshape(-1)
    if v.size == 0:
        return b"\x00" + varint_encode([0])
    boundaries = np.flatnonzero(np.diff(v)) + 1
    starts = np.concatenate(([0], boundaries))
    runs = np.diff(np.concatenate((starts, [v.size]))).astype(np.uint64)
    return bytes([int(v[0])]) + varint_encode([runs.size]) + arith_encode(runs)


def decode_mask(data, n_pixels: int) -> np.ndarray:
    if len(data) < 2:
        raise CorruptStream("mask payload too short")
    first = data[0]
    if first not in (0, 1):
        raise CorruptStream("bad mask lead byte")
    pos, n_runs, shift = 1, 0, 0
    while True:
        if pos >= len(data):
            raise CorruptStream("mask run count truncated")
        b = data[pos]; pos += 1
        n_runs |= (b & 0x7F) << shift
        shift += 7
        if not b & 0x80:
            break
    if n_pixels == 0:
        if n_runs != 0:
            raise CorruptStream("runs declared for empty mask")
        return np.zeros(0, dtype=bool)
    runs = arith_decode(data[pos:], n_runs).astype(np.int64)
    if np.any(runs <= 0) or int(runs.sum()) != n_pixels:
        raise CorruptStream("mask runs do not cover the image")
    bits = np.repeat((np.arange(n_runs) + first) % 2 == 1, runs)
    return bits
