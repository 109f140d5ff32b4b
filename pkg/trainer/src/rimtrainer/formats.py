"""Readers and writers for the codec's file formats.

Implemented against the documented byte layouts (RIMG range images, the
JSON calibration/pose sidecar, RWGT weight bundles) so the trainer has no
code dependency on the codec package itself.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

RIMG_HEADER = struct.Struct("<4sBHHdf")
RWGT_HEADER = struct.Struct("<4sBBHfB")
RWGT_LAYER = struct.Struct("<BII")

LAYER_DENSE = 0
LAYER_POINTWISE = 1
LAYER_MAX_POOL = 2
LAYER_CONCAT = 3


@dataclass
class Frame:
    ranges: np.ndarray   # (H, W) float64, 0 at invalid pixels
    valid: np.ndarray    # (H, W) bool
    max_range: float


@dataclass
class Calibration:
    elevations: np.ndarray
    azimuths: np.ndarray
    max_range: float


@dataclass
class PoseTrack:
    rotations: np.ndarray     # (W, 3, 3)
    translations: np.ndarray  # (W, 3)


def read_range_image(path) -> Frame:
    data = open(path, "rb").read()
    magic, version, h, w, _precision, max_range = RIMG_HEADER.unpack_from(data, 0)
    if magic != b"RIMG" or version != 1:
        raise ValueError(f"{path} is not a RIMG v1 file")
    off = RIMG_HEADER.size
    n = h * w
    ranges = np.frombuffer(data, "<f4", n, off).astype(np.float64).reshape(h, w)
    bits = np.frombuffer(data, np.uint8, (n + 7) // 8, off + 4 * n)
    valid = np.unpackbits(bits, bitorder="little")[:n].astype(bool).reshape(h, w)
    valid &= ranges <= max_range
    return Frame(np.where(valid, ranges, 0.0), valid, float(max_range))


def quat_to_rotation(q):
    w, x, y, z = (float(v) for v in q)
    n = (w * w + x * x + y * y + z * z) ** 0.5
    w, x, y, z = w / n, x / n, y / n, z / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def read_sidecar(path):
    doc = json.load(open(path))
    calib = Calibration(
        np.asarray(doc["elevations"], dtype=np.float64),
        np.asarray(doc["azimuths"], dtype=np.float64),
        float(doc["max_range"]),
    )
    tracks = []
    for entries in doc["pose_tracks"]:
        rot = np.stack([quat_to_rotation(e["q"]) for e in entries])
        t = np.asarray([e["t"] for e in entries], dtype=np.float64)
        tracks.append(PoseTrack(rot, t))
    return calib, tracks


def load_corpus(directory):
    """Directory of frame_*.rimg plus sidecar.json -> (frames, calib, tracks)."""
    from pathlib import Path

    d = Path(directory)
    files = sorted(d.glob("*.rimg"))
    if not files:
        raise FileNotFoundError(f"no .rimg frames in {d}")
    calib, tracks = read_sidecar(d / "sidecar.json")
    return [read_range_image(f) for f in files], calib, tracks


def write_bundle(path, layers, input_dim: int, num_anchors: int, normalization: float):
    """layers: list of (kind, weights (out,in) or None, bias or None)."""
    out = bytearray()
    out += RWGT_HEADER.pack(b"RWGT", 1, input_dim, num_anchors, normalization, len(layers))
    for kind, w, b in layers:
        if w is None:
            out += RWGT_LAYER.pack(kind, 0, 0)
        else:
            w = np.asarray(w, dtype=np.float32)
            b = np.asarray(b, dtype=np.float32)
            out += RWGT_LAYER.pack(kind, w.shape[0], w.shape[1])
            out += w.astype("<f4").tobytes()
            out += b.astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(bytes(out))


def read_bundle(path):
    """Returns (layers, input_dim, num_anchors, normalization); layers as in
    write_bundle."""
    data = open(path, "rb").read()
    magic, version, input_dim, num_anchors, norm, n_layers = RWGT_HEADER.unpack_from(data, 0)
    if magic != b"RWGT" or version != 1:
        raise ValueError(f"{path} is not a RWGT v1 file")
    off = RWGT_HEADER.size
    layers = []
    for _ in range(n_layers):
        kind, rows, cols = RWGT_LAYER.unpack_from(data, off)
        off += RWGT_LAYER.size
        if rows == 0:
            layers.append((kind, None, None))
            continue
        w = np.frombuffer(data, "<f4", rows * cols, off).reshape(rows, cols).copy()
        off += 4 * rows * cols
        b = np.frombuffer(data, "<f4", rows, off).copy()
        off += 4 * rows
        layers.append((kind, w, b))
    return layers, input_dim, num_anchors, float(norm)
