"""Range-image data model, lidar calibration, and coordinate conversions.

Conventions used throughout the package:

  * Sensor frame: right-handed, x forward, y left, z up.
  * Spherical coordinates: azimuth theta measured in the x-y plane from +x
    toward +y, elevation alpha measured from the x-y plane toward +z.
  * Range image: row i selects a laser beam (elevation), column j selects a
    shot (azimuth).  Raster order is row-major, left to right, top to bottom.
  * Invalid pixels (no laser return) store range 0 and are ignored by every
    consumer; the validity mask is authoritative.

The on-disk range-image container ("RIMG") and the calibration/pose sidecar
are defined at the bottom of this module; see the README for the byte-level
layout.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, ZeroRange

DEFAULT_MAX_RANGE = 75.0

# Quantization precisions the learned predictor is trained for.
MIN_PRECISION = 1e-4
MAX_PRECISION = 0.5

# Below this value of cos(alpha) a shot points at a pole and the azimuth is
# chosen as 0 by convention.
_POLE_EPS = 1e-12

RIMG_MAGIC = b"RIMG"
RIMG_VERSION = 1


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class RangeImage:
    """H x W grid of ranges plus a validity mask.

    ``precision == 0`` marks a raw (unquantized) image; a positive precision
    asserts that every valid range is an integer multiple of it.
    """

    ranges: np.ndarray
    valid: np.ndarray
    precision: float = 0.0
    max_range: float = DEFAULT_MAX_RANGE

    def __post_init__(self):
        ranges = np.asarray(self.ranges, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if ranges.ndim != 2 or valid.shape != ranges.shape:
            raise DimensionMismatch(
                f"ranges {ranges.shape} and valid {valid.shape} must be equal 2-D shapes"
            )
        ranges = np.where(valid, ranges, 0.0)
        if np.any(ranges < 0.0) or np.any(ranges[valid] > self.max_range):
            raise ValueError("valid ranges must lie in [0, max_range]")
        object.__setattr__(self, "ranges", _readonly(ranges))
        object.__setattr__(self, "valid", _readonly(valid))

    @property
    def height(self) -> int:
        return self.ranges.shape[0]

    @property
    def width(self) -> int:
        return self.ranges.shape[1]

    @property
    def valid_count(self) -> int:
        return int(np.count_nonzero(self.valid))


@dataclass(frozen=True)
class LidarCalibration:
    """Per-row beam elevations and per-column azimuths, both radians."""

    elevations: np.ndarray
    azimuths: np.ndarray
    max_range: float = DEFAULT_MAX_RANGE

    def __post_init__(self):
        el = np.asarray(self.elevations, dtype=np.float64).reshape(-1)
        az = np.asarray(self.azimuths, dtype=np.float64).reshape(-1)
        if el.size < 1 or az.size < 1:
            raise ValueError("calibration arrays must be non-empty")
        d = np.diff(el)
        if not (np.all(d > 0) or np.all(d < 0)):
            raise ValueError("elevations must be strictly monotonic")
        # Azimuths must be strictly monotonic modulo 2*pi (one wrap allowed).
        da = wrap_angle(np.diff(az))
        if az.size > 1 and not (np.all(da > 0) or np.all(da < 0)):
            raise ValueError("azimuths must be strictly monotonic modulo 2*pi")
        object.__setattr__(self, "elevations", _readonly(el))
        object.__setattr__(self, "azimuths", _readonly(az))

    @property
    def height(self) -> int:
        return self.elevations.size

    @property
    def width(self) -> int:
        return self.azimuths.size


@dataclass(frozen=True)
class Pose:
    """Rigid transform from the sensor frame to the global frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be orthonormal (1e-9)")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1 (1e-9)")
        object.__setattr__(self, "rotation", _readonly(r))
        object.__setattr__(self, "translation", _readonly(t))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))


class PoseTrack:
    """One sensor pose per range-image column.

    All rows of a column fire near-simultaneously, so per-column granularity
    is the coarsest level that keeps pixel <-> point conversion invertible.
    Stored as stacked (W,3,3) rotations and (W,3) translations.
    """

    def __init__(self, rotations, translations):
        r = np.asarray(rotations, dtype=np.float64)
        t = np.asarray(translations, dtype=np.float64)
        if r.ndim != 3 or r.shape[1:] != (3, 3) or t.shape != (r.shape[0], 3):
            raise DimensionMismatch("need (W,3,3) rotations and (W,3) translations")
        # Validate one pose per column (delegates the orthonormality check).
        for k in range(r.shape[0]):
            Pose(r[k], t[k])
        self.rotations = _readonly(r)
        self.translations = _readonly(t)

    def __len__(self) -> int:
        return self.rotations.shape[0]

    def pose(self, j: int) -> Pose:
        return Pose(self.rotations[j], self.translations[j])

    @staticmethod
    def from_poses(poses) -> "PoseTrack":
        return PoseTrack(
            np.stack([p.rotation for p in poses]),
            np.stack([p.translation for p in poses]),
        )

    @staticmethod
    def identity(width: int) -> "PoseTrack":
        return PoseTrack(
            np.broadcast_to(np.eye(3), (width, 3, 3)).copy(),
            np.zeros((width, 3)),
        )


@dataclass(frozen=True)
class QuantizationSpec:
    """Grid step, meters, that ranges are rounded to."""

    precision: float

    def __post_init__(self):
        if not (MIN_PRECISION <= self.precision <= MAX_PRECISION):
            raise ValueError(
                f"precision must lie in [{MIN_PRECISION}, {MAX_PRECISION}], got {self.precision}"
            )


def wrap_angle(theta):
    """Wrap angles into (-pi, pi]."""
    t = np.asarray(theta, dtype=np.float64)
    out = t - 2.0 * np.pi * np.floor((t + np.pi) / (2.0 * np.pi))
    out = np.where(out <= -np.pi, np.pi, out)
    if np.ndim(theta) == 0:
        return float(out)
    return out


def unproject(r, theta, alpha):
    """Spherical measurement -> point in the sensor frame.

    Returns (r cos(alpha) cos(theta), r cos(alpha) sin(theta), r sin(alpha)).
    Broadcasts over array inputs; scalar inputs give a (3,) vector.
    """
    r = np.asarray(r, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    ca = np.cos(alpha)
    return np.stack(
        [r * ca * np.cos(theta), r * ca * np.sin(theta), r * np.sin(alpha)],
        axis=-1,
    )


def project(points):
    """Point(s) in the sensor frame -> (r, theta, alpha).

    theta is in (-pi, pi], alpha in [-pi/2, pi/2].  At a pole (cos(alpha)
    below 1e-12) theta is 0 by convention.  Raises ZeroRange for points
    closer than 1e-12 to the origin.
    """
    p = np.asarray(points, dtype=np.float64)
    scalar = p.ndim == 1
    p = np.atleast_2d(p)
    r = np.linalg.norm(p, axis=-1)
    if np.any(r < 1e-12):
        raise ZeroRange("cannot project a point at the sensor origin")
    alpha = np.arcsin(np.clip(p[..., 2] / r, -1.0, 1.0))
    theta = np.arctan2(p[..., 1], p[..., 0])
    theta = np.where(np.cos(alpha) < _POLE_EPS, 0.0, theta)
    # arctan2 can return -pi for points with y == -0.0; normalize to +pi.
    theta = np.where(theta <= -np.pi, np.pi, theta)
    if scalar:
        return float(r[0]), float(theta[0]), float(alpha[0])
    return r, theta, alpha


def to_global(points, pose: Pose):
    """Sensor-frame point(s) -> global frame: R p + t."""
    p = np.asarray(points, dtype=np.float64)
    return p @ pose.rotation.T + pose.translation


def to_sensor(points, pose: Pose):
    """Global-frame point(s) -> sensor frame: R^T (p - t).  Inverse of to_global."""
    p = np.asarray(points, dtype=np.float64)
    return (p - pose.translation) @ pose.rotation


def image_to_point_cloud(img: RangeImage, calib: LidarCalibration, track: PoseTrack) -> np.ndarray:
    """All valid pixels -> (N,3) global-frame points, in raster order."""
    if (img.height, img.width) != (calib.height, calib.width):
        raise DimensionMismatch(
            f"image {img.height}x{img.width} vs calibration {calib.height}x{calib.width}"
        )
    if len(track) != img.width:
        raise DimensionMismatch(f"pose track length {len(track)} != width {img.width}")
    ii, jj = np.nonzero(img.valid)
    if ii.size == 0:
        return np.zeros((0, 3))
    r = img.ranges[ii, jj]
    pts = unproject(r, calib.azimuths[jj], calib.elevations[ii])
    rot = track.rotations[jj]
    t = track.translations[jj]
    return np.einsum("nab,nb->na", rot, pts) + t


def quantize_steps(ranges, precision: float) -> np.ndarray:
    """Ranges -> integer grid indices, rounding half away from zero.

    Ranges are non-negative, so half away from zero is floor(x/p + 0.5).
    """
    return np.floor(np.asarray(ranges, dtype=np.float64) / precision + 0.5).astype(np.int64)


def quantize(img: RangeImage, spec: QuantizationSpec) -> RangeImage:
    """Round every valid range to the nearest multiple of spec.precision.

    Half-way cases round away from zero.  The mask is unchanged and the
    per-pixel displacement is at most precision / 2.
    """
    k = quantize_steps(img.ranges, spec.precision)
    out = np.where(img.valid, k * spec.precision, 0.0)
    return RangeImage(out, img.valid, precision=spec.precision, max_range=img.max_range)


# ---------------------------------------------------------------------------
# Quaternion helpers (scalar-first [w, x, y, z], unit norm).
# ---------------------------------------------------------------------------

def quaternion_to_rotation(q) -> np.ndarray:
    w, x, y, z = (float(v) for v in q)
    n = math.sqrt(w * w + x * x + y * y + z * z)
    if n < 1e-12:
        raise ValueError("zero quaternion")
    w, x, y, z = w / n, x / n, y / n, z / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_quaternion(r) -> np.ndarray:
    """3x3 rotation -> unit quaternion [w,x,y,z] with w >= 0 (canonical sign)."""
    r = np.asarray(r, dtype=np.float64)
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    else:
        i = int(np.argmax([r[0, 0], r[1, 1], r[2, 2]]))
        if i == 0:
            s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
            q = np.array(
                [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
            )
        elif i == 1:
            s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
            q = np.array(
                [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
            )
        else:
            s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
            q = np.array(
                [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
            )
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


# ---------------------------------------------------------------------------
# Range-image container ("RIMG", little-endian).
#
#   magic    4s   b"RIMG"
#   version  u8   1
#   H        u16
#   W        u16
#   precision f64  (0 = unquantized)
#   max_range f32
#   ranges   H*W f32, row-major
#   valid    ceil(H*W/8) bytes, row-major bitmask, LSB-first within a byte
# ---------------------------------------------------------------------------

_RIMG_HEADER = struct.Struct("<4sBHHdf")


def write_range_image(path, img: RangeImage) -> None:
    payload = bytearray()
    payload += _RIMG_HEADER.pack(
        RIMG_MAGIC, RIMG_VERSION, img.height, img.width, img.precision, img.max_range
    )
    payload += img.ranges.astype("<f4").tobytes()
    payload += np.packbits(img.valid.reshape(-1), bitorder="little").tobytes()
    with open(path, "wb") as f:
        f.write(bytes(payload))


def read_range_image(path) -> RangeImage:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _RIMG_HEADER.size:
        raise ValueError("range-image file too short")
    magic, version, h, w, precision, max_range = _RIMG_HEADER.unpack_from(data, 0)
    if magic != RIMG_MAGIC or version != RIMG_VERSION:
        raise ValueError("not a RIMG v1 file")
    off = _RIMG_HEADER.size
    n = h * w
    need = off + 4 * n + (n + 7) // 8
    if len(data) < need:
        raise ValueError("range-image file truncated")
    ranges = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float64)
    off += 4 * n
    bits = np.frombuffer(data, dtype=np.uint8, count=(n + 7) // 8, offset=off)
    valid = np.unpackbits(bits, bitorder="little")[:n].astype(bool)
    ranges = ranges.reshape(h, w)
    valid = valid.reshape(h, w)
    # Ranges above max_range are cropped to invalid on import.
    valid = valid & (ranges <= max_range)
    return RangeImage(ranges, valid, precision=precision, max_range=float(max_range))


# ---------------------------------------------------------------------------
# Calibration / pose sidecar (JSON).
#
#   {"elevations": [radians...],            # length H
#    "azimuths":   [radians...],            # length W
#    "max_range":  meters,
#    "pose_tracks": [                       # one track per frame
#        [{"q": [w,x,y,z], "t": [x,y,z]}, ...]   # length W
#    ]}
# ---------------------------------------------------------------------------

def write_sidecar(path, calib: LidarCalibration, tracks) -> None:
    doc = {
        "elevations": calib.elevations.tolist(),
        "azimuths": calib.azimuths.tolist(),
        "max_range": calib.max_range,
        "pose_tracks": [
            [
                {
                    "q": rotation_to_quaternion(tr.rotations[j]).tolist(),
                    "t": tr.translations[j].tolist(),
                }
                for j in range(len(tr))
            ]
            for tr in tracks
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def read_sidecar(path):
    """Returns (LidarCalibration, [PoseTrack, ...])."""
    with open(path) as f:
        doc = json.load(f)
    calib = LidarCalibration(
        np.array(doc["elevations"]), np.array(doc["azimuths"]), float(doc["max_range"])
    )
    tracks = []
    for entries in doc["pose_tracks"]:
        rots = np.stack([quaternion_to_rotation(e["q"]) for e in entries])
        ts = np.array([e["t"] for e in entries], dtype=np.float64)
        tracks.append(PoseTrack(rots, ts))
    return calib, tracks
