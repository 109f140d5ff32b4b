"""Synthetic raytraced lidar scenes.

Planar and spherical surfaces have analytically known ranges, which makes
predictor and codec behavior decidable without any proprietary dataset.
The same spec and seed always produce bit-identical frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import LidarCalibration, PoseTrack, RangeImage, unproject

SCENE_KINDS = ("planes", "sphere", "boxes-on-ground", "static-pair", "moving-sensor-pair")

_MIN_HIT = 0.3


@dataclass(frozen=True)
class SceneSpec:
    kind: str
    seed: int = 0
    height: int = 64
    width: int = 2650
    max_range: float = 75.0
    roughness: float = 0.02       # 1-sigma range noise, meters
    speed: float = 1.0            # sensor translation per frame, meters (+x)
    yaw_rate: float = 0.02        # sensor yaw per frame, radians
    sensor_height: float = 2.0

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}; choose from {SCENE_KINDS}")

    @property
    def n_frames(self) -> int:
        return 2 if self.kind in ("static-pair", "moving-sensor-pair") else 1


def make_calibration(spec: SceneSpec) -> LidarCalibration:
    elevations = np.linspace(-0.32, 0.08, spec.height)
    azimuths = np.linspace(-np.pi, np.pi, spec.width, endpoint=False)
    return LidarCalibration(elevations, azimuths, spec.max_range)


# --- primitives -------------------------------------------------------------

class _Ground:
    def hit(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -o[:, 2] / d[:, 2]
        return np.where((d[:, 2] < -1e-9) & (t > 0), t, np.inf)

    def surface_error(self, p):
        return np.abs(p[:, 2])


class _WallX:
    """Infinite vertical plane x = x0."""

    def __init__(self, x0):
        self.x0 = x0

    def hit(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.x0 - o[:, 0]) / d[:, 0]
        return np.where((np.abs(d[:, 0]) > 1e-9) & (t > 0), t, np.inf)

    def surface_error(self, p):
        return np.abs(p[:, 0] - self.x0)


class _WallY:
    def __init__(self, y0):
        self.y0 = y0

    def hit(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.y0 - o[:, 1]) / d[:, 1]
        return np.where((np.abs(d[:, 1]) > 1e-9) & (t > 0), t, np.inf)

    def surface_error(self, p):
        return np.abs(p[:, 1] - self.y0)


class _Sphere:
    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)

    def hit(self, o, d):
        oc = o - self.center
        b = np.einsum("ni,ni->n", oc, d)
        c = np.einsum("ni,ni->n", oc, oc) - self.radius**2
        disc = b * b - c
        t = np.where(disc >= 0, -b - np.sqrt(np.maximum(disc, 0.0)), np.inf)
        return np.where(t > 0, t, np.inf)

    def surface_error(self, p):
        return np.abs(np.linalg.norm(p - self.center, axis=1) - self.radius)


class _Box:
    """Axis-aligned box given by (lo, hi) corners; slab intersection."""

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)

    def hit(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
        t1 = (self.lo - o) * inv
        t2 = (self.hi - o) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        ok = (tmax >= tmin) & (tmax > 0)
        t = np.where(tmin > 0, tmin, tmax)
        return np.where(ok & (t > 0), t, np.inf)

    def surface_error(self, p):
        q = np.maximum(self.lo - p, p - self.hi)
        inside = np.all(q <= 0, axis=1)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        face = -np.max(q, axis=1)
        return np.where(inside, face, outside)


def _primitives(spec: SceneSpec, rng: np.random.Generator):
    kind = spec.kind
    prims = [_Ground()]
    if kind == "planes":
        prims.append(_WallX(rng.uniform(25.0, 35.0)))
        prims.append(_WallY(-rng.uniform(20.0, 30.0)))
    elif kind == "sphere":
        center = (rng.uniform(10.0, 16.0), rng.uniform(-3.0, 3.0), rng.uniform(1.0, 2.0))
        prims.append(_Sphere(center, rng.uniform(2.0, 4.0)))
    elif kind in ("boxes-on-ground", "static-pair"):
        for _ in range(6):
            lo = np.array([rng.uniform(6.0, 30.0), rng.uniform(-15.0, 15.0), 0.0])
            size = rng.uniform(1.0, 4.0, size=3)
            prims.append(_Box(lo, lo + size))
        prims.append(_WallX(rng.uniform(35.0, 45.0)))
    else:  # moving-sensor-pair
        prims.append(_WallX(rng.uniform(25.0, 35.0)))
        center = (rng.uniform(10.0, 16.0), rng.uniform(-4.0, 4.0), rng.uniform(1.0, 2.5))
        prims.append(_Sphere(center, rng.uniform(2.0, 4.0)))
    return prims


def _track_for_frame(spec: SceneSpec, calib: LidarCalibration, frame: int) -> PoseTrack:
    w = spec.width
    if spec.kind in ("planes", "sphere", "boxes-on-ground", "static-pair"):
        rot = np.broadcast_to(np.eye(3), (w, 3, 3)).copy()
        t = np.zeros((w, 3))
        t[:, 2] = spec.sensor_height
        return PoseTrack(rot, t)
    # Moving sensor: translation and yaw interpolate across the sweep.
    phase = frame + np.arange(w) / w
    yaw = spec.yaw_rate * phase
    cy, sy = np.cos(yaw), np.sin(yaw)
    rot = np.zeros((w, 3, 3))
    rot[:, 0, 0] = cy
    rot[:, 0, 1] = -sy
    rot[:, 1, 0] = sy
    rot[:, 1, 1] = cy
    rot[:, 2, 2] = 1.0
    t = np.zeros((w, 3))
    t[:, 0] = spec.speed * phase
    t[:, 2] = spec.sensor_height
    return PoseTrack(rot, t)


def _raytrace(spec: SceneSpec, calib: LidarCalibration, track: PoseTrack, prims, rng) -> RangeImage:
    h, w = spec.height, spec.width
    dirs_sensor = unproject(
        1.0, calib.azimuths[None, :].repeat(h, 0), calib.elevations[:, None].repeat(w, 1)
    ).reshape(-1, 3)
    cols = np.tile(np.arange(w), h)
    dirs = np.einsum("nab,nb->na", track.rotations[cols], dirs_sensor)
    origins = track.translations[cols]
    t_hit = np.full(h * w, np.inf)
    for prim in prims:
        t_hit = np.minimum(t_hit, prim.hit(origins, dirs))
    # Hits beyond max_range are no returns, like the on-import crop.
    valid = np.isfinite(t_hit) & (t_hit >= _MIN_HIT) & (t_hit <= spec.max_range)
    ranges = np.where(valid, t_hit, 0.0)
    if spec.roughness > 0:
        noise = rng.normal(0.0, spec.roughness, size=h * w)
        ranges = np.where(valid, np.clip(ranges + noise, 0.05, spec.max_range), 0.0)
    return RangeImage(
        ranges.reshape(h, w), valid.reshape(h, w), precision=0.0, max_range=spec.max_range
    )


def generate(spec: SceneSpec):
    """Returns (calibration, [RangeImage per frame], [PoseTrack per frame])."""
    rng = np.random.default_rng(spec.seed)
    calib = make_calibration(spec)
    prims = _primitives(spec, rng)
    frames, tracks = [], []
    for f in range(spec.n_frames):
        track = _track_for_frame(spec, calib, f)
        if spec.kind == "static-pair" and f == 1:
            frames.append(frames[0])
            tracks.append(tracks[0])
            continue
        frames.append(_raytrace(spec, calib, track, prims, rng))
        tracks.append(track)
    return calib, frames, tracks


def surface_distance(spec: SceneSpec, points) -> np.ndarray:
    """Distance of global-frame points to the nearest scene surface; the
    raytracer oracle for pose-compensation tests (use roughness 0)."""
    rng = np.random.default_rng(spec.seed)
    prims = _primitives(spec, rng)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    errs = np.stack([prim.surface_error(p) for prim in prims], axis=0)
    return errs.min(axis=0)
