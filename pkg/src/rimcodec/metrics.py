"""Distortion and prediction-quality metrics for reconstructed point clouds.

All nearest-neighbor searches are exact (a k-d tree is an accelerator, never
an approximation), and summations use numpy's pairwise reduction so results
are independent of evaluation order at the 1e-12 level.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionMismatch, EmptyCloud, TooFewPoints

NORMAL_NEIGHBORS = 12
_ZERO_MSE = 1e-18


def _as_cloud(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise DimensionMismatch(f"point cloud must be (N,3), got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("point cloud contains non-finite coordinates")
    return p


def chamfer(p, q) -> float:
    """Mean over p of the exact nearest-neighbor distance into q."""
    p = _as_cloud(p)
    q = _as_cloud(q)
    if len(p) == 0 or len(q) == 0:
        raise EmptyCloud("chamfer distance needs non-empty clouds")
    d, _ = cKDTree(q).query(p)
    return float(np.mean(d))


def chamfer_sym(p, q) -> float:
    """max(chamfer(p, q), chamfer(q, p))."""
    return max(chamfer(p, q), chamfer(q, p))


def estimate_normals(points, k: int = NORMAL_NEIGHBORS) -> np.ndarray:
    """Unit normal per point from the covariance of its k nearest neighbors
    (the point itself included).  The sign is unspecified; point-to-plane
    errors square it away."""
    p = _as_cloud(points)
    if len(p) < k + 1:
        raise TooFewPoints(f"normal estimation needs at least {k + 1} points, got {len(p)}")
    _, idx = cKDTree(p).query(p, k=k)
    nbrs = p[idx]                              # (N, k, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]                    # eigenvector of the smallest eigenvalue
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.where(norms > 0, norms, 1.0)


def intrinsic_resolution(points) -> float:
    """Largest nearest-neighbor gap within a cloud."""
    p = _as_cloud(points)
    if len(p) < 2:
        raise TooFewPoints("intrinsic resolution needs at least 2 points")
    d, _ = cKDTree(p).query(p, k=2)
    return float(np.max(d[:, 1]))


def _point_to_plane_mse(a, b, normals_a) -> float:
    _, idx = cKDTree(b).query(a)
    err = np.einsum("ni,ni->n", a - b[idx], normals_a)
    return float(np.mean(err * err))


def psnr(p, q, k: int = NORMAL_NEIGHBORS) -> float:
    """Point-to-plane peak signal-to-noise ratio, decibels.

    Reference scale is the intrinsic resolution of ``p``; the error is the
    worse direction of the two point-to-plane MSEs, with normals estimated
    in the first-argument cloud of each direction.  Returns +inf when both
    MSEs are below 1e-18.
    """
    p = _as_cloud(p)
    q = _as_cloud(q)
    if len(p) < k + 1 or len(q) < k + 1:
        raise TooFewPoints(f"psnr needs at least {k + 1} points per cloud")
    r = intrinsic_resolution(p)
    mse = max(
        _point_to_plane_mse(p, q, estimate_normals(p, k)),
        _point_to_plane_mse(q, p, estimate_normals(q, k)),
    )
    if mse < _ZERO_MSE:
        return math.inf
    return 10.0 * math.log10(r * r / mse)


def prediction_accuracy(pred, truth, precision: float) -> float:
    """Fraction of valid pixels with |prediction - quantized truth| < precision / 2."""
    if pred.ranges.shape != truth.ranges.shape or not np.array_equal(pred.valid, truth.valid):
        raise DimensionMismatch("prediction and truth must share shape and mask")
    m = truth.valid
    if not m.any():
        return 0.0
    return float(np.mean(np.abs(pred.ranges[m] - truth.ranges[m]) < precision / 2.0))


@dataclass
class MetricReport:
    """Distortion summary; serialized as JSON for the CLI's tables.

    ``psnr_db`` is null in the JSON when the error is exactly zero (the
    +infinity case); plots clamp only at presentation time.
    """

    cd_sym: float
    psnr_db: float
    bpp: float | None = None
    accuracy_at: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "cd_sym": self.cd_sym,
                "psnr_db": None if math.isinf(self.psnr_db) else self.psnr_db,
                "bpp": self.bpp,
                "accuracy_at": {repr(k): v for k, v in self.accuracy_at.items()},
            }
        )

    @staticmethod
    def from_json(text: str) -> "MetricReport":
        doc = json.loads(text)
        return MetricReport(
            cd_sym=doc["cd_sym"],
            psnr_db=math.inf if doc["psnr_db"] is None else doc["psnr_db"],
            bpp=doc.get("bpp"),
            accuracy_at={float(k): v for k, v in doc.get("accuracy_at", {}).items()},
        )
