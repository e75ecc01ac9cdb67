"""Point-to-point (D1) PSNR."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .pointcloud import PointCloud


@dataclass(frozen=True)
class PsnrResult:
    d1_psnr: float  # math.inf when mse == 0
    mse: float
    peak: float


def _sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


def nearest_sq_dist(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Squared distance from every query point to its nearest ``ref`` point.

    The k-d tree only picks the neighbor; the distance is recomputed with the
    same expression the brute-force path uses.
    """
    _, idx = cKDTree(ref).query(query, k=1)
    return _sq_dist(query, ref[idx])


def nearest_sq_dist_brute(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    out = np.empty(len(query))
    for i, q in enumerate(query):
        out[i] = _sq_dist(np.broadcast_to(q, ref.shape), ref).min()
    return out


def d1_psnr(reference: PointCloud, reconstructed: PointCloud, peak: float | None = None, *, brute_force=False) -> PsnrResult:
    """Symmetric D1: the worse of the two directional nearest-neighbor MSEs.

    ``peak`` defaults to the reference's longest bounding-box edge.
    """
    if len(reference) == 0 or len(reconstructed) == 0:
        raise ValueError("both clouds must be non-empty")
    if peak is None:
        peak = reference.max_edge or 1.0
    if not peak > 0:
        raise ValueError("peak must be positive")
    nn = nearest_sq_dist_brute if brute_force else nearest_sq_dist
    a, b = reference.points, reconstructed.points
    mse = float(max(nn(a, b).mean(), nn(b, a).mean()))
    psnr = math.inf if mse == 0.0 else 10.0 * math.log10(peak * peak / mse)
    return PsnrResult(psnr, mse, float(peak))
