"""Image and geometry metrics."""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree

from .errors import UsageError


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise UsageError("empty image")
    return a, b


def crop(img, border: int):
    if border <= 0:
        return img
    return np.asarray(img)[border:-border, border:-border]


def mse(a, b) -> float:
    a, b = _pair(a, b)
    d = a - b
    return float(np.mean(d * d))


def psnr(a, b, max_intensity: float = 1.0) -> float:
    """10 log10(MAX^2 / MSE) in dB; +inf when the images are identical."""
    if max_intensity <= 0:
        raise UsageError("max_intensity must be positive")
    m = mse(a, b)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(max_intensity * max_intensity / m)


def _points(pc) -> np.ndarray:
    pts = getattr(pc, "points", pc)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise UsageError("point cloud is empty")
    return pts


def nearest_distances(src, dst) -> np.ndarray:
    """Exact Euclidean distance from every src point to its nearest dst point (k-d tree)."""
    return cKDTree(dst).query(src, k=1)[0]


def chamfer(pc_a, pc_b) -> float:
    """Symmetric mean nearest-neighbor distance: (mean_a d(a, B) + mean_b d(b, A)) / 2."""
    a, b = _points(pc_a), _points(pc_b)
    return 0.5 * (float(nearest_distances(a, b).mean()) + float(nearest_distances(b, a).mean()))
