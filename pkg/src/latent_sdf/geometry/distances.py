"""Point-set distances used for evaluation."""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree


def _cloud(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3 or len(arr) == 0:
        raise ValueError(f"{name} must be a non-empty (N, 3) point cloud, got shape {arr.shape}")
    return arr


def nearest_sq_dist(src: np.ndarray, dst: np.ndarray | cKDTree) -> np.ndarray:
    """Squared distance from every ``src`` point to its nearest ``dst`` point."""
    tree = dst if isinstance(dst, cKDTree) else cKDTree(dst)
    idx = tree.query(src, k=1)[1]
    d = src - tree.data[idx]
    # fixed x, y, z order so results are reproducible by a plain loop
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


def exact_mean(values: np.ndarray) -> float:
    """Correctly rounded mean, independent of element order."""
    return math.fsum(values.tolist()) / len(values)


def chamfer_distance(a, b, tree_a: cKDTree | None = None, tree_b: cKDTree | None = None) -> float:
    """Squared-distance Chamfer: mean NN distance^2 from a to b plus from b to a."""
    a = _cloud(a, "a")
    b = _cloud(b, "b")
    ab = nearest_sq_dist(a, tree_b if tree_b is not None else b)
    ba = nearest_sq_dist(b, tree_a if tree_a is not None else a)
    return exact_mean(ab) + exact_mean(ba)


def hausdorff_unidirectional(partial, complete) -> float:
    """Largest distance from a partial point to its nearest point in ``complete``."""
    partial = _cloud(partial, "partial")
    complete = _cloud(complete, "complete")
    return float(np.sqrt(nearest_sq_dist(partial, complete).max()))
