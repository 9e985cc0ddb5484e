"""Point sampling on analytic shapes and meshes, plus the partial-view crop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .shapes import ShapeSpec, _sdf, sdf_gradient

PROJECTION_STEPS = 64
SURFACE_TOL = 1e-9


@dataclass
class SDFSamples:
    points: np.ndarray  # (M, 3)
    sdf: np.ndarray  # (M,)

    def __post_init__(self):
        if len(self.points) != len(self.sdf):
            raise ValueError("points and distances must pair up")


def _project(spec: ShapeSpec, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Newton-style projection onto the zero level set; returns points and a converged mask."""
    pts = pts.copy()
    for _ in range(PROJECTION_STEPS):
        d = _sdf(spec, pts)
        if np.all(np.abs(d) < SURFACE_TOL):
            break
        g = sdf_gradient(spec, pts)
        norm = np.linalg.norm(g, axis=-1, keepdims=True)
        g = np.divide(g, norm, out=np.zeros_like(g), where=norm > 1e-12)
        pts -= d[:, None] * g
    d = _sdf(spec, pts)
    ok = (np.abs(d) < 1e-6) & np.all(np.abs(pts) <= 1.0, axis=-1)
    return pts, ok


def sample_surface(spec: ShapeSpec, n: int, rng: np.random.Generator,
                   band: float = 0.05) -> np.ndarray:
    """``n`` points on the zero level set of ``spec``.

    Candidates are drawn uniformly in the cube, kept when they fall in a thin
    shell around the surface and projected along the normalised gradient.
    Candidates that fail to converge within the step budget are discarded and
    replaced.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    found: list[np.ndarray] = []
    have = 0
    batch = max(4 * n, 4096)
    while have < n:
        cand = rng.uniform(-1.0, 1.0, size=(batch, 3))
        cand = cand[np.abs(_sdf(spec, cand)) < band]
        if len(cand) == 0:
            band *= 2.0
            continue
        pts, ok = _project(spec, cand)
        pts = pts[ok]
        found.append(pts)
        have += len(pts)
    return np.concatenate(found)[:n]


def sample_queries(spec: ShapeSpec, m: int, near_fraction: float, noise_std: float,
                   rng: np.random.Generator, surface: np.ndarray | None = None) -> SDFSamples:
    """Training queries: jittered surface points plus uniform points in the cube.

    ``surface`` supplies precomputed surface samples to jitter; otherwise they
    are drawn with :func:`sample_surface`.
    """
    if not 0.0 <= near_fraction <= 1.0:
        raise ValueError("near_fraction must lie in [0, 1]")
    n_near = int(round(near_fraction * m))
    if n_near:
        if surface is None:
            base = sample_surface(spec, n_near, rng)
        else:
            base = surface[rng.integers(len(surface), size=n_near)]
        near = base + rng.normal(0.0, noise_std, size=(n_near, 3))
    else:
        near = np.empty((0, 3))
    far = rng.uniform(-1.0, 1.0, size=(m - n_near, 3))
    pts = np.concatenate([near, far])
    return SDFSamples(pts, _sdf(spec, pts))


def random_viewpoint(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def crop_partial(cloud: np.ndarray, rng: np.random.Generator, keep: int = 64,
                 expected: int = 128) -> np.ndarray:
    """Drop the points farthest from a random unit-sphere viewpoint.

    The input must hold exactly ``expected`` points; the ``keep`` nearest to
    the viewpoint are returned in their original order.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.shape != (expected, 3):
        raise ValueError(f"expected a ({expected}, 3) cloud, got {cloud.shape}")
    view = random_viewpoint(rng)
    dist = np.linalg.norm(cloud - view, axis=-1)
    nearest = np.sort(np.argsort(dist, kind="stable")[:keep])
    return cloud[nearest]


def partial_from_full(full: np.ndarray, rng: np.random.Generator, n_sample: int = 128,
                      keep: int = 64) -> np.ndarray:
    """Subsample ``n_sample`` points from a full cloud, then crop to ``keep``."""
    idx = rng.choice(len(full), size=n_sample, replace=len(full) < n_sample)
    return crop_partial(full[idx], rng, keep=keep, expected=n_sample)
