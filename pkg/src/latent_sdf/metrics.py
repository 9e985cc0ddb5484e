"""Generation and completion metrics built on squared Chamfer distance.

Set-level metrics (MMD, COV, 1-NNA) compare a generated set with a reference
set; completion metrics (TMD, UHD, CONS) score the samples drawn for one
partial input.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry.distances import (chamfer_distance, exact_mean, hausdorff_unidirectional,
                                 nearest_sq_dist)

DISTANCE_TAG = "chamfer-squared"


def _clouds(sets: Sequence, name: str) -> list[np.ndarray]:
    if len(sets) == 0:
        raise ValueError(f"{name} set is empty")
    return [np.asarray(c, dtype=np.float64) for c in sets]


def cd_matrix(rows: Sequence, cols: Sequence) -> np.ndarray:
    """``out[i, j] = CD(rows[i], cols[j])`` with one KD-tree per cloud."""
    rows, cols = _clouds(rows, "row"), _clouds(cols, "column")
    row_trees = [cKDTree(c) for c in rows]
    col_trees = [cKDTree(c) for c in cols]
    out = np.empty((len(rows), len(cols)))
    for i, (a, ta) in enumerate(zip(rows, row_trees)):
        for j, (b, tb) in enumerate(zip(cols, col_trees)):
            out[i, j] = exact_mean(nearest_sq_dist(a, tb)) + exact_mean(nearest_sq_dist(b, ta))
    return out


def _self_cd_matrix(clouds: Sequence) -> np.ndarray:
    clouds = _clouds(clouds, "input")
    trees = [cKDTree(c) for c in clouds]
    n = len(clouds)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = (exact_mean(nearest_sq_dist(clouds[i], trees[j]))
                                     + exact_mean(nearest_sq_dist(clouds[j], trees[i])))
    return out


def mmd(generated: Sequence, reference: Sequence, dist: np.ndarray | None = None) -> float:
    """Mean over reference clouds of the smallest CD to any generated cloud.

    ``dist`` may carry a precomputed ``(len(reference), len(generated))`` CD matrix.
    """
    d = cd_matrix(reference, generated) if dist is None else dist
    return exact_mean(d.min(axis=1))


def cov(generated: Sequence, reference: Sequence, dist: np.ndarray | None = None) -> float:
    """Fraction of reference clouds that are the nearest reference of some generated cloud."""
    d = cd_matrix(reference, generated) if dist is None else dist
    matched = np.unique(np.argmin(d, axis=0))
    return len(matched) / d.shape[0]


def one_nna(generated: Sequence, reference: Sequence, dist: np.ndarray | None = None) -> float:
    """Leave-one-out 1-nearest-neighbour accuracy over the union of both sets.

    A perfect generator scores 0.5.  When several neighbours tie, the
    reference label wins.  ``dist`` may carry the full union CD matrix
    (generated first, then reference).
    """
    if len(generated) != len(reference):
        raise ValueError("1-NNA needs equally sized sets")
    n_gen = len(generated)
    d = _self_cd_matrix(list(generated) + list(reference)) if dist is None else np.array(dist)
    n = d.shape[0]
    labels = np.arange(n) >= n_gen  # True = reference
    np.fill_diagonal(d, np.inf)
    correct = 0
    for i in range(n):
        nearest = d[i].min()
        ties = np.nonzero(d[i] == nearest)[0]
        predicted = bool(labels[ties].any())
        correct += int(predicted == labels[i])
    return correct / n


def tmd(completions: Sequence) -> float:
    """Average over completions of their mean CD to the other completions."""
    if len(completions) < 2:
        raise ValueError("TMD needs at least two completions")
    d = _self_cd_matrix(completions)
    k = len(completions)
    return exact_mean(np.array([exact_mean(row[np.arange(k) != i]) for i, row in enumerate(d)]))


def uhd(partial, completions: Sequence) -> float:
    """Mean over completions of the one-sided Hausdorff distance from the partial input."""
    if len(completions) == 0:
        raise ValueError("UHD needs at least one completion")
    return exact_mean(np.array([hausdorff_unidirectional(partial, c) for c in completions]))


def cons(partial, model, z, signed: bool = False) -> float:
    """Mean predicted distance of the partial points under latent ``z``.

    Uses magnitudes unless ``signed``; ``model`` is anything with an
    ``sdf_values(points, z)`` method (a trained modulation model).
    """
    values = model.sdf_values(np.asarray(partial, dtype=np.float64), z)
    return float(np.mean(values if signed else np.abs(values)))


@dataclass
class EvalReport:
    metrics: dict
    counts: dict
    distance: str = DISTANCE_TAG
    seed: int | None = None
    wall_clock: float = 0.0
    runs: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")


def unconditional_metrics(generated: Sequence, reference: Sequence) -> dict:
    if len(generated) != len(reference):
        raise ValueError("generate as many samples as there are reference shapes")
    n = len(generated)
    full = _self_cd_matrix(list(generated) + list(reference))
    cross = full[n:, :n]  # reference x generated
    return {"MMD": mmd(generated, reference, cross),
            "COV": cov(generated, reference, cross),
            "1-NNA": one_nna(generated, reference, full)}


def completion_metrics(partials: Sequence, completion_sets: Sequence[Sequence],
                       references: Sequence | None = None) -> dict:
    """TMD and UHD averaged over inputs, plus MMD against ground truth when given."""
    out = {"TMD": exact_mean(np.array([tmd(c) for c in completion_sets])),
           "UHD": exact_mean(np.array([uhd(p, c) for p, c in zip(partials, completion_sets)]))}
    if references is not None:
        out["MMD"] = exact_mean(np.array([min(chamfer_distance(ref, c) for c in comps)
                                          for ref, comps in zip(references, completion_sets)]))
    return out


def best_of(runs: list[dict], mode: str) -> dict:
    """Pick the best run: 1-NNA closest to 0.5 (unconditional) or lowest MMD, then UHD."""
    if mode == "uncond":
        return min(runs, key=lambda r: abs(r["1-NNA"] - 0.5))
    key = "MMD" if "MMD" in runs[0] else "UHD"
    return min(runs, key=lambda r: r[key])


def timed(fn, *args, **kwargs):
    start = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - start
