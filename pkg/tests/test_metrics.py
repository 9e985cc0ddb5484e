import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latent_sdf.metrics import (EvalReport, best_of, cd_matrix, completion_metrics, cons, cov, mmd,
                                one_nna, tmd, uhd, unconditional_metrics)
from oracles import oracle_1nna, oracle_cd, oracle_cov, oracle_mmd, oracle_tmd, oracle_uhd


def clouds(rng, k, lo=4, hi=32, shift=0.0):
    return [rng.normal(size=(rng.integers(lo, hi + 1), 3)) * 0.3 + shift for _ in range(k)]


@pytest.mark.parametrize("seed", range(6))
def test_set_metrics_match_oracles_exactly(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 9))
    gen, ref = clouds(rng, k), clouds(rng, k)
    assert mmd(gen, ref) == oracle_mmd(gen, ref)
    assert cov(gen, ref) == oracle_cov(gen, ref)
    assert one_nna(gen, ref) == oracle_1nna(gen, ref)
    got = unconditional_metrics(gen, ref)
    assert got == {"MMD": oracle_mmd(gen, ref), "COV": oracle_cov(gen, ref),
                   "1-NNA": oracle_1nna(gen, ref)}


@pytest.mark.parametrize("seed", range(6))
def test_completion_metrics_match_oracles_exactly(seed):
    rng = np.random.default_rng(100 + seed)
    comps = clouds(rng, int(rng.integers(2, 9)))
    partial = rng.normal(size=(int(rng.integers(1, 33)), 3)) * 0.2
    assert tmd(comps) == oracle_tmd(comps)
    assert uhd(partial, comps) == oracle_uhd(partial, comps)


def test_cd_matrix_entries():
    rng = np.random.default_rng(7)
    a, b = clouds(rng, 3), clouds(rng, 4)
    d = cd_matrix(a, b)
    assert d.shape == (3, 4)
    for i in range(3):
        for j in range(4):
            assert d[i, j] == oracle_cd(a[i], b[j])


def test_identical_sets():
    s = clouds(np.random.default_rng(8), 5)
    assert mmd(s, s) == 0.0
    assert cov(s, s) == 1.0
    assert tmd([s[0], s[0], s[0]]) == 0.0


def test_far_clusters_are_perfectly_separable():
    rng = np.random.default_rng(9)
    assert one_nna(clouds(rng, 6), clouds(rng, 6, shift=50.0)) == 1.0


def test_one_nna_same_distribution_near_half():
    rng = np.random.default_rng(10)
    gen = [rng.normal(size=(16, 3)) for _ in range(100)]
    ref = [rng.normal(size=(16, 3)) for _ in range(100)]
    assert abs(one_nna(gen, ref) - 0.5) < 0.1


def test_one_nna_tie_goes_to_reference():
    c = np.zeros((2, 3))
    # all four clouds coincide, so every cloud is labelled reference
    assert one_nna([c, c], [c, c]) == 0.5
    assert one_nna([c], [c]) == 0.0


def test_metric_errors():
    c = [np.zeros((3, 3))]
    with pytest.raises(ValueError):
        mmd([], c)
    with pytest.raises(ValueError):
        one_nna(c, c + c)
    with pytest.raises(ValueError):
        tmd(c)
    with pytest.raises(ValueError):
        uhd(np.zeros((2, 3)), [])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metric_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    gen, ref = clouds(rng, 4, hi=12), clouds(rng, 4, hi=12)
    p = rng.permutation(4)
    assert mmd([gen[i] for i in p], ref) == mmd(gen, ref)
    assert mmd(gen, [ref[i] for i in p]) == mmd(gen, ref)
    assert tmd([gen[i] for i in p]) == tmd(gen)
    partial = rng.normal(size=(5, 3))
    assert uhd(partial[rng.permutation(5)], gen) == uhd(partial, gen)


class ConstantField:
    def __init__(self, value):
        self.value = value

    def sdf_values(self, points, z):
        return np.full(len(points), self.value)


def test_cons_uses_magnitudes():
    partial = np.zeros((7, 3))
    assert cons(partial, ConstantField(-0.3), None) == 0.3
    assert cons(partial, ConstantField(-0.3), None, signed=True) == -0.3


def test_completion_metrics_with_references():
    rng = np.random.default_rng(11)
    sets = [clouds(rng, 3), clouds(rng, 3)]
    partials = [rng.normal(size=(4, 3)) for _ in sets]
    refs = clouds(rng, 2)
    out = completion_metrics(partials, sets, refs)
    assert out["TMD"] == math.fsum([oracle_tmd(s) for s in sets]) / 2
    assert out["UHD"] == math.fsum([oracle_uhd(p, s) for p, s in zip(partials, sets)]) / 2
    assert out["MMD"] == math.fsum(min(oracle_cd(r, c) for c in s) for r, s in zip(refs, sets)) / 2


def test_best_of_rules():
    runs = [{"1-NNA": 0.9}, {"1-NNA": 0.45}, {"1-NNA": 0.58}]
    assert best_of(runs, "uncond") == {"1-NNA": 0.45}
    assert best_of([{"UHD": 0.3}, {"UHD": 0.1}], "completion") == {"UHD": 0.1}
    assert best_of([{"UHD": 0.1, "MMD": 0.5}, {"UHD": 0.3, "MMD": 0.2}], "completion")["MMD"] == 0.2


def test_eval_report_json(tmp_path):
    report = EvalReport({"MMD": 0.1}, {"generated": 2}, seed=3)
    report.save(tmp_path / "r.json")
    text = (tmp_path / "r.json").read_text()
    assert '"distance": "chamfer-squared"' in text and text.endswith("}\n")
