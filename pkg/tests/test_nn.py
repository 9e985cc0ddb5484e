import numpy as np
import pytest

from latent_sdf.autodiff import GradientTape, NonFiniteError, ShapeError, Tensor, finite_diff_check
from latent_sdf.nn import (Adam, AdamState, Attention, LayerNorm, Linear, adam_step, attention,
                           init_params, layer_norm, linear_forward, timestep_embedding)


def test_linear_identity_and_constant():
    rng = np.random.default_rng(0)
    layer = Linear(3, 3, rng)
    layer.weight.data = np.eye(3)
    layer.bias.data = np.zeros(3)
    x = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(linear_forward(layer, x).data, x)
    layer.weight.data = np.zeros((3, 3))
    layer.bias.data = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(linear_forward(layer, x).data, np.tile([1.0, -2.0, 0.5], (4, 1)))


def test_linear_matches_loop_oracle():
    rng = np.random.default_rng(1)
    layer = Linear(4, 3, rng)
    x = rng.normal(size=(2, 5, 4))
    out = linear_forward(layer, x).data
    w, b = layer.weight.data, layer.bias.data
    for i in range(2):
        for j in range(5):
            for o in range(3):
                expected = b[o]
                for k in range(4):
                    expected += x[i, j, k] * w[o, k]
                assert out[i, j, o] == pytest.approx(expected, abs=1e-14)


def test_linear_dimension_mismatch():
    with pytest.raises(ShapeError):
        linear_forward(Linear(4, 3, np.random.default_rng(0)), np.ones((2, 5)))


def test_layer_norm_statistics():
    x = np.random.default_rng(2).normal(3.0, 7.0, size=(20, 16))
    y = layer_norm(Tensor(x)).data
    assert np.max(np.abs(y.mean(axis=-1))) < 1e-10
    # the eps in the denominator shifts the variance by about eps / var
    var = x.var(axis=-1)
    np.testing.assert_allclose(y.var(axis=-1), var / (var + 1e-5), atol=1e-12)
    assert np.max(np.abs(y.var(axis=-1) - 1.0)) < 1e-6


def test_layer_norm_unit_variance_for_large_rows():
    x = np.random.default_rng(3).normal(0.0, 100.0, size=(10, 32))
    y = layer_norm(Tensor(x)).data
    assert np.max(np.abs(y.var(axis=-1) - 1.0)) < 1e-8


def test_layer_norm_constant_row_and_scale_invariance():
    np.testing.assert_array_equal(layer_norm(Tensor(np.full((1, 5), 3.0))).data, np.zeros((1, 5)))
    x = np.random.default_rng(4).normal(0.0, 10.0, size=(3, 8))
    np.testing.assert_allclose(layer_norm(Tensor(5 * x)).data, layer_norm(Tensor(x)).data, atol=1e-6)
    # exact relation once eps is accounted for
    var = x.var(axis=-1, keepdims=True)
    ratio = np.sqrt((var + 1e-5) / (var + 1e-5 / 25))
    np.testing.assert_allclose(layer_norm(Tensor(5 * x)).data, layer_norm(Tensor(x)).data * ratio,
                               atol=1e-13)


def test_layer_norm_gradient():
    norm = LayerNorm(6)
    norm.gain.data = np.linspace(0.5, 1.5, 6)
    norm.shift.data = np.linspace(-0.2, 0.2, 6)
    x = np.random.default_rng(5).normal(size=(3, 6))
    w = np.random.default_rng(6).normal(size=(3, 6))
    assert finite_diff_check(lambda t: (norm(t) * w).sum(), x) < 1e-4


def test_attention_single_token_returns_value_projection():
    rng = np.random.default_rng(7)
    block = Attention(8, rng, kv_dim=5)
    kv = rng.normal(size=(2, 1, 5))
    q1, q2 = rng.normal(size=(2, 3, 8)), rng.normal(size=(2, 3, 8))
    expected = block.out(block.v(Tensor(kv))).data
    for q in (q1, q2):
        np.testing.assert_allclose(attention(q, kv, block).data, np.broadcast_to(expected, (2, 3, 8)),
                                   atol=1e-14)


def test_attention_permutation_invariance():
    rng = np.random.default_rng(8)
    block = Attention(6, rng)
    q = rng.normal(size=(1, 4, 6))
    kv = rng.normal(size=(1, 5, 6))
    perm = rng.permutation(5)
    a = attention(q, kv, block).data
    b = attention(q, kv[:, perm], block).data
    assert np.max(np.abs(a - b)) < 1e-12


def test_attention_two_token_hand_expansion():
    rng = np.random.default_rng(9)
    block = Attention(4, rng)
    q_in = rng.normal(size=(1, 1, 4))
    kv_in = rng.normal(size=(1, 2, 4))

    def proj(layer, x):
        out = x @ layer.weight.data.T
        return out if layer.bias is None else out + layer.bias.data

    q = proj(block.q, q_in[0, 0])
    k0, k1 = proj(block.k, kv_in[0, 0]), proj(block.k, kv_in[0, 1])
    v0, v1 = proj(block.v, kv_in[0, 0]), proj(block.v, kv_in[0, 1])
    s0, s1 = q @ k0 / 2.0, q @ k1 / 2.0
    w0 = 1.0 / (1.0 + np.exp(s1 - s0))
    mixed = w0 * v0 + (1.0 - w0) * v1
    expected = proj(block.out, mixed)
    np.testing.assert_allclose(attention(q_in, kv_in, block).data[0, 0], expected, atol=1e-13)


@pytest.mark.parametrize("heads", [1, 2])
def test_attention_gradient(heads):
    rng = np.random.default_rng(10)
    block = Attention(4, rng, kv_dim=3, heads=heads)
    q = rng.normal(size=(2, 3, 4))
    kv = rng.normal(size=(2, 2, 3))
    w = rng.normal(size=(2, 3, 4))
    assert finite_diff_check(lambda t: (attention(t, kv, block) * w).sum(), q) < 1e-4
    assert finite_diff_check(lambda t: (attention(q, t, block) * w).sum(), kv) < 1e-4


def test_attention_dimension_checks():
    block = Attention(4, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        attention(np.ones((1, 2, 3)), np.ones((1, 2, 4)), block)
    with pytest.raises(ValueError):
        Attention(6, np.random.default_rng(0), heads=4)


def test_timestep_embedding():
    e = timestep_embedding(0, 8)
    np.testing.assert_array_equal(e[:4], 0.0)
    np.testing.assert_array_equal(e[4:], 1.0)
    table = timestep_embedding(np.arange(501), 64)
    np.testing.assert_array_equal(table, timestep_embedding(np.arange(501), 64))
    sq = (table ** 2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2 * table @ table.T
    np.fill_diagonal(d2, np.inf)
    assert d2.min() > 0
    with pytest.raises(ValueError):
        timestep_embedding(3, 7)


def test_init_params_bounds_and_moments():
    bound = np.sqrt(6.0 / (30 + 70))
    p = init_params((100_000,), 30, 70, np.random.default_rng(11))
    assert p.requires_grad
    assert np.all(np.abs(p.data) <= bound)
    assert abs(p.data.var() / (bound ** 2 / 3) - 1.0) < 0.05
    q = init_params((100_000,), 30, 70, np.random.default_rng(11))
    np.testing.assert_array_equal(p.data, q.data)
    assert np.all(Linear(3, 4, np.random.default_rng(0)).bias.data == 0)


def test_adam_zero_gradient_is_identity():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    state = AdamState()
    for _ in range(3):
        adam_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert state.step == 3


def test_adam_constant_gradient_step_size():
    p = {"w": Tensor(np.array([0.0, 0.0]), requires_grad=True)}
    state = AdamState(lr=1e-3)
    prev = p["w"].data.copy()
    for _ in range(2000):
        prev = p["w"].data.copy()
        adam_step(p, {"w": np.array([0.3, -5.0])}, state)
    np.testing.assert_allclose(p["w"].data - prev, [-1e-3, 1e-3], rtol=1e-6)


def test_adam_quadratic_bowl():
    x = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    opt = Adam([("x", x)], lr=1e-2)
    for _ in range(5000):
        with GradientTape() as tape:
            loss = (x * x).sum()
        tape.backward(loss)
        opt.step()
        opt.zero_grad()
    assert np.linalg.norm(x.data) < 1e-3


def test_adam_rejects_non_finite_without_touching_params():
    p = {"a": Tensor(np.ones(2), requires_grad=True), "b": Tensor(np.ones(2), requires_grad=True)}
    state = AdamState()
    with pytest.raises(NonFiniteError):
        adam_step(p, {"a": np.ones(2), "b": np.array([np.nan, 0.0])}, state)
    np.testing.assert_array_equal(p["a"].data, 1.0)
    assert state.step == 0


def test_adam_state_round_trip():
    rng = np.random.default_rng(12)
    layer = Linear(3, 2, rng)
    opt = Adam(layer.named_parameters(), lr=1e-2)
    for _ in range(3):
        opt.step({p: rng.normal(size=p.shape) for p in layer.parameters()})
    clone = Linear(3, 2, rng)
    clone.load_state_dict(layer.state_dict())
    opt2 = Adam(clone.named_parameters(), lr=1e-2)
    opt2.load_state_dict(opt.state_dict(), opt.state.step)
    g = {name: rng.normal(size=p.shape) for name, p in layer.named_parameters()}
    opt.step({p: g[n] for n, p in layer.named_parameters()})
    opt2.step({p: g[n] for n, p in clone.named_parameters()})
    for (_, a), (_, b) in zip(layer.named_parameters(), clone.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data)
