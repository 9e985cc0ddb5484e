import numpy as np
import pytest

from latent_sdf.autodiff import Tensor, parameters_check
from latent_sdf.diffusion import (Denoiser, DenoiserConfig, DiffusionSchedule, condition_dropout,
                                  denoise, diffusion_loss, drop_conditions, make_schedule,
                                  posterior_coefficients, posterior_step, q_sample, sample)

TINY = DenoiserConfig(latent_dim=4, model_dim=8, tokens=2, blocks=2, time_dim=6, ff_mult=2,
                      conditional=True, cond_dim=5, cond_point_widths=(6,))


def manual_schedule(betas):
    betas = np.concatenate([[0.0], betas])
    alphas = 1.0 - betas
    ab = np.cumprod(alphas)
    post = np.zeros_like(betas)
    post[1:] = (1.0 - ab[:-1]) / (1.0 - ab[1:]) * betas[1:]
    return DiffusionSchedule(len(betas) - 1, betas, alphas, ab, post, np.sqrt(post))


def test_schedule_defaults():
    s = make_schedule()
    assert s.T == 500
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.alpha_bars[1] == 1.0 - 1e-4
    assert s.alpha_bars[0] == 1.0
    assert s.alpha_bars[500] < 0.01
    np.testing.assert_allclose(s.sigmas[1:] ** 2,
                               (1 - s.alpha_bars[:-1]) / (1 - s.alpha_bars[1:]) * s.betas[1:])


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (10, 0.02, 1e-4), (10, 0.0, 0.5), (10, 1e-4, 1.0),
                                  (10, 1e-4, 2e-4)])
def test_schedule_rejects_bad_bounds(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_q_sample_examples():
    s = manual_schedule(np.array([0.75, 0.1]))
    assert s.alpha_bars[1] == 0.25
    np.testing.assert_allclose(q_sample(np.array([1.0, 0.0]), 1, np.array([0.0, 1.0]), s),
                               [0.5, np.sqrt(0.75)], atol=1e-15)
    d = make_schedule()
    z0 = np.array([0.3, -1.0])
    np.testing.assert_array_equal(q_sample(z0, 37, np.zeros(2), d), np.sqrt(d.alpha_bars[37]) * z0)
    with pytest.raises(ValueError):
        q_sample(z0, 0, np.zeros(2), d)
    with pytest.raises(ValueError):
        q_sample(z0, 501, np.zeros(2), d)


@pytest.mark.parametrize("t", [1, 100, 500])
def test_q_sample_monte_carlo(t):
    s = make_schedule()
    rng = np.random.default_rng(t)
    n = 10_000
    z0 = np.array([0.8, -0.4, 0.1])
    draws = q_sample(np.tile(z0, (n, 1)), np.full(n, t), rng.standard_normal((n, 3)), s)
    ab = s.alpha_bars[t]
    mean_se = np.sqrt((1 - ab) / n)
    assert np.all(np.abs(draws.mean(axis=0) - np.sqrt(ab) * z0) < 3 * mean_se)
    var = 1 - ab
    cov = np.cov(draws.T)
    var_se = var * np.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(np.diag(cov) - var) < 3 * var_se)
    off = cov[~np.eye(3, dtype=bool)]
    assert np.all(np.abs(off) < 3 * var / np.sqrt(n))


def test_posterior_final_step_is_deterministic():
    s = make_schedule()
    z0_hat, z_t = np.array([0.4, -0.2]), np.array([1.0, 0.5])
    a = posterior_step(z0_hat, z_t, 1, s, np.random.default_rng(0))
    b = posterior_step(z0_hat, z_t, 1, s, np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a, z0_hat, rtol=1e-12)  # abar_0 = 1 puts all weight on z0_hat


def test_posterior_coefficients_formula_and_limit():
    s = make_schedule()
    t = 250
    c_zt, c_z0 = posterior_coefficients(t, s)
    ab, ab_prev = s.alpha_bars[t], s.alpha_bars[t - 1]
    assert c_zt == np.sqrt(s.alphas[t]) * (1 - ab_prev) / (1 - ab)
    assert c_z0 == np.sqrt(ab_prev) * s.betas[t] / (1 - ab)
    # vanishing beta: the step leaves z_t untouched
    tiny = manual_schedule(np.array([0.5, 1e-12]))
    c_zt, c_z0 = posterior_coefficients(2, tiny)
    assert c_zt + c_z0 == pytest.approx(1.0, abs=1e-11)
    z = np.array([0.7, -0.3])
    np.testing.assert_allclose(posterior_step(z, z, 2, tiny, noise=np.zeros(2)), z, atol=1e-11)


def test_noise_free_chain_recovers_z0():
    s = make_schedule()
    z0 = np.array([0.5, -1.2, 0.3])
    z = np.random.default_rng(2).standard_normal(3) * 5.0
    for t in range(s.T, 0, -1):
        z = posterior_step(z0, z, t, s, noise=np.zeros(3))
    np.testing.assert_allclose(z, z0, atol=1e-12)


@pytest.fixture
def model():
    return Denoiser(TINY, seed=4)


def test_denoise_shapes_and_zero_mask(model):
    rng = np.random.default_rng(5)
    z = rng.standard_normal((3, 4))
    t = np.array([1, 7, 20])
    out = denoise(model, z, t)
    assert out.shape == (3, 4)
    np.testing.assert_array_equal(out.data, denoise(model, z, t, model.zero_mask(3)).data)
    assert denoise(model, z[0], 5).shape == (4,)
    with pytest.raises(ValueError):
        denoise(model, np.zeros((2, 3)), np.array([1, 2]))
    with pytest.raises(ValueError):
        denoise(model, z, t, np.zeros((3, 2)))


def test_concat_conditioning_mode():
    cfg = DenoiserConfig(**{**TINY.to_dict(), "cond_mode": "concat"})
    m = Denoiser(cfg, seed=1)
    z = np.random.default_rng(6).standard_normal((2, 4))
    c = np.random.default_rng(7).standard_normal((2, 5))
    assert denoise(m, z, np.array([3, 4]), c).shape == (2, 4)
    with pytest.raises(ValueError):
        Denoiser(DenoiserConfig(**{**TINY.to_dict(), "cond_mode": "film"}))


def test_diffusion_loss_examples(model):
    s = make_schedule()
    z0 = np.array([[0.5, -1.0, 2.0, 0.0]])
    zero = Denoiser(DenoiserConfig(**{**TINY.to_dict(), "conditional": False}), seed=0)
    zero.out.weight.data[:] = 0.0
    zero.out.bias.data[:] = 0.0
    loss = diffusion_loss(zero, z0, np.array([10]), np.zeros((1, 4)), None, s)
    assert loss.item() == pytest.approx((z0 ** 2).sum() / 4, abs=1e-15)


def test_conditional_loss_gradient(model):
    s = make_schedule(T=20, beta_1=1e-3, beta_T=0.4)
    rng = np.random.default_rng(8)
    z0 = rng.standard_normal((3, 4))
    eps = rng.standard_normal((3, 4))
    t = np.array([2, 9, 17])
    partial = rng.uniform(-1, 1, size=(3, 10, 3))

    def loss_fn():
        cond = model.encode_condition(partial) * Tensor(np.array([[1.0], [0.0], [1.0]]))
        return diffusion_loss(model, z0, t, eps, cond, s)

    assert parameters_check(loss_fn, model.parameters(), max_coords=12,
                            rng=np.random.default_rng(9)) < 1e-3


def test_condition_dropout():
    c = np.array([1.0, -2.0])
    rng = np.random.default_rng(10)
    assert condition_dropout(c, 0.0, rng) is c
    np.testing.assert_array_equal(condition_dropout(c, 1.0, rng), np.zeros(2))
    n = 100_000
    hits = sum(not condition_dropout(c, 0.8, rng).any() for _ in range(n))
    assert abs(hits / n - 0.8) < 3 * np.sqrt(0.8 * 0.2 / n)
    with pytest.raises(ValueError):
        condition_dropout(c, 1.5, rng)


def test_drop_conditions_zero_mask_is_exact():
    feats = Tensor(-np.abs(np.random.default_rng(11).standard_normal((50, 3))))
    out, keep = drop_conditions(feats, 0.5, np.random.default_rng(12))
    dropped = out.data[~keep]
    assert dropped.size and np.all(dropped == 0.0) and not np.signbit(dropped).any()
    np.testing.assert_array_equal(out.data[keep], feats.data[keep])


def test_sampling_determinism_and_guidance_degeneracy(model):
    s = make_schedule(T=30, beta_1=1e-3, beta_T=0.3)
    cond = np.random.default_rng(13).standard_normal(5)
    rngs = lambda: [np.random.default_rng([1, i]) for i in range(3)]  # noqa: E731
    a = sample(model, s, 3, cond, 0.0, rngs())
    b = sample(model, s, 3, cond, 0.0, rngs(), force_guidance=True)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, sample(model, s, 3, cond, 0.0, rngs()))
    guided = sample(model, s, 3, cond, 2.0, rngs())
    assert not np.array_equal(a, guided)
    assert sample(model, s, 0, cond, 0.0, []).shape == (0, 4)


def test_per_sample_streams_are_independent_of_batch(model):
    s = make_schedule(T=30, beta_1=1e-3, beta_T=0.3)
    both = sample(model, s, 2, None, 0.0, [np.random.default_rng([5, 0]), np.random.default_rng([5, 1])])
    second = sample(model, s, 1, None, 0.0, [np.random.default_rng([5, 1])])
    np.testing.assert_allclose(both[1], second[0], atol=1e-12)


def test_unconditional_model_rejects_conditions():
    m = Denoiser(DenoiserConfig(**{**TINY.to_dict(), "conditional": False}), seed=0)
    s = make_schedule(T=30, beta_1=1e-3, beta_T=0.3)
    with pytest.raises(ValueError):
        sample(m, s, 1, np.zeros(5), 0.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample(m, s, 1, None, 1.0, np.random.default_rng(0))
