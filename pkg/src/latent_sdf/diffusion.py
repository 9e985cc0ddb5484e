"""Latent DDPM with a clean-sample (x0) predicting transformer denoiser.

Generation draws ``z_T ~ N(0, I)`` and repeatedly predicts the clean latent,
forms the Gaussian posterior mean of ``z_{t-1}`` given ``(z_t, z0_hat)`` and adds
``sigma_t * noise`` (except on the final step).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, concat, no_tape
from .modulation import PointEncoder
from .nn import Attention, LayerNorm, Linear, MLP, Module, timestep_embedding

DROPOUT_P = 0.8


@dataclass
class DiffusionSchedule:
    """Linear-beta schedule; arrays are indexed by timestep with index 0 meaning "clean"."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_var: np.ndarray
    sigmas: np.ndarray

    def check_t(self, t) -> np.ndarray:
        t_arr = np.asarray(t)
        if not np.issubdtype(t_arr.dtype, np.integer):
            raise TypeError("timesteps must be integers")
        if np.any(t_arr < 1) or np.any(t_arr > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}")
        return t_arr


def make_schedule(T: int = 500, beta_1: float = 1e-4, beta_T: float = 0.02) -> DiffusionSchedule:
    if T < 2:
        raise ValueError("need at least two timesteps")
    if not 0.0 < beta_1 < beta_T < 1.0:
        raise ValueError("need 0 < beta_1 < beta_T < 1")
    betas = np.concatenate([[0.0], np.linspace(beta_1, beta_T, T)])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if alpha_bars[T] >= 0.01:
        raise ValueError(f"schedule ends at alpha_bar_T={alpha_bars[T]:.4f}; it must fall below 0.01")
    post = np.zeros(T + 1)
    post[1:] = (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * betas[1:]
    return DiffusionSchedule(T, betas, alphas, alpha_bars, post, np.sqrt(post))


def q_sample(z0, t, eps, schedule: DiffusionSchedule):
    """Closed-form forward draw ``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``.

    ``z0`` and ``eps`` are ``(D,)`` or ``(B, D)`` (Tensors keep the tape);
    ``t`` is an int or ``(B,)`` integer array.
    """
    t = schedule.check_t(t)
    ab = schedule.alpha_bars[t]
    a, b = np.sqrt(ab), np.sqrt(1.0 - ab)
    if np.ndim(t):
        a, b = a[:, None], b[:, None]
    if isinstance(z0, Tensor):
        return z0 * a + as_tensor(eps) * b
    return a * np.asarray(z0) + b * np.asarray(eps)


def posterior_coefficients(t, schedule: DiffusionSchedule) -> tuple:
    """Weights ``(c_zt, c_z0)`` of the posterior mean ``c_zt * z_t + c_z0 * z0``."""
    t = schedule.check_t(t)
    ab, ab_prev = schedule.alpha_bars[t], schedule.alpha_bars[t - 1]
    c_zt = np.sqrt(schedule.alphas[t]) * (1.0 - ab_prev) / (1.0 - ab)
    c_z0 = np.sqrt(ab_prev) * schedule.betas[t] / (1.0 - ab)
    return c_zt, c_z0


def posterior_step(z0_hat: np.ndarray, z_t: np.ndarray, t: int, schedule: DiffusionSchedule,
                   rng=None, noise: np.ndarray | None = None) -> np.ndarray:
    """Draw ``z_{t-1}`` from the posterior given the predicted clean latent.

    At ``t == 1`` the mean is returned without noise.  ``noise`` overrides the
    draw from ``rng`` (useful for deterministic tests).
    """
    t = int(schedule.check_t(t))
    c_zt, c_z0 = posterior_coefficients(t, schedule)
    mean = c_zt * np.asarray(z_t) + c_z0 * np.asarray(z0_hat)
    if t == 1:
        return mean
    if noise is None:
        noise = _normal(rng, mean.shape)
    return mean + schedule.sigmas[t] * noise


def _normal(rng, shape) -> np.ndarray:
    """Standard normal draw from one generator or from one generator per row."""
    if isinstance(rng, (list, tuple)):
        return np.stack([g.standard_normal(shape[1:]) for g in rng])
    return rng.standard_normal(shape)


@dataclass
class DenoiserConfig:
    latent_dim: int = 64
    model_dim: int = 128
    tokens: int = 4
    blocks: int = 6
    heads: int = 1
    time_dim: int = 64
    ff_mult: int = 2
    conditional: bool = False
    cond_dim: int = 128
    cond_mode: str = "cross_attention"  # or "concat"
    cond_point_widths: tuple = (64, 128)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        if "cond_point_widths" in d:
            d["cond_point_widths"] = tuple(d["cond_point_widths"])
        return cls(**d)


class DenoiserBlock(Module):
    """Pre-norm residual block: self-attention, optional cross-attention, feed-forward."""

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator, cross: bool):
        d = cfg.model_dim
        self.norm_self = LayerNorm(d)
        self.self_attn = Attention(d, rng, heads=cfg.heads)
        self.cross = cross
        if cross:
            self.norm_cross = LayerNorm(d)
            self.cross_attn = Attention(d, rng, kv_dim=cfg.cond_dim, heads=cfg.heads)
        self.norm_ff = LayerNorm(d)
        self.ff = MLP([d, cfg.ff_mult * d, d], rng, activation="gelu")

    def forward(self, h: Tensor, cond: Tensor | None) -> Tensor:
        x = self.norm_self(h)
        h = h + self.self_attn(x, x)
        if self.cross:
            h = h + self.cross_attn(self.norm_cross(h), cond)
        return h + self.ff(self.norm_ff(h))


class Denoiser(Module):
    """Predicts the clean latent from ``(z_t, t)`` and an optional shape feature.

    ``concat(z_t, time embedding)`` is projected to a short token sequence that
    runs through the residual blocks; the final tokens are flattened and
    projected back to the latent size.  Conditional models also own the
    partial-cloud encoder that produces the shape feature.
    """

    def __init__(self, config: DenoiserConfig | None = None, seed: int = 0):
        self.config = cfg = config or DenoiserConfig()
        rng = np.random.default_rng(seed)
        in_dim = cfg.latent_dim + cfg.time_dim
        use_cross = cfg.conditional and cfg.cond_mode == "cross_attention"
        if cfg.conditional and cfg.cond_mode == "concat":
            in_dim += cfg.cond_dim
        elif cfg.conditional and cfg.cond_mode != "cross_attention":
            raise ValueError(f"unknown conditioning mode {cfg.cond_mode!r}")
        self.inp = Linear(in_dim, cfg.tokens * cfg.model_dim, rng)
        self.blocks = [DenoiserBlock(cfg, rng, use_cross) for _ in range(cfg.blocks)]
        self.norm_out = LayerNorm(cfg.model_dim)
        self.out = Linear(cfg.tokens * cfg.model_dim, cfg.latent_dim, rng)
        if cfg.conditional:
            self.cond_encoder = PointEncoder(cfg.cond_dim, cfg.cond_point_widths, rng)

    def zero_mask(self, batch: int | None = None) -> np.ndarray:
        shape = (self.config.cond_dim,) if batch is None else (batch, self.config.cond_dim)
        return np.zeros(shape)

    def encode_condition(self, cloud) -> Tensor:
        if not self.config.conditional:
            raise ValueError("unconditional model has no condition encoder")
        return self.cond_encoder(cloud)

    def forward(self, z_t, t, condition=None) -> Tensor:
        return denoise(self, z_t, t, condition)


def denoise(model: Denoiser, z_t, t, condition=None) -> Tensor:
    """Predicted clean latent.  ``condition=None`` means the zero-mask feature.

    Inputs may be single (``(D,)`` with an int ``t``) or batched
    (``(B, D)`` with ``(B,)`` timesteps).
    """
    cfg = model.config
    z_t = as_tensor(z_t)
    single = z_t.ndim == 1
    if single:
        z_t = z_t.reshape(1, -1)
    if z_t.shape[-1] != cfg.latent_dim:
        raise ValueError(f"expected latents of size {cfg.latent_dim}, got {z_t.shape}")
    b = z_t.shape[0]
    t_arr = np.broadcast_to(np.asarray(t), (b,))
    parts = [z_t, Tensor(timestep_embedding(t_arr, cfg.time_dim))]
    cond = None
    if cfg.conditional:
        cond = as_tensor(model.zero_mask(b) if condition is None else condition)
        if cond.ndim == 1:
            cond = cond.reshape(1, -1)
        if cond.shape != (b, cfg.cond_dim):
            raise ValueError(f"condition must be ({b}, {cfg.cond_dim}), got {cond.shape}")
        if cfg.cond_mode == "concat":
            parts.append(cond)
            cond = None
        else:
            cond = cond.reshape(b, 1, cfg.cond_dim)
    h = model.inp(concat(parts, axis=-1)).reshape(b, cfg.tokens, cfg.model_dim)
    for block in model.blocks:
        h = block(h, cond)
    out = model.out(model.norm_out(h).reshape(b, cfg.tokens * cfg.model_dim))
    return out.reshape(-1) if single else out


def diffusion_loss(model: Denoiser, z0, t, eps, condition=None,
                   schedule: DiffusionSchedule | None = None) -> Tensor:
    """Mean squared error between the predicted and true clean latents."""
    schedule = schedule or make_schedule()
    z0 = as_tensor(z0)
    z_t = q_sample(z0, t, eps, schedule)
    pred = denoise(model, z_t, t, condition)
    return (pred - z0).square().mean()


def condition_dropout(condition: np.ndarray, p: float = DROPOUT_P,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Replace the condition with the all-zeros feature with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("dropout probability must lie in [0, 1]")
    if rng is None:
        raise ValueError("condition_dropout needs an explicit rng")
    if rng.random() < p:
        return np.zeros_like(np.asarray(condition, dtype=np.float64))
    return condition


def drop_conditions(conditions: Tensor, p: float, rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    """Row-wise :func:`condition_dropout` for a ``(B, F)`` batch; returns the kept-row mask too."""
    keep = rng.random(conditions.shape[0]) >= p
    # adding +0.0 turns the -0.0 produced by negative * 0 into +0.0
    return conditions * keep[:, None].astype(np.float64) + 0.0, keep


def sample(model: Denoiser, schedule: DiffusionSchedule, n: int = 1, condition=None,
           omega: float = 0.0, rng=None, force_guidance: bool = False) -> np.ndarray:
    """Ancestral sampling of ``n`` latents, shape ``(n, D)``.

    ``condition`` is one feature ``(F,)`` shared by all samples or ``(n, F)``.
    With ``omega != 0`` (or ``force_guidance``) each step also predicts with the
    zero-mask and blends ``(omega + 1) * conditional - omega * unconditional``.
    ``rng`` is a Generator or a list of ``n`` Generators, one per sample.
    """
    cfg = model.config
    if rng is None:
        raise ValueError("sample needs an explicit rng")
    if isinstance(rng, (list, tuple)) and len(rng) != n:
        raise ValueError("need one generator per sample")
    if n == 0:
        return np.zeros((0, cfg.latent_dim))
    cond = None
    if condition is not None:
        if not cfg.conditional:
            raise ValueError("unconditional model cannot take a condition")
        cond = np.asarray(condition.data if isinstance(condition, Tensor) else condition,
                          dtype=np.float64)
        cond = np.broadcast_to(cond, (n, cfg.cond_dim)).copy()
    guided = force_guidance or omega != 0.0
    if guided and not cfg.conditional:
        raise ValueError("guidance needs a conditional model")
    uncond = model.zero_mask(n) if cfg.conditional else None

    z = _normal(rng, (n, cfg.latent_dim))
    with no_tape():
        for t in range(schedule.T, 0, -1):
            t_vec = np.full(n, t)
            pred = denoise(model, z, t_vec, cond).data
            if guided:
                pred_u = denoise(model, z, t_vec, uncond).data
                pred = (omega + 1.0) * pred - omega * pred_u
            z = posterior_step(pred, z, t, schedule, rng)
    return z
