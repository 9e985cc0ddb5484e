"""Layers, initialisation and the Adam optimiser on top of :mod:`latent_sdf.autodiff`."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .autodiff import NonFiniteError, ShapeError, Tensor, as_tensor, matmul, softmax

__all__ = [
    "Module",
    "Linear",
    "LayerNorm",
    "Attention",
    "MLP",
    "init_params",
    "linear_forward",
    "layer_norm",
    "attention",
    "timestep_embedding",
    "Adam",
    "AdamState",
    "adam_step",
]


def init_params(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> Tensor:
    """Glorot-uniform draw in ``±sqrt(6 / (fan_in + fan_out))``."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Minimal parameter container.

    Parameters are :class:`Tensor` attributes with ``requires_grad``;
    sub-modules are discovered through attributes and lists of modules.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        own = dict(self.named_parameters())
        for name, p in own.items():
            key = prefix + name
            if key not in state:
                raise KeyError(f"missing parameter {key}")
            arr = np.asarray(state[key], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{key}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = init_params((out_dim, in_dim), in_dim, out_dim, rng)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def forward(self, x) -> Tensor:
        return linear_forward(self, x)


def linear_forward(layer: Linear, x) -> Tensor:
    """``x @ W.T + b`` over the last axis of ``x``."""
    x = as_tensor(x)
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"expected last dim {layer.in_dim}, got {x.shape}")
    lead = x.shape[:-1]
    flat = x.reshape(-1, layer.in_dim) if x.ndim != 2 else x
    out = matmul(flat, layer.weight.T)
    if layer.bias is not None:
        out = out + layer.bias
    return out.reshape(lead + (layer.out_dim,)) if x.ndim != 2 else out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)

    def forward(self, x) -> Tensor:
        return layer_norm(x, self.gain, self.shift, self.eps)


def layer_norm(x, gain=None, shift=None, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] < 2:
        raise ShapeError("layer_norm needs at least two features")
    centred = x - x.mean(axis=-1, keepdims=True)
    var = centred.square().mean(axis=-1, keepdims=True)
    out = centred / (var + eps).sqrt()
    if gain is not None:
        out = out * gain
    if shift is not None:
        out = out + shift
    return out


class Attention(Module):
    """Scaled dot-product attention with learned Q/K/V and output projections."""

    def __init__(self, dim: int, rng: np.random.Generator, kv_dim: int | None = None, heads: int = 1):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        kv_dim = dim if kv_dim is None else kv_dim
        self.dim, self.kv_dim, self.heads = dim, kv_dim, heads
        self.q = Linear(dim, dim, rng)
        # a key bias only shifts each query's scores by a constant, which softmax ignores
        self.k = Linear(kv_dim, dim, rng, bias=False)
        self.v = Linear(kv_dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def forward(self, q_input, kv_input=None) -> Tensor:
        return attention(q_input, q_input if kv_input is None else kv_input, self)


def attention(q_input, kv_input, block: Attention) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V followed by the output projection.

    Inputs are ``(batch, tokens, features)``.  The caller adds the residual.
    """
    q_input, kv_input = as_tensor(q_input), as_tensor(kv_input)
    if q_input.shape[-1] != block.dim or kv_input.shape[-1] != block.kv_dim:
        raise ShapeError(
            f"attention expects features ({block.dim}, {block.kv_dim}), "
            f"got {q_input.shape} / {kv_input.shape}")
    b, nq, _ = q_input.shape
    nk = kv_input.shape[1]
    h, dk = block.heads, block.dim // block.heads
    q = block.q(q_input)
    k = block.k(kv_input)
    v = block.v(kv_input)
    if h > 1:
        q = q.reshape(b, nq, h, dk).swapaxes(1, 2)
        k = k.reshape(b, nk, h, dk).swapaxes(1, 2)
        v = v.reshape(b, nk, h, dk).swapaxes(1, 2)
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dk))
    mixed = matmul(softmax(scores, axis=-1), v)
    if h > 1:
        mixed = mixed.swapaxes(1, 2).reshape(b, nq, block.dim)
    return block.out(mixed)


class MLP(Module):
    """Stack of linear layers with an activation between them (none after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator, activation: str = "relu"):
        self.activation = activation
        self.layers = [Linear(i, o, rng) for i, o in zip(dims[:-1], dims[1:])]

    def forward(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = getattr(x, self.activation)()
        return x


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding; pair ``i`` is ``sin/cos(t * 10000**(-2i/dim))``.

    Accepts a scalar or an integer array and returns ``(dim,)`` or ``(n, dim)``.
    Sines fill the first half, cosines the second.
    """
    if dim % 2:
        raise ValueError("timestep embedding dimension must be even")
    t_arr = np.asarray(t, dtype=np.float64)
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    angles = t_arr[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


@dataclass
class AdamState:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Raises :class:`NonFiniteError` before touching anything if a gradient is
    not finite.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {params[name].shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}; step aborted")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        # in place, but with the same rounding as the textbook expressions
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        update = m / c1
        update *= state.lr
        update /= denom
        p.data -= update
    return state


class Adam:
    """Adam over a fixed set of named parameters."""

    def __init__(self, named_params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params: dict[str, Tensor] = dict(named_params)
        self.state = AdamState(lr=lr, betas=tuple(betas), eps=eps)

    def step(self, grads: dict[Tensor, np.ndarray] | None = None) -> None:
        """Update from a ``{tensor: grad}`` map (default: each parameter's ``.grad``)."""
        named = {}
        for name, p in self.params.items():
            g = grads.get(p) if grads is not None else p.grad
            if g is not None:
                named[name] = g
        adam_step(self.params, named, self.state)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            if name in self.state.m:
                out[f"m/{name}"] = self.state.m[name].copy()
                out[f"v/{name}"] = self.state.v[name].copy()
        return out

    def load_state_dict(self, arrays: dict[str, np.ndarray], step: int) -> None:
        self.state.step = step
        self.state.m = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("m/")}
        self.state.v = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("v/")}
