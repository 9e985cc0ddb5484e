"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations record themselves on the innermost active :class:`GradientTape`
whenever at least one input requires a gradient.  Outside a tape every op is
a plain numpy computation, which is what inference code relies on.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with GradientTape() as tape:
    ...     loss = (x * x).sum()
    >>> tape.backward(loss)[x]
    array([2., 4.])
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradientTape",
    "ShapeError",
    "NonFiniteError",
    "backward",
    "elementwise",
    "matmul",
    "reduce",
    "softmax",
    "concat",
    "stack",
    "finite_diff_check",
    "no_tape",
]


class ShapeError(ValueError):
    """Incompatible operand shapes."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where a finite value is required."""


_state = threading.local()


def _tapes() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def _active_tape() -> "GradientTape | None":
    stack = _tapes()
    return stack[-1] if stack else None


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    # a sum is non-finite whenever any term is (or the total overflows)
    if not np.isfinite(np.add.reduce(arr, axis=None)) and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")
    return arr


class Tensor:
    """An n-dimensional float64 array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_produced", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = _check_finite(arr, "Tensor construction")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._produced = False  # True when created by a recorded op

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    @property
    def is_leaf(self) -> bool:
        return not self._produced

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # Tensors are identified by object identity (they key gradient maps).
    __hash__ = object.__hash__

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", other, self)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", other, self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", other, self)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", other, self)

    def __neg__(self):
        return elementwise("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def sqrt(self):
        return elementwise("sqrt", self)

    def abs(self):
        return elementwise("abs", self)

    def square(self):
        return elementwise("square", self)

    def relu(self):
        return elementwise("relu", self)

    def gelu(self):
        return elementwise("gelu", self)

    def tanh(self):
        return elementwise("tanh", self)

    def softplus(self):
        return elementwise("softplus", self)

    def sigmoid(self):
        return elementwise("sigmoid", self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return _transpose(self, tuple(axes))

    def backward(self, tape: "GradientTape | None" = None) -> dict:
        return backward(self, tape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out, parents, vjp):
        self.out = out
        self.parents = parents
        self.vjp = vjp


class GradientTape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so the list is topologically
    sorted by construction.  :meth:`backward` consumes the record.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradientTape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tapes()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)

    def record(self, out: Tensor, parents: Sequence[Tensor], vjp: Callable) -> None:
        self.nodes.append(_Node(out, tuple(parents), vjp))

    def reset(self) -> None:
        self.nodes = []

    def backward(self, loss: Tensor) -> dict:
        return backward(loss, self)


class no_tape:
    """Context manager that suspends recording (like ``torch.no_grad``)."""

    def __enter__(self):
        self._saved = list(_tapes())
        _tapes().clear()
        return self

    def __exit__(self, *exc):
        _tapes().extend(self._saved)


def backward(loss: Tensor, tape: GradientTape | None = None) -> dict:
    """Propagate d(loss)/d(.) through ``tape`` and return ``{leaf: grad}``.

    Leaves that require gradients get their ``.grad`` attribute set (gradients
    accumulate across calls until the caller clears them).  The tape is reset.
    """
    if tape is None:
        tape = _active_tape()
        if tape is None:
            raise RuntimeError("backward() needs a GradientTape")
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad and not loss._produced:
        leaves[id(loss)] = loss

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if not parent._produced:
                leaves[key] = parent

    result = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        _check_finite(g, "backward")
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    tape.reset()
    return result


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, what: str) -> Tensor:
    _check_finite(data, what)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._produced = False
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._produced = True
        tape.record(out, parents, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a} with {b}") from exc


_GELU_C = np.sqrt(2.0 / np.pi)

_UNARY = {"neg", "exp", "log", "sqrt", "relu", "gelu", "tanh", "abs", "square",
          "softplus", "sigmoid"}
_BINARY = {"add", "sub", "mul", "div"}


def elementwise(op: str, a, b=None) -> Tensor:
    """Apply an elementwise operation; binary ops broadcast from the trailing axis."""
    if op in _BINARY:
        if b is None:
            raise TypeError(f"{op} needs two operands")
        return _binary(op, as_tensor(a), as_tensor(b))
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"{op} takes one operand")
        return _unary(op, as_tensor(a))
    raise ValueError(f"unknown elementwise op {op!r}")


def _binary(op: str, a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)
    x, y = a.data, b.data
    sa, sb = a.shape, b.shape
    if op == "add":
        out = x + y

        def vjp(g):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)
    elif op == "sub":
        out = x - y

        def vjp(g):
            return _unbroadcast(g, sa), _unbroadcast(-g, sb)
    elif op == "mul":
        out = x * y

        def vjp(g):
            return _unbroadcast(g * y, sa), _unbroadcast(g * x, sb)
    else:
        if np.any(y == 0):
            raise ZeroDivisionError("division by a tensor containing zeros")
        out = x / y

        def vjp(g):
            return _unbroadcast(g / y, sa), _unbroadcast(-g * out / y, sb)
    return _make(out, (a, b), vjp, op)


def _unary(op: str, a: Tensor) -> Tensor:
    x = a.data
    if op == "neg":
        out = -x

        def vjp(g):
            return (-g,)
    elif op == "exp":
        out = np.exp(x)

        def vjp(g):
            return (g * out,)
    elif op == "log":
        if np.any(x <= 0):
            raise ValueError("log of a non-positive value")
        out = np.log(x)

        def vjp(g):
            return (g / x,)
    elif op == "sqrt":
        if np.any(x < 0):
            raise ValueError("sqrt of a negative value")
        out = np.sqrt(x)

        def vjp(g):
            return (g * 0.5 / out,)
    elif op == "relu":
        mask = x > 0
        out = np.maximum(x, 0.0)

        def vjp(g):
            return (g * mask,)
    elif op == "gelu":
        # tanh approximation of x * Phi(x)
        inner = _GELU_C * (x + 0.044715 * x * x * x)
        th = np.tanh(inner)
        out = 0.5 * x * (1.0 + th)

        def vjp(g):
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
            return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)
    elif op == "tanh":
        out = np.tanh(x)

        def vjp(g):
            return (g * (1.0 - out * out),)
    elif op == "abs":
        out = np.abs(x)

        def vjp(g):
            return (g * np.sign(x),)
    elif op == "square":
        out = x * x

        def vjp(g):
            return (2.0 * g * x,)
    elif op == "softplus":
        out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

        def vjp(g):
            return (g * _sigmoid(x),)
    else:  # sigmoid
        out = _sigmoid(x)

        def vjp(g):
            return (g * out * (1.0 - out),)
    return _make(out, (a,), vjp, op)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy's batched semantics over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])
    x, y = a.data, b.data
    out = x @ y

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape)
        if b.requires_grad:
            if x.ndim > 2 and y.ndim == 2:
                # fold the batch into rows: one GEMM instead of a batched one
                gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
        return ga, gb

    return _make(out, (a, b), vjp, "matmul")


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        norm.append(ax % ndim)
    return tuple(sorted(norm))


def reduce(op: str, a, axis=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axis`` (all axes when None)."""
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    x = a.data
    shape = x.shape
    if op == "sum":
        out = x.sum(axis=axes, keepdims=keepdims)

        def vjp(g):
            if not keepdims and axes is not None:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape).copy(),)
    elif op == "mean":
        count = x.size if axes is None else int(np.prod([shape[i] for i in axes]))
        out = x.mean(axis=axes, keepdims=keepdims)

        def vjp(g):
            if not keepdims and axes is not None:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g / count, shape).copy(),)
    elif op == "max":
        if x.size == 0:
            raise ShapeError("max of an empty tensor")
        out, vjp = _max(x, axes, keepdims)
    else:
        raise ValueError(f"unknown reduction {op!r}")
    return _make(np.asarray(out, dtype=np.float64), (a,), vjp, op)


def _max(x: np.ndarray, axes, keepdims):
    # route the gradient to the first (lowest flat index) maximiser
    shape = x.shape
    if axes is None:
        flat = int(np.argmax(x))
        out = x.reshape(-1)[flat]
        if keepdims:
            out = np.reshape(out, (1,) * x.ndim)

        def vjp(g):
            grad = np.zeros(x.size)
            grad[flat] = np.asarray(g).reshape(-1)[0]
            return (grad.reshape(shape),)
        return out, vjp
    keep = [i for i in range(x.ndim) if i not in axes]
    moved = np.transpose(x, keep + list(axes))
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if keepdims:
        out = np.expand_dims(out, axes)

    def vjp(g):
        g = np.asarray(g)
        if keepdims:
            g = np.squeeze(g, axis=axes)
        grad = np.zeros_like(flat)
        np.put_along_axis(grad, idx[..., None], g[..., None], axis=-1)
        grad = grad.reshape(moved.shape)
        return (np.transpose(grad, np.argsort(keep + list(axes))),)
    return out, vjp


def softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    a = as_tensor(a)
    _norm_axis(axis, a.ndim)
    x = a.data
    shifted = np.exp(x - x.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), vjp, "softmax")


def _reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def vjp(g):
        return (g.reshape(src),)

    return _make(out, (a,), vjp, "reshape")


def _transpose(a: Tensor, axes) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _make(out, (a,), vjp, "transpose")


def _getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        raise TypeError("index with numpy arrays, not Tensors")
    out = np.array(a.data[index], dtype=np.float64)
    shape = a.shape

    def vjp(g):
        grad = np.zeros(shape)
        np.add.at(grad, index, g)
        return (grad,)

    return _make(out, (a,), vjp, "getitem")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, ts, vjp, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, ts, vjp, "stack")


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Largest relative gap between the tape gradient of ``f`` and central differences.

    The gap per coordinate is ``|analytic - numeric| / (|analytic| + 1e-8)``.
    """
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with GradientTape() as tape:
        loss = f(leaf)
    analytic = tape.backward(loss).get(leaf, np.zeros_like(x0))

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    probe = x0.copy()
    pflat = probe.reshape(-1)
    with no_tape():
        for i in range(x0.size):
            orig = pflat[i]
            pflat[i] = orig + eps
            hi = f(Tensor(probe.copy())).item()
            pflat[i] = orig - eps
            lo = f(Tensor(probe.copy())).item()
            pflat[i] = orig
            flat[i] = (hi - lo) / (2.0 * eps)
    gap = np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)
    return float(gap.max()) if gap.size else 0.0


def parameters_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor],
                     eps: float = 1e-5, max_coords: int | None = None,
                     rng: np.random.Generator | None = None) -> float:
    """Finite-difference check of ``loss_fn`` with respect to model parameters.

    ``loss_fn`` must be deterministic.  When ``max_coords`` is given, a random
    subset of coordinates per parameter is probed.  Returns the same relative
    gap measure as :func:`finite_diff_check`.
    """
    params = list(params)
    with GradientTape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss)
    worst = 0.0
    with no_tape():
        for p in params:
            analytic = grads.get(p, np.zeros_like(p.data)).reshape(-1)
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                hi = loss_fn().item()
                flat[i] = orig - eps
                lo = loss_fn().item()
                flat[i] = orig
                num = (hi - lo) / (2.0 * eps)
                worst = max(worst, abs(analytic[i] - num) / (abs(analytic[i]) + 1e-8))
    for p in params:
        p.grad = None
    return worst
