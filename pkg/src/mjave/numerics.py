"""Dense tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that records its parents and a
closure computing the vector-Jacobian product.  :func:`backward` walks the
recorded graph once in reverse topological order.  :func:`grad_check` is the
independent central-difference oracle used throughout the test suite.

Broadcasting follows numpy, restricted in practice to the cases the model
needs: a leading batch dimension against shared weights, and row/column
vectors against matrices.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LOG_FLOOR = 1e-12


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericalError(ArithmeticError):
    """An operation produced or received non-finite values."""


class Tensor:
    """A numpy array plus the bookkeeping reverse-mode differentiation needs."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return swapaxes(self, -1, -2)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    A 2-D right operand (a shared weight matrix) is the common case and its
    gradient is accumulated with a single reshaped GEMM.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul batch dimensions disagree: {a.shape} x {b.shape}") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def expand_dims(a: Tensor, axis: int) -> Tensor:
    return _make(np.expand_dims(a.data, axis), (a,), lambda g: (g.reshape(a.shape),))


def index(a: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing, e.g. ``index(H, (slice(None), 0))``."""
    out = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make(np.array(out), (a,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range for table of {table.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _make(table.data[ids], (table,), bw)


def pick(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select ``a[..., idx[...]]`` along the last axis (one entry per row)."""
    idx = np.asarray(idx, dtype=np.int64)
    sel = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _make(sel, (a,), bw)


# ---------------------------------------------------------------------------
# reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def masked_max(a: Tensor, mask: np.ndarray, axis: int) -> Tensor:
    """Maximum along ``axis`` over positions where ``mask`` is true.

    Ties route the gradient to the first maximal position.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not mask.any(axis=axis).all():
        raise ValueError("masked_max: a slice has no unmasked position")
    filled = np.where(mask, a.data, -np.inf)
    arg = np.argmax(filled, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# nonlinearities


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    """Elementwise logistic function; never returns exactly 0 for finite input.

    Saturated outputs are clipped to the smallest positive normal below and
    to the largest float under 1 above, keeping the open-interval contract.
    """
    y = _stable_sigmoid(a.data)
    y = np.clip(y, np.finfo(y.dtype).tiny, np.nextafter(y.dtype.type(1), y.dtype.type(0)))

    def bw(g):
        return (g * y * (1.0 - y),)

    return _make(y, (a,), bw)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log with the argument floored at ``floor`` (zero gradient below)."""
    x = np.maximum(a.data, floor)
    live = a.data >= floor

    def bw(g):
        return (np.where(live, g / x, 0.0).astype(a.dtype),)

    return _make(np.log(x), (a,), bw)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    live = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * live,))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU, smooth everywhere (keeps finite differences honest)."""
    x = a.data
    c = math.sqrt(2.0 / math.pi)
    x2 = x * x
    inner = c * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * dy,)

    return _make(y, (a,), bw)


def masked_softmax(scores: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, with masked positions fixed at exactly 0.

    ``mask`` broadcasts against ``scores``; true marks a live position.
    A row with no live position is an error rather than a silent uniform.
    """
    x = scores.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("masked_softmax: fully masked row")
        x = np.where(mask, x, -np.inf)
    shift = x.max(axis=-1, keepdims=True)
    e = np.exp(x - shift)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (scores,), bw)


def softmax(scores: Tensor) -> Tensor:
    return masked_softmax(scores, None)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply elementwise gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        if gain.requires_grad:
            gg = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
        return gx, gg, gb

    return _make(out, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# differentiation


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor] | None = None) -> dict[str, np.ndarray]:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Returns gradients keyed by name for ``params`` (or for every named leaf
    found when ``params`` is None).  Parameters the loss does not depend on
    receive zero gradients.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericalError("loss is not finite")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        for node in reversed(_topological(loss)):
            g = grads.pop(id(node), None)
            if node._backward is None:
                leaves[id(node)] = node
                node.grad = g if node.grad is None or g is None else node.grad + g
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    if params is None:
        named = {t.name: t for t in leaves.values() if t.name is not None}
    elif isinstance(params, Mapping):
        named = dict(params)
    else:
        named = {(t.name or str(i)): t for i, t in enumerate(params)}
    out = {}
    for name, t in named.items():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        out[name] = t.grad
    return out


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    epsilon: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between :func:`backward` and central differences.

    ``f`` recomputes the scalar loss from the current contents of ``params``
    (it is called repeatedly while single coordinates are nudged in place).
    The relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``
    so that coordinates with vanishing gradient are compared absolutely.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    for t in params.values():
        t.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericalError("f returned a non-finite value")
    analytic = {k: v.copy() for k, v in backward(loss, params).items()}

    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(f().data)
            flat[i] = orig - epsilon
            down = float(f().data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericalError(f"f is not finite near {name}[{i}]")
            numeric = (up - down) / (2 * epsilon)
            a = float(a_flat[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    for t in params.values():
        t.zero_grad()
    return worst
