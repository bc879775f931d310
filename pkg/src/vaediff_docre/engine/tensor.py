"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor`. When grad mode is
on and at least one input requires a gradient, the result is stamped with a
monotonically increasing ``tape_id`` and keeps a closure computing the
vector-Jacobian product. :class:`Tape` collects the nodes reachable from a
loss and replays them in exact reverse recording order.
"""

from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, DomainError, ShapeError

_node_ids = itertools.count(1)
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        self._token = _grad_enabled.set(False)
        return self

    def __exit__(self, *exc):
        _grad_enabled.reset(self._token)
        return False


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape_id", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out.tape_id = next(_node_ids)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out.tape_id = None
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class TapeNode:
    op: str
    input_ids: tuple[int | None, ...]
    output_id: int
    tensor: Tensor = field(repr=False)


class Tape:
    """Recorded operations reachable from an output, in recording order."""

    def __init__(self, nodes: list[TapeNode]):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def trace(cls, output: Tensor) -> "Tape":
        seen: dict[int, Tensor] = {}
        stack = [output]
        while stack:
            t = stack.pop()
            if t._backward is None or id(t) in seen:
                continue
            seen[id(t)] = t
            stack.extend(t._parents)
        ordered = sorted(seen.values(), key=lambda t: t.tape_id)
        nodes = [
            TapeNode(t.op or "?", tuple(p.tape_id for p in t._parents), t.tape_id, t)
            for t in ordered
        ]
        return cls(nodes)

    def run(self, output: Tensor, seed: np.ndarray) -> None:
        """Propagate ``seed`` (dL/d output) back to every leaf."""
        if output._backward is None:
            if output.requires_grad:
                _accumulate(output, seed)
            return
        pending: dict[int, np.ndarray] = {id(output): seed}
        for node in reversed(self.nodes):
            t = node.tensor
            g = pending.pop(id(t), None)
            if g is None:
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    _accumulate(parent, pg)
                else:
                    key = id(parent)
                    prev = pending.get(key)
                    pending[key] = pg if prev is None else prev + pg


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    if g.shape != leaf.data.shape:
        g = unbroadcast(g, leaf.data.shape)
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=np.float64)
    else:
        leaf.grad = leaf.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    Gradients add into existing ``.grad`` arrays, so call ``zero_grad`` on the
    parameters between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not on the tape (no input requires grad)")
    Tape.trace(loss).run(loss, np.ones_like(loss.data))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("elementwise_mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), bw, "elementwise_mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("div: division by zero")
    out = ad / bd

    def bw(g):
        return (
            unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _wrap(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    p = float(exponent)
    ad = a.data
    if p != int(p) and np.any(ad < 0):
        raise DomainError("power: fractional exponent of a negative value")
    return _result(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),), "power")


def sqrt(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp overflow for very negative x yields 1 / inf = 0, which is the right limit
    out = np.empty_like(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        np.exp(-x, out=out)
    out += 1.0
    return np.reciprocal(out, out=out)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def softplus(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    return _result(_softplus(ad), (a,), lambda g: (g * _sigmoid(ad),), "softplus")


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = _wrap(a)
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)
    return _result(out, (a,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def silu(a) -> Tensor:
    a = _wrap(a)
    return mul(a, sigmoid(a))


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` (a constant mask) holds, else ``b``."""
    a, b = _wrap(a), _wrap(b)
    cond = np.asarray(cond, dtype=bool)
    shape = _broadcast_shape("where", a, b)
    try:
        np.broadcast_shapes(cond.shape, shape)
    except ValueError:
        raise ShapeError("where", cond.shape, shape) from None
    sa, sb = a.shape, b.shape

    def bw(g):
        return (unbroadcast(np.where(cond, g, 0.0), sa), unbroadcast(np.where(cond, 0.0, g), sb))

    return _result(np.where(cond, a.data, b.data), (a, b), bw, "where")


# ---------------------------------------------------------------------------
# Linear algebra and shape manipulation
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), bw, "matmul")


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return _result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_wrap(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeError("stack", *shapes)
    ax = axis % (ts[0].ndim + 1)
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts], axis=ax)


def getitem(a, index) -> Tensor:
    """Copying slice; supports basic slicing and integer-array indexing."""
    a = _wrap(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    out = np.array(a.data[index], dtype=np.float64)
    src = a.shape

    def bw(g):
        full = np.zeros(src)
        np.add.at(full, index, g)
        return (full,)

    return _result(out, (a,), bw, "slice")


def embedding_lookup(table, indices) -> Tensor:
    """Rows of a 2-D ``table`` selected by an integer array of any shape."""
    table = _wrap(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding_lookup", table.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError(
            f"embedding_lookup: index out of range [0, {table.shape[0]}) (got {idx.min()}..{idx.max()})"
        )
    src = table.shape

    def bw(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return _result(table.data[idx], (table,), bw, "embedding_lookup")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand(g: np.ndarray, axes: tuple[int, ...], keepdims: bool, shape) -> np.ndarray:
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _result(np.asarray(out, dtype=np.float64), (a,), lambda g: (_expand(g, axes, keepdims, src),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    count = max(int(np.prod([src[ax] for ax in axes])), 1)
    out = a.data.sum(axis=axes, keepdims=keepdims) / count
    return _result(
        np.asarray(out, dtype=np.float64), (a,), lambda g: (_expand(g, axes, keepdims, src) / count,), "mean"
    )


def mse(a, b) -> Tensor:
    """Mean of squared differences over all elements."""
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    diff = a.data - b.data
    n = max(diff.size, 1)

    def bw(g):
        d = 2.0 * diff * g / n
        return (d if a.requires_grad else None, -d if b.requires_grad else None)

    return _result(np.asarray(np.mean(diff * diff)), (a, b), bw, "mse")


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    ad = a.data
    m = np.max(ad, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(ad - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s
    ax = axis % ad.ndim

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (g * soft,)

    return _result(out if keepdims else np.squeeze(out, axis=ax), (a,), bw, "logsumexp")


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    ad = a.data
    e = np.exp(ad - np.max(ad, axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    ad = a.data
    shifted = ad - np.max(ad, axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def _normalize_backward(gx_hat: np.ndarray, x_hat: np.ndarray, inv_std: np.ndarray, axis: int) -> np.ndarray:
    n = x_hat.shape[axis]
    s1 = gx_hat.sum(axis=axis, keepdims=True)
    s2 = (gx_hat * x_hat).sum(axis=axis, keepdims=True)
    return inv_std * (gx_hat - s1 / n - x_hat * s2 / n)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (xd - mu) * inv_std
    gd = gain.data

    def bw(g):
        return (
            _normalize_backward(g * gd, x_hat, inv_std, -1) if x.requires_grad else None,
            unbroadcast(g * x_hat, (d,)),
            unbroadcast(g, (d,)),
        )

    return _result(x_hat * gd + bias.data, (x, gain, bias), bw, "layer_norm")


def batch_norm(
    x,
    gain,
    bias,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over axis 0 of an (N, C) input.

    ``mode="train"`` normalizes with batch statistics and updates the running
    arrays in place; ``mode="eval"`` uses the stored statistics, which makes
    the output an affine function of ``x``.
    """
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError("batch_norm", x.shape, gain.shape, bias.shape)
    xd, gd = x.data, gain.data
    c = x.shape[1]
    if mode == "train":
        n = xd.shape[0]
        mu = xd.mean(axis=0, keepdims=True)
        var = xd.var(axis=0, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (xd - mu) * inv_std
        unbiased = var[0] * n / (n - 1) if n > 1 else var[0]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu[0]
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def bw(g):
            return (
                _normalize_backward(g * gd, x_hat, inv_std, 0) if x.requires_grad else None,
                (g * x_hat).sum(axis=0),
                g.sum(axis=0),
            )

    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(running_var + eps)
        x_hat = (xd - running_mean) * inv_std

        def bw(g):
            return (g * gd * inv_std, (g * x_hat).sum(axis=0), g.sum(axis=0))

    else:
        raise ContractError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    assert x_hat.shape[1] == c
    return _result(x_hat * gd + bias.data, (x, gain, bias), bw, "batch_norm")


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = _wrap(x)
    norm = sqrt(tsum(x * x, axis=axis, keepdims=True) + eps)
    return x / norm
