"""Parameter containers and the small set of layers the models are built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from ..errors import ShapeError, TensorNameError
from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter registry.

    Attributes that are ``Tensor`` objects with ``requires_grad`` are
    parameters; attributes that are ``Module`` objects (or lists of them) are
    children; numpy arrays registered through ``register_buffer`` are
    persistent non-trainable state.
    """

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in self._buffers.items():
            yield prefix + key, value
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            out[name] = buf.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise TensorNameError(missing, unexpected)
        for name, value in state.items():
            target = params[name].data if name in params else buffers[name]
            if target.shape != np.shape(value):
                raise ShapeError(f"load_state_dict[{name}]", target.shape, np.shape(value))
            target[...] = value

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        self.weight = _uniform(rng, (d_in, d_out), bound)
        self.bias = _uniform(rng, (d_out,), bound) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError("linear", x.shape, self.weight.shape)
        if x.ndim != 2:
            # one GEMM over all leading axes instead of numpy's batched loop
            lead = x.shape[:-1]
            return self(x.reshape(-1, self.d_in)).reshape(lead + (self.d_out,))
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class BatchNorm1d(Module):
    def __init__(self, d: int, momentum: float = 0.1):
        super().__init__()
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)
        self.momentum = momentum
        self.register_buffer("running_mean", np.zeros(d))
        self.register_buffer("running_var", np.ones(d))

    def __call__(self, x: Tensor, mode: str | None = None) -> Tensor:
        if mode is None:
            mode = "train" if self.training else "eval"
        return T.batch_norm(
            x, self.gain, self.bias, self._buffers["running_mean"], self._buffers["running_var"],
            mode=mode, momentum=self.momentum,
        )


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention over the second-to-last axis.

    Returns the output and the attention probabilities, shaped
    ``(..., heads, L, L)``.  An optional ``bias`` broadcastable to that shape
    is added to the scaled scores before the softmax.
    """

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if d_model % heads:
            raise ShapeError("attention", (d_model,), (heads,))
        self.heads = heads
        self.d_head = d_model // heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.o = Linear(d_model, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        *lead, length, _ = x.shape
        x = x.reshape(tuple(lead) + (length, self.heads, self.d_head))
        nd = x.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return x.transpose(axes)

    def __call__(self, x: Tensor, bias: Tensor | None = None) -> tuple[Tensor, Tensor]:
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        nd = k.ndim
        kt = k.transpose(tuple(range(nd - 2)) + (nd - 1, nd - 2))
        scores = T.matmul(q, kt) * (1.0 / math.sqrt(self.d_head))
        if bias is not None:
            scores = scores + bias
        probs = T.softmax(scores, axis=-1)
        ctx = T.matmul(probs, v)
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        ctx = ctx.transpose(axes)
        ctx = ctx.reshape(x.shape)
        return self.o(ctx), probs


def sinusoidal_embedding(positions: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Transformer sinusoidal features for integer positions, shape ``(len, dim)``."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    angles = positions * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb
