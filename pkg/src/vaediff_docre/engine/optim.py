"""AdamW with bias correction and decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ContractError, ShapeError
from .tensor import Tensor


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamWState":
        state = cls(**hyper)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamWState) -> None:
    """Update ``params`` in place and advance ``state`` by one step.

    Weight decay is applied to the parameter directly (``p -= lr * wd * p``),
    never through the moment estimates. A ``None`` gradient counts as zero.
    """
    if state.lr <= 0:
        raise ContractError(f"learning rate must be positive, got {state.lr}")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("adamw_step", (len(params),), (len(grads),), (len(state.m),))
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ShapeError("adamw_step", p.data.shape, g.shape)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class AdamW:
    """Optimizer object wrapping :func:`adamw_step` for a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.state = AdamWState.for_params(
            self.params, lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state)
