"""Central finite-difference oracle for analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_coords: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def finite_difference_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f(*xs)`` with central differences.

    Each coordinate is perturbed in place by ``±eps``. The relative error of a
    coordinate is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``
    where ``floor = 1e-4 * max(1, max|numeric|)``, so coordinates whose true
    derivative is zero are judged on an absolute scale instead of blowing up.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = f(*xs)
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    numeric = []
    for t in xs:
        num = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(*xs).item()
            flat[i] = orig - eps
            fm = f(*xs).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * eps)
        numeric.append(num)

    for t, rg in zip(xs, saved):
        t.requires_grad = rg
        t.grad = None

    a = np.concatenate([g.ravel() for g in analytic]) if analytic else np.zeros(0)
    n = np.concatenate([g.ravel() for g in numeric]) if numeric else np.zeros(0)
    if a.size == 0:
        return GradCheckReport(0.0, 0.0, 0, tol)
    floor = 1e-4 * max(1.0, float(np.max(np.abs(n))))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    abs_err = np.abs(a - n)
    return GradCheckReport(float(np.max(abs_err / denom)), float(np.max(abs_err)), int(a.size), tol)
