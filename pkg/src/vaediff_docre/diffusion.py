"""Diffusion prior over EP-VAE latents.

A cosine noise schedule, closed-form forward corruption, a conditional
pre-LayerNorm transformer that predicts the clean latent directly, and the
ancestral sampler with self-conditioning and classifier-free guidance.

The denoiser sees one latent as a sequence of four tokens:
``[latent(z_t), time(t) + class, self-condition or null, class or null]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import engine as E
from .engine import LayerNorm, Linear, Module, MultiHeadSelfAttention, Tensor, no_grad, sinusoidal_embedding
from .errors import ContractError, ShapeError

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by step ``t`` in ``0..T``; index 0 is the clean state."""

    betas: np.ndarray
    alpha_bars: np.ndarray
    one_minus_alpha_bars: np.ndarray
    posterior_variances: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        """Build a schedule from ``beta_1..beta_T``."""
        b = np.asarray(betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1 or np.any(b < 0) or np.any(b > MAX_BETA):
            raise ContractError("betas must be a non-empty vector in [0, 0.999]")
        betas = np.concatenate([[0.0], b])
        alpha_bars = np.cumprod(1.0 - betas)
        one_minus = 1.0 - alpha_bars
        # keep 1 - abar_1 == beta_1 exactly so the final step returns the estimate untouched
        one_minus[1] = betas[1]
        post = np.zeros_like(betas)
        with np.errstate(divide="ignore", invalid="ignore"):
            post[1:] = np.where(one_minus[1:] > 0, one_minus[:-1] / one_minus[1:] * betas[1:], 0.0)
        for arr in (betas, alpha_bars, one_minus, post):
            arr.setflags(write=False)
        return cls(betas, alpha_bars, one_minus, post)

    def check_step(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ContractError(f"diffusion step must lie in [1, {self.T}]")
        return t


def cosine_schedule(T: int, s: float = COSINE_OFFSET) -> NoiseSchedule:
    if T < 2:
        raise ContractError(f"cosine schedule needs T >= 2, got {T}")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos((steps / T + s) / (1 + s) * math.pi / 2) ** 2
    abar = f / f[0]
    betas = np.minimum(1.0 - abar[1:] / abar[:-1], MAX_BETA)
    return NoiseSchedule.from_betas(betas)


def q_sample(z0, t, schedule: NoiseSchedule, rng: np.random.Generator | None = None, eps=None):
    """Corrupt ``z0`` to step ``t``; returns ``(z_t, eps)``.

    ``z0`` may be a Tensor (gradients flow) or an array; ``t`` is a scalar or
    one step per row.
    """
    t = schedule.check_step(t)
    z0 = z0 if isinstance(z0, Tensor) else Tensor(z0)
    if eps is None:
        eps = rng.standard_normal(z0.shape)
    eps = np.asarray(eps, dtype=np.float64)
    abar = schedule.alpha_bars[t]
    if abar.ndim == 1:
        abar = abar[:, None]
    one_minus = 1.0 - abar
    return z0 * np.sqrt(abar) + Tensor(np.sqrt(one_minus) * eps), eps


def ddpm_posterior_mean(z_t, z0_hat, t, schedule: NoiseSchedule) -> np.ndarray:
    """Mean of ``q(z_{t-1} | z_t, z0_hat)``."""
    t = schedule.check_step(t)
    beta = schedule.betas[t]
    abar_prev = schedule.alpha_bars[t - 1]
    denom = schedule.one_minus_alpha_bars[t]
    c0 = np.sqrt(abar_prev) * beta / denom
    ct = np.sqrt(1.0 - beta) * schedule.one_minus_alpha_bars[t - 1] / denom
    if np.ndim(c0) == 1:
        c0, ct = c0[:, None], ct[:, None]
    return c0 * np.asarray(z0_hat) + ct * np.asarray(z_t)


def cfg_combine(cond_est, uncond_est, w: float, extrapolate: bool = False):
    """Blend guided estimates.

    Default is the interpolation ``(1 - w) cond + w uncond``;
    ``extrapolate=True`` gives the usual ``(1 + w) cond - w uncond``.
    """
    if extrapolate:
        return (1.0 + w) * cond_est - w * uncond_est
    if not 0.0 <= w <= 1.0:
        raise ContractError(f"guidance weight must lie in [0, 1], got {w}")
    return (1.0 - w) * cond_est + w * uncond_est


# ---------------------------------------------------------------------------
# Denoiser
# ---------------------------------------------------------------------------


class _Block(Module):
    def __init__(self, d: int, heads: int, ff_mult: int, rng: np.random.Generator):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadSelfAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.ff1 = Linear(d, ff_mult * d, rng)
        self.ff2 = Linear(ff_mult * d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))[0]
        return x + self.ff2(E.silu(self.ff1(self.ln2(x))))


class Denoiser(Module):
    def __init__(self, latent_dim: int, num_relations: int, width: int = 64, layers: int = 2,
                 heads: int = 4, rng: np.random.Generator | None = None, ff_mult: int = 2):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.latent_dim, self.num_relations, self.width = latent_dim, num_relations, width
        self.latent_in = Linear(latent_dim, width, rng)
        self.self_cond_in = Linear(latent_dim, width, rng)
        self.time_fc1 = Linear(width, width, rng)
        self.time_fc2 = Linear(width, width, rng)
        self.label_table = Tensor(rng.normal(scale=0.5, size=(num_relations, width)), requires_grad=True)
        self.null_class = Tensor(rng.normal(scale=0.5, size=(width,)), requires_grad=True)
        self.null_self = Tensor(rng.normal(scale=0.5, size=(width,)), requires_grad=True)
        self.blocks = [_Block(width, heads, ff_mult, rng) for _ in range(layers)]
        self.ln_out = LayerNorm(width)
        self.out = Linear(width, latent_dim, rng)

    def class_embedding(self, labels, keep=None) -> Tensor:
        """Label-embedding sums for a batch; rows without labels (or dropped) get the null embedding."""
        y = np.asarray(labels, dtype=np.float64)
        if y.ndim != 2 or y.shape[1] != self.num_relations:
            raise ContractError(f"label vectors must have length {self.num_relations}, got shape {y.shape}")
        has = y.sum(axis=1) > 0
        if keep is not None:
            has = has & np.asarray(keep, dtype=bool)
        summed = E.matmul(Tensor(y), self.label_table)
        return E.where(has[:, None], summed, self.null_class)

    def __call__(self, z_t, t, self_cond=None, labels=None, self_keep=None, class_keep=None) -> Tensor:
        """Estimate ``z0`` for a batch.

        ``self_cond``/``labels`` of ``None`` mean absent for every row; the
        ``*_keep`` masks switch individual rows to the null embeddings.
        """
        z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        if z_t.ndim != 2 or z_t.shape[1] != self.latent_dim:
            raise ShapeError("denoiser", z_t.shape, (self.latent_dim,))
        n = z_t.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        if np.any(t < 1):
            raise ContractError("diffusion step must be >= 1")
        if labels is None:
            labels = np.zeros((n, self.num_relations))
        cls = self.class_embedding(labels, class_keep)
        time = Tensor(sinusoidal_embedding(t, self.width))
        time = self.time_fc2(E.silu(self.time_fc1(time))) + cls
        if self_cond is None:
            sc = E.stack([self.null_self] * n, axis=0) if n else Tensor(np.zeros((0, self.width)))
        else:
            sc_in = self_cond if isinstance(self_cond, Tensor) else Tensor(self_cond)
            sc = self.self_cond_in(sc_in)
            if self_keep is not None:
                sc = E.where(np.asarray(self_keep, dtype=bool)[:, None], sc, self.null_self)
        x = E.stack([self.latent_in(z_t), time, sc, cls], axis=1)
        for block in self.blocks:
            x = block(x)
        return self.out(self.ln_out(x[:, 0]))


def label_embedding_sum(labels, denoiser: Denoiser) -> Tensor:
    """Sum of label-table rows for one multi-hot vector; all-zero maps to the null embedding."""
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim != 1:
        raise ContractError("label_embedding_sum takes one multi-hot vector")
    return denoiser.class_embedding(y[None]).reshape(-1)


DenoiseFn = Callable[..., Tensor]


def diffusion_loss(z0, labels, denoiser: DenoiseFn, schedule: NoiseSchedule, rng: np.random.Generator,
                   p_drop: float = 0.1, first_estimate=None, reduce_dims: str = "mean") -> Tensor:
    """Z0-prediction loss with random condition dropping and self-conditioning.

    ``first_estimate`` replaces the detached first pass (test hook).
    ``reduce_dims="sum"`` sums over latent coordinates instead of averaging.
    """
    z0 = z0 if isinstance(z0, Tensor) else Tensor(z0)
    n = z0.shape[0]
    if n < 1:
        raise ContractError("diffusion_loss needs at least one latent")
    t = rng.integers(1, schedule.T + 1, size=n)
    z_t, _ = q_sample(z0, t, schedule, rng)
    class_keep = rng.random(n) >= p_drop
    self_keep = rng.random(n) >= p_drop
    if first_estimate is None:
        with no_grad():
            first = denoiser(z_t.detach(), t, None, labels, None, class_keep).detach()
    else:
        first = Tensor(np.asarray(first_estimate.data if isinstance(first_estimate, Tensor) else first_estimate))
    est = denoiser(z_t, t, first, labels, self_keep, class_keep)
    diff = est - z0
    sq = E.tsum(diff * diff) * (1.0 / n)
    return sq if reduce_dims == "sum" else sq * (1.0 / z0.shape[1])


def sample(labels, schedule: NoiseSchedule, denoiser: Denoiser, w: float = 0.1,
           rng: np.random.Generator | None = None, extrapolate: bool = False) -> np.ndarray:
    """Draw one latent per label row by ancestral sampling.

    Conditional and unconditional estimates share the running self-condition,
    which is absent at ``t = T``.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim == 1:
        return sample(y[None], schedule, denoiser, w, rng, extrapolate)[0]
    n = y.shape[0]
    if not extrapolate and not 0.0 <= w <= 1.0:
        raise ContractError(f"guidance weight must lie in [0, 1], got {w}")
    d = denoiser.latent_dim
    z = rng.standard_normal((n, d))
    both = np.concatenate([y, np.zeros_like(y)])
    prev = None
    with no_grad():
        for t in range(schedule.T, 0, -1):
            zz = np.concatenate([z, z])
            sc = None if prev is None else np.concatenate([prev, prev])
            est = denoiser(Tensor(zz), t, sc, both).data
            combined = cfg_combine(est[:n], est[n:], w, extrapolate)
            mean = ddpm_posterior_mean(z, combined, t, schedule)
            if t > 1:
                z = mean + math.sqrt(schedule.posterior_variances[t]) * rng.standard_normal((n, d))
            else:
                z = mean
            prev = combined
    return z
