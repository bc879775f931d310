"""Entity-pair VAE: posterior encoder, reparameterized sampling and decoder.

Both the encoder trunk and the decoder alternate affine layers with
LeakyReLU and contain a single BatchNorm, so ``mode`` ("train"/"eval")
decides whether batch statistics or the running estimates are used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import BatchNorm1d, Linear, Module, Tensor
from .errors import ContractError, ShapeError

LOG_SIGMA_MIN = -8.0
LOG_SIGMA_MAX = 8.0
_LOG_2PI = math.log(2 * math.pi)


@dataclass
class Posterior:
    mu: Tensor
    log_sigma: Tensor
    z: Tensor | None = None


class _Stack(Module):
    """FF -> LeakyReLU -> FF -> BatchNorm -> LeakyReLU -> FF."""

    def __init__(self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.norm = BatchNorm1d(hidden)
        self.fc3 = Linear(hidden, d_out, rng)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        h = E.leaky_relu(self.fc1(x))
        h = self.fc2(h)
        h = self.norm(h, mode)
        return self.fc3(E.leaky_relu(h))


class EPVAE(Module):
    def __init__(self, pair_dim: int, latent_dim: int = 16, hidden: int = 64,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.pair_dim, self.latent_dim, self.hidden = pair_dim, latent_dim, hidden
        self.encoder = _Stack(pair_dim, hidden, hidden, rng)
        self.mu_head = Linear(hidden, latent_dim, rng)
        self.log_sigma_head = Linear(hidden, latent_dim, rng)
        self.decoder = _Stack(latent_dim, hidden, pair_dim, rng)

    def encode(self, p: Tensor, mode: str = "train") -> Posterior:
        return vae_encode(p, self, mode)

    def decode(self, z: Tensor, mode: str = "train") -> Tensor:
        return vae_decode(z, self, mode)


def _as_batch(x) -> tuple[Tensor, bool]:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return (x.reshape(1, -1), True) if x.ndim == 1 else (x, False)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values; gradient is zero where clipping happened."""
    inside = (x.data >= lo) & (x.data <= hi)
    return E.where(inside, x, np.clip(x.data, lo, hi))


def vae_encode(p, vae: EPVAE, mode: str = "train") -> Posterior:
    x, single = _as_batch(p)
    if x.shape[-1] != vae.pair_dim:
        raise ShapeError("vae_encode", x.shape, (vae.pair_dim,))
    h = vae.encoder(x, mode)
    mu = vae.mu_head(h)
    log_sigma = clamp(vae.log_sigma_head(h), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    if single:
        mu, log_sigma = mu.reshape(-1), log_sigma.reshape(-1)
    return Posterior(mu, log_sigma)


def vae_decode(z, vae: EPVAE, mode: str = "train") -> Tensor:
    x, single = _as_batch(z)
    if x.shape[-1] != vae.latent_dim:
        raise ShapeError("vae_decode", x.shape, (vae.latent_dim,))
    out = vae.decoder(x, mode)
    return out.reshape(-1) if single else out


def reparameterize(mu: Tensor, log_sigma: Tensor, rng: np.random.Generator | None = None,
                   eps: np.ndarray | None = None, sigma_zero: bool = False) -> Tensor:
    """``mu + exp(log_sigma) * eps``; ``eps`` is a constant so no gradient reaches it.

    ``eps`` and ``sigma_zero`` are hooks for exact tests.
    """
    if mu.shape != log_sigma.shape:
        raise ShapeError("reparameterize", mu.shape, log_sigma.shape)
    if sigma_zero:
        return mu + 0.0 * log_sigma
    if eps is None:
        if rng is None:
            raise ContractError("reparameterize needs an rng or an explicit eps")
        eps = rng.standard_normal(mu.shape)
    return mu + E.exp(log_sigma) * Tensor(np.asarray(eps, dtype=np.float64))


def gaussian_kl_to_standard(mu, log_sigma) -> Tensor:
    """``KL(N(mu, sigma^2) || N(0, I))`` summed over every coordinate."""
    mu = mu if isinstance(mu, Tensor) else Tensor(mu)
    log_sigma = log_sigma if isinstance(log_sigma, Tensor) else Tensor(log_sigma)
    if mu.shape != log_sigma.shape:
        raise ShapeError("gaussian_kl_to_standard", mu.shape, log_sigma.shape)
    return 0.5 * E.tsum(mu * mu + E.exp(2.0 * log_sigma) - 1.0 - 2.0 * log_sigma)


def gaussian_entropy(log_sigma) -> Tensor:
    """Differential entropy of a diagonal Gaussian, summed over coordinates."""
    log_sigma = log_sigma if isinstance(log_sigma, Tensor) else Tensor(log_sigma)
    return E.tsum(0.5 * (1.0 + _LOG_2PI) + log_sigma)


def reconstruction_error(p: Tensor, p_rec: Tensor) -> Tensor:
    """Squared error summed over coordinates and rows."""
    diff = p - p_rec
    return E.tsum(diff * diff)


def vae_warmup_loss(p, vae: EPVAE, rng: np.random.Generator | None = None, eps=None,
                    mode: str = "train") -> Tensor:
    """Negative ELBO with a standard normal prior, averaged over the batch."""
    x, _ = _as_batch(p)
    post = vae_encode(x, vae, mode)
    z = reparameterize(post.mu, post.log_sigma, rng, eps)
    rec = vae_decode(z, vae, mode)
    n = x.shape[0]
    return (reconstruction_error(x, rec) + gaussian_kl_to_standard(post.mu, post.log_sigma)) * (1.0 / n)
