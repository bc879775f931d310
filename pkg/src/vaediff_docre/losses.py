"""Training objective of the DocRE model.

Every relation score ``f_r`` is contested pairwise against the NA score
``f_eta`` (the last logit column).  The pairwise moving-threshold loss, the
entropy penalty on those binary contests and a supervised contrastive term
over pair features are combined by :func:`docre_loss`.

Labels are multi-hot arrays of shape ``(N, |R|)``; an all-zero row is an NA
pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import Tensor
from .errors import ContractError, ShapeError, ValidationError

_MASK = -1e30


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    lam: float = 0.1
    use_entropy: bool = True

    def validate(self) -> None:
        if not self.tau > 0:
            raise ValidationError(f"temperature must be positive, got {self.tau}", key="loss.tau")
        if self.lam < 0:
            raise ValidationError(f"contrastive weight must be >= 0, got {self.lam}", key="loss.lam")


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def pairwise_prob(f_r: float, f_na: float) -> tuple[float, float]:
    """``(P^r, P^NA)`` of the binary contest between a relation and NA."""
    p = _sigmoid(f_r - f_na)
    return p, 1.0 - p


def _margins(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    if labels.ndim == 1:
        labels = labels.reshape(1, -1)
    if logits.shape[-1] != labels.shape[-1] + 1 or logits.shape[0] != labels.shape[0]:
        raise ShapeError("pairwise margins", logits.shape, labels.shape)
    R = labels.shape[1]
    return logits[:, :R] - logits[:, R:], labels


def pmt_loss(logits, labels) -> Tensor:
    """Pairwise moving-threshold loss, summed over pairs.

    Positives pay ``softplus(f_eta - f_r)``, negatives ``softplus(f_r - f_eta)``.
    """
    d, y = _margins(logits, labels)
    return E.tsum(E.softplus(-d) * Tensor(y) + E.softplus(d) * Tensor(1.0 - y))


def binary_entropy_from_margin(d: Tensor) -> Tensor:
    """Entropy of ``(sigmoid(d), 1 - sigmoid(d))`` without forming logs of probabilities."""
    p = E.sigmoid(d)
    return p * E.softplus(-d) + (1.0 - p) * E.softplus(d)


def entropy_min(logits, labels, gamma1=None, gamma2=None) -> Tensor:
    """Entropy penalty on the pairwise contests, summed over pairs.

    ``gamma1``/``gamma2`` default to ``max(1, |P|)`` and ``max(1, |N|)`` per pair.
    """
    d, y = _margins(logits, labels)
    n_pos = y.sum(axis=1, keepdims=True)
    g1 = np.maximum(1.0, n_pos) if gamma1 is None else np.broadcast_to(np.asarray(gamma1, float), n_pos.shape)
    g2 = np.maximum(1.0, y.shape[1] - n_pos) if gamma2 is None else np.broadcast_to(np.asarray(gamma2, float), n_pos.shape)
    if np.any(g1 < 1) or np.any(g2 < 1):
        raise ContractError("entropy weights must be >= 1")
    weight = y / g1 + (1.0 - y) / g2
    return E.tsum(binary_entropy_from_margin(d) * Tensor(weight))


def scl_loss(features, labels, tau: float = 0.1) -> Tensor:
    """Supervised contrastive loss; pairs sharing any positive relation are positives.

    Features are L2-normalized first.  Anchors without positives contribute 0
    and are excluded from the mean.
    """
    x = features if isinstance(features, Tensor) else Tensor(features)
    y = np.asarray(labels, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ContractError(f"contrastive loss needs a batch of at least 2, got {n}")
    if y.shape[0] != n:
        raise ShapeError("scl_loss", x.shape, y.shape)
    shared = (y @ y.T) > 0
    np.fill_diagonal(shared, False)
    anchors = np.flatnonzero(shared.any(axis=1))
    if anchors.size == 0:
        return Tensor(0.0)
    xn = E.l2_normalize(x, axis=-1)
    sim = E.matmul(xn[anchors], xn.transpose()) * (1.0 / tau)
    not_self = np.ones((anchors.size, n), dtype=bool)
    not_self[np.arange(anchors.size), anchors] = False
    pos = shared[anchors]
    denom = E.logsumexp(sim + Tensor(np.where(not_self, 0.0, _MASK)), axis=1)
    numer = E.logsumexp(sim + Tensor(np.where(pos, 0.0, _MASK)), axis=1)
    log_count = Tensor(np.log(pos.sum(axis=1)))
    return E.mean(denom - numer + log_count)


def docre_loss(logits, features, labels, config: LossConfig = LossConfig(), scl_rows=None) -> Tensor:
    """Summed PMT (plus entropy) over all rows, plus ``lam`` times SCL.

    ``scl_rows`` limits the contrastive term to a prefix of the batch, which
    keeps generated rows appended after the real ones out of it.
    """
    total = pmt_loss(logits, labels)
    if config.use_entropy:
        total = total + entropy_min(logits, labels)
    if config.lam > 0:
        rows = features.shape[0] if scl_rows is None else scl_rows
        if rows >= 2:
            y = np.asarray(labels)[:rows]
            feats = features if rows == features.shape[0] else features[:rows]
            total = total + config.lam * scl_loss(feats, y, config.tau)
    return total
