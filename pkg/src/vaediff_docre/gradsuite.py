"""Finite-difference sweep over every differentiable op and composite loss.

Each case draws a fresh small problem per instance and compares autodiff
gradients against central differences.  Stop-gradient paths (the diffusion
self-conditioning pass) are frozen so both sides see the same function.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import engine as E
from .corpus import Entity, SynthDocument
from .diffusion import Denoiser, cosine_schedule, diffusion_loss
from .encoder import DocREModel, EncoderConfig
from .engine import Tensor
from .epvae import EPVAE, gaussian_entropy, gaussian_kl_to_standard, reconstruction_error, reparameterize, \
    vae_decode, vae_encode, vae_warmup_loss
from .losses import LossConfig, docre_loss, entropy_min, pmt_loss, scl_loss
from .rng import derive_rng

# a case maps an rng to (scalar function, tensors to differentiate)
Case = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(scale * rng.normal(size=shape))


def _weighted(fn):
    """Turn a tensor-valued op into a scalar through a random weighting."""

    def case(rng):
        xs = fn.make(rng)
        w = rng.normal(size=fn.op(*xs).shape)
        return (lambda *a: E.tsum(fn.op(*a) * Tensor(w))), xs

    return case


@dataclass
class _Op:
    op: Callable
    make: Callable


def _unary(op, *shape, scale=1.0):
    return _weighted(_Op(op, lambda r: [_t(r, *shape, scale=scale)]))


def _binary(op, sa, sb):
    return _weighted(_Op(op, lambda r: [_t(r, *sa), _t(r, *sb)]))


def _labels(rng, n, R, density=0.4):
    y = (rng.random((n, R)) < density).astype(float)
    y[0, 0] = 1.0
    y[1] = 0.0
    y[1, 0] = 1.0  # rows 0 and 1 share a label so SCL has a positive
    return y


def _loss_case(which):
    def case(rng):
        y = _labels(rng, 5, 3)
        lt, ft = _t(rng, 5, 4), _t(rng, 5, 4)
        cfg = LossConfig(tau=0.5, lam=0.3)
        fns = {
            "pmt": lambda a, b: pmt_loss(a, y),
            "entropy": lambda a, b: entropy_min(a, y),
            "scl": lambda a, b: scl_loss(b, y, 0.5),
            "docre": lambda a, b: docre_loss(a, b, y, cfg),
        }
        return fns[which], [lt, ft]

    return case


def _batch_norm_case(mode):
    def case(rng):
        x, g, b = _t(rng, 5, 3), _t(rng, 3), _t(rng, 3)
        rm, rv = rng.normal(size=3), rng.random(3) + 0.5
        w = rng.normal(size=(5, 3))
        return (lambda x_, g_, b_: E.tsum(E.batch_norm(x_, g_, b_, rm.copy(), rv.copy(), mode)
                                          * Tensor(w))), [x, g, b]

    return case


def _attention_case(rng):
    attn = E.MultiHeadSelfAttention(4, 2, rng)
    x, bias = _t(rng, 5, 4), _t(rng, 2, 5, 5)
    w = rng.normal(size=(5, 4))
    return (lambda *_: E.tsum(attn(x, bias)[0] * Tensor(w))), [x, bias] + attn.parameters()


def _encoder_case(rng):
    tokens = (8, 1, 8, 5, 8, 2, 8, 6, 7, 8, 3, 8, 8, 1, 8)
    ents = (Entity(1, ((1, 2), (13, 14))), Entity(2, ((5, 6),)), Entity(3, ((10, 11),)))
    doc = SynthDocument("g", tokens, ents, ((0, 1, 0),))
    model = DocREModel(9, 2, EncoderConfig(4, 2, 4, max_offset=3), rng)
    y = doc.pair_labels(2)
    cfg = LossConfig(tau=0.5, lam=0.3)

    def f(*_):
        feats, logits = model.forward_batch([doc])
        return docre_loss(logits, feats, y, cfg)

    return f, model.parameters()


def _vae_warmup_case(rng):
    vae = EPVAE(4, 2, 5, rng)
    p = _t(rng, 6, 4)
    eps = rng.normal(size=(6, 2))
    return (lambda *_: vae_warmup_loss(p, vae, eps=eps, mode="train")), vae.parameters() + [p]


def _kl_case(rng):
    return (lambda a, b: gaussian_kl_to_standard(a, b)), [_t(rng, 3, 4), _t(rng, 3, 4)]


def _entropy_case(rng):
    return (lambda a: gaussian_entropy(a)), [_t(rng, 3, 4)]


def _diffusion_case(rng):
    den = Denoiser(2, 3, 4, 1, 2, rng)
    sch = cosine_schedule(6)
    z0 = _t(rng, 3, 2)
    y = (rng.random((3, 3)) < 0.5).astype(float)
    first = rng.normal(size=(3, 2))
    seed = int(rng.integers(1 << 30))

    def f(*_):
        return diffusion_loss(z0, y, den, sch, np.random.default_rng(seed), p_drop=0.3, first_estimate=first)

    return f, den.parameters() + [z0]


def _joint_case(rng):
    """Reconstruction, negative entropy and diffusion regression through one sampled latent."""
    vae = EPVAE(4, 2, 5, rng)
    den = Denoiser(2, 3, 4, 1, 2, rng)
    sch = cosine_schedule(6)
    x = _t(rng, 3, 4)
    y = (rng.random((3, 3)) < 0.5).astype(float)
    eps = rng.normal(size=(3, 2))
    first = rng.normal(size=(3, 2))
    seed = int(rng.integers(1 << 30))

    def f(*_):
        post = vae_encode(x, vae, "train")
        z = reparameterize(post.mu, post.log_sigma, eps=eps)
        rec = reconstruction_error(x, vae_decode(z, vae, "train")) * (1.0 / 3)
        ent = gaussian_entropy(post.log_sigma) * (-1.0 / 3)
        diff = diffusion_loss(z, y, den, sch, np.random.default_rng(seed), p_drop=0.3,
                              first_estimate=first, reduce_dims="sum")
        return rec + ent + diff

    return f, vae.parameters() + den.parameters()


def _stage3_case(rng):
    """Real and generated rows through one head; SCL over the real prefix only."""
    head = E.Linear(4, 3, rng)
    real, gen = _t(rng, 4, 4), Tensor(rng.normal(size=(3, 4)))
    y = _labels(rng, 7, 2)
    cfg = LossConfig(tau=0.5, lam=0.3)

    def f(*_):
        feats = E.concat([real, gen], axis=0)
        return docre_loss(head(feats), feats, y, cfg, scl_rows=4)

    return f, head.parameters() + [real]


CASES: dict[str, Case] = {
    "tanh": _unary(E.tanh, 3, 4),
    "sigmoid": _unary(E.sigmoid, 3, 4),
    "softplus": _unary(E.softplus, 3, 4),
    "exp": _unary(E.exp, 3, 4, scale=0.5),
    "log": _unary(lambda x: E.log(E.exp(x) + 0.1), 3, 4),
    "sqrt": _unary(lambda x: E.sqrt(x * x + 0.5), 3, 4),
    "power": _unary(lambda x: E.power(x, 3), 3, 4),
    "leaky_relu": _unary(lambda x: E.leaky_relu(x, 0.2), 3, 4),
    "silu": _unary(E.silu, 3, 4),
    "softmax": _unary(lambda x: E.softmax(x, axis=-1), 3, 4),
    "log_softmax": _unary(lambda x: E.log_softmax(x, axis=-1), 3, 4),
    "logsumexp": _unary(lambda x: E.logsumexp(x, axis=0), 3, 4),
    "l2_normalize": _unary(lambda x: E.l2_normalize(x, axis=-1), 3, 4),
    "sum": _unary(lambda x: E.tsum(x, axis=1), 3, 4),
    "mean": _unary(lambda x: E.mean(x, axis=0, keepdims=True), 3, 4),
    "reshape_transpose": _unary(lambda x: E.transpose(E.reshape(x, (4, 3)), (1, 0)), 3, 4),
    "getitem": _unary(lambda x: x[np.array([0, 2, 0])][:, 1:], 3, 4),
    "add": _binary(lambda a, b: a + b, (3, 4), (4,)),
    "sub": _binary(lambda a, b: a - b, (3, 4), (3, 1)),
    "mul": _binary(lambda a, b: a * b, (3, 4), (3, 4)),
    "div": _binary(lambda a, b: a / (E.exp(b) + 0.5), (2, 3), (2, 3)),
    "matmul": _binary(lambda a, b: a @ b, (2, 3, 4), (4, 2)),
    "concat": _binary(lambda a, b: E.concat([a, b], axis=1), (3, 2), (3, 4)),
    "stack": _binary(lambda a, b: E.stack([a, b], axis=1), (3, 2), (3, 2)),
    "mse": _binary(E.mse, (3, 4), (3, 4)),
    "where": _binary(lambda a, b: E.where(np.array([[True, False, True]]), a, b), (2, 3), (2, 3)),
    "embedding_lookup": _weighted(_Op(lambda t: E.embedding_lookup(t, np.array([[0, 2], [2, 1]])),
                                      lambda r: [_t(r, 3, 4)])),
    "layer_norm": _weighted(_Op(E.layer_norm, lambda r: [_t(r, 3, 4), _t(r, 4), _t(r, 4)])),
    "batch_norm_train": _batch_norm_case("train"),
    "batch_norm_eval": _batch_norm_case("eval"),
    "attention": _attention_case,
    "pmt_loss": _loss_case("pmt"),
    "entropy_min": _loss_case("entropy"),
    "scl_loss": _loss_case("scl"),
    "docre_loss": _loss_case("docre"),
    "encoder_docre_loss": _encoder_case,
    "vae_warmup_loss": _vae_warmup_case,
    "gaussian_kl": _kl_case,
    "gaussian_entropy": _entropy_case,
    "diffusion_loss": _diffusion_case,
    "vaediff_joint_loss": _joint_case,
    "augmented_docre_loss": _stage3_case,
}


@dataclass
class SuiteReport:
    instances: int
    worst: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0
    tol: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max(self.worst.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def to_dict(self) -> dict:
        return {"instances": self.instances, "tol": self.tol, "max_rel_error": self.max_rel_error,
                "passed": self.passed, "seconds": self.seconds, "cases": dict(sorted(self.worst.items()))}


def run_suite(instances: int = 20, seed: int = 0, names=None, eps: float = 1e-5, tol: float = 1e-4) -> SuiteReport:
    start = time.perf_counter()
    report = SuiteReport(instances, tol=tol)
    for name in names or sorted(CASES):
        worst = 0.0
        for i in range(instances):
            f, xs = CASES[name](derive_rng(seed, "gradcheck", name, i))
            worst = max(worst, E.finite_difference_check(f, xs, eps=eps, tol=tol).max_rel_error)
        report.worst[name] = worst
    report.seconds = time.perf_counter() - start
    return report
