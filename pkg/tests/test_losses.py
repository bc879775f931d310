import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vaediff_docre import engine as E
from vaediff_docre.engine import Tensor
from vaediff_docre.errors import ContractError, ShapeError, ValidationError
from vaediff_docre.losses import (
    LossConfig,
    docre_loss,
    entropy_min,
    pairwise_prob,
    pmt_loss,
    scl_loss,
)

LN2 = math.log(2)


def rng_for(name):
    return np.random.default_rng(zlib.crc32(name.encode()))


def random_batch(r, n=6, R=4, density=0.3):
    logits = r.normal(scale=2.0, size=(n, R + 1))
    labels = (r.random((n, R)) < density).astype(float)
    return logits, labels


# --- loop oracles ------------------------------------------------------------


def sig(x):
    return 1 / (1 + math.exp(-x))


def pmt_product_oracle(logits, labels):
    """-log of the product of winning-contest probabilities."""
    total = 0.0
    for f, y in zip(logits, labels):
        prod = 1.0
        for r, yr in enumerate(y):
            p = sig(f[r] - f[-1])
            prod *= p if yr else 1 - p
        total += -math.log(prod)
    return total


def entropy_oracle(logits, labels):
    total = 0.0
    for f, y in zip(logits, labels):
        g1 = max(1, int(sum(y)))
        g2 = max(1, len(y) - int(sum(y)))
        for r, yr in enumerate(y):
            p = sig(f[r] - f[-1])
            h = -sum(q * math.log(q) for q in (p, 1 - p) if q > 0)
            total += h / (g1 if yr else g2)
    return total


def scl_oracle(x, y, tau):
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    losses = []
    for i in range(len(x)):
        pos = [j for j in range(len(x)) if j != i and np.dot(y[i], y[j]) > 0]
        if not pos:
            continue
        num = sum(math.exp(x[i] @ x[j] / tau) for j in pos) / len(pos)
        den = sum(math.exp(x[i] @ x[j] / tau) for j in range(len(x)) if j != i)
        losses.append(-math.log(num / den))
    return sum(losses) / len(losses) if losses else 0.0


# --- pairwise_prob -------------------------------------------------------------


def test_pairwise_prob_examples():
    assert pairwise_prob(0.3, 0.3) == (0.5, 0.5)
    assert pairwise_prob(20.0, 0.0)[0] == pytest.approx(1.0, abs=1e-8)
    assert pairwise_prob(1.0, 0.0)[0] == pytest.approx(0.731059, abs=1e-6)
    assert pairwise_prob(-800.0, 0.0)[0] == 0.0


# --- pmt -------------------------------------------------------------------------


def test_pmt_examples():
    assert pmt_loss(Tensor([0.4, 0.4]), [1.0]).item() == pytest.approx(LN2, abs=1e-12)
    assert pmt_loss(Tensor([-20.0, 0.0]), [0.0]).item() == pytest.approx(2.061e-9, rel=1e-3)
    assert pmt_loss(Tensor([1.0, 0.0]), [1.0]).item() == pytest.approx(0.313262, abs=1e-6)


def test_pmt_matches_product_form():
    r = rng_for("pmt")
    for _ in range(25):
        logits, labels = random_batch(r)
        got = pmt_loss(Tensor(logits), labels).item()
        assert abs(got - pmt_product_oracle(logits, labels)) <= 1e-9


def test_pmt_shape_mismatch():
    with pytest.raises(ShapeError):
        pmt_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 3)))


# --- entropy -----------------------------------------------------------------------


def test_entropy_examples():
    assert entropy_min(Tensor([2.0, 2.0]), [1.0], 1, 1).item() == pytest.approx(LN2, abs=1e-12)
    assert entropy_min(Tensor([30.0, 0.0, -30.0]), [1.0, 0.0], 1, 1).item() < 1e-10
    assert entropy_min(Tensor([0.0, 0.0, 0.0]), [0.0, 0.0], 1, 2).item() == pytest.approx(LN2, abs=1e-12)


def test_entropy_matches_oracle():
    r = rng_for("em")
    for _ in range(25):
        logits, labels = random_batch(r)
        assert entropy_min(Tensor(logits), labels).item() == pytest.approx(entropy_oracle(logits, labels), abs=1e-10)


def test_entropy_rejects_small_gamma():
    with pytest.raises(ContractError):
        entropy_min(Tensor([0.0, 0.0]), [1.0], 0.5, 1)


# --- scl -------------------------------------------------------------------------------


def test_scl_examples():
    x = rng_for("scl0").normal(size=(2, 3))
    assert scl_loss(Tensor(x), [[1.0], [1.0]]).item() == pytest.approx(0.0, abs=1e-12)
    feats = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    y = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    # anchor 0: positive at cosine 1, negative at cosine 0; anchor 1 likewise
    assert scl_loss(Tensor(feats), y, tau=1.0).item() == pytest.approx(0.313262, abs=1e-6)
    assert scl_loss(Tensor(feats), np.zeros((3, 2))).item() == 0.0


def test_scl_needs_two_rows():
    with pytest.raises(ContractError):
        scl_loss(Tensor(np.ones((1, 3))), [[1.0]])


def test_scl_matches_oracle():
    r = rng_for("scl")
    for _ in range(25):
        x = r.normal(size=(7, 5))
        y = (r.random((7, 3)) < 0.4).astype(float)
        assert scl_loss(Tensor(x), y, 0.5).item() == pytest.approx(scl_oracle(x, y, 0.5), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 50.0))
def test_scl_scale_and_permutation_invariant(seed, scale):
    r = np.random.default_rng(seed)
    x = r.normal(size=(6, 4))
    y = (r.random((6, 3)) < 0.5).astype(float)
    base = scl_loss(Tensor(x), y).item()
    perm = r.permutation(6)
    assert scl_loss(Tensor(x * scale), y).item() == pytest.approx(base, rel=1e-9, abs=1e-9)
    assert scl_loss(Tensor(x[perm]), y[perm]).item() == pytest.approx(base, rel=1e-9, abs=1e-9)


# --- properties -----------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_shift_invariance_and_nonnegativity(seed, c):
    logits, labels = random_batch(np.random.default_rng(seed))
    for fn in (pmt_loss, entropy_min):
        a = fn(Tensor(logits), labels).item()
        b = fn(Tensor(logits + c), labels).item()
        assert a >= 0 and math.isfinite(a)
        assert b == pytest.approx(a, rel=1e-9, abs=1e-9)
    f_r, f_na = logits[0, 0], logits[0, -1]
    assert pairwise_prob(f_r + c, f_na + c)[0] == pytest.approx(pairwise_prob(f_r, f_na)[0], abs=1e-12)


# --- docre_loss ---------------------------------------------------------------------------


def test_docre_lambda_zero_is_pmtem():
    r = rng_for("dl0")
    logits, labels = random_batch(r)
    feats = r.normal(size=(6, 3))
    got = docre_loss(Tensor(logits), Tensor(feats), labels, LossConfig(lam=0.0)).item()
    assert got == pytest.approx(pmt_product_oracle(logits, labels) + entropy_oracle(logits, labels), abs=1e-10)


def test_docre_single_na_pair():
    got = docre_loss(Tensor(np.zeros((1, 3))), Tensor(np.ones((1, 2))), np.zeros((1, 2)), LossConfig(lam=0.0))
    assert got.item() == pytest.approx(3 * LN2, abs=1e-12)
    assert 3 * LN2 == pytest.approx(2.079442, abs=1e-6)


def test_docre_additive_over_duplicates():
    r = rng_for("dl2")
    logits, labels = random_batch(r, n=1)
    cfg = LossConfig(lam=0.0)
    one = docre_loss(Tensor(logits), Tensor(np.ones((1, 2))), labels, cfg).item()
    two = docre_loss(Tensor(np.vstack([logits, logits])), Tensor(np.ones((2, 2))), np.vstack([labels, labels]), cfg)
    assert two.item() == pytest.approx(2 * one, abs=1e-12)


def test_docre_entropy_switch_and_scl_rows():
    r = rng_for("dl3")
    logits, labels = random_batch(r, n=8)
    feats = r.normal(size=(8, 3))
    no_em = docre_loss(Tensor(logits), Tensor(feats), labels, LossConfig(lam=0.0, use_entropy=False)).item()
    assert no_em == pytest.approx(pmt_product_oracle(logits, labels), abs=1e-10)
    full = docre_loss(Tensor(logits), Tensor(feats), labels, LossConfig(), scl_rows=5).item()
    base = pmt_product_oracle(logits, labels) + entropy_oracle(logits, labels)
    assert full == pytest.approx(base + 0.1 * scl_oracle(feats[:5], labels[:5], 0.1), abs=1e-9)


def test_loss_config_validation():
    with pytest.raises(ValidationError):
        LossConfig(tau=0.0).validate()
    with pytest.raises(ValidationError):
        LossConfig(lam=-1.0).validate()


# --- gradients ---------------------------------------------------------------------------------


@pytest.mark.parametrize("case", range(20))
def test_loss_gradients(case):
    r = rng_for(f"lossgrad{case}")
    logits, labels = random_batch(r, n=5, R=3, density=0.4)
    labels[0] = [1, 0, 1]
    labels[1] = [1, 0, 0]
    feats = r.normal(size=(5, 4))
    lt, ft = Tensor(logits), Tensor(feats)
    cfg = LossConfig(tau=0.5, lam=0.3)
    for f in (
        lambda a, b: pmt_loss(a, labels),
        lambda a, b: entropy_min(a, labels),
        lambda a, b: scl_loss(b, labels, 0.5),
        lambda a, b: docre_loss(a, b, labels, cfg),
    ):
        rep = E.finite_difference_check(f, [lt, ft], eps=1e-5, tol=1e-4)
        assert rep.passed, rep
