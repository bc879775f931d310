import json
import math

import numpy as np
import pytest

from vaediff_docre.config import RunConfig
from vaediff_docre.corpus import generate_corpus
from vaediff_docre.engine import Tensor
from vaediff_docre.errors import ContractError, DivergenceError, ShapeError, TensorNameError
from vaediff_docre.pipeline import (
    ARMS,
    METRICS,
    RunRecord,
    _check_finite,
    augment_batch,
    extract_pair_features,
    gaussian_augmenter,
    new_vaediff,
    run_ablation,
    stage1_train,
    stage2_train,
    stage3_train,
    vaediff_augmenter,
    vaediff_loss,
)
from vaediff_docre.rng import derive_rng

TINY = RunConfig().with_values(
    corpus__n_train=30, corpus__n_dev=10, corpus__n_test=10,
    encoder__d_model=8, encoder__heads=2, encoder__pair_dim=6,
    vae__latent_dim=3, vae__hidden=8,
    diffusion__T=4, diffusion__width=8, diffusion__heads=2, diffusion__layers=1,
    stage1__epochs=1, stage1__batch_size=8,
    stage2__epochs=2, stage2__warmup=1, stage2__batch_size=16,
    aug__epochs=2, aug__warmup=1, aug__batch_size=8,
)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(TINY.corpus, seed=0)


@pytest.fixture(scope="module")
def stage1(corpus):
    return stage1_train(corpus, TINY)


@pytest.fixture(scope="module")
def features(corpus, stage1):
    return extract_pair_features(stage1[0], corpus.train, TINY.corpus.num_relations)


@pytest.fixture(scope="module")
def generator(features):
    return stage2_train(*features, TINY)[0]


def same_state(a, b):
    return a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)


# --- records -----------------------------------------------------------------------


def test_record_rejects_out_of_order_epochs():
    rec = RunRecord("s")
    rec.add(1, loss=1.0)
    with pytest.raises(ContractError):
        rec.add(1, loss=0.5)
    rec.add(2, loss=0.5)
    assert rec.losses() == [1.0, 0.5]
    rows = [json.loads(line) for line in rec.to_jsonl().splitlines()]
    assert rows == [{"stage": "s", "epoch": 1, "loss": 1.0}, {"stage": "s", "epoch": 2, "loss": 0.5}]


def test_non_finite_loss_raises_with_record():
    rec = RunRecord("s")
    rec.add(1, loss=2.0)
    with pytest.raises(DivergenceError) as err:
        _check_finite(Tensor(np.array(math.nan)), rec, "here")
    assert err.value.record is rec
    assert rec.epochs[-1]["diverged"] == "here"


# --- stage 1 -----------------------------------------------------------------------


def test_zero_epochs_empty_history(corpus):
    cfg = TINY.with_values(stage1__epochs=0)
    model, rec = stage1_train(corpus, cfg)
    assert rec.epochs == []
    again, _ = stage1_train(corpus, cfg)
    assert same_state(model.state_dict(), again.state_dict())


def test_stage1_deterministic(corpus, stage1):
    model, rec = stage1_train(corpus, TINY)
    assert same_state(model.state_dict(), stage1[0].state_dict())
    assert rec.epochs == stage1[1].epochs
    assert set(METRICS) <= set(rec.epochs[0])


def test_extracted_features_match_forward(corpus, stage1, features):
    model = stage1[0]
    x, y = features
    R = TINY.corpus.num_relations
    rows, labels = [], []
    for doc in corpus.train:
        feats, _ = model.forward_batch([doc])
        yy = doc.pair_labels(R)
        keep = yy.sum(axis=1) > 0
        rows.append(feats.data[keep])
        labels.append(yy[keep])
    np.testing.assert_allclose(x, np.concatenate(rows), rtol=0, atol=1e-12)
    np.testing.assert_array_equal(y, np.concatenate(labels))
    assert (y.sum(axis=1) > 0).all()
    xa, ya = extract_pair_features(model, corpus.train, R, include_na=True)
    assert len(xa) == sum(d.num_entities * (d.num_entities - 1) for d in corpus.train)


# --- stage 2 -----------------------------------------------------------------------


def test_loss_parts_sum_to_total(features):
    x, y = features
    gen = new_vaediff(TINY, x.shape[1], "probe")
    total, parts = vaediff_loss(Tensor(x[:16]), y[:16], gen, derive_rng(0, "probe"), 0.1)
    assert abs(total.item() - sum(parts.values())) <= 1e-9
    assert set(parts) == {"reconstruction", "neg_entropy", "diffusion"}


def test_stage2_phases(features):
    gen, rec = stage2_train(*features, TINY)
    assert [r["phase"] for r in rec.epochs] == ["warmup", "joint"]
    assert "diffusion" in rec.epochs[1] and "diffusion" not in rec.epochs[0]
    assert all(math.isfinite(v) for v in rec.losses())


def test_warmup_only_leaves_denoiser_untouched(features):
    cfg = TINY.with_values(stage2__warmup=2)
    gen, _ = stage2_train(*features, cfg)
    fresh = new_vaediff(cfg, features[0].shape[1], "stage2")
    assert same_state(gen.denoiser.state_dict(), fresh.denoiser.state_dict())
    assert not same_state(gen.vae.state_dict(), fresh.vae.state_dict())


def test_stage2_needs_two_rows():
    with pytest.raises(ContractError):
        stage2_train(np.zeros((1, 6)), np.ones((1, 24)), TINY)


def test_generator_state_round_trip(generator):
    state = generator.state_dict()
    other = new_vaediff(TINY, generator.pair_dim, "other")
    other.load_state_dict(state)
    assert same_state(other.state_dict(), state)
    with pytest.raises(TensorNameError, match="extra.w"):
        other.load_state_dict({**state, "extra.w": np.zeros(1)})


# --- augmentation ------------------------------------------------------------------


def test_augment_batch_counts(generator):
    labels = np.zeros((3, 24))
    labels[[0, 1, 2], [0, 5, 23]] = 1
    x, y = augment_batch(labels, 2, generator, 0.1, derive_rng(0, "a"))
    assert x.shape == (6, generator.pair_dim)
    np.testing.assert_array_equal(y, np.repeat(labels, 2, axis=0))
    x0, y0 = augment_batch(labels, 0, generator, 0.1, derive_rng(0, "a"))
    assert x0.shape == (0, generator.pair_dim) and len(y0) == 0
    with pytest.raises(ContractError):
        augment_batch(labels, -1, generator, 0.1, derive_rng(0, "a"))


def test_generated_labels_come_from_batch_positives(generator):
    rng = derive_rng(1, "y")
    y = np.zeros((7, 24))
    y[[1, 4, 6], [2, 9, 2]] = 1
    y[4, 10] = 1
    _, gy = vaediff_augmenter(generator, 3, 0.1)(Tensor(np.zeros((7, 6))), y, rng)
    np.testing.assert_array_equal(gy, np.repeat(y[[1, 4, 6]], 3, axis=0))


def test_gaussian_augmenter_centered_on_positives():
    y = np.zeros((4, 24))
    y[[0, 2], 1] = 1
    feats = Tensor(np.arange(24.0).reshape(4, 6))
    gx, gy = gaussian_augmenter(2, 0.0)(feats, y, derive_rng(0, "g"))
    np.testing.assert_array_equal(gx, np.repeat(feats.data[[0, 2]], 2, axis=0))
    assert len(gy) == 4


# --- stage 3 -----------------------------------------------------------------------


def test_m_zero_reduces_to_no_augmentation(corpus, stage1, generator):
    state = stage1[0].state_dict()
    none, rec_none = stage3_train(corpus, state, None, TINY.with_values(aug__arm="none"))
    for arm in ("vaediff", "gaussian"):
        model, rec = stage3_train(corpus, state, generator, TINY.with_values(aug__arm=arm, aug__m=0))
        assert rec.epochs == rec_none.epochs
        assert same_state(model.state_dict(), none.state_dict())


def test_generator_frozen_during_stage3(corpus, stage1, generator):
    before = generator.state_dict()
    _, rec = stage3_train(corpus, stage1[0].state_dict(), generator, TINY)
    assert same_state(generator.state_dict(), before)
    assert rec.epochs[0]["generated"] == 0 and rec.epochs[1]["generated"] > 0


def test_stage3_contract_errors(corpus, stage1, generator):
    state = stage1[0].state_dict()
    with pytest.raises(ContractError):
        stage3_train(corpus, state, None, TINY)
    wrong = new_vaediff(TINY, 5, "w")
    with pytest.raises(ShapeError):
        stage3_train(corpus, state, wrong, TINY)


def test_ablation_smoke(corpus):
    cfg = TINY.with_values(stage2__epochs=1, aug__epochs=1, aug__warmup=0)
    lines = []
    report = run_ablation(corpus, cfg, seeds=[0], log=lines.append)
    out = report.to_dict()
    assert set(out["arms"]) == set(ARMS)
    for arm in ARMS:
        assert set(out["arms"][arm]) == set(METRICS)
        assert len(out["arms"][arm]["f1"]["values"]) == 1
        assert out["arms"][arm]["f1"]["std"] == 0.0
    assert set(out["ltail_ordering"]) == {"vaediff_gt_none", "vaediff_ge_gaussian_ge_none"}
    assert len(lines) == 3
    json.dumps(out)
