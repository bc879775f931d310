"""Three-stage training: baseline DocRE, generative module, augmented retraining.

Stage 1 trains the encoder stack and classifier.  Stage 2 fits the EP-VAE
and diffusion prior on the positive pair features stage 1 produces.  Stage 3
retrains the classifier with, after a warmup, ``m`` generated features per
positive pair in each batch.  :func:`run_ablation` compares the generated
features against Gaussian-noise copies and no augmentation.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import engine as E
from .checkpoint import unprefixed
from .config import RunConfig
from .corpus import Corpus
from .diffusion import Denoiser, NoiseSchedule, cosine_schedule, diffusion_loss, sample
from .encoder import DocREModel, batch_labels, classify
from .engine import AdamW, Tensor, no_grad
from .epvae import EPVAE, gaussian_entropy, reconstruction_error, reparameterize, vae_decode, vae_encode, \
    vae_warmup_loss
from .errors import ContractError, DivergenceError, ShapeError, TensorNameError
from .evaluation import EvalReport, evaluate
from .losses import docre_loss
from .rng import derive_rng

ARMS = ("vaediff", "gaussian", "none")
METRICS = ("ign_f1", "f1", "freq_f1", "ltail_f1")


@dataclass
class RunRecord:
    stage: str
    epochs: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    wall_clock: float = 0.0

    def add(self, epoch: int, **values) -> None:
        if self.epochs and epoch <= self.epochs[-1]["epoch"]:
            raise ContractError(f"epoch {epoch} recorded out of order")
        self.epochs.append({"epoch": epoch, **values})

    def losses(self) -> list[float]:
        return [row["loss"] for row in self.epochs]

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"stage": self.stage, **row}, sort_keys=True) + "\n" for row in self.epochs)


def _check_finite(loss: Tensor, record: RunRecord, where: str) -> None:
    if not math.isfinite(loss.item()):
        record.add(record.epochs[-1]["epoch"] + 1 if record.epochs else 1, loss=None, diverged=where)
        raise DivergenceError(f"non-finite loss in {where}", record)


# ---------------------------------------------------------------------------
# DocRE training (stages 1 and 3)
# ---------------------------------------------------------------------------

# (features Tensor, labels array, rng) -> (generated features array, labels array)
Augmenter = Callable[[Tensor, np.ndarray, np.random.Generator], tuple[np.ndarray, np.ndarray]]


def new_docre_model(corpus: Corpus, cfg: RunConfig, *labels) -> DocREModel:
    return DocREModel(corpus.schema.vocab_size, cfg.corpus.num_relations, cfg.encoder,
                      derive_rng(cfg.run.seed, *labels))


def train_docre(model: DocREModel, corpus: Corpus, cfg: RunConfig, *, stage: str, epochs: int, lr: float,
                weight_decay: float, batch_size: int, warmup: int = 0, augmenter: Augmenter | None = None,
                scl_generated: bool = False, select_best: bool = True) -> RunRecord:
    """Train in place with the DocRE loss; per-epoch dev metrics; keeps the best-dev-F1 weights.

    Selection always uses the dev split so the held-out test split stays untouched.
    """
    record = RunRecord(stage)
    start = time.perf_counter()
    R = cfg.corpus.num_relations
    train = corpus.train
    opt = AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    best_f1, best_state = -1.0, model.state_dict()
    for epoch in range(1, epochs + 1):
        order = derive_rng(cfg.run.seed, stage, "shuffle", epoch).permutation(len(train))
        aug_rng = derive_rng(cfg.run.seed, stage, "augment", epoch)
        total, n_batches, n_generated = 0.0, 0, 0
        for b in range(0, len(order), batch_size):
            docs = [train[i] for i in order[b:b + batch_size]]
            feats, logits = model.forward_batch(docs)
            y = batch_labels(docs, R)
            n_real = len(y)
            if augmenter is not None and epoch > warmup:
                gen_x, gen_y = augmenter(feats, y, aug_rng)
                if len(gen_y):
                    gen = Tensor(gen_x)
                    logits = E.concat([logits, classify(gen, model.head)], axis=0)
                    feats = E.concat([feats, gen], axis=0)
                    y = np.concatenate([y, gen_y])
                    n_generated += len(gen_y)
            loss = docre_loss(logits, feats, y, cfg.loss, scl_rows=None if scl_generated else n_real)
            _check_finite(loss, record, f"{stage} epoch {epoch}")
            opt.zero_grad()
            E.backward(loss)
            opt.step()
            total += loss.item()
            n_batches += 1
        report = evaluate(model, corpus.dev, train, R, cfg.eval.k)
        record.add(epoch, loss=total / max(n_batches, 1), generated=n_generated, **report.summary())
        if not select_best or report.f1 > best_f1:
            best_f1, best_state = report.f1, model.state_dict()
    model.load_state_dict(best_state)
    record.wall_clock = time.perf_counter() - start
    return record


def stage1_train(corpus: Corpus, cfg: RunConfig) -> tuple[DocREModel, RunRecord]:
    model = new_docre_model(corpus, cfg, "stage1", "init")
    s = cfg.stage1
    record = train_docre(model, corpus, cfg, stage="stage1", epochs=s.epochs, lr=s.lr,
                         weight_decay=s.weight_decay, batch_size=s.batch_size)
    return model, record


def extract_pair_features(model: DocREModel, docs, num_relations: int,
                          include_na: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Post-axial pair features and multi-hot labels; positive pairs only unless ``include_na``."""
    xs, ys = [], []
    with no_grad():
        for doc in docs:
            feats, _ = model.doc_features(doc)
            y = doc.pair_labels(num_relations)
            keep = np.ones(len(y), bool) if include_na else y.sum(axis=1) > 0
            xs.append(feats.data[keep])
            ys.append(y[keep])
    d = model.config.pair_dim
    if not xs:
        return np.zeros((0, d)), np.zeros((0, num_relations))
    return np.concatenate(xs).reshape(-1, d), np.concatenate(ys).reshape(-1, num_relations)


# ---------------------------------------------------------------------------
# Generative module (stage 2)
# ---------------------------------------------------------------------------


@dataclass
class VaeDiff:
    vae: EPVAE
    denoiser: Denoiser
    schedule: NoiseSchedule

    @property
    def pair_dim(self) -> int:
        return self.vae.pair_dim

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"vae.{k}": v for k, v in self.vae.state_dict().items()}
        out.update({f"denoiser.{k}": v for k, v in self.denoiser.state_dict().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        extra = [k for k in state if not k.startswith(("vae.", "denoiser."))]
        if extra:
            raise TensorNameError(unexpected=extra)
        self.vae.load_state_dict(unprefixed("vae", state))
        self.denoiser.load_state_dict(unprefixed("denoiser", state))

    def generate(self, labels: np.ndarray, w: float, rng: np.random.Generator,
                 extrapolate: bool = False) -> np.ndarray:
        """One decoded pair feature per label row; eval mode throughout."""
        if len(labels) == 0:
            return np.zeros((0, self.pair_dim))
        z = sample(labels, self.schedule, self.denoiser, w, rng, extrapolate)
        with no_grad():
            return vae_decode(Tensor(z), self.vae, "eval").data


def new_vaediff(cfg: RunConfig, pair_dim: int, *labels) -> VaeDiff:
    v, d = cfg.vae, cfg.diffusion
    vae = EPVAE(pair_dim, v.latent_dim, v.hidden, derive_rng(cfg.run.seed, *labels, "vae"))
    den = Denoiser(v.latent_dim, cfg.corpus.num_relations, d.width, d.layers, d.heads,
                   derive_rng(cfg.run.seed, *labels, "denoiser"))
    return VaeDiff(vae, den, cosine_schedule(d.T))


def vaediff_loss(x: Tensor, y: np.ndarray, gen: VaeDiff, rng: np.random.Generator,
                 p_drop: float) -> tuple[Tensor, dict[str, float]]:
    """Reconstruction + negative encoder entropy + diffusion regression, each averaged over the batch."""
    n = x.shape[0]
    post = vae_encode(x, gen.vae, "train")
    z = reparameterize(post.mu, post.log_sigma, rng)
    rec = reconstruction_error(x, vae_decode(z, gen.vae, "train")) * (1.0 / n)
    neg_ent = gaussian_entropy(post.log_sigma) * (-1.0 / n)
    diff = diffusion_loss(z, y, gen.denoiser, gen.schedule, rng, p_drop, reduce_dims="sum")
    total = rec + neg_ent + diff
    return total, {"reconstruction": rec.item(), "neg_entropy": neg_ent.item(), "diffusion": diff.item()}


def stage2_train(features: np.ndarray, labels: np.ndarray, cfg: RunConfig) -> tuple[VaeDiff, RunRecord]:
    """VAE-only warmup for ``stage2.warmup`` epochs, then joint VAE + diffusion training."""
    features = np.asarray(features, dtype=np.float64)
    if len(features) < 2:
        raise ContractError("stage 2 needs at least two pair features")
    s = cfg.stage2
    gen = new_vaediff(cfg, features.shape[1], "stage2")
    record = RunRecord("stage2")
    start = time.perf_counter()
    opt_vae = AdamW(gen.vae.parameters(), lr=s.lr, weight_decay=s.weight_decay)
    opt_den = AdamW(gen.denoiser.parameters(), lr=s.lr, weight_decay=s.weight_decay)
    n = len(features)
    for epoch in range(1, s.epochs + 1):
        rng = derive_rng(cfg.run.seed, "stage2", "epoch", epoch)
        order = rng.permutation(n)
        joint = epoch > s.warmup
        sums: dict[str, float] = {}
        n_batches = 0
        for b in range(0, n, s.batch_size):
            idx = order[b:b + s.batch_size]
            if len(idx) < 2:  # batch normalization needs two rows
                continue
            x = Tensor(features[idx])
            if joint:
                loss, parts = vaediff_loss(x, labels[idx], gen, rng, cfg.diffusion.p_drop)
            else:
                loss = vae_warmup_loss(x, gen.vae, rng)
                parts = {}
            _check_finite(loss, record, f"stage2 epoch {epoch}")
            opt_vae.zero_grad()
            opt_den.zero_grad()
            E.backward(loss)
            opt_vae.step()
            if joint:
                opt_den.step()
            for k, v in {"loss": loss.item(), **parts}.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        means = {k: v / max(n_batches, 1) for k, v in sums.items()}
        record.add(epoch, phase="joint" if joint else "warmup", **means)
    record.wall_clock = time.perf_counter() - start
    return gen, record


# ---------------------------------------------------------------------------
# Augmentation (stage 3)
# ---------------------------------------------------------------------------


def augment_batch(label_vectors, m: int, generator: VaeDiff, w: float, rng: np.random.Generator,
                  extrapolate: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """``m`` decoded samples per label vector; each carries its conditioning labels."""
    labels = np.asarray(label_vectors, dtype=np.float64)
    if m < 0:
        raise ContractError(f"m must be >= 0, got {m}")
    if labels.size == 0 or m == 0:
        return np.zeros((0, generator.pair_dim)), np.zeros((0, labels.shape[-1] if labels.ndim == 2 else 0))
    reps = np.repeat(labels, m, axis=0)
    return generator.generate(reps, w, rng, extrapolate), reps


def vaediff_augmenter(generator: VaeDiff, m: int, w: float, extrapolate: bool = False) -> Augmenter:
    def aug(feats, y, rng):
        pos = y.sum(axis=1) > 0
        return augment_batch(y[pos], m, generator, w, rng, extrapolate)

    return aug


def gaussian_augmenter(m: int, scale: float) -> Augmenter:
    """Copies of the batch's positive features plus ``N(0, scale^2)`` noise, detached."""

    def aug(feats, y, rng):
        pos = y.sum(axis=1) > 0
        base = np.repeat(feats.data[pos], m, axis=0)
        return base + scale * rng.standard_normal(base.shape), np.repeat(y[pos], m, axis=0)

    return aug


def stage3_train(corpus: Corpus, stage1_state: dict[str, np.ndarray], generator: VaeDiff | None,
                 cfg: RunConfig) -> tuple[DocREModel, RunRecord]:
    a = cfg.aug
    if a.init == "stage1":
        model = new_docre_model(corpus, cfg, "stage1", "init")
        model.load_state_dict(stage1_state)
    else:
        model = new_docre_model(corpus, cfg, "stage3", "init")
    augmenter = None
    if a.arm == "vaediff":
        if generator is None:
            raise ContractError("the vaediff arm needs a generator checkpoint")
        if generator.pair_dim != model.config.pair_dim:
            raise ShapeError("stage3 generator", (generator.pair_dim,), (model.config.pair_dim,))
        augmenter = vaediff_augmenter(generator, a.m, cfg.diffusion.w, cfg.diffusion.extrapolate)
    elif a.arm == "gaussian":
        augmenter = gaussian_augmenter(a.m, a.noise_scale)
    record = train_docre(model, corpus, cfg, stage="stage3", epochs=a.epochs, lr=a.lr,
                         weight_decay=a.weight_decay, batch_size=a.batch_size, warmup=a.warmup,
                         augmenter=augmenter, scl_generated=a.scl_generated)
    return model, record


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------


@dataclass
class AblationReport:
    seeds: list[int]
    per_seed: dict[str, list[dict[str, float]]]  # arm -> one summary per seed
    wall_clock: float = 0.0

    def mean(self, arm: str, metric: str) -> float:
        return float(np.mean([row[metric] for row in self.per_seed[arm]]))

    def std(self, arm: str, metric: str) -> float:
        return float(np.std([row[metric] for row in self.per_seed[arm]]))

    def to_dict(self) -> dict:
        arms = {
            arm: {m: {"mean": self.mean(arm, m), "std": self.std(arm, m),
                      "values": [row[m] for row in rows]} for m in METRICS}
            for arm, rows in self.per_seed.items()
        }
        lt = {arm: self.mean(arm, "ltail_f1") for arm in self.per_seed}
        order = {}
        if set(ARMS) <= set(lt):
            order = {"vaediff_gt_none": lt["vaediff"] > lt["none"],
                     "vaediff_ge_gaussian_ge_none": lt["vaediff"] >= lt["gaussian"] >= lt["none"]}
        return {"seeds": self.seeds, "arms": arms, "ltail_ordering": order, "wall_clock": self.wall_clock}


def run_ablation(corpus: Corpus, cfg: RunConfig, seeds, arms=ARMS,
                 log: Callable[[str], None] | None = None) -> AblationReport:
    """Per seed: one stage-1 model and one generator shared by the three stage-3 arms."""
    start = time.perf_counter()
    per_seed: dict[str, list[dict[str, float]]] = {arm: [] for arm in arms}
    R = cfg.corpus.num_relations
    for seed in seeds:
        scfg = replace(cfg, run=replace(cfg.run, seed=int(seed)))
        model, _ = stage1_train(corpus, scfg)
        state = model.state_dict()
        generator = None
        if "vaediff" in arms:
            x, y = extract_pair_features(model, corpus.train, R, scfg.stage2.include_na)
            generator, _ = stage2_train(x, y, scfg)
        for arm in arms:
            acfg = replace(scfg, aug=replace(scfg.aug, arm=arm))
            final, _ = stage3_train(corpus, state, generator, acfg)
            rep: EvalReport = evaluate(final, corpus.split(cfg.eval.split), corpus.train, R, cfg.eval.k)
            per_seed[arm].append(rep.summary())
            if log:
                log(f"seed {seed} arm {arm}: " + " ".join(f"{k}={v:.4f}" for k, v in rep.summary().items()))
    return AblationReport([int(s) for s in seeds], per_seed, time.perf_counter() - start)
