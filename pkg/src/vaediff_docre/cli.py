"""Command-line entry point: ``vaediff <subcommand> [options]``.

Every subcommand writes under ``<out_dir>/<config hash>-s<seed>/``:
config.snapshot, checkpoints/, metrics.jsonl, report.json, embeddings.tsv.
Exit status is 0 on success, 1 for invalid input and 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, config_snapshot, parse_config
from .corpus import Corpus, corpus_stats, generate_corpus, load_corpus, save_corpus
from .errors import FormatError, ShapeError, TensorNameError, ValidationError
from .evaluation import evaluate, export_embeddings, write_report
from .gradsuite import run_suite
from .pipeline import (
    RunRecord,
    VaeDiff,
    augment_batch,
    extract_pair_features,
    new_docre_model,
    new_vaediff,
    run_ablation,
    stage1_train,
    stage2_train,
    stage3_train,
)
from .rng import derive_rng

INPUT_ERRORS = (ValidationError, FormatError, TensorNameError, FileNotFoundError)


# ---------------------------------------------------------------------------
# Run directory
# ---------------------------------------------------------------------------


def run_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.run.out_dir) / f"{config_hash(cfg)}-s{cfg.run.seed}"
    (path / "checkpoints").mkdir(parents=True, exist_ok=True)
    (path / "config.snapshot").write_text(config_snapshot(cfg))
    return path


def update_metrics(path: Path, record: RunRecord) -> None:
    """Replace this stage's rows in metrics.jsonl, keeping other stages' rows."""
    file = path / "metrics.jsonl"
    kept = []
    if file.exists():
        kept = [line for line in file.read_text().splitlines()
                if line and json.loads(line).get("stage") != record.stage]
    file.write_text("".join(line + "\n" for line in kept) + record.to_jsonl())


def _metadata(cfg: RunConfig, stage: str, step: int) -> dict:
    return {"stage": stage, "config_hash": config_hash(cfg), "seed": cfg.run.seed, "step": step}


def _require(cfg: RunConfig, key: str) -> str:
    value = getattr(cfg.run, key.split(".")[1])
    if not value:
        raise ValidationError("a path is required for this subcommand", key=key)
    return value


def load_corpus_for(cfg: RunConfig) -> Corpus:
    if cfg.run.corpus_path:
        return load_corpus(cfg.run.corpus_path)
    return generate_corpus(cfg.corpus, cfg.run.data_seed)


def load_docre(corpus: Corpus, cfg: RunConfig, path: str, key: str):
    model = new_docre_model(corpus, cfg, "stage1", "init")
    try:
        model.load_state_dict(load_checkpoint(path).tensors)
    except ShapeError as exc:
        raise ValidationError(f"checkpoint does not fit the configured model: {exc}", key=key) from None
    return model


def load_generator(cfg: RunConfig, path: str) -> VaeDiff:
    ckpt = load_checkpoint(path)
    out = ckpt.tensors.get("vae.decoder.fc3.weight")
    pair_dim = out.shape[1] if out is not None else cfg.encoder.pair_dim
    gen = new_vaediff(cfg, pair_dim, "stage2")
    try:
        gen.load_state_dict(ckpt.tensors)
    except ShapeError as exc:
        raise ValidationError(f"checkpoint does not fit the configured generator: {exc}",
                              key="run.stage2_checkpoint") from None
    return gen


def _finish_model(path: Path, model, corpus: Corpus, cfg: RunConfig) -> None:
    R = cfg.corpus.num_relations
    docs = corpus.split(cfg.eval.split)
    report = evaluate(model, docs, corpus.train, R, cfg.eval.k)
    write_report(report, path / "report.json", path / "report.csv")
    x, y = extract_pair_features(model, docs, R)
    export_embeddings(x, y, path / "embeddings.tsv", dim=cfg.encoder.pair_dim)
    print(" ".join(f"{k}={v:.4f}" for k, v in report.summary().items()))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> int:
    path = run_dir(cfg)
    corpus = generate_corpus(cfg.corpus, cfg.run.data_seed)
    target = Path(args.output) if args.output else path / "corpus.vdcorp"
    save_corpus(corpus, target)
    stats = {split: corpus_stats(corpus, split) for split in ("train", "dev", "test")}
    summary = {split: {"docs": s.n_docs, "entities": s.n_entities, "facts": s.n_facts,
                       "na_fraction": s.na_fraction, "per_relation": s.per_relation}
               for split, s in stats.items()}
    (path / "corpus_stats.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(target)
    return 0


def cmd_stage1(cfg: RunConfig, args) -> int:
    path = run_dir(cfg)
    corpus = load_corpus_for(cfg)
    model, record = stage1_train(corpus, cfg)
    save_checkpoint(model.state_dict(), _metadata(cfg, "stage1", len(record.epochs)),
                    path / "checkpoints" / "stage1.vdckpt")
    update_metrics(path, record)
    _finish_model(path, model, corpus, cfg)
    return 0


def cmd_stage2(cfg: RunConfig, args) -> int:
    stage1 = _require(cfg, "run.stage1_checkpoint")
    path = run_dir(cfg)
    corpus = load_corpus_for(cfg)
    model = load_docre(corpus, cfg, stage1, "run.stage1_checkpoint")
    x, y = extract_pair_features(model, corpus.train, cfg.corpus.num_relations, cfg.stage2.include_na)
    gen, record = stage2_train(x, y, cfg)
    save_checkpoint(gen.state_dict(), _metadata(cfg, "stage2", len(record.epochs)),
                    path / "checkpoints" / "stage2.vdckpt")
    update_metrics(path, record)
    export_embeddings(x, y, path / "embeddings.tsv", dim=x.shape[1])
    print(path / "checkpoints" / "stage2.vdckpt")
    return 0


def cmd_stage3(cfg: RunConfig, args) -> int:
    stage1 = _require(cfg, "run.stage1_checkpoint")
    gen = None
    if cfg.aug.arm == "vaediff":
        gen = load_generator(cfg, _require(cfg, "run.stage2_checkpoint"))
    path = run_dir(cfg)
    corpus = load_corpus_for(cfg)
    state = load_docre(corpus, cfg, stage1, "run.stage1_checkpoint").state_dict()
    model, record = stage3_train(corpus, state, gen, cfg)
    save_checkpoint(model.state_dict(), _metadata(cfg, "stage3", len(record.epochs)),
                    path / "checkpoints" / "stage3.vdckpt")
    update_metrics(path, record)
    _finish_model(path, model, corpus, cfg)
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    if not args.checkpoint:
        raise ValidationError("a model checkpoint is required", key="checkpoint")
    path = run_dir(cfg)
    corpus = load_corpus_for(cfg)
    model = load_docre(corpus, cfg, args.checkpoint, "checkpoint")
    _finish_model(path, model, corpus, cfg)
    return 0


def cmd_ablation(cfg: RunConfig, args) -> int:
    if args.seeds < 1:
        raise ValidationError("need at least one seed", key="seeds")
    path = run_dir(cfg)
    corpus = load_corpus_for(cfg)
    seeds = list(range(cfg.run.seed, cfg.run.seed + args.seeds))
    report = run_ablation(corpus, cfg, seeds, log=lambda line: print(line, file=sys.stderr))
    data = report.to_dict()
    data.pop("wall_clock")
    (path / "ablation.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    for arm, metrics in data["arms"].items():
        print(arm, " ".join(f"{m}={v['mean']:.4f}+-{v['std']:.4f}" for m, v in metrics.items()))
    return 0


def parse_label_sets(text: str, num_relations: int) -> np.ndarray:
    """``"3;5,6"`` -> two multi-hot rows."""
    rows = []
    for group in (g.strip() for g in text.split(";")):
        if not group:
            continue
        row = np.zeros(num_relations)
        try:
            ids = [int(x) for x in group.split(",")]
        except ValueError:
            raise ValidationError(f"bad label set {group!r}", key="labels") from None
        if any(not 0 <= r < num_relations for r in ids):
            raise ValidationError(f"relation id outside [0, {num_relations})", key="labels")
        row[ids] = 1.0
        rows.append(row)
    if not rows:
        raise ValidationError("no label sets given", key="labels")
    return np.stack(rows)


def cmd_sample(cfg: RunConfig, args) -> int:
    gen = load_generator(cfg, _require(cfg, "run.stage2_checkpoint"))
    labels = parse_label_sets(args.labels, cfg.corpus.num_relations)
    count = cfg.aug.m if args.count is None else args.count
    if count < 1:
        raise ValidationError("count must be >= 1", key="count")
    path = run_dir(cfg)
    feats, rows = augment_batch(labels, count, gen, cfg.diffusion.w, derive_rng(cfg.run.seed, "sample"),
                                cfg.diffusion.extrapolate)
    target = Path(args.output) if args.output else path / "samples.tsv"
    export_embeddings(feats, rows, target, dim=gen.pair_dim)
    print(target)
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    path = run_dir(cfg)
    report = run_suite(instances=args.instances, seed=cfg.run.seed)
    (path / "gradcheck.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"max relative error {report.max_rel_error:.3e} over {len(report.worst)} cases "
          f"x {report.instances} instances: {'pass' if report.passed else 'FAIL'}")
    return 0 if report.passed else 2


COMMANDS = {
    "gen-data": cmd_gen_data,
    "stage1": cmd_stage1,
    "stage2": cmd_stage2,
    "stage3": cmd_stage3,
    "eval": cmd_eval,
    "ablation": cmd_ablation,
    "sample": cmd_sample,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--seed", type=int, help="master seed (run.seed)")
    common.add_argument("--out", help="output root (run.out_dir)")
    common.add_argument("--corpus", help="corpus file (run.corpus_path)")
    common.add_argument("--stage1", help="stage-1 checkpoint (run.stage1_checkpoint)")
    common.add_argument("--stage2", help="stage-2 checkpoint (run.stage2_checkpoint)")

    parser = argparse.ArgumentParser(prog="vaediff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-data", parents=[common], help="generate and save the synthetic corpus")
    p.add_argument("--output", help="corpus file path (default: run directory)")
    sub.add_parser("stage1", parents=[common], help="train the baseline extractor")
    sub.add_parser("stage2", parents=[common], help="train the generative module on stage-1 features")
    sub.add_parser("stage3", parents=[common], help="retrain with generated features")
    p = sub.add_parser("eval", parents=[common], help="score a model checkpoint")
    p.add_argument("--checkpoint", help="model checkpoint to score")
    p = sub.add_parser("ablation", parents=[common], help="compare generated, noisy and no augmentation")
    p.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    p = sub.add_parser("sample", parents=[common], help="emit generated features for label sets")
    p.add_argument("--labels", required=True, help='label sets, e.g. "3;5,6"')
    p.add_argument("--count", type=int, help="samples per label set (default aug.m)")
    p.add_argument("--output", help="TSV path (default: run directory)")
    p = sub.add_parser("gradcheck", parents=[common], help="run the finite-difference suite")
    p.add_argument("--instances", type=int, default=20)
    return parser


def config_from_args(args) -> RunConfig:
    overrides: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ValidationError("expected KEY=VALUE", key=item)
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for flag, key in (("seed", "run.seed"), ("out", "run.out_dir"), ("corpus", "run.corpus_path"),
                      ("stage1", "run.stage1_checkpoint"), ("stage2", "run.stage2_checkpoint")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = str(value)
    if args.config and not Path(args.config).is_file():
        raise ValidationError(f"config file {args.config} not found", key="config")
    return parse_config(args.config, overrides)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors are invalid input
        return 0 if exc.code == 0 else 1
    try:
        cfg = config_from_args(args)
        return COMMANDS[args.command](cfg, args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001  any other failure is a runtime error
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
