"""Run configuration: grouped dataclasses, ``key = value`` parsing and range checks.

Keys are ``group.field``.  Groups: corpus, encoder, loss, vae, diffusion,
stage1, stage2, aug (stage 3, also accepted as ``stage3``), eval, run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .corpus import CorpusConfig
from .encoder import EncoderConfig
from .errors import ValidationError
from .losses import LossConfig


@dataclass(frozen=True)
class VaeConfig:
    latent_dim: int = 16
    hidden: int = 64


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 50
    width: int = 64
    layers: int = 2
    heads: int = 4
    w: float = 0.1
    p_drop: float = 0.1
    extrapolate: bool = False


@dataclass(frozen=True)
class Stage1Config:
    epochs: int = 10
    batch_size: int = 4
    lr: float = 2e-3
    weight_decay: float = 0.01


@dataclass(frozen=True)
class Stage2Config:
    epochs: int = 60
    warmup: int = 5
    batch_size: int = 64
    lr: float = 2e-3
    weight_decay: float = 0.0
    include_na: bool = False


@dataclass(frozen=True)
class AugConfig:
    arm: str = "vaediff"  # vaediff | gaussian | none
    epochs: int = 4
    warmup: int = 1
    m: int = 2
    noise_scale: float = 0.1
    lr: float = 5e-4
    weight_decay: float = 0.01
    batch_size: int = 4
    init: str = "stage1"  # stage1 | fresh
    scl_generated: bool = False


@dataclass(frozen=True)
class EvalConfig:
    k: int = 5
    split: str = "test"


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    data_seed: int = 0  # corpus generation, shared by every model seed
    out_dir: str = "runs"
    corpus_path: str = ""
    stage1_checkpoint: str = ""
    stage2_checkpoint: str = ""


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    aug: AugConfig = field(default_factory=AugConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def with_values(self, **dotted) -> "RunConfig":
        """Copy with ``group__field=value`` (or ``{"group.field": value}``) overrides, validated."""
        cfg = self
        for key, value in dotted.items():
            cfg = _assign(cfg, key.replace("__", "."), value, None)
        validate(cfg)
        return cfg


GROUP_ALIASES = {"stage3": "aug"}

_pos = (lambda v: v > 0, "must be > 0")
_nonneg = (lambda v: v >= 0, "must be >= 0")
_unit = (lambda v: 0 <= v <= 1, "must lie in [0, 1]")

RANGES: dict[str, tuple] = {
    "encoder.d_model": _pos,
    "encoder.heads": _pos,
    "encoder.pair_dim": _pos,
    "loss.tau": _pos,
    "loss.lam": _nonneg,
    "vae.latent_dim": _pos,
    "vae.hidden": _pos,
    "diffusion.T": (lambda v: v >= 2, "must be >= 2"),
    "diffusion.width": _pos,
    "diffusion.layers": _pos,
    "diffusion.heads": _pos,
    "diffusion.w": _unit,
    "diffusion.p_drop": _unit,
    "stage1.epochs": _nonneg,
    "stage1.batch_size": _pos,
    "stage1.lr": _pos,
    "stage1.weight_decay": _nonneg,
    "stage2.epochs": _nonneg,
    "stage2.warmup": _nonneg,
    "stage2.batch_size": (lambda v: v >= 2, "must be >= 2 (batch normalization)"),
    "stage2.lr": _pos,
    "stage2.weight_decay": _nonneg,
    "aug.arm": (lambda v: v in ("vaediff", "gaussian", "none"), "must be vaediff, gaussian or none"),
    "aug.epochs": _nonneg,
    "aug.warmup": _nonneg,
    "aug.m": _nonneg,
    "aug.noise_scale": _nonneg,
    "aug.lr": _pos,
    "aug.weight_decay": _nonneg,
    "aug.batch_size": _pos,
    "aug.init": (lambda v: v in ("stage1", "fresh"), "must be stage1 or fresh"),
    "eval.k": _nonneg,
    "eval.split": (lambda v: v in ("train", "dev", "test"), "must be train, dev or test"),
    "run.seed": _nonneg,
    "run.data_seed": _nonneg,
}


def _coerce(raw, tp, key: str, line):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if tp is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        # cooccurrence groups: "5:6; 11:12:13"
        groups = [g.strip() for g in text.split(";") if g.strip()]
        return tuple(tuple(int(x) for x in g.split(":")) for g in groups)
    except ValueError:
        raise ValidationError(f"cannot parse {text!r} as {getattr(tp, '__name__', tp)}", key=key, line=line) from None


def _split_key(key: str, line) -> tuple[str, str]:
    if "." not in key:
        raise ValidationError("keys look like group.name", key=key, line=line)
    group, name = key.split(".", 1)
    group = GROUP_ALIASES.get(group, group)
    if group not in {f.name for f in fields(RunConfig)}:
        raise ValidationError("unknown configuration group", key=key, line=line)
    return group, name


def _assign(cfg: RunConfig, key: str, raw, line) -> RunConfig:
    group, name = _split_key(key, line)
    section = getattr(cfg, group)
    hints = typing.get_type_hints(type(section))
    if name not in hints:
        raise ValidationError("unknown configuration key", key=key, line=line)
    value = _coerce(raw, hints[name], key, line)
    rule = RANGES.get(f"{group}.{name}")
    if rule is not None and not rule[0](value):
        raise ValidationError(f"{value!r} {rule[1]}", key=key, line=line)
    return replace(cfg, **{group: replace(section, **{name: value})})


def validate(cfg: RunConfig) -> None:
    for key, (ok, msg) in RANGES.items():
        group, name = key.split(".")
        value = getattr(getattr(cfg, group), name)
        if not ok(value):
            raise ValidationError(f"{value!r} {msg}", key=key)
    cfg.corpus.validate()
    cfg.loss.validate()
    if cfg.encoder.d_model % cfg.encoder.heads:
        raise ValidationError("d_model must be divisible by heads", key="encoder.heads")
    if cfg.diffusion.width % cfg.diffusion.heads:
        raise ValidationError("width must be divisible by heads", key="diffusion.heads")
    if cfg.stage2.warmup > cfg.stage2.epochs:
        raise ValidationError("warmup cannot exceed epochs", key="stage2.warmup")
    if cfg.aug.warmup > cfg.aug.epochs:
        raise ValidationError("warmup cannot exceed epochs", key="aug.warmup")
    if cfg.eval.k >= cfg.corpus.num_relations:
        raise ValidationError("k must be smaller than the number of relations", key="eval.k")


def parse_config_text(text: str, overrides: dict[str, str] | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``overrides`` (from flags) win over the text."""
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError("expected 'key = value'", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        cfg = _assign(cfg, key, value, lineno)
    for key, value in (overrides or {}).items():
        cfg = _assign(cfg, key, value, None)
    validate(cfg)
    return cfg


def parse_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    text = Path(path).read_text() if path is not None else ""
    return parse_config_text(text, overrides)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return "; ".join(":".join(str(x) for x in g) for g in value)
    return repr(value) if isinstance(value, float) else str(value)


def config_snapshot(cfg: RunConfig) -> str:
    """Every key with its value, in declaration order; parses back to ``cfg``."""
    lines = []
    for group in fields(RunConfig):
        section = getattr(cfg, group.name)
        for f in fields(section):
            lines.append(f"{group.name}.{f.name} = {_format(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    """Short digest of the settings that affect results (paths excluded)."""
    cleaned = replace(cfg, run=replace(cfg.run, out_dir="", corpus_path="", stage1_checkpoint="",
                                       stage2_checkpoint=""))
    return hashlib.sha256(config_snapshot(cleaned).encode()).hexdigest()[:12]


def as_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
