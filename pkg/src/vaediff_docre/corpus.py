"""Synthetic long-tail, multi-label relation extraction corpus.

Documents are token-id sequences. Every mention is written as
``* <surface> *`` where ``*`` is the marker token. A gold fact bundle for an
ordered pair ``(h, t)`` is realized as one segment::

    * s_h *  trig_r1 [trig_r2 ...]  * s_t *

so a trigger for relation ``r`` sits between consecutive mentions of ``h`` and
``t`` exactly when ``(h, t, r)`` is gold. Relation frequencies follow Zipf
weights, and configured co-occurrence groups add correlated labels.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError, ValidationError, VersionError
from .rng import derive_rng

CORPUS_MAGIC = b"VDCORP"
CORPUS_VERSION = 1
_HEADER = struct.Struct("<6sHQ")
_CRC = struct.Struct("<I")


@dataclass(frozen=True)
class CorpusConfig:
    num_relations: int = 24
    zipf_exponent: float = 1.2
    general_vocab: int = 200
    n_train: int = 600
    n_dev: int = 100
    n_test: int = 100
    min_entities: int = 4
    max_entities: int = 8
    min_mentions: int = 1
    max_mentions: int = 3
    positive_rate: float = 0.07
    na_target: float = 0.9
    cooccur_prob: float = 0.5
    cooccur_groups: tuple[tuple[int, ...], ...] = ((5, 6), (11, 12, 13), (19, 20))
    spurious_trigger_prob: float = 0.0
    filler_min: int = 1
    filler_max: int = 4

    def validate(self) -> None:
        def need(cond, key, msg):
            if not cond:
                raise ValidationError(msg, key=f"corpus.{key}")

        need(self.num_relations >= 1, "num_relations", "need at least one relation")
        need(self.zipf_exponent >= 0, "zipf_exponent", "must be >= 0")
        need(self.n_train + self.n_dev + self.n_test >= 50, "n_train", "need at least 50 documents in total")
        need(min(self.n_train, self.n_dev, self.n_test) >= 0, "n_train", "split sizes must be >= 0")
        need(2 <= self.min_entities <= self.max_entities, "min_entities", "need 2 <= min_entities <= max_entities")
        need(1 <= self.min_mentions <= self.max_mentions, "min_mentions", "need 1 <= min_mentions <= max_mentions")
        need(
            self.general_vocab >= self.max_entities + 1,
            "general_vocab",
            f"general vocabulary of {self.general_vocab} cannot hold {self.max_entities} distinct surfaces plus filler",
        )
        need(0 <= self.positive_rate <= 1, "positive_rate", "must lie in [0, 1]")
        need(0 <= self.na_target <= 1, "na_target", "must lie in [0, 1]")
        need(0 <= self.cooccur_prob <= 1, "cooccur_prob", "must lie in [0, 1]")
        need(0 <= self.spurious_trigger_prob <= 1, "spurious_trigger_prob", "must lie in [0, 1]")
        need(0 <= self.filler_min <= self.filler_max and self.filler_max >= 1, "filler_min", "bad filler range")
        seen: set[int] = set()
        for group in self.cooccur_groups:
            need(len(group) >= 2, "cooccur_groups", f"group {group} needs at least two relations")
            for r in group:
                need(0 <= r < self.num_relations, "cooccur_groups", f"relation {r} out of range")
                need(r not in seen, "cooccur_groups", f"relation {r} appears in two groups")
                seen.add(r)


@dataclass(frozen=True)
class RelationSchema:
    num_relations: int
    weights: tuple[float, ...]
    cooccur_groups: tuple[tuple[int, ...], ...]
    general_vocab: int

    @property
    def trigger_tokens(self) -> tuple[int, ...]:
        return tuple(range(self.general_vocab, self.general_vocab + self.num_relations))

    @property
    def marker_token(self) -> int:
        return self.general_vocab + self.num_relations

    @property
    def vocab_size(self) -> int:
        return self.general_vocab + self.num_relations + 1

    def group_of(self, r: int) -> tuple[int, ...]:
        for group in self.cooccur_groups:
            if r in group:
                return group
        return (r,)

    @classmethod
    def from_config(cls, config: CorpusConfig) -> "RelationSchema":
        ranks = np.arange(1, config.num_relations + 1, dtype=np.float64)
        weights = ranks ** (-config.zipf_exponent)
        weights = weights / weights.sum()
        return cls(
            num_relations=config.num_relations,
            weights=tuple(float(w) for w in weights),
            cooccur_groups=tuple(tuple(g) for g in config.cooccur_groups),
            general_vocab=config.general_vocab,
        )


@dataclass(frozen=True)
class Entity:
    surface: int
    mentions: tuple[tuple[int, int], ...]  # (start, end) of the surface tokens, end exclusive

    @property
    def marker_positions(self) -> tuple[int, ...]:
        """Index of the opening ``*`` marker of every mention."""
        return tuple(start - 1 for start, _ in self.mentions)


@dataclass(frozen=True)
class SynthDocument:
    doc_id: str
    tokens: tuple[int, ...]
    entities: tuple[Entity, ...]
    facts: tuple[tuple[int, int, int], ...]  # sorted (h, t, r)

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    def pairs(self) -> list[tuple[int, int]]:
        n = self.num_entities
        return [(h, t) for h in range(n) for t in range(n) if h != t]

    def label_matrix(self, num_relations: int) -> np.ndarray:
        n = self.num_entities
        out = np.zeros((n, n, num_relations))
        for h, t, r in self.facts:
            out[h, t, r] = 1.0
        return out

    def pair_labels(self, num_relations: int) -> np.ndarray:
        """Multi-hot labels for ``pairs()`` in order, shape ``(n(n-1), |R|)``."""
        mat = self.label_matrix(num_relations)
        return np.array([mat[h, t] for h, t in self.pairs()]).reshape(-1, num_relations)


@dataclass
class Corpus:
    config: CorpusConfig
    seed: int
    schema: RelationSchema
    train: list[SynthDocument] = field(default_factory=list)
    dev: list[SynthDocument] = field(default_factory=list)
    test: list[SynthDocument] = field(default_factory=list)

    def split(self, name: str) -> list[SynthDocument]:
        if name not in ("train", "dev", "test"):
            raise ValidationError(f"unknown split {name!r}", key="split")
        return getattr(self, name)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _sample_labels(rng: np.random.Generator, schema: RelationSchema, config: CorpusConfig) -> tuple[int, ...]:
    r = int(rng.choice(schema.num_relations, p=np.asarray(schema.weights)))
    labels = {r}
    for other in schema.group_of(r):
        if other != r and rng.random() < config.cooccur_prob:
            labels.add(other)
    return tuple(sorted(labels))


def generate_document(doc_id: str, rng: np.random.Generator, schema: RelationSchema,
                      config: CorpusConfig) -> SynthDocument:
    n = int(rng.integers(config.min_entities, config.max_entities + 1))
    surfaces = rng.choice(config.general_vocab, size=n, replace=False)
    budget = rng.integers(config.min_mentions, config.max_mentions + 1, size=n)

    all_pairs = [(h, t) for h in range(n) for t in range(n) if h != t]
    k = max(1, int(rng.binomial(len(all_pairs), config.positive_rate)))
    uses = np.zeros(n, dtype=int)
    chosen: list[tuple[int, int]] = []
    for idx in rng.permutation(len(all_pairs)):
        if len(chosen) == k:
            break
        h, t = all_pairs[idx]
        if uses[h] < config.max_mentions and uses[t] < config.max_mentions:
            chosen.append((h, t))
            uses[h] += 1
            uses[t] += 1

    segments: list[tuple] = []
    facts = []
    for h, t in chosen:
        labels = _sample_labels(rng, schema, config)
        triggers = [schema.trigger_tokens[r] for r in labels]
        rng.shuffle(triggers)
        segments.append(("fact", h, t, tuple(triggers)))
        facts.extend((h, t, r) for r in labels)
    for e in range(n):
        for _ in range(max(int(budget[e]) - int(uses[e]), 0)):
            segments.append(("solo", e))
    order = rng.permutation(len(segments))

    filler_pool = np.setdiff1d(np.arange(config.general_vocab), surfaces)
    marker = schema.marker_token
    tokens: list[int] = []
    mentions: list[list[tuple[int, int]]] = [[] for _ in range(n)]

    def filler():
        length = int(rng.integers(config.filler_min, config.filler_max + 1))
        for _ in range(length):
            if config.spurious_trigger_prob and rng.random() < config.spurious_trigger_prob:
                tokens.append(int(rng.choice(schema.trigger_tokens)))
            else:
                tokens.append(int(rng.choice(filler_pool)))

    def mention(e):
        tokens.append(marker)
        start = len(tokens)
        tokens.append(int(surfaces[e]))
        mentions[e].append((start, start + 1))
        tokens.append(marker)

    for i in order:
        filler()
        seg = segments[i]
        if seg[0] == "fact":
            _, h, t, triggers = seg
            mention(h)
            tokens.extend(triggers)
            mention(t)
        else:
            mention(seg[1])
    filler()

    entities = tuple(Entity(int(surfaces[e]), tuple(mentions[e])) for e in range(n))
    return SynthDocument(doc_id, tuple(tokens), entities, tuple(sorted(set(facts))))


def generate_corpus(config: CorpusConfig = CorpusConfig(), seed: int = 0) -> Corpus:
    """Build train/dev/test splits; a pure function of ``(config, seed)``."""
    config.validate()
    schema = RelationSchema.from_config(config)
    corpus = Corpus(config=config, seed=seed, schema=schema)
    index = 0
    for split, size in (("train", config.n_train), ("dev", config.n_dev), ("test", config.n_test)):
        docs = []
        for _ in range(size):
            docs.append(generate_document(f"{split}-{index:05d}", derive_rng(seed, "doc", index), schema, config))
            index += 1
        setattr(corpus, split, docs)
    return corpus


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


@dataclass
class CorpusStats:
    n_docs: int
    n_relations: int
    n_entities: int
    n_facts: int
    n_pairs: int
    n_na_pairs: int
    per_relation: list[int]

    @property
    def na_fraction(self) -> float:
        return self.n_na_pairs / self.n_pairs if self.n_pairs else 0.0

    def top_k_share(self, k: int) -> float:
        """Fraction of facts covered by the ``k`` most frequent relations."""
        if not self.n_facts:
            return 0.0
        return float(sum(sorted(self.per_relation, reverse=True)[:k]) / self.n_facts)


def split_stats(docs: list[SynthDocument], num_relations: int) -> CorpusStats:
    per_relation = [0] * num_relations
    n_pairs = n_na = n_ent = 0
    for doc in docs:
        n = doc.num_entities
        n_ent += n
        n_pairs += n * (n - 1)
        positive = {(h, t) for h, t, _ in doc.facts}
        n_na += n * (n - 1) - len(positive)
        for _, _, r in doc.facts:
            per_relation[r] += 1
    return CorpusStats(len(docs), num_relations, n_ent, sum(per_relation), n_pairs, n_na, per_relation)


def corpus_stats(corpus: Corpus, split: str = "train") -> CorpusStats:
    return split_stats(corpus.split(split), corpus.schema.num_relations)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _doc_to_dict(doc: SynthDocument) -> dict:
    return {
        "id": doc.doc_id,
        "tokens": list(doc.tokens),
        "entities": [{"surface": e.surface, "mentions": [list(m) for m in e.mentions]} for e in doc.entities],
        "facts": [list(f) for f in doc.facts],
    }


def _doc_from_dict(d: dict) -> SynthDocument:
    return SynthDocument(
        doc_id=d["id"],
        tokens=tuple(d["tokens"]),
        entities=tuple(Entity(e["surface"], tuple(tuple(m) for m in e["mentions"])) for e in d["entities"]),
        facts=tuple(tuple(f) for f in d["facts"]),
    )


def corpus_to_bytes(corpus: Corpus) -> bytes:
    cfg = asdict(corpus.config)
    cfg["cooccur_groups"] = [list(g) for g in corpus.config.cooccur_groups]
    payload = {
        "config": cfg,
        "seed": corpus.seed,
        "schema": {
            "num_relations": corpus.schema.num_relations,
            "weights": list(corpus.schema.weights),
            "cooccur_groups": [list(g) for g in corpus.schema.cooccur_groups],
            "general_vocab": corpus.schema.general_vocab,
        },
        "splits": {s: [_doc_to_dict(d) for d in corpus.split(s)] for s in ("train", "dev", "test")},
    }
    body = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    head = _HEADER.pack(CORPUS_MAGIC, CORPUS_VERSION, len(body))
    return head + body + _CRC.pack(zlib.crc32(head + body))


def corpus_from_bytes(blob: bytes) -> Corpus:
    if len(blob) < _HEADER.size + _CRC.size:
        raise ChecksumError(f"corpus file truncated ({len(blob)} bytes)")
    magic, version, length = _HEADER.unpack_from(blob)
    if magic != CORPUS_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CORPUS_MAGIC!r}")
    end = _HEADER.size + length
    if len(blob) != end + _CRC.size:
        raise ChecksumError(f"corpus file length {len(blob)} does not match header ({end + _CRC.size}); truncated?")
    (crc,) = _CRC.unpack_from(blob, end)
    if zlib.crc32(blob[:end]) != crc:
        raise ChecksumError("corpus CRC32 mismatch")
    # an intact file from a different writer version
    if version != CORPUS_VERSION:
        raise VersionError(f"corpus format version {version} is not supported (expected {CORPUS_VERSION})")
    try:
        payload = json.loads(blob[_HEADER.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corpus payload is not decodable: {exc}") from None
    cfg = payload["config"]
    known = {f.name for f in fields(CorpusConfig)}
    cfg = {k: v for k, v in cfg.items() if k in known}
    cfg["cooccur_groups"] = tuple(tuple(g) for g in cfg["cooccur_groups"])
    sch = payload["schema"]
    schema = RelationSchema(
        num_relations=sch["num_relations"],
        weights=tuple(sch["weights"]),
        cooccur_groups=tuple(tuple(g) for g in sch["cooccur_groups"]),
        general_vocab=sch["general_vocab"],
    )
    corpus = Corpus(config=CorpusConfig(**cfg), seed=payload["seed"], schema=schema)
    for s in ("train", "dev", "test"):
        setattr(corpus, s, [_doc_from_dict(d) for d in payload["splits"][s]])
    return corpus


def save_corpus(corpus: Corpus, path) -> None:
    Path(path).write_bytes(corpus_to_bytes(corpus))


def load_corpus(path) -> Corpus:
    return corpus_from_bytes(Path(path).read_bytes())
