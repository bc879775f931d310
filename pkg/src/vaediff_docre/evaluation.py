"""Relation-extraction metrics with a long-tail split, plus report and embedding export.

A fact is ``(doc_id, head, tail, relation)``.  Predictions use the moving
threshold rule: relation ``r`` is predicted for a pair iff ``f_r > f_eta``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .corpus import SynthDocument
from .engine import no_grad
from .errors import ContractError

Fact = tuple[str, int, int, int]


@dataclass(frozen=True)
class Scores:
    precision: float
    recall: float
    f1: float
    tp: int
    n_pred: int
    n_gold: int


def gold_facts(docs: list[SynthDocument]) -> set[Fact]:
    return {(d.doc_id, h, t, r) for d in docs for h, t, r in d.facts}


def facts_from_logits(doc: SynthDocument, logits: np.ndarray) -> set[Fact]:
    """Facts whose score strictly beats the NA score, for a doc's pair-ordered logits."""
    logits = np.asarray(logits)
    R = logits.shape[1] - 1
    rows, rels = np.nonzero(logits[:, :R] > logits[:, R:])
    pairs = doc.pairs()
    return {(doc.doc_id, pairs[i][0], pairs[i][1], int(r)) for i, r in zip(rows, rels)}


def predict_facts(model, docs: list[SynthDocument]) -> set[Fact]:
    out: set[Fact] = set()
    with no_grad():
        for doc in docs:
            out |= facts_from_logits(doc, model.forward_doc(doc).logits.data)
    return out


def micro_f1(pred: set, gold: set) -> Scores:
    tp = len(pred & gold)
    p = tp / len(pred) if pred else 0.0
    r = tp / len(gold) if gold else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return Scores(p, r, f, tp, len(pred), len(gold))


def entity_surfaces(docs: list[SynthDocument]) -> dict[str, tuple[int, ...]]:
    return {d.doc_id: tuple(e.surface for e in d.entities) for d in docs}


def surface_triples(docs: list[SynthDocument]) -> set[tuple[int, int, int]]:
    """Facts keyed by entity identity rather than position, for overlap filtering."""
    out = set()
    for d in docs:
        for h, t, r in d.facts:
            out.add((d.entities[h].surface, d.entities[t].surface, r))
    return out


def ign_f1(pred: set, gold: set, train_triples: set, surfaces: dict[str, tuple[int, ...]]) -> Scores:
    """Micro F1 after dropping every fact whose (head, tail, relation) identity was seen in training."""

    def seen(f: Fact) -> bool:
        doc, h, t, r = f
        s = surfaces[doc]
        return (s[h], s[t], r) in train_triples

    return micro_f1({f for f in pred if not seen(f)}, {f for f in gold if not seen(f)})


def relation_counts(docs: list[SynthDocument], num_relations: int) -> np.ndarray:
    counts = np.zeros(num_relations, dtype=np.int64)
    for d in docs:
        for _, _, r in d.facts:
            counts[r] += 1
    return counts


def frequent_relations(counts, k: int) -> frozenset[int]:
    """The ``k`` most frequent relation ids; ties go to the smaller id."""
    counts = np.asarray(counts)
    if not 0 <= k < len(counts):
        raise ContractError(f"k must lie in [0, {len(counts)}), got {k}")
    order = sorted(range(len(counts)), key=lambda r: (-counts[r], r))
    return frozenset(order[:k])


def freq_ltail_f1(pred: set, gold: set, k: int, train_counts) -> tuple[Scores, Scores]:
    head = frequent_relations(train_counts, k)

    def part(facts, in_head):
        return {f for f in facts if (f[3] in head) == in_head}

    return micro_f1(part(pred, True), part(gold, True)), micro_f1(part(pred, False), part(gold, False))


@dataclass
class EvalReport:
    f1: float
    ign_f1: float
    freq_f1: float
    ltail_f1: float
    precision: float
    recall: float
    per_relation: dict[str, dict[str, float]]

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("f1", "ign_f1", "freq_f1", "ltail_f1", "precision", "recall")}


def score_facts(pred: set, docs: list[SynthDocument], train_docs: list[SynthDocument],
                num_relations: int, k: int = 5) -> EvalReport:
    gold = gold_facts(docs)
    micro = micro_f1(pred, gold)
    ign = ign_f1(pred, gold, surface_triples(train_docs), entity_surfaces(docs))
    freq, ltail = freq_ltail_f1(pred, gold, k, relation_counts(train_docs, num_relations))
    per_rel = {}
    for r in range(num_relations):
        s = micro_f1({f for f in pred if f[3] == r}, {f for f in gold if f[3] == r})
        per_rel[str(r)] = {"precision": s.precision, "recall": s.recall, "f1": s.f1, "support": s.n_gold}
    return EvalReport(micro.f1, ign.f1, freq.f1, ltail.f1, micro.precision, micro.recall, per_rel)


def evaluate(model, docs: list[SynthDocument], train_docs: list[SynthDocument], num_relations: int,
             k: int = 5) -> EvalReport:
    return score_facts(predict_facts(model, docs), docs, train_docs, num_relations, k)


def write_report(report: EvalReport, json_path, csv_path=None) -> None:
    Path(json_path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scope", "precision", "recall", "f1", "support"])
            w.writerow(["micro", report.precision, report.recall, report.f1, ""])
            w.writerow(["ign", "", "", report.ign_f1, ""])
            w.writerow(["freq", "", "", report.freq_f1, ""])
            w.writerow(["ltail", "", "", report.ltail_f1, ""])
            for r, s in report.per_relation.items():
                w.writerow([f"relation_{r}", s["precision"], s["recall"], s["f1"], s["support"]])


# ---------------------------------------------------------------------------
# Embedding export
# ---------------------------------------------------------------------------


def _label_string(row) -> str:
    ids = np.flatnonzero(np.asarray(row) > 0)
    return ",".join(str(i) for i in ids) if ids.size else "NA"


def export_embeddings(features, labels, path, dim: int | None = None) -> None:
    """Tab-separated rows of ``label-set, x_0, x_1, ...`` under a header line."""
    features = np.asarray(features, dtype=np.float64)
    dim = features.shape[1] if features.ndim == 2 and features.size else (dim or 0)
    with open(path, "w") as fh:
        fh.write("\t".join(["labels"] + [f"x{i}" for i in range(dim)]) + "\n")
        for x, y in zip(features, labels):
            fh.write("\t".join([_label_string(y)] + [repr(float(v)) for v in x]) + "\n")


def load_embeddings(path, num_relations: int) -> tuple[np.ndarray, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    dim = len(lines[0].split("\t")) - 1
    feats = np.zeros((len(lines) - 1, dim))
    labels = np.zeros((len(lines) - 1, num_relations))
    for i, line in enumerate(lines[1:]):
        cols = line.split("\t")
        if cols[0] != "NA":
            labels[i, [int(c) for c in cols[0].split(",")]] = 1.0
        feats[i] = [float(c) for c in cols[1:]]
    return feats, labels
