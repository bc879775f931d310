"""Toy document encoder and the pair-representation stack on top of it.

The encoder replaces a pretrained language model with a token embedding,
a learned relative-position score bias and one residual multi-head
self-attention layer.
Its output ``H`` and head-averaged attention ``A`` feed entity pooling,
localized context, pair projection, axial attention over the entity table
and a linear head producing ``|R|`` relation scores plus the NA score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import engine as E
from .corpus import SynthDocument
from .engine import Linear, Module, MultiHeadSelfAttention, Tensor
from .errors import ContractError, ShapeError, ValidationError

_MASK = -1e30


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    heads: int = 4
    pair_dim: int = 64
    use_positions: bool = True
    max_offset: int = 8  # relative-position buckets span [-max_offset, max_offset]


@dataclass
class EncodedDocument:
    H: Tensor  # (L, d_model)
    A: Tensor  # (L, L), rows sum to one
    marker_positions: tuple[tuple[int, ...], ...]


@dataclass
class DocOutput:
    features: Tensor  # (P, pair_dim), post axial attention
    logits: Tensor  # (P, |R| + 1), NA score last
    pairs: list[tuple[int, int]]


# ---------------------------------------------------------------------------
# Building blocks (pure functions of inputs and parameters)
# ---------------------------------------------------------------------------


def pool_entity(mentions: Tensor) -> Tensor:
    """Log-sum-exp pooling over the mention axis of an ``(m, d)`` tensor."""
    if mentions.shape[0] == 0:
        raise ContractError("pool_entity needs at least one mention")
    return E.logsumexp(mentions, axis=0)


def pool_entities(H: Tensor, marker_positions) -> Tensor:
    """Pool every entity at once; returns ``(n_entities, d)``."""
    if any(len(m) == 0 for m in marker_positions):
        raise ContractError("pool_entity needs at least one mention")
    width = max(len(m) for m in marker_positions)
    idx = np.zeros((len(marker_positions), width), dtype=np.int64)
    pad = np.zeros((len(marker_positions), width, 1))
    for i, pos in enumerate(marker_positions):
        idx[i, : len(pos)] = pos
        pad[i, len(pos):] = _MASK
    gathered = E.embedding_lookup(H, idx)
    if width > 1:
        gathered = gathered + Tensor(pad)
    return E.logsumexp(gathered, axis=1)


def context_weights(a_h: Tensor, a_t: Tensor) -> Tensor:
    """Normalized ``a_h * a_t``; rows whose mass is below 1e-12 fall back to uniform."""
    q = a_h * a_t
    s = E.tsum(q, axis=-1, keepdims=True)
    ok = s.data >= 1e-12
    s_safe = E.where(ok, s, 1.0)
    return E.where(ok, q / s_safe, 1.0 / q.shape[-1])


def localized_context(A: Tensor, h_markers, t_markers, H: Tensor) -> Tensor:
    """Context vector for one pair from the attention rows of its markers."""
    if not len(h_markers) or not len(t_markers):
        raise ContractError("localized_context needs at least one mention per entity")
    a_h = E.mean(A[np.asarray(h_markers)], axis=0, keepdims=True)
    a_t = E.mean(A[np.asarray(t_markers)], axis=0, keepdims=True)
    return E.matmul(context_weights(a_h, a_t), H).reshape(-1)


def _averaging_matrix(marker_positions, length: int) -> np.ndarray:
    avg = np.zeros((len(marker_positions), length))
    for i, pos in enumerate(marker_positions):
        for p in pos:
            avg[i, p] += 1.0 / len(pos)
    return avg


def localized_contexts(A: Tensor, H: Tensor, marker_positions, heads, tails) -> Tensor:
    """Batched :func:`localized_context` for index arrays ``heads``/``tails``."""
    a_ent = E.matmul(Tensor(_averaging_matrix(marker_positions, A.shape[0])), A)
    w = context_weights(a_ent[np.asarray(heads)], a_ent[np.asarray(tails)])
    return E.matmul(w, H)


def pair_representation(e_h: Tensor, e_t: Tensor, c: Tensor, proj: Linear) -> Tensor:
    """``tanh(W_p [e_h; e_t; c] + b_p)``, row-wise for batched inputs."""
    x = E.concat([e_h, e_t, c], axis=-1)
    if x.shape[-1] != proj.d_in:
        raise ShapeError("pair_representation", x.shape, proj.weight.shape)
    return E.tanh(proj(x))


class AxialAttention(Module):
    """Two residual single-head attention passes over an ``(n, n, d)`` entity table.

    The first pass attends down each column (pairs sharing the tail); the
    second re-projects from the first pass's output and attends along each row
    (pairs sharing the head).
    """

    def __init__(self, d: int, rng: np.random.Generator):
        super().__init__()
        self.d = d
        self.q_col = Linear(d, d, rng, bias=False)
        self.k_col = Linear(d, d, rng, bias=False)
        self.v_col = Linear(d, d, rng, bias=False)
        self.q_row = Linear(d, d, rng, bias=False)
        self.k_row = Linear(d, d, rng, bias=False)
        self.v_row = Linear(d, d, rng, bias=False)

    def __call__(self, table: Tensor) -> Tensor:
        if table.ndim != 3 or table.shape[0] != table.shape[1] or table.shape[2] != self.d:
            raise ShapeError("axial_attention", table.shape, (self.d,))
        scale = 1.0 / math.sqrt(self.d)
        # column pass, laid out as [t, h, d]
        q = self.q_col(table).transpose(1, 0, 2)
        k = self.k_col(table).transpose(1, 0, 2)
        v = self.v_col(table).transpose(1, 0, 2)
        attn = E.softmax(E.matmul(q, k.transpose(0, 2, 1)) * scale, axis=-1)
        r_h = table + E.matmul(attn, v).transpose(1, 0, 2)
        # row pass, laid out as [h, t, d]
        q = self.q_row(r_h)
        k = self.k_row(r_h)
        v = self.v_row(r_h)
        attn = E.softmax(E.matmul(q, k.transpose(0, 2, 1)) * scale, axis=-1)
        return r_h + E.matmul(attn, v)


def axial_attention(table: Tensor, params: AxialAttention) -> Tensor:
    return params(table)


def classify(x: Tensor, head: Linear) -> Tensor:
    """Affine map to ``|R| + 1`` logits; the last column is the NA score."""
    if x.shape[-1] != head.d_in:
        raise ShapeError("classify", x.shape, head.weight.shape)
    return head(x)


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _DocIndex:
    tokens: np.ndarray
    marker_positions: tuple[tuple[int, ...], ...]
    heads: np.ndarray
    tails: np.ndarray
    offdiag: np.ndarray  # flat indices of (h, t), h != t, into the n*n table
    pairs: tuple[tuple[int, int], ...]


@lru_cache(maxsize=8192)
def _doc_index(doc: SynthDocument) -> _DocIndex:
    n = doc.num_entities
    hh, tt = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    pairs = tuple(doc.pairs())
    offdiag = np.array([h * n + t for h, t in pairs], dtype=np.int64)
    return _DocIndex(
        tokens=np.asarray(doc.tokens, dtype=np.int64),
        marker_positions=tuple(e.marker_positions for e in doc.entities),
        heads=hh.ravel(),
        tails=tt.ravel(),
        offdiag=offdiag,
        pairs=pairs,
    )


class DocREModel(Module):
    def __init__(self, vocab_size: int, num_relations: int, config: EncoderConfig = EncoderConfig(),
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if config.d_model % config.heads:
            raise ValidationError("d_model must be divisible by heads", key="encoder.heads")
        self.config = config
        self.vocab_size = vocab_size
        self.num_relations = num_relations
        self.embedding = Tensor(rng.normal(size=(vocab_size, config.d_model)), requires_grad=True)
        self.attention = MultiHeadSelfAttention(config.d_model, config.heads, rng)
        # learned per-head score bias by clipped token offset
        offsets = np.arange(-config.max_offset, config.max_offset + 1)
        # starts local: score penalty grows with distance
        self.rel_bias = Tensor(np.repeat(-0.5 * np.abs(offsets)[:, None], config.heads, axis=1), requires_grad=True)
        self.pair_proj = Linear(3 * config.d_model, config.pair_dim, rng)
        self.axial = AxialAttention(config.pair_dim, rng)
        self.head = Linear(config.pair_dim, num_relations + 1, rng)

    # groups used for separate learning rates
    def encoder_parameters(self) -> list[Tensor]:
        return ([self.embedding, self.rel_bias] + self.attention.parameters() + self.pair_proj.parameters()
                + self.axial.parameters())

    def head_parameters(self) -> list[Tensor]:
        return self.head.parameters()

    def encode(self, tokens) -> tuple[Tensor, Tensor]:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise ValidationError(
                f"token id {int(tokens.max())} outside vocabulary of size {self.vocab_size}", key="tokens"
            )
        x = E.embedding_lookup(self.embedding, tokens)
        bias = None
        if self.config.use_positions:
            bias = E.embedding_lookup(self.rel_bias, _offsets(len(tokens), self.config.max_offset)).transpose(2, 0, 1)
        out, probs = self.attention(x, bias)
        return x + out, E.mean(probs, axis=0)

    def encode_document(self, doc: SynthDocument) -> EncodedDocument:
        H, A = self.encode(doc.tokens)
        return EncodedDocument(H, A, tuple(e.marker_positions for e in doc.entities))

    def pair_table(self, doc: SynthDocument) -> Tensor:
        """Pair representations for all ``n x n`` entity slots, before axial attention."""
        ix = _doc_index(doc)
        H, A = self.encode(ix.tokens)
        ent = pool_entities(H, ix.marker_positions)
        ctx = localized_contexts(A, H, ix.marker_positions, ix.heads, ix.tails)
        p = pair_representation(ent[ix.heads], ent[ix.tails], ctx, self.pair_proj)
        n = doc.num_entities
        return p.reshape(n, n, self.config.pair_dim)

    def doc_features(self, doc: SynthDocument) -> tuple[Tensor, list[tuple[int, int]]]:
        ix = _doc_index(doc)
        n = doc.num_entities
        table = self.axial(self.pair_table(doc))
        feats = table.reshape(n * n, self.config.pair_dim)[ix.offdiag]
        return feats, list(ix.pairs)

    def forward_doc(self, doc: SynthDocument) -> DocOutput:
        feats, pairs = self.doc_features(doc)
        return DocOutput(feats, classify(feats, self.head), pairs)

    def forward_batch(self, docs: list[SynthDocument]) -> tuple[Tensor, Tensor]:
        """Features and logits of every ordered pair of every document, concatenated."""
        feats = [self.doc_features(doc)[0] for doc in docs]
        x = feats[0] if len(feats) == 1 else E.concat(feats, axis=0)
        return x, classify(x, self.head)


@lru_cache(maxsize=64)
def _offsets(length: int, max_offset: int) -> np.ndarray:
    """Bucket index of ``j - i`` for every (query i, key j), clipped to the bias table."""
    pos = np.arange(length)
    idx = np.clip(pos[None, :] - pos[:, None], -max_offset, max_offset) + max_offset
    idx.setflags(write=False)
    return idx


def encode_document(doc: SynthDocument, model: DocREModel) -> EncodedDocument:
    return model.encode_document(doc)


def batch_labels(docs: list[SynthDocument], num_relations: int) -> np.ndarray:
    """Multi-hot labels aligned with :meth:`DocREModel.forward_batch` rows."""
    return np.concatenate([doc.pair_labels(num_relations) for doc in docs], axis=0)
