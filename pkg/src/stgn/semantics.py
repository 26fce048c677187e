"""Genre embeddings and semantic aggregation (summation and user-specific attention).

Weight matrices follow the ``torch.nn.Linear`` layout (``out x in``), so a
projection of ``x`` is ``x @ W.T``. All aggregators accept arbitrary leading
batch dimensions: genre stacks are ``(..., G, d_s)`` with a boolean mask
``(..., G)`` marking real (non-padding) genre slots.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .graph_store import NodeCatalog

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01


class UnknownGenreError(KeyError):
    pass


@dataclass
class GenreEmbeddingTable:
    mode: str
    vectors: dict[str, np.ndarray]
    d_s: int

    def __post_init__(self):
        if self.mode not in ("one-hot", "table"):
            raise ValueError(f"unknown table mode {self.mode!r}")
        for tok, v in self.vectors.items():
            if v.shape != (self.d_s,):
                raise ValueError(f"vector for {tok!r} has shape {v.shape}, expected ({self.d_s},)")

    @classmethod
    def one_hot(cls, tokens: Iterable[str]) -> "GenreEmbeddingTable":
        vocab = sorted(set(tokens))
        eye = np.eye(len(vocab))
        return cls("one-hot", {t: eye[k] for k, t in enumerate(vocab)}, len(vocab))

    @classmethod
    def from_catalog(cls, catalog: NodeCatalog) -> "GenreEmbeddingTable":
        return cls.one_hot(t for g in catalog.item_genres.values() for t in g)

    def lookup(self, tokens: Sequence[str]) -> np.ndarray:
        missing = sorted({t for t in tokens if t not in self.vectors})
        if missing:
            raise UnknownGenreError(f"tokens missing from embedding table: {missing}")
        return np.stack([self.vectors[t] for t in tokens])


def load_embedding_table(path: str | Path) -> GenreEmbeddingTable:
    """Load a ``token v1 ... vD`` whitespace-separated vector file.

    The width is taken from the first entry; later lines of another width
    are rejected.
    """
    vectors: dict[str, np.ndarray] = {}
    width = None
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            tok, vals = parts[0], parts[1:]
            if width is None:
                width = len(vals)
                if width == 0:
                    raise ValueError(f"{path}:{lineno}: entry has no vector values")
            if len(vals) != width:
                raise ValueError(f"{path}:{lineno}: expected {width} values, got {len(vals)}")
            vectors[tok] = np.asarray([float(v) for v in vals], dtype=np.float64)
    if width is None:
        raise ValueError(f"{path}: empty embedding table")
    return GenreEmbeddingTable("table", vectors, width)


@dataclass
class SemanticSet:
    item_id: int
    genre_vectors: np.ndarray

    @property
    def n_genres(self) -> int:
        return len(self.genre_vectors)


def encode_genres(catalog: NodeCatalog, table: GenreEmbeddingTable) -> dict[int, SemanticSet]:
    missing = sorted({t for g in catalog.item_genres.values() for t in g if t not in table.vectors})
    if missing:
        raise UnknownGenreError(f"tokens missing from embedding table: {missing}")
    return {item: SemanticSet(item, table.lookup(genres))
            for item, genres in sorted(catalog.item_genres.items())}


def pad_semantic_sets(sets: dict[int, SemanticSet], item_ids: Sequence[int]):
    """Stack semantic sets into ``(n, G, d_s)`` vectors plus a ``(n, G)`` mask."""
    g = max(sets[i].n_genres for i in item_ids)
    d_s = sets[item_ids[0]].genre_vectors.shape[1]
    vecs = np.zeros((len(item_ids), g, d_s))
    mask = np.zeros((len(item_ids), g), dtype=bool)
    for row, i in enumerate(item_ids):
        s = sets[i].genre_vectors
        vecs[row, :len(s)] = s
        mask[row, :len(s)] = True
    return torch.as_tensor(vecs), torch.as_tensor(mask)


def _as_stack(genres, mask):
    genres = torch.as_tensor(genres)
    if mask is None:
        mask = torch.ones(genres.shape[:-1], dtype=torch.bool)
    return genres, torch.as_tensor(mask, dtype=torch.bool)


def aggregate_sum(genres, W_s, b_s, mask=None):
    """Sum of ReLU(W_s s + b_s) over the real genre slots."""
    genres, mask = _as_stack(genres, mask)
    if genres.shape[-1] != W_s.shape[1]:
        raise ValueError(f"genre width {genres.shape[-1]} does not match W_s {tuple(W_s.shape)}")
    per_genre = F.relu(genres @ W_s.T + b_s)
    return (per_genre * mask.unsqueeze(-1).to(per_genre.dtype)).sum(dim=-2)


def user_specific_embedding(E_u_prev, E_i_prev, W_u, W_i, b_ui, slope: float = LEAKY_SLOPE):
    return F.leaky_relu(E_u_prev @ W_u.T + E_i_prev @ W_i.T + b_ui, negative_slope=slope)


def masked_softmax(logits, mask):
    """Softmax over the last axis restricted to ``mask``; max-subtracted."""
    if logits.shape[-1] == 0:
        return logits
    logits = logits.masked_fill(~mask, float("-inf"))
    top = logits.max(dim=-1, keepdim=True).values.detach()
    top = torch.where(torch.isfinite(top), top, torch.zeros_like(top))
    w = torch.exp(logits - top) * mask.to(logits.dtype)
    return w / w.sum(dim=-1, keepdim=True).clamp_min(torch.finfo(w.dtype).tiny)


def aggregate_usattn(genres, E_jk, W_Q, W_K, W_V, mask=None):
    """User-specific attention over an item's genres.

    Returns ``(S_jk, alphas)`` where ``alphas`` lie on the simplex over the
    real genre slots. Key/value projections are shared across slots.
    """
    genres, mask = _as_stack(genres, mask)
    q = E_jk @ W_Q.T
    k = genres @ W_K.T
    logits = (k * q.unsqueeze(-2)).sum(dim=-1)
    alphas = masked_softmax(logits, mask)
    v = genres @ W_V.T
    S_jk = F.relu((alphas.unsqueeze(-1) * v).sum(dim=-2))
    return S_jk, alphas


def skip_connect(S_jk, E_jk, n_genres):
    n = torch.as_tensor(n_genres, dtype=S_jk.dtype)
    if n.ndim:
        n = n.unsqueeze(-1)
    return n * S_jk + E_jk


class SumAggregator(nn.Module):
    def __init__(self, d_s: int, d_h: int):
        super().__init__()
        self.proj = nn.Linear(d_s, d_h)

    def forward(self, genres, mask):
        return aggregate_sum(genres, self.proj.weight, self.proj.bias, mask)


class UsAttnAggregator(nn.Module):
    """User-specific attention followed by the N_s-scaled skip connection."""

    def __init__(self, d_s: int, d_h: int, d_emb: int, d_att: int | None = None):
        super().__init__()
        d_att = d_att or d_h
        self.W_Q = nn.Linear(d_h, d_att, bias=False)
        self.W_K = nn.Linear(d_s, d_att, bias=False)
        self.W_V = nn.Linear(d_s, d_h, bias=False)
        self.W_u = nn.Linear(d_emb, d_h, bias=False)
        self.W_i = nn.Linear(d_emb, d_h)

    def forward(self, genres, mask, E_u_prev, E_i_prev, return_weights: bool = False):
        E_jk = user_specific_embedding(E_u_prev, E_i_prev, self.W_u.weight, self.W_i.weight,
                                       self.W_i.bias)
        S_jk, alphas = aggregate_usattn(genres, E_jk, self.W_Q.weight, self.W_K.weight,
                                        self.W_V.weight, mask)
        S_k = skip_connect(S_jk, E_jk, mask.sum(dim=-1))
        return (S_k, alphas) if return_weights else S_k


def genre_similarity_matrix(table: GenreEmbeddingTable, tokens: Sequence[str]) -> np.ndarray:
    """Pairwise cosine similarities; zero vectors score 0 off-diagonal and 1 on it."""
    vecs = table.lookup(tokens)
    norms = np.linalg.norm(vecs, axis=1)
    zero = norms == 0
    if zero.any():
        warnings.warn(f"zero embedding vectors for {[t for t, z in zip(tokens, zero) if z]}",
                      RuntimeWarning, stacklevel=2)
    safe = np.where(zero, 1.0, norms)
    unit = vecs / safe[:, None]
    sim = unit @ unit.T
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    np.fill_diagonal(sim, 1.0)
    return (sim + sim.T) / 2
