"""Time encoding, semantic positional encoding and temporal graph attention."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .semantics import masked_softmax


def encode_time(dt, omegas):
    """``sqrt(1/d_T) * cos(omega * dt)`` for scalar or batched gaps."""
    dt = torch.as_tensor(dt, dtype=omegas.dtype)
    return torch.cos(dt.unsqueeze(-1) * omegas) / math.sqrt(omegas.shape[-1])


class TimeEncoder(nn.Module):
    def __init__(self, d_T: int):
        super().__init__()
        if d_T < 1:
            raise ValueError("d_T must be at least 1")
        # frequencies spread over 1 .. 1e-9 rad/s cover second- to decade-scale gaps
        self.omegas = nn.Parameter(torch.from_numpy(1.0 / 10 ** np.linspace(0, 9, d_T)).float())

    @property
    def d_T(self) -> int:
        return self.omegas.shape[0]

    def forward(self, dt):
        return encode_time(dt, self.omegas)


def fourier_features(x, W_p):
    """``(1/sqrt(D_h)) [cos(W_p x) || sin(W_p x)]`` with ``W_p`` of shape ``(D_h/2, D_m)``."""
    proj = x @ W_p.T
    return torch.cat([torch.cos(proj), torch.sin(proj)], dim=-1) / math.sqrt(2 * W_p.shape[0])


class SemanticPositionalEncoder(nn.Module):
    """Learnable Fourier-feature encoding of an aggregated semantic vector.

    ``phi1`` is a one-hidden-layer MLP ``d_in -> D_m``; with ``bypass_phi1``
    the input feeds the Fourier layer directly (``D_m`` must equal ``d_in``).
    """

    def __init__(self, d_in: int, d_out: int, D_h: int = 256, D_m: int = 64,
                 D_mid: int | None = None, bypass_phi1: bool = False,
                 generator: torch.Generator | None = None):
        super().__init__()
        if D_h % 2:
            raise ValueError("D_h must be even")
        if bypass_phi1:
            D_m = d_in
            self.phi1 = nn.Identity()
        else:
            self.phi1 = nn.Sequential(nn.Linear(d_in, D_m), nn.GELU(), nn.Linear(D_m, D_m))
        D_mid = D_mid or D_h
        self.W_p = nn.Parameter(torch.randn(D_h // 2, D_m, generator=generator))
        self.W1_p = nn.Linear(D_h, D_mid, bias=False)
        self.W2_p = nn.Linear(D_mid, d_out, bias=False)

    def fourier(self, S_k):
        return fourier_features(self.phi1(S_k), self.W_p)

    def forward(self, S_k):
        return self.W2_p(F.gelu(self.W1_p(self.fourier(S_k))))


def augment_memory(mem, dt, time_encoder: TimeEncoder, semantic=None):
    """``[Mem || S || Phi(dt)]``; ``dt = 0`` for the centre node."""
    dt = torch.as_tensor(dt, dtype=mem.dtype)
    if torch.any(dt < 0):
        raise ValueError("neighbor interaction lies in the future of the query time")
    parts = [mem] if semantic is None else [mem, semantic]
    enc = time_encoder(dt).to(mem.dtype)
    if enc.ndim < mem.ndim:
        enc = enc.expand(*mem.shape[:-1], enc.shape[-1])
    return torch.cat(parts + [enc], dim=-1)


def neighbor_attention(center, neighbors, mask, W_Q, W_K, W_V, n_heads: int):
    """Multi-head scaled dot-product attention of one query over its neighbors.

    ``center (Q, d)``, ``neighbors (Q, N, d)``, ``mask (Q, N)``. Rows with no
    neighbors aggregate to zero. Returns ``(agg (Q, d_att), weights (Q, H, N))``.
    """
    q = center @ W_Q.T
    k = neighbors @ W_K.T
    v = neighbors @ W_V.T
    Q, N = mask.shape
    d_att = q.shape[-1]
    if d_att % n_heads:
        raise ValueError(f"attention width {d_att} not divisible by {n_heads} heads")
    dh = d_att // n_heads
    q = q.view(Q, n_heads, 1, dh)
    k = k.view(Q, N, n_heads, dh).transpose(1, 2)
    v = v.view(Q, N, n_heads, dh).transpose(1, 2)
    logits = (q * k).sum(-1) / math.sqrt(dh)
    w = masked_softmax(logits, mask.unsqueeze(1).expand(Q, n_heads, N))
    agg = (w.unsqueeze(-1) * v).sum(dim=-2).reshape(Q, d_att)
    return agg, w


class TgatLayer(nn.Module):
    def __init__(self, d_in: int, d_out: int, n_heads: int = 2, d_att: int | None = None):
        super().__init__()
        d_att = d_att or d_in
        d_att -= d_att % n_heads
        self.n_heads = n_heads
        self.W_Q = nn.Linear(d_in, d_att, bias=False)
        self.W_K = nn.Linear(d_in, d_att, bias=False)
        self.W_V = nn.Linear(d_in, d_att, bias=False)
        self.ffn = nn.Sequential(nn.Linear(d_in + d_att, d_out), nn.ReLU(), nn.Linear(d_out, d_out))

    def forward(self, center, neighbors, mask):
        agg, w = neighbor_attention(center, neighbors, mask, self.W_Q.weight, self.W_K.weight,
                                    self.W_V.weight, self.n_heads)
        return self.ffn(torch.cat([center, agg], dim=-1)), w


# neighbor_fn(nodes, times) -> (nbr_nodes (Q, N), nbr_times (Q, N), mask (Q, N)) as numpy
NeighborFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]]
BaseFn = Callable[[np.ndarray], torch.Tensor]


class TemporalGraphAttention(nn.Module):
    """Stack of 1 or 2 temporal attention layers over augmented node states.

    Layer inputs are ``[state || Phi(dt)]`` where ``state`` is the base
    vector (memory plus optional semantic block) at the first layer and the
    previous layer's embedding above it.
    """

    def __init__(self, d_base: int, d_T: int, d_emb: int, n_layers: int = 1, n_heads: int = 2):
        super().__init__()
        if n_layers not in (1, 2):
            raise ValueError("only 1 or 2 attention layers are supported")
        self.time = TimeEncoder(d_T)
        self.layers = nn.ModuleList(
            TgatLayer((d_base if l == 0 else d_emb) + d_T, d_emb, n_heads) for l in range(n_layers))

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def forward(self, nodes, times, base_fn: BaseFn, neighbor_fn: NeighborFn,
                weights_out: list | None = None):
        return self._embed(np.asarray(nodes), np.asarray(times, dtype=np.float64),
                           self.n_layers, base_fn, neighbor_fn, weights_out)

    def _embed(self, nodes, times, level, base_fn, neighbor_fn, weights_out):
        if level == 0:
            return base_fn(nodes)
        nbr, nbr_t, mask = neighbor_fn(nodes, times)
        Q, N = mask.shape
        center_state = self._embed(nodes, times, level - 1, base_fn, neighbor_fn, weights_out)
        dtype = center_state.dtype
        center = augment_memory(center_state, torch.zeros(Q, dtype=dtype), self.time)
        flat = mask.reshape(-1)
        valid = np.flatnonzero(flat)
        nbr_state = center_state.new_zeros(Q * N, center_state.shape[-1])
        if len(valid):
            sub = self._embed(nbr.reshape(-1)[valid], np.repeat(times, N)[valid], level - 1,
                              base_fn, neighbor_fn, weights_out)
            nbr_state = nbr_state.index_copy(0, torch.as_tensor(valid), sub)
        dt = np.where(mask, times[:, None] - nbr_t, 0.0)
        neighbors = augment_memory(nbr_state.view(Q, N, -1), torch.as_tensor(dt, dtype=dtype),
                                   self.time)
        out, w = self.layers[level - 1](center, neighbors, torch.as_tensor(mask))
        if weights_out is not None:
            weights_out.append((w, torch.as_tensor(mask)))
        return out
