"""Interaction messages, message aggregation and the GRU memory updater.

Aggregators come in two shapes: single-buffer functions that mirror the
per-node view, and padded batch versions (``*_padded``) used by the model.
Padded inputs are ``msgs (B, M, d)``, ``times (B, M)`` and ``mask (B, M)``
with slots ordered oldest to newest.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .graph_store import InteractionEvent, NodeCatalog
from .semantics import masked_softmax

SNAPSHOT_VERSION = 1
DEFAULT_AOI_CAPACITY = 10
DEFAULT_AOI_MAX_AGE = 30 * 24 * 3600.0


class MemoryDivergence(FloatingPointError):
    pass


@dataclass
class TemporalMessage:
    raw: torch.Tensor
    fused: torch.Tensor | None
    timestamp: float
    counterpart_item_id: int


@dataclass
class MemoryState:
    mem: torch.Tensor
    last_update: float = 0.0


@dataclass
class MessageBuffer:
    """Bounded per-node message history, kept in timestamp order."""

    capacity: int = DEFAULT_AOI_CAPACITY
    max_age: float = DEFAULT_AOI_MAX_AGE
    messages: deque = field(default_factory=deque)

    def __post_init__(self):
        self.messages = deque(self.messages, maxlen=self.capacity)

    def append(self, msg: TemporalMessage) -> None:
        if self.messages and msg.timestamp < self.messages[-1].timestamp:
            raise ValueError("messages must arrive in timestamp order")
        self.messages.append(msg)

    def __len__(self) -> int:
        return len(self.messages)

    def before(self, t_hat: float) -> list[TemporalMessage]:
        return [m for m in self.messages if m.timestamp < t_hat]


def raw_message(v_u, v_i, e, timestamp: float, t_origin: float = 0.0, t_scale: float = 1.0):
    """``[v_u || v_i || e || tau]`` with ``tau = (timestamp - t_origin) / t_scale``."""
    v_u, v_i, e = (torch.as_tensor(x, dtype=torch.float64) for x in (v_u, v_i, e))
    tau = torch.tensor([(timestamp - t_origin) / t_scale], dtype=v_u.dtype)
    return torch.cat([v_u, v_i, e, tau])


def fuse(raw, S_k, W1_t, W2_t):
    return F.relu(raw @ W1_t.T + S_k @ W2_t.T)


def build_message(event: InteractionEvent, catalog: NodeCatalog, S_k=None, W1_t=None,
                  W2_t=None, buffers: dict[int, MessageBuffer] | None = None,
                  t_origin: float = 0.0, t_scale: float = 1.0) -> TemporalMessage:
    """Build one interaction message and append it to both endpoints' buffers.

    Passing fusion weights switches semantics on, in which case ``S_k`` is
    mandatory.
    """
    raw = raw_message(catalog.node_features[event.user_id], catalog.node_features[event.item_id],
                      event.edge_features, event.timestamp, t_origin, t_scale)
    fused = None
    if W1_t is not None or W2_t is not None:
        if S_k is None:
            raise ValueError("semantic fusion requested but S_k is missing")
        fused = fuse(raw, torch.as_tensor(S_k, dtype=raw.dtype), W1_t, W2_t)
    msg = TemporalMessage(raw, fused, event.timestamp, event.item_id)
    if buffers is not None:
        for node in (event.user_id, event.item_id):
            buffers.setdefault(node, MessageBuffer()).append(msg)
    return msg


def _vector(msg: TemporalMessage):
    return msg.fused if msg.fused is not None else msg.raw


def _pad(msgs: list[TemporalMessage]):
    vecs = torch.stack([_vector(m) for m in msgs]).unsqueeze(0)
    times = torch.tensor([[m.timestamp for m in msgs]], dtype=torch.float64)
    return vecs, times, torch.ones_like(times, dtype=torch.bool)


def aggregate_last_padded(msgs, mask):
    """Newest valid slot per row; rows without any valid slot report ``False``."""
    has = mask.any(dim=-1)
    idx = torch.where(mask, torch.arange(mask.shape[-1]), -1).max(dim=-1).values.clamp_min(0)
    h = msgs[torch.arange(msgs.shape[0]), idx]
    return h, has


def aggregate_mean_padded(msgs, mask):
    has = mask.any(dim=-1)
    m = mask.to(msgs.dtype).unsqueeze(-1)
    h = (msgs * m).sum(dim=-2) / m.sum(dim=-2).clamp_min(1.0)
    return h, has


def aoi_filter(times, mask, t_hat, max_age: float, capacity: int):
    """Keep slots aged at most ``max_age`` and, of those, the newest ``capacity``."""
    t_hat = torch.as_tensor(t_hat, dtype=times.dtype).reshape(-1, 1)
    keep = mask & (t_hat - times <= max_age)
    newer = keep.flip(-1).cumsum(-1).flip(-1)  # count of kept slots at or after each slot
    return keep & (newer <= capacity)


def aggregate_aoi_padded(msgs, times, mask, t_hat, mem, W_q, W_k, W_v,
                         max_age: float = DEFAULT_AOI_MAX_AGE,
                         capacity: int = DEFAULT_AOI_CAPACITY, return_weights: bool = False):
    keep = aoi_filter(times, mask, t_hat, max_age, capacity)
    has = keep.any(dim=-1)
    q = mem @ W_q.T
    k = msgs @ W_k.T
    scores = (k * q.unsqueeze(-2)).sum(dim=-1)
    alphas = masked_softmax(scores, keep)
    h = (alphas.unsqueeze(-1) * (msgs @ W_v.T)).sum(dim=-2)
    return (h, has, alphas) if return_weights else (h, has)


def aggregate_last(buffer: MessageBuffer, t_hat: float):
    """Newest message strictly before ``t_hat``, or ``None`` for no update."""
    msgs = buffer.before(t_hat)
    return _vector(msgs[-1]) if msgs else None


def aggregate_mean(buffer: MessageBuffer, t_hat: float):
    msgs = buffer.before(t_hat)
    if not msgs:
        return None
    return torch.stack([_vector(m) for m in msgs]).mean(dim=0)


def aggregate_aoi(buffer: MessageBuffer, t_hat: float, mem: MemoryState, W_q, W_k, W_v):
    """Attention over fresh messages, queried by the node's memory.

    Approximates the age-of-information aggregator: messages older than
    ``buffer.max_age`` are dropped, at most ``buffer.capacity`` newest
    survivors are attended over.
    """
    msgs = buffer.before(t_hat)
    if not msgs:
        return None
    vecs, times, mask = _pad(msgs)
    h, has = aggregate_aoi_padded(vecs, times, mask, t_hat, mem.mem.unsqueeze(0), W_q, W_k, W_v,
                                  buffer.max_age, buffer.capacity)
    return h[0] if bool(has[0]) else None


def gru_step(h, mem, W_hZ, W_MZ, b_Z, W_hH, W_MH, b_H, W_hF, W_MF, b_F):
    F_gate = torch.sigmoid(h @ W_hF.T + mem @ W_MF.T + b_F)
    H = torch.tanh(h @ W_hH.T + (F_gate * mem) @ W_MH.T + b_H)
    Z = torch.sigmoid(h @ W_hZ.T + mem @ W_MZ.T + b_Z)
    return Z * H + (1 - Z) * mem


class MemoryUpdater(nn.Module):
    """GRU whose reset gate multiplies the memory before its projection."""

    def __init__(self, d_in: int, d_m: int):
        super().__init__()
        self.d_in, self.d_m = d_in, d_m
        bound = 1.0 / math.sqrt(d_m)
        for gate in "ZHF":
            setattr(self, f"W_h{gate}", nn.Parameter(torch.empty(d_m, d_in).uniform_(-bound, bound)))
            setattr(self, f"W_M{gate}", nn.Parameter(torch.empty(d_m, d_m).uniform_(-bound, bound)))
            setattr(self, f"b_{gate}", nn.Parameter(torch.empty(d_m).uniform_(-bound, bound)))

    def forward(self, h, mem):
        return gru_step(h, mem, self.W_hZ, self.W_MZ, self.b_Z, self.W_hH, self.W_MH, self.b_H,
                        self.W_hF, self.W_MF, self.b_F)


def update_memory(state: MemoryState, h, t_hat: float, updater: MemoryUpdater) -> MemoryState:
    if t_hat < state.last_update:
        raise ValueError("memory updates must move forward in time")
    new = updater(h, state.mem)
    if not torch.isfinite(new).all():
        raise MemoryDivergence("memory update produced non-finite values")
    return MemoryState(new, float(t_hat))


def save_memory_snapshot(path: str | Path, mem, last_update, node_ids=None) -> None:
    """JSON dump: ``{"version", "d_m", "nodes": [{"node_id", "mem", "last_update"}]}``."""
    mem = np.asarray(torch.as_tensor(mem).detach().cpu(), dtype=np.float64)
    last_update = np.asarray(torch.as_tensor(last_update).detach().cpu(), dtype=np.float64)
    ids = range(len(mem)) if node_ids is None else node_ids
    payload = {
        "version": SNAPSHOT_VERSION,
        "d_m": int(mem.shape[1]),
        "nodes": [{"node_id": int(n), "mem": mem[n].tolist(), "last_update": float(last_update[n])}
                  for n in ids],
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_memory_snapshot(path: str | Path, n_nodes: int | None = None):
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if d.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported memory snapshot version {d.get('version')!r}")
    n = n_nodes if n_nodes is not None else 1 + max((r["node_id"] for r in d["nodes"]), default=-1)
    mem = torch.zeros(n, d["d_m"], dtype=torch.float64)
    last = torch.zeros(n, dtype=torch.float64)
    for r in d["nodes"]:
        mem[r["node_id"]] = torch.tensor(r["mem"], dtype=torch.float64)
        last[r["node_id"]] = r["last_update"]
    return mem, last
