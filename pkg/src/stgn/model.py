"""The STGN model family: variants, configuration and the stateful network."""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .graph_store import EventStore, NodeCatalog
from .semantics import SemanticSet, SumAggregator, UsAttnAggregator, pad_semantic_sets
from .structural import SemanticPositionalEncoder, TemporalGraphAttention
from .temporal import (DEFAULT_AOI_CAPACITY, DEFAULT_AOI_MAX_AGE, MemoryDivergence, MemoryUpdater,
                       aggregate_aoi_padded, aggregate_last_padded, aggregate_mean_padded)

AGGREGATORS = ("L", "M", "A")
SEMANTIC_MODES = ("off", "sum", "usattn")
STRUCTURE_MODES = ("off", "sum", "sum+spe")

# (temporal aggregator, structural semantics) per STGN family
STGN_FAMILIES = {
    "M1-STGN": ("sum", "off"),
    "M2-STGN": ("sum", "sum"),
    "M1-STGN+U": ("usattn", "off"),
    "M2-STGN+U": ("usattn", "sum"),
    "M2-STGN+SPE": ("sum", "sum+spe"),
    "M2-STGN+U+SPE": ("usattn", "sum+spe"),
}

_NAME_RE = re.compile(r"^(TGN|M1-STGN|M2-STGN)-([LMA])((?:\+U)?)((?:\+SPE)?)$")


@dataclass(frozen=True)
class Variant:
    aggregator: str = "L"
    semantics: str = "off"
    structure_semantics: str = "off"
    memory: bool = True

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}")
        if self.semantics not in SEMANTIC_MODES:
            raise ValueError(f"semantics must be one of {SEMANTIC_MODES}")
        if self.structure_semantics not in STRUCTURE_MODES:
            raise ValueError(f"structure_semantics must be one of {STRUCTURE_MODES}")
        if self.semantics == "off" and self.structure_semantics != "off":
            raise ValueError("structural semantics require temporal semantics")
        if not self.memory and (self.semantics != "off" or self.aggregator != "L"):
            raise ValueError("the memory-less (TGAT) variant takes no temporal options")

    @property
    def name(self) -> str:
        if not self.memory:
            return "TGAT"
        if self.semantics == "off":
            return f"TGN-{self.aggregator}"
        family = "M1-STGN" if self.structure_semantics == "off" else "M2-STGN"
        suffix = ("+U" if self.semantics == "usattn" else "")
        suffix += "+SPE" if self.structure_semantics == "sum+spe" else ""
        return f"{family}-{self.aggregator}{suffix}"

    @property
    def family(self) -> str:
        if not self.memory or self.semantics == "off":
            return self.name
        return re.sub(r"-[LMA]", "", self.name, count=1)

    @classmethod
    def parse(cls, name: str) -> "Variant":
        if name == "TGAT":
            return cls(memory=False)
        m = _NAME_RE.match(name)
        if not m:
            raise ValueError(f"unrecognised variant name {name!r}")
        base, agg, u, spe = m.groups()
        if base == "TGN":
            if u or spe:
                raise ValueError(f"{name!r}: TGN baselines take no semantic suffixes")
            return cls(agg)
        if base == "M1-STGN" and spe:
            raise ValueError(f"{name!r}: SPE acts on structural semantics (M2 only)")
        sem = "usattn" if u else "sum"
        struct = "off" if base == "M1-STGN" else ("sum+spe" if spe else "sum")
        return cls(agg, sem, struct)


def all_variants(include_tgat: bool = True) -> list[Variant]:
    """Every flag combination: TGAT, the three TGN baselines and each STGN family per aggregator."""
    out = [Variant(a) for a in AGGREGATORS]
    for a in AGGREGATORS:
        out += [Variant(a, sem, struct) for sem, struct in STGN_FAMILIES.values()]
    return ([Variant(memory=False)] if include_tgat else []) + out


def table_variants(aggregator: str = "L") -> list[Variant]:
    """The three TGN baselines plus the six STGN families at one aggregator."""
    return [Variant(a) for a in AGGREGATORS] + [
        Variant(aggregator, sem, struct) for sem, struct in STGN_FAMILIES.values()]


@dataclass
class TrainConfig:
    d_v: int = 64
    d_e: int = 8
    d_m: int = 100
    d_T: int = 100
    d_h: int = 64
    d_emb: int = 100
    n_heads: int = 2
    n_layers: int = 1
    n_neighbors: int = 10
    msg_capacity: int = DEFAULT_AOI_CAPACITY
    aoi_max_age: float = DEFAULT_AOI_MAX_AGE
    spe_hidden: int = 256
    spe_fourier_in: int = 64
    batch_size: int = 200
    eval_batch_size: int = 200
    epochs: int = 20
    learning_rate: float = 1e-4
    negatives_per_positive: int = 1
    seed: int = 0
    dtype: str = "float32"
    aggregator: str = "L"
    semantics: str = "off"
    structure_semantics: str = "off"
    memory: bool = True

    @property
    def variant(self) -> Variant:
        return Variant(self.aggregator, self.semantics, self.structure_semantics, self.memory)

    def with_variant(self, v: Variant | str) -> "TrainConfig":
        v = Variant.parse(v) if isinstance(v, str) else v
        n_layers = 2 if not v.memory else self.n_layers
        return replace(self, aggregator=v.aggregator, semantics=v.semantics,
                       structure_semantics=v.structure_semantics, memory=v.memory,
                       n_layers=n_layers)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class Decoder(nn.Module):
    """Two-layer MLP over ``[E_u || E_i]`` producing a logit."""

    def __init__(self, d_emb: int):
        super().__init__()
        self.fc1 = nn.Linear(2 * d_emb, d_emb)
        self.fc2 = nn.Linear(d_emb, 1)

    def logit(self, E_u, E_i):
        return self.fc2(F.relu(self.fc1(torch.cat([E_u, E_i], dim=-1)))).squeeze(-1)

    def forward(self, E_u, E_i):
        return torch.sigmoid(self.logit(E_u, E_i))


@dataclass
class _State:
    mem: torch.Tensor
    last_update: torch.Tensor
    msg_eu: torch.Tensor
    msg_ei: torch.Tensor
    processed: int = 0
    pending: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def clone(self) -> "_State":
        return _State(self.mem.clone(), self.last_update.clone(), self.msg_eu.clone(),
                      self.msg_ei.clone(), self.processed, self.pending.copy())


class STGN(nn.Module):
    """Memory-based temporal graph network with optional semantic enhancement.

    The network keeps non-trainable node state (memories, stored embedding
    snapshots) alongside its parameters. A batch is handled in two steps:
    :meth:`current_memory` applies messages of previously consumed events to
    the committed memories (differentiably), and :meth:`consume` commits
    those memories and queues the batch's own messages.
    """

    def __init__(self, config: TrainConfig, store: EventStore, catalog: NodeCatalog,
                 semantic_sets: dict[int, SemanticSet] | None = None,
                 time_origin: float = 0.0, time_scale: float = 1.0):
        super().__init__()
        self.config = config
        self.variant = config.variant
        self.store = store
        self.catalog = catalog
        self.time_origin = float(time_origin)
        self.time_scale = float(time_scale) if time_scale > 0 else 1.0
        v = self.variant
        torch.manual_seed(config.seed)
        gen = torch.Generator().manual_seed(config.seed + 1)

        self.register_buffer("node_features", torch.as_tensor(catalog.node_features).float())
        self.register_buffer("edge_features", torch.as_tensor(store.edge_features).float())
        needs_sem = v.semantics != "off"
        if needs_sem:
            if semantic_sets is None:
                raise ValueError(f"variant {v.name} needs semantic sets")
            genres, gmask = pad_semantic_sets(semantic_sets, list(catalog.item_ids))
            self.register_buffer("item_genres", genres.float())
            self.register_buffer("item_genre_mask", gmask)
            d_s = genres.shape[-1]
            self.sum_agg = SumAggregator(d_s, config.d_h)
            if v.semantics == "usattn":
                self.usattn = UsAttnAggregator(d_s, config.d_h, config.d_emb)

        d_msg = 2 * catalog.d_v + store.d_e + 1
        self.d_msg = d_msg
        if needs_sem:
            self.W1_t = nn.Linear(d_msg, d_msg, bias=False)
            self.W2_t = nn.Linear(config.d_h, d_msg, bias=False)
        if v.memory:
            if v.aggregator == "A":
                self.aoi_q = nn.Linear(config.d_m, config.d_m, bias=False)
                self.aoi_k = nn.Linear(d_msg, config.d_m, bias=False)
                self.aoi_v = nn.Linear(d_msg, d_msg, bias=False)
            self.updater = MemoryUpdater(d_msg, config.d_m)
            d_state = config.d_m
        else:
            d_state = catalog.d_v
        d_sem_block = 0
        if v.structure_semantics != "off":
            d_sem_block = config.d_h
            if v.structure_semantics == "sum+spe":
                self.spe = SemanticPositionalEncoder(config.d_h, config.d_h, D_h=config.spe_hidden,
                                                     D_m=config.spe_fourier_in, generator=gen)
        self.d_base = d_state + d_sem_block
        self.tgat = TemporalGraphAttention(self.d_base, config.d_T, config.d_emb,
                                           config.n_layers, config.n_heads)
        self.decoder = Decoder(config.d_emb)
        if config.dtype == "float64":
            self.double()
        self.reset_state()

    # ------------------------------------------------------------------ state
    @property
    def dtype(self):
        return self.node_features.dtype

    def reset_state(self) -> None:
        n, m = self.catalog.n_nodes, len(self.store)
        d_m = self.config.d_m if self.variant.memory else 0
        z = lambda *s: torch.zeros(*s, dtype=self.dtype)
        self.state = _State(z(n, d_m), z(n).double(), z(m, self.config.d_emb),
                            z(m, self.config.d_emb))

    def snapshot(self) -> _State:
        return self.state.clone()

    def restore(self, state: _State) -> None:
        self.state = state.clone()

    # --------------------------------------------------------------- messages
    def _raw_messages(self, ev: np.ndarray):
        s = self.store
        ev_t = torch.as_tensor(ev)
        users = torch.as_tensor(s.users[ev])
        items = torch.as_tensor(s.items[ev])
        tau = torch.as_tensor((s.timestamps[ev] - self.time_origin) / self.time_scale,
                              dtype=self.dtype).unsqueeze(-1)
        return torch.cat([self.node_features[users], self.node_features[items],
                          self.edge_features[ev_t], tau], dim=-1)

    def item_semantics(self, item_nodes=None, E_u_prev=None, E_i_prev=None):
        """Aggregated semantic vectors for items (summation, or UsAttn when snapshots given)."""
        rows = (slice(None) if item_nodes is None
                else torch.as_tensor(np.asarray(item_nodes) - self.catalog.n_users))
        genres, mask = self.item_genres[rows], self.item_genre_mask[rows]
        if E_u_prev is not None:
            return self.usattn(genres, mask, E_u_prev, E_i_prev)
        return self.sum_agg(genres, mask)

    def fused_messages(self, ev: np.ndarray):
        raw = self._raw_messages(ev)
        if self.variant.semantics == "off":
            return raw
        items = self.store.items[ev]
        if self.variant.semantics == "usattn":
            ev_t = torch.as_tensor(ev)
            S_k = self.item_semantics(items, self.state.msg_eu[ev_t], self.state.msg_ei[ev_t])
        else:
            S_k = self.item_semantics(items)
        return F.relu(self.W1_t(raw) + self.W2_t(S_k))

    # ----------------------------------------------------------------- memory
    def _message_slots(self, nodes: np.ndarray, upto: int):
        """Padded last-``M`` message event indices per node among events ``< upto``."""
        M = self.config.msg_capacity
        idx = np.full((len(nodes), M), -1, dtype=np.int64)
        for r, n in enumerate(nodes):
            evs = self.store.node_event_indices(int(n))
            k = np.searchsorted(evs, upto)
            chunk = evs[max(0, k - M):k]
            if len(chunk):
                idx[r, M - len(chunk):] = chunk
        return idx

    def current_memory(self, t_hat: float):
        """Committed memories with pending messages applied via the GRU."""
        st = self.state
        if not self.variant.memory:
            return st.mem
        nodes = st.pending
        if len(nodes) == 0:
            return st.mem
        idx = self._message_slots(nodes, st.processed)
        mask_np = idx >= 0
        uniq, inv = np.unique(idx[mask_np], return_inverse=True)
        fused = self.fused_messages(uniq)
        msgs = fused.new_zeros(idx.shape + (fused.shape[-1],))
        mask = torch.as_tensor(mask_np)
        msgs[mask] = fused[torch.as_tensor(inv)]
        prev = st.mem[torch.as_tensor(nodes)]
        agg = self.variant.aggregator
        if agg == "L":
            h, has = aggregate_last_padded(msgs, mask)
        elif agg == "M":
            h, has = aggregate_mean_padded(msgs, mask)
        else:
            times = torch.as_tensor(np.where(mask_np, self.store.timestamps[np.maximum(idx, 0)], 0.0))
            h, has = aggregate_aoi_padded(msgs, times, mask, torch.full((len(nodes),), t_hat,
                                                                        dtype=torch.float64),
                                          prev, self.aoi_q.weight, self.aoi_k.weight,
                                          self.aoi_v.weight, self.config.aoi_max_age,
                                          self.config.msg_capacity)
        new = self.updater(h, prev)
        new = torch.where(has.unsqueeze(-1), new, prev)
        if not torch.isfinite(new).all():
            raise MemoryDivergence("memory update produced non-finite values")
        return st.mem.index_put((torch.as_tensor(nodes),), new)

    def consume(self, start: int, stop: int, cur_mem, t_hat: float,
                E_u=None, E_i=None) -> None:
        """Commit ``cur_mem`` and queue messages of events ``[start, stop)``."""
        st = self.state
        if start != st.processed:
            raise ValueError(f"events must be consumed in order (expected {st.processed}, got {start})")
        if self.variant.memory and len(st.pending):
            st.mem = cur_mem.detach().clone()
            st.last_update[torch.as_tensor(st.pending)] = float(t_hat)
        if E_u is not None:
            st.msg_eu[start:stop] = E_u.detach()
            st.msg_ei[start:stop] = E_i.detach()
        st.processed = stop
        st.pending = np.unique(np.concatenate([self.store.users[start:stop],
                                               self.store.items[start:stop]]))

    # ------------------------------------------------------------- embedding
    def _structure_block(self):
        if self.variant.structure_semantics == "off":
            return None
        S = self.item_semantics()
        if self.variant.structure_semantics == "sum+spe":
            S = self.spe(S)
        return torch.cat([S.new_zeros(self.catalog.n_users, S.shape[-1]), S], dim=0)

    def _neighbor_fn(self, cutoff):
        N = self.config.n_neighbors
        s = self.store

        def fn(nodes, times):
            Q = len(nodes)
            nbr = np.zeros((Q, N), dtype=np.int64)
            nbr_t = np.zeros((Q, N))
            mask = np.zeros((Q, N), dtype=bool)
            for r, (n, t) in enumerate(zip(nodes, times)):
                lim = t if cutoff is None else min(t, cutoff)
                evs = s.recent_event_indices(int(n), lim, N)
                if not evs:
                    continue
                evs = np.asarray(evs)
                u = s.users[evs]
                nbr[r, :len(evs)] = np.where(u == n, s.items[evs], u)
                nbr_t[r, :len(evs)] = s.timestamps[evs]
                mask[r, :len(evs)] = True
            return nbr, nbr_t, mask
        return fn

    def embed(self, nodes, times, cur_mem, cutoff: float | None = None,
              weights_out: list | None = None):
        state_src = cur_mem if self.variant.memory else self.node_features
        sem = self._structure_block()

        def base(ns):
            ns_t = torch.as_tensor(ns)
            x = state_src[ns_t]
            return x if sem is None else torch.cat([x, sem[ns_t]], dim=-1)

        return self.tgat(nodes, times, base, self._neighbor_fn(cutoff), weights_out)

    def pair_logits(self, users, items, times, cur_mem, cutoff=None):
        n = len(users)
        nodes = np.concatenate([users, items])
        tt = np.concatenate([times, times])
        emb = self.embed(nodes, tt, cur_mem, cutoff)
        return self.decoder.logit(emb[:n], emb[n:]), emb[:n], emb[n:]

    def predict(self, users, items, times, cur_mem, cutoff=None):
        return torch.sigmoid(self.pair_logits(np.asarray(users), np.asarray(items),
                                              np.asarray(times, dtype=np.float64), cur_mem,
                                              cutoff)[0])

    def needs_snapshots(self) -> bool:
        return self.variant.semantics == "usattn"

    def advance(self, stop: int) -> None:
        """Consume events up to ``stop`` without scoring (no gradients)."""
        bs = self.config.eval_batch_size
        with torch.no_grad():
            while self.state.processed < stop:
                start = self.state.processed
                end = min(stop, start + bs)
                t_hat = float(self.store.timestamps[start])
                cur = self.current_memory(t_hat)
                E_u = E_i = None
                if self.needs_snapshots():
                    ev = np.arange(start, end)
                    emb = self.embed(np.concatenate([self.store.users[ev], self.store.items[ev]]),
                                     np.tile(self.store.timestamps[ev], 2), cur)
                    E_u, E_i = emb[:len(ev)], emb[len(ev):]
                self.consume(start, end, cur, t_hat, E_u, E_i)


def time_normalisation(store: EventStore, train_stop: int) -> tuple[float, float]:
    origin = float(store.timestamps[0])
    span = float(store.timestamps[max(0, train_stop - 1)]) - origin
    return origin, (span if span > 0 else 1.0)
