"""Popularity-driven three-tier cache placement and hit-rate simulation.

Time is split into cache-update periods of ``delta_P`` seconds. At each
period boundary the candidate items are scored for every user active in the
period at ``floor(delta_P / delta_p) + 1`` prediction slots; an item's
popularity is the number of (user, slot) predictions above ``p_thre``. The
ranked candidates fill Tier 1, then Tier 2, then Tier 3 and stay frozen for
the whole period while requests are routed bottom-up.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

# scorer(users, items, t_hat, period_start) -> (len(users), len(items)) preferences
Scorer = Callable[[np.ndarray, np.ndarray, float, float], np.ndarray]


@dataclass(frozen=True)
class SimConfig:
    delta_P: float = 3600.0
    delta_p: float = 60.0
    p_thre: float = 0.995
    tier_capacities: tuple[int, ...] = (5, 7, 8)
    candidate_window: float = 180000.0
    n_periods: int = 24

    def __post_init__(self):
        object.__setattr__(self, "tier_capacities", tuple(int(c) for c in self.tier_capacities))
        if not 0 < self.delta_p <= self.delta_P:
            raise ValueError("need 0 < delta_p <= delta_P")
        if not 0.0 < self.p_thre < 1.0:
            raise ValueError("p_thre must lie in (0, 1)")
        if not self.tier_capacities or any(c <= 0 for c in self.tier_capacities):
            raise ValueError("tier capacities must be positive")
        if self.candidate_window <= 0 or self.n_periods < 1:
            raise ValueError("candidate_window and n_periods must be positive")

    @property
    def n_slots(self) -> int:
        return math.floor(self.delta_P / self.delta_p) + 1

    @property
    def total_capacity(self) -> int:
        return sum(self.tier_capacities)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tier_capacities"] = list(self.tier_capacities)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class PopularityTable:
    slot_counts: dict[int, list[int]]

    @property
    def totals(self) -> dict[int, int]:
        return {k: int(sum(v)) for k, v in self.slot_counts.items()}

    def __getitem__(self, item: int) -> int:
        return int(sum(self.slot_counts[item]))

    def items(self) -> list[int]:
        return list(self.slot_counts)


@dataclass
class CacheState:
    """Per-tier content lists, most recently used first."""

    capacities: tuple[int, ...]
    tiers: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.tiers:
            self.tiers = [[] for _ in self.capacities]
        self.check()

    def check(self) -> None:
        seen = set()
        for t, (lst, cap) in enumerate(zip(self.tiers, self.capacities)):
            if len(lst) > cap:
                raise ValueError(f"tier {t + 1} holds {len(lst)} items, capacity {cap}")
            dup = seen.intersection(lst)
            if dup or len(set(lst)) != len(lst):
                raise ValueError(f"item(s) {sorted(dup) or lst} cached more than once")
            seen.update(lst)

    def locate(self, item: int) -> int | None:
        """Index of the first tier holding ``item``, or ``None``."""
        for t, lst in enumerate(self.tiers):
            if item in lst:
                return t
        return None

    def contents(self) -> set[int]:
        return {i for lst in self.tiers for i in lst}


@dataclass
class HitReport:
    tier_hits: list[int]
    misses: int
    per_hour: list[float | None]
    per_hour_requests: list[int] = field(default_factory=list)
    per_hour_tier_hits: list[list[int]] = field(default_factory=list)

    @property
    def requests(self) -> int:
        return sum(self.tier_hits) + self.misses

    @property
    def hits(self) -> int:
        return sum(self.tier_hits)

    @property
    def h(self) -> float:
        return self.hits / self.requests if self.requests else 0.0

    def to_dict(self) -> dict:
        return {"tier_hits": self.tier_hits, "misses": self.misses, "requests": self.requests,
                "h_overall": self.h, "h_per_hour": self.per_hour,
                "per_hour_requests": self.per_hour_requests,
                "per_hour_tier_hits": self.per_hour_tier_hits}


# ------------------------------------------------------------- popularity
def predict_popularity_slot(preferences: Iterable[float], p_thre: float) -> int:
    """Number of users whose predicted preference strictly exceeds ``p_thre``."""
    p = np.asarray(list(preferences) if not isinstance(preferences, np.ndarray) else preferences,
                   dtype=np.float64)
    return int(np.count_nonzero(p > p_thre))


def accumulate_popularity(slot_counts: dict[int, Sequence[int]],
                          config: SimConfig | None = None) -> PopularityTable:
    if config is not None:
        for k, v in slot_counts.items():
            if len(v) != config.n_slots:
                raise ValueError(f"item {k}: {len(v)} slot counts, expected {config.n_slots}")
    return PopularityTable({int(k): [int(c) for c in v] for k, v in slot_counts.items()})


def slot_times(period_start: float, config: SimConfig) -> np.ndarray:
    return period_start + config.delta_p * np.arange(config.n_slots)


def popularity_for_period(scorer: Scorer, users: np.ndarray, candidates: Sequence[int],
                          period_start: float, config: SimConfig) -> PopularityTable:
    cands = np.asarray(sorted(candidates), dtype=np.int64)
    counts = np.zeros((len(cands), config.n_slots), dtype=np.int64)
    if len(users) and len(cands):
        for n, t_hat in enumerate(slot_times(period_start, config)):
            p = np.asarray(scorer(users, cands, float(t_hat), period_start), dtype=np.float64)
            if p.shape != (len(users), len(cands)):
                raise ValueError(f"scorer returned shape {p.shape}, "
                                 f"expected {(len(users), len(cands))}")
            counts[:, n] = (p > config.p_thre).sum(axis=0)
    return PopularityTable({int(k): counts[r].tolist() for r, k in enumerate(cands)})


# ---------------------------------------------------------------- placement
def rank_candidates(table: PopularityTable | dict[int, int], recency: dict[int, float]) -> list[int]:
    """Descending popularity, then most recent request first, then item id."""
    totals = table.totals if isinstance(table, PopularityTable) else dict(table)
    return sorted(totals, key=lambda k: (-totals[k], -recency.get(k, -math.inf), k))


def place_top_k(ranking: Sequence[int], config: SimConfig) -> CacheState:
    if len(set(ranking)) != len(ranking):
        raise ValueError("ranking contains duplicate item ids")
    tiers, pos = [], 0
    for cap in config.tier_capacities:
        tiers.append(list(ranking[pos:pos + cap]))
        pos += cap
    return CacheState(config.tier_capacities, tiers)


def build_candidates(times: np.ndarray, items: np.ndarray, prediction_start: float,
                     config: SimConfig, target_items: Iterable[int] = ()) -> set[int]:
    """Items requested in the ``candidate_window`` seconds before ``prediction_start``.

    ``target_items`` are added so the set always covers the period's requests.
    """
    times = np.asarray(times)
    sel = (times >= prediction_start - config.candidate_window) & (times < prediction_start)
    window = set(int(i) for i in np.asarray(items)[sel])
    if not window:
        raise ValueError(f"no requests in the {config.candidate_window:g} s before {prediction_start}")
    return window | set(int(i) for i in target_items)


def recency_before(times: np.ndarray, items: np.ndarray, t: float) -> dict[int, float]:
    rec: dict[int, float] = {}
    for ts, it in zip(times, items):
        if ts >= t:
            break
        rec[int(it)] = float(ts)
    return rec


# --------------------------------------------------------------- simulation
def _period_index(t: float, start: float, config: SimConfig) -> int:
    k = int((t - start) // config.delta_P)
    if not 0 <= k < config.n_periods:
        raise ValueError(f"request at {t} lies outside the simulated window")
    return k


def simulate(req_times: Sequence[float], req_items: Sequence[int], placements: Sequence[CacheState],
             start: float, config: SimConfig) -> HitReport:
    """Route each request through Tier 1, 2, 3 of its period's placement."""
    if len(placements) != config.n_periods:
        raise ValueError(f"need one placement per period ({config.n_periods})")
    n_tiers = len(config.tier_capacities)
    per_tier = [[0] * n_tiers for _ in range(config.n_periods)]
    per_req = [0] * config.n_periods
    for t, item in zip(req_times, req_items):
        k = _period_index(float(t), start, config)
        per_req[k] += 1
        tier = placements[k].locate(int(item))
        if tier is not None:
            per_tier[k][tier] += 1
    return _report(per_tier, per_req)


def _report(per_tier: list[list[int]], per_req: list[int]) -> HitReport:
    tier_hits = [sum(col) for col in zip(*per_tier)]
    misses = sum(per_req) - sum(tier_hits)
    hourly = [sum(h) / r if r else None for h, r in zip(per_tier, per_req)]
    return HitReport(tier_hits, misses, hourly, per_req, per_tier)


class HierarchicalLRU:
    """Inclusive-order LRU over stacked tiers: hits and misses enter Tier 1,
    overflow demotes each tier's tail one level, Tier 3's tail is evicted."""

    def __init__(self, capacities: Sequence[int]):
        self.capacities = tuple(capacities)
        self.tiers: list[OrderedDict] = [OrderedDict() for _ in self.capacities]

    def access(self, item: int) -> int | None:
        hit = None
        for t, tier in enumerate(self.tiers):
            if item in tier:
                hit = t
                del tier[item]
                break
        self._push(0, item)
        return hit

    def _push(self, t: int, item: int) -> None:
        tier = self.tiers[t]
        tier[item] = None
        tier.move_to_end(item, last=False)
        if len(tier) > self.capacities[t]:
            tail, _ = tier.popitem(last=True)
            if t + 1 < len(self.tiers):
                self._push(t + 1, tail)

    def state(self) -> CacheState:
        return CacheState(self.capacities, [list(t) for t in self.tiers])


def lru_baseline(req_times: Sequence[float], req_items: Sequence[int], start: float,
                 config: SimConfig, mode: str = "online",
                 history: tuple[Sequence[float], Sequence[int]] | None = None,
                 target_union: bool = True) -> HitReport:
    """LRU reference on the same requests and tier capacities.

    ``online`` updates the hierarchy on every request, warmed on ``history``.
    ``snapshot`` freezes, at each period boundary, the recency-ordered
    candidate set (same candidates as the prediction path) and never promotes.
    """
    n_tiers = len(config.tier_capacities)
    per_tier = [[0] * n_tiers for _ in range(config.n_periods)]
    per_req = [0] * config.n_periods
    if mode == "online":
        cache = HierarchicalLRU(config.tier_capacities)
        if history is not None:
            for t, item in zip(*history):
                if t < start:
                    cache.access(int(item))
        for t, item in zip(req_times, req_items):
            k = _period_index(float(t), start, config)
            per_req[k] += 1
            tier = cache.access(int(item))
            if tier is not None:
                per_tier[k][tier] += 1
        return _report(per_tier, per_req)
    if mode == "snapshot":
        if history is None:
            raise ValueError("snapshot mode needs the request history")
        placements = plan_placements(_zero_scorer, history, req_times, req_items, start, config,
                                     target_union=target_union)
        return simulate(req_times, req_items, placements, start, config)
    raise ValueError(f"unknown LRU mode {mode!r}")


def _zero_scorer(users, items, t_hat, period_start):
    return np.zeros((len(users), len(items)))


def plan_placements(scorer: Scorer, history: tuple[Sequence[float], Sequence[int]],
                    req_times: Sequence[float], req_items: Sequence[int], start: float,
                    config: SimConfig, req_users: Sequence[int] | None = None,
                    target_union: bool = True,
                    tables_out: list | None = None) -> list[CacheState]:
    """One frozen placement per period from predicted popularity.

    ``history`` holds all request times/items (any order of periods, sorted
    by time) used for candidate windows and recency; ``req_users`` gives the
    active user set of each period.
    """
    h_times = np.asarray(history[0], dtype=np.float64)
    h_items = np.asarray(history[1], dtype=np.int64)
    r_times = np.asarray(req_times, dtype=np.float64)
    r_items = np.asarray(req_items, dtype=np.int64)
    r_users = None if req_users is None else np.asarray(req_users, dtype=np.int64)
    out = []
    for k in range(config.n_periods):
        p0 = start + k * config.delta_P
        in_period = (r_times >= p0) & (r_times < p0 + config.delta_P)
        targets = r_items[in_period] if target_union else ()
        cands = build_candidates(h_times, h_items, p0, config, targets)
        users = (np.unique(r_users[in_period]) if r_users is not None
                 else np.zeros(0, dtype=np.int64))
        table = popularity_for_period(scorer, users, cands, p0, config)
        if tables_out is not None:
            tables_out.append(table)
        out.append(place_top_k(rank_candidates(table, recency_before(h_times, h_items, p0)),
                               config))
    return out


# -------------------------------------------------------------------- sweep
SWEEP_COLUMNS = ["config_hash", "p_thre", "delta_p", "window_h", "tier1_hits", "tier2_hits",
                 "tier3_hits", "misses", "h_overall", "h_per_hour"]


class CachedScorer:
    """Memoises a scorer on (t_hat, users, items); sweeps reuse predictions."""

    def __init__(self, scorer: Scorer):
        self.scorer = scorer
        self._memo: dict = {}

    def __call__(self, users, items, t_hat, period_start):
        key = (float(t_hat), float(period_start), np.asarray(users).tobytes(),
               np.asarray(items).tobytes())
        if key not in self._memo:
            self._memo[key] = np.asarray(self.scorer(users, items, t_hat, period_start))
        return self._memo[key]


def sweep(scorer: Scorer, history, req_times, req_items, req_users, start: float,
          base: SimConfig, p_thre_grid: Sequence[float], delta_p_grid: Sequence[float],
          window_grid: Sequence[float]) -> list[dict]:
    """Cartesian grid over threshold, slot length and candidate window."""
    cached = CachedScorer(scorer)
    rows = []
    for p_thre in p_thre_grid:
        for delta_p in delta_p_grid:
            for window in window_grid:
                cfg = SimConfig(base.delta_P, delta_p, p_thre, base.tier_capacities, window,
                                base.n_periods)
                placements = plan_placements(cached, history, req_times, req_items, start, cfg,
                                             req_users)
                rep = simulate(req_times, req_items, placements, start, cfg)
                rows.append(sweep_row(cfg, rep))
    return rows


def sweep_row(cfg: SimConfig, rep: HitReport) -> dict:
    hits = list(rep.tier_hits) + [0] * max(0, 3 - len(rep.tier_hits))
    return {"config_hash": cfg.config_hash(), "p_thre": cfg.p_thre, "delta_p": cfg.delta_p,
            "window_h": cfg.candidate_window / 3600.0, "tier1_hits": hits[0],
            "tier2_hits": hits[1], "tier3_hits": hits[2], "misses": rep.misses,
            "h_overall": rep.h, "h_per_hour": rep.per_hour}


def write_sweep(rows: list[dict], csv_path: str | Path) -> None:
    csv_path = Path(csv_path)
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "h_per_hour": ";".join("" if h is None else f"{h:.6f}"
                                                    for h in r["h_per_hour"])})
    csv_path.with_suffix(".json").write_text(json.dumps(rows, indent=2), encoding="utf-8")


def write_hourly(rep: HitReport, start: float, config: SimConfig, csv_path: str | Path) -> None:
    csv_path = Path(csv_path)
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["hour", "period_start", "requests", "tier1_hits", "tier2_hits", "tier3_hits",
                    "misses", "h"])
        for k in range(config.n_periods):
            th = rep.per_hour_tier_hits[k]
            r = rep.per_hour_requests[k]
            h = rep.per_hour[k]
            w.writerow([k, start + k * config.delta_P, r, *th, r - sum(th),
                        "" if h is None else f"{h:.6f}"])
    payload = {"config": config.to_dict(), "config_hash": config.config_hash(),
               "start": start, **rep.to_dict()}
    csv_path.with_suffix(".json").write_text(json.dumps(payload, indent=2), encoding="utf-8")


# ----------------------------------------------------------- model adapter
class ModelScorer:
    """Scores user-item pairs with a trained model frozen at each period start.

    Memories are replayed over every event before the period start, and
    neighbor sampling is cut off there, so nothing from inside the period
    leaks into its predictions.
    """

    def __init__(self, model):
        self.model = model
        self._period = None
        self._mem = None

    def _prepare(self, period_start: float) -> None:
        import torch

        m = self.model
        stop = int(np.searchsorted(m.store.timestamps, period_start, side="left"))
        if m.state.processed > stop:
            m.reset_state()
        m.advance(stop)
        with torch.no_grad():
            self._mem = m.current_memory(float(period_start))
        self._period = period_start

    def __call__(self, users, items, t_hat, period_start):
        import torch

        if self._period != period_start:
            self._prepare(period_start)
        m = self.model
        users, items = np.asarray(users), np.asarray(items)
        with torch.no_grad():
            nodes = np.concatenate([users, items])
            emb = m.embed(nodes, np.full(len(nodes), float(t_hat)), self._mem, cutoff=period_start)
            E_u, E_i = emb[:len(users)], emb[len(users):]
            U, K = len(users), len(items)
            logits = m.decoder.logit(E_u.repeat_interleave(K, 0), E_i.repeat(U, 1))
            return torch.sigmoid(logits).double().numpy().reshape(U, K)
