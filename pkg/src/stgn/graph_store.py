"""Append-only, time-ordered bipartite event store.

Users and items share one dense node-id space: users take ``0..n_users-1``
and items take ``n_users..n_users+n_items-1``, both in order of first
appearance in the time-sorted stream.
"""

from __future__ import annotations

import bisect
import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

MIN_DURATION_SECONDS = 180.0
MIN_USER_REQUESTS = 4
FEATURE_INIT_RANGE = 0.1


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionEvent:
    event_index: int
    user_id: int
    item_id: int
    timestamp: float
    edge_features: np.ndarray
    duration: float


@dataclass
class RawRecord:
    timestamp: float
    user: str
    item: str
    duration: float
    genres: list[str]


@dataclass
class NodeCatalog:
    """Raw node features and item genre lists.

    ``node_features`` is indexed by node id; the user/item dict views are
    built on demand.
    """

    n_users: int
    n_items: int
    node_features: np.ndarray
    item_genres: dict[int, list[str]]
    user_tokens: list[str]
    item_tokens: list[str]

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    @property
    def d_v(self) -> int:
        return self.node_features.shape[1]

    def is_user(self, node_id: int) -> bool:
        return 0 <= node_id < self.n_users

    def is_item(self, node_id: int) -> bool:
        return self.n_users <= node_id < self.n_nodes

    @property
    def item_ids(self) -> np.ndarray:
        return np.arange(self.n_users, self.n_nodes)

    @property
    def user_raw_features(self) -> dict[int, np.ndarray]:
        return {u: self.node_features[u] for u in range(self.n_users)}

    @property
    def item_raw_features(self) -> dict[int, np.ndarray]:
        return {i: self.node_features[i] for i in range(self.n_users, self.n_nodes)}


@dataclass
class ChronoSplit:
    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]
    new_node_ids: frozenset[int] = field(default_factory=frozenset)

    def as_dict(self) -> dict:
        return {
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
            "new_node_ids": sorted(self.new_node_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChronoSplit":
        return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]),
                   frozenset(d["new_node_ids"]))


@dataclass
class IngestReport:
    n_records: int = 0
    malformed: int = 0
    dropped_short_duration: int = 0
    dropped_inactive_records: int = 0
    dropped_users: int = 0
    kept_events: int = 0
    n_users: int = 0
    n_items: int = 0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)


class EventStore:
    """Immutable event stream with a per-node temporal index."""

    def __init__(self, users, items, timestamps, edge_features, durations=None):
        self.users = np.asarray(users, dtype=np.int64)
        self.items = np.asarray(items, dtype=np.int64)
        self.timestamps = np.asarray(timestamps, dtype=np.float64)
        self.edge_features = np.asarray(edge_features, dtype=np.float64)
        n = len(self.users)
        if self.edge_features.ndim == 1:
            self.edge_features = self.edge_features.reshape(n, -1)
        self.durations = (np.full(n, np.nan) if durations is None
                          else np.asarray(durations, dtype=np.float64))
        if not (len(self.items) == len(self.timestamps) == n == len(self.edge_features)):
            raise ValueError("event arrays have mismatched lengths")
        if n and np.any(np.diff(self.timestamps) < 0):
            raise ValueError("timestamps must be non-decreasing by event index")
        self._build_index()

    def _build_index(self) -> None:
        self._node_events: dict[int, list[int]] = {}
        self._node_times: dict[int, list[float]] = {}
        for e in range(len(self)):
            for node in (int(self.users[e]), int(self.items[e])):
                self._node_events.setdefault(node, []).append(e)
                self._node_times.setdefault(node, []).append(float(self.timestamps[e]))

    def __len__(self) -> int:
        return len(self.users)

    @property
    def d_e(self) -> int:
        return self.edge_features.shape[1]

    def event(self, e: int) -> InteractionEvent:
        return InteractionEvent(e, int(self.users[e]), int(self.items[e]),
                                float(self.timestamps[e]), self.edge_features[e],
                                float(self.durations[e]))

    def events(self, start: int = 0, stop: int | None = None) -> list[InteractionEvent]:
        stop = len(self) if stop is None else stop
        return [self.event(e) for e in range(start, stop)]

    def counterpart(self, e: int, node_id: int) -> int:
        u = int(self.users[e])
        return int(self.items[e]) if u == node_id else u

    def recent_event_indices(self, node_id: int, t: float, n_max: int) -> list[int]:
        """Indices of up to ``n_max`` events of ``node_id`` strictly before ``t``, newest first."""
        times = self._node_times.get(node_id)
        if not times or n_max <= 0:
            return []
        k = bisect.bisect_left(times, t)
        idx = self._node_events[node_id]
        return idx[max(0, k - n_max):k][::-1]

    def node_event_indices(self, node_id: int) -> list[int]:
        return list(self._node_events.get(node_id, ()))

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.users, self.items, self.timestamps, self.edge_features):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        np.savez(path, users=self.users, items=self.items, timestamps=self.timestamps,
                 edge_features=self.edge_features, durations=self.durations)

    @classmethod
    def load(cls, path: str | Path) -> "EventStore":
        with np.load(path) as z:
            return cls(z["users"], z["items"], z["timestamps"], z["edge_features"],
                       z["durations"])


def sample_recent_neighbors(store: EventStore, node_id: int, t: float,
                            n_max: int) -> list[InteractionEvent]:
    """Most-recent-first neighbor events with timestamp strictly below ``t``.

    Timestamp ties are broken by higher event index first. Unknown nodes
    yield an empty list.
    """
    if t < 0:
        raise ValueError("query time must be non-negative")
    return [store.event(e) for e in store.recent_event_indices(node_id, t, n_max)]


def chronological_split(store: EventStore, train_frac: float = 0.6,
                        val_frac: float = 0.2) -> ChronoSplit:
    n = len(store)
    if n < 5:
        raise ValueError(f"cannot split {n} events; need at least 5")
    a = math.floor(train_frac * n)
    b = math.floor((train_frac + val_frac) * n)
    seen = set(store.users[:a].tolist()) | set(store.items[:a].tolist())
    later = set(store.users[a:].tolist()) | set(store.items[a:].tolist())
    return ChronoSplit((0, a), (a, b), (b, n), frozenset(later - seen))


def parse_timestamp(text: str) -> float:
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def parse_record(fields: Sequence[str]) -> RawRecord:
    if len(fields) != 5:
        raise ValueError(f"expected 5 fields, got {len(fields)}")
    ts, user, item, duration, genres = fields
    tokens = [g.strip() for g in genres.split("|") if g.strip()]
    if not tokens:
        raise ValueError("empty genre list")
    if not user.strip() or not item.strip():
        raise ValueError("empty user or item")
    rec = RawRecord(parse_timestamp(ts), user.strip(), item.strip(), float(duration), tokens)
    if not (math.isfinite(rec.timestamp) and math.isfinite(rec.duration)):
        raise ValueError("non-finite timestamp or duration")
    return rec


def read_trace(path: str | Path) -> tuple[list, int]:
    """Read a ``timestamp,user,item,duration,genres`` trace.

    Returns the raw field lists (malformed lines are validated later by
    :func:`ingest_trace`) and the number of skipped header lines.
    """
    path = Path(path)
    rows = []
    headers = 0
    with path.open(encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh):
            if not row or not "".join(row).strip():
                continue
            if row[0].strip().lower() == "timestamp":
                headers += 1
                continue
            rows.append(row)
    return rows, headers


def ingest_trace(records: Iterable, d_v: int = 64, d_e: int = 8,
                 seed: int = 0) -> tuple[EventStore, NodeCatalog, IngestReport]:
    """Filter, order and index a request trace.

    ``records`` may hold :class:`RawRecord` objects or raw 5-field
    sequences. Durations must exceed 180 s; surviving users need more than
    four requests. Raw node features are drawn uniformly from
    [-0.1, 0.1]; all requests share one behaviour-type edge vector.
    """
    report = IngestReport()
    parsed: list[RawRecord] = []
    for rec in records:
        report.n_records += 1
        if isinstance(rec, RawRecord):
            parsed.append(rec)
            continue
        try:
            parsed.append(parse_record(rec))
        except (ValueError, TypeError) as exc:
            report.malformed += 1
            log.debug("rejecting record %r: %s", rec, exc)

    long_enough = [r for r in parsed if r.duration > MIN_DURATION_SECONDS]
    report.dropped_short_duration = len(parsed) - len(long_enough)

    counts: dict[str, int] = {}
    for r in long_enough:
        counts[r.user] = counts.get(r.user, 0) + 1
    kept = [r for r in long_enough if counts[r.user] > MIN_USER_REQUESTS]
    report.dropped_inactive_records = len(long_enough) - len(kept)
    report.dropped_users = sum(1 for c in counts.values() if c <= MIN_USER_REQUESTS)
    if not kept:
        raise IngestError("no events survive filtering")

    # stable sort keeps original record order among equal timestamps
    kept.sort(key=lambda r: r.timestamp)

    user_ids: dict[str, int] = {}
    item_order: dict[str, int] = {}
    item_genres_tok: dict[str, list[str]] = {}
    for r in kept:
        user_ids.setdefault(r.user, len(user_ids))
        if r.item not in item_order:
            item_order[r.item] = len(item_order)
            item_genres_tok[r.item] = list(r.genres)
    n_users, n_items = len(user_ids), len(item_order)

    rng = np.random.default_rng(seed)
    user_feat = rng.uniform(-FEATURE_INIT_RANGE, FEATURE_INIT_RANGE, size=(n_users, d_v))
    item_feat = rng.uniform(-FEATURE_INIT_RANGE, FEATURE_INIT_RANGE, size=(n_items, d_v))
    edge_vec = rng.uniform(-FEATURE_INIT_RANGE, FEATURE_INIT_RANGE, size=d_e)

    users = np.array([user_ids[r.user] for r in kept], dtype=np.int64)
    items = np.array([n_users + item_order[r.item] for r in kept], dtype=np.int64)
    store = EventStore(users, items, [r.timestamp for r in kept],
                       np.tile(edge_vec, (len(kept), 1)), [r.duration for r in kept])
    catalog = NodeCatalog(
        n_users=n_users,
        n_items=n_items,
        node_features=np.vstack([user_feat, item_feat]),
        item_genres={n_users + k: item_genres_tok[tok] for tok, k in item_order.items()},
        user_tokens=list(user_ids),
        item_tokens=list(item_order),
    )
    report.kept_events = len(kept)
    report.n_users, report.n_items = n_users, n_items
    return store, catalog, report


def export_records(store: EventStore, catalog: NodeCatalog) -> list[RawRecord]:
    """Invert ingest back into raw records (used for idempotence checks)."""
    out = []
    for e in range(len(store)):
        item = int(store.items[e])
        out.append(RawRecord(float(store.timestamps[e]), catalog.user_tokens[int(store.users[e])],
                             catalog.item_tokens[item - catalog.n_users],
                             float(store.durations[e]), list(catalog.item_genres[item])))
    return out


def write_trace(records: Iterable[RawRecord], path: str | Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestamp", "user", "item", "duration", "genres"])
    for r in records:
        w.writerow([repr(float(r.timestamp)), r.user, r.item, repr(float(r.duration)),
                    "|".join(r.genres)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def save_catalog(catalog: NodeCatalog, path: str | Path) -> None:
    payload = {
        "n_users": catalog.n_users,
        "n_items": catalog.n_items,
        "node_features": catalog.node_features.tolist(),
        "item_genres": {str(k): v for k, v in catalog.item_genres.items()},
        "user_tokens": catalog.user_tokens,
        "item_tokens": catalog.item_tokens,
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_catalog(path: str | Path) -> NodeCatalog:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return NodeCatalog(d["n_users"], d["n_items"], np.asarray(d["node_features"], dtype=np.float64),
                       {int(k): v for k, v in d["item_genres"].items()},
                       d["user_tokens"], d["item_tokens"])
