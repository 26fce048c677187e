"""Decoder objective, training loop, link-prediction metrics and gradient checking."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .graph_store import ChronoSplit, EventStore, NodeCatalog
from .model import STGN, TrainConfig, Decoder, time_normalisation
from .semantics import GenreEmbeddingTable, SemanticSet, encode_genres

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    pass


class IncompatibleCheckpoint(ValueError):
    pass


# ---------------------------------------------------------------- objective
def predict_preference(E_u, E_i, decoder: Decoder):
    return decoder(E_u, E_i)


def bce_loss(label, prob) -> float:
    """Binary cross entropy of one prediction; ``prob`` must lie strictly inside (0, 1)."""
    p = float(prob)
    if not 0.0 < p < 1.0:
        raise ValueError(f"predicted probability {p} outside (0, 1)")
    return -(label * math.log(p) + (1 - label) * math.log(1 - p))


def batch_bce(labels: Sequence[int], probs: Sequence[float]) -> float:
    return sum(bce_loss(y, p) for y, p in zip(labels, probs))


def sample_negative(item_set: Sequence[int], positive_item: int, rng: np.random.Generator) -> int:
    """Uniform item draw; a draw equal to the positive is redrawn once and then accepted."""
    if len(item_set) < 2:
        raise ValueError("negative sampling needs at least two items")
    pick = item_set[rng.integers(len(item_set))]
    if pick == positive_item:
        pick = item_set[rng.integers(len(item_set))]
    return int(pick)


def sample_negatives(item_set, positives, rng) -> np.ndarray:
    return np.array([sample_negative(item_set, int(p), rng) for p in positives], dtype=np.int64)


# ------------------------------------------------------------------ metrics
EXACT_AP_LIMIT = 20_000


def compute_ap(scores, labels) -> float:
    """Mean precision at each positive's rank; ties keep input order.

    Up to ``EXACT_AP_LIMIT`` positives the mean is summed in rational
    arithmetic, so the result is the correctly rounded exact value.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if not labels.any():
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    ranks = (np.flatnonzero(labels[order]) + 1).tolist()
    n = len(ranks)
    if n <= EXACT_AP_LIMIT:
        return float(sum(Fraction(k, r) for k, r in enumerate(ranks, 1)) / n)
    return math.fsum(k / r for k, r in enumerate(ranks, 1)) / n


def compute_auc(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative examples")
    _, inv, counts = np.unique(scores, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    avg_rank = (upper - (counts - 1) / 2.0)[inv]
    u = avg_rank[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    ap: float
    auc: float
    mode: str
    n_events: int
    runtime_seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def report_from_scores(pos, neg, mode: str, runtime: float = 0.0) -> EvalReport:
    pos, neg = np.asarray(pos, dtype=np.float64), np.asarray(neg, dtype=np.float64)
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    return EvalReport(compute_ap(scores, labels), compute_auc(scores, labels), mode, len(pos),
                      runtime)


# ----------------------------------------------------------------- building
def semantic_sets_for(config: TrainConfig, catalog: NodeCatalog,
                      table: GenreEmbeddingTable | None = None) -> dict[int, SemanticSet] | None:
    if config.semantics == "off":
        return None
    return encode_genres(catalog, table or GenreEmbeddingTable.from_catalog(catalog))


def build_model(config: TrainConfig, store: EventStore, catalog: NodeCatalog, split: ChronoSplit,
                table: GenreEmbeddingTable | None = None) -> STGN:
    origin, scale = time_normalisation(store, split.train[1])
    return STGN(config, store, catalog, semantic_sets_for(config, catalog, table), origin, scale)


@dataclass
class TrainResult:
    model: STGN
    loss_curve: list[float]
    metrics: list[dict] = field(default_factory=list)
    runtime_seconds: float = 0.0


def _batch_loss(model: STGN, start: int, stop: int, negatives: np.ndarray, cur_mem):
    s = model.store
    ev = np.arange(start, stop)
    users, pos, times = s.users[ev], s.items[ev], s.timestamps[ev]
    k = len(negatives) // len(ev)
    nodes = np.concatenate([users, pos, negatives])
    tt = np.concatenate([times, times, np.tile(times, k)])
    emb = model.embed(nodes, tt, cur_mem)
    B = len(ev)
    E_u, E_p, E_n = emb[:B], emb[B:2 * B], emb[2 * B:]
    lp = model.decoder.logit(E_u, E_p)
    ln = model.decoder.logit(E_u.repeat(k, 1), E_n)
    loss = (F.binary_cross_entropy_with_logits(lp, torch.ones_like(lp), reduction="sum")
            + F.binary_cross_entropy_with_logits(ln, torch.zeros_like(ln), reduction="sum"))
    return loss, E_u, E_p, lp, ln


def train(model: STGN, split: ChronoSplit, epochs: int | None = None,
          validate: bool = True, on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Run the batch loop over the training range.

    Per batch: memories as of batch start, predictions for positives and
    sampled negatives, summed BCE, one optimiser step, then the batch's
    messages are queued for the next memory update.
    """
    cfg = model.config
    epochs = cfg.epochs if epochs is None else epochs
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    items = model.catalog.item_ids
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    t0 = time.perf_counter()
    curve, metrics = [], []
    a, b = split.train
    for epoch in range(epochs):
        model.train()
        model.reset_state()
        total = 0.0
        last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
        for start in range(a, b, cfg.batch_size):
            stop = min(b, start + cfg.batch_size)
            t_hat = float(model.store.timestamps[start])
            cur = model.current_memory(t_hat)
            negs = sample_negatives(items, model.store.items[start:stop].repeat(
                cfg.negatives_per_positive), rng)
            loss, E_u, E_p, _, _ = _batch_loss(model, start, stop, negs, cur)
            if not torch.isfinite(loss):
                model.load_state_dict(last_good)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
            model.consume(start, stop, cur, t_hat, E_u, E_p)
            total += float(loss.detach())
        curve.append(total)
        rec = {"epoch": epoch, "loss": total}
        if validate and split.val[1] > split.val[0]:
            model.eval()
            pos, neg, _ = score_range(model, *split.val, seed=cfg.seed + 7, continue_state=True)
            r = report_from_scores(pos, neg, "validation")
            rec.update(val_ap=r.ap, val_auc=r.auc)
        metrics.append(rec)
        log.info("epoch %d loss %.4f %s", epoch, total,
                 " ".join(f"{k}={v:.4f}" for k, v in rec.items() if k.startswith("val")))
        if on_epoch:
            on_epoch(rec)
    model.eval()
    return TrainResult(model, curve, metrics, time.perf_counter() - t0)


def score_range(model: STGN, start: int, stop: int, seed: int = 0,
                continue_state: bool = False):
    """Score each event in ``[start, stop)`` against one sampled negative.

    Memories are replayed from scratch up to ``start`` unless
    ``continue_state`` says the model already sits there. Each event is
    scored before its own message is queued.
    """
    if not continue_state:
        model.reset_state()
    if model.state.processed > start:
        raise ValueError("model state is already past the scoring range")
    model.advance(start)
    rng = np.random.default_rng(seed)
    items = model.catalog.item_ids
    bs = model.config.eval_batch_size
    pos_all, neg_all, negs_all = [], [], []
    with torch.no_grad():
        for s0 in range(start, stop, bs):
            s1 = min(stop, s0 + bs)
            t_hat = float(model.store.timestamps[s0])
            cur = model.current_memory(t_hat)
            negs = sample_negatives(items, model.store.items[s0:s1], rng)
            _, E_u, E_p, lp, ln = _batch_loss(model, s0, s1, negs, cur)
            pos_all.append(torch.sigmoid(lp).double().numpy())
            neg_all.append(torch.sigmoid(ln).double().numpy())
            negs_all.append(negs)
            model.consume(s0, s1, cur, t_hat, E_u, E_p)
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)
    return cat(pos_all), cat(neg_all), cat(negs_all)


def inductive_mask(store: EventStore, split: ChronoSplit, start: int, stop: int) -> np.ndarray:
    new = np.fromiter(split.new_node_ids, dtype=np.int64)
    return np.isin(store.users[start:stop], new) | np.isin(store.items[start:stop], new)


def evaluate(model: STGN, split: ChronoSplit, mode: str = "transductive",
             event_range: tuple[int, int] | None = None, seed: int | None = None) -> EvalReport:
    return evaluate_modes(model, split, (mode,), event_range, seed)[mode]


def evaluate_modes(model: STGN, split: ChronoSplit, modes=("transductive", "inductive"),
                   event_range: tuple[int, int] | None = None,
                   seed: int | None = None) -> dict[str, EvalReport]:
    """Score a range once and report each requested mode.

    Transductive mode covers every event of the range; inductive mode only
    events touching a node unseen in training. Node state is restored
    afterwards, parameters are never touched.
    """
    for m in modes:
        if m not in ("transductive", "inductive"):
            raise ValueError(f"unknown evaluation mode {m!r}")
    start, stop = event_range or split.test
    saved = model.snapshot()
    was_training = model.training
    model.eval()
    t0 = time.perf_counter()
    try:
        pos, neg, _ = score_range(model, start, stop,
                                  seed=model.config.seed + 11 if seed is None else seed)
    finally:
        model.restore(saved)
        model.train(was_training)
    runtime = time.perf_counter() - t0
    out = {}
    for m in modes:
        sel = (np.ones(stop - start, dtype=bool) if m == "transductive"
               else inductive_mask(model.store, split, start, stop))
        if not sel.any():
            raise ValueError(f"no events selected for {m} evaluation")
        out[m] = report_from_scores(pos[sel], neg[sel], m, runtime)
    return out


# -------------------------------------------------------------- checkpoints
def save_checkpoint(path: str | Path, model: STGN, extra: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "config_hash": model.config.config_hash(),
        "variant": model.variant.name,
        "store_digest": model.store.digest(),
        "time_origin": model.time_origin,
        "time_scale": model.time_scale,
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path, store: EventStore, catalog: NodeCatalog,
                    table: GenreEmbeddingTable | None = None,
                    expected_config: TrainConfig | None = None) -> tuple[STGN, dict]:
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(f"unsupported checkpoint version {payload.get('version')!r}")
    cfg = TrainConfig.from_dict(payload["config"])
    if cfg.config_hash() != payload["config_hash"]:
        raise IncompatibleCheckpoint("checkpoint config does not match its recorded hash")
    if expected_config is not None and expected_config.config_hash() != payload["config_hash"]:
        raise IncompatibleCheckpoint("checkpoint was trained with a different configuration")
    if payload["store_digest"] != store.digest():
        raise IncompatibleCheckpoint("checkpoint was trained on a different event store")
    model = STGN(cfg, store, catalog, semantic_sets_for(cfg, catalog, table),
                 payload["time_origin"], payload["time_scale"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


def append_metrics(path: str | Path, record: dict) -> None:
    with Path(path).open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
