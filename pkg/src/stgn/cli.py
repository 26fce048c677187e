"""Command-line entry point: ingest, train, eval, cache-sim, sweep, report.

Every command reads an optional INI ``--config`` (see :mod:`stgn.config`),
applies command-line overrides, writes its resolved configuration into the
output directory and exits non-zero when any requested artifact could not
be produced. Logs go to stderr; the level comes from ``STGN_LOG_LEVEL``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_run_config

log = logging.getLogger("stgn")

STORE_FILE, CATALOG_FILE, SPLIT_FILE = "store.npz", "catalog.json", "split.json"


class CommandError(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers
def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.path("out_dir", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_store(cfg: RunConfig):
    from .graph_store import ChronoSplit, EventStore, load_catalog

    d = Path(cfg.path("store_dir") or cfg.path("out_dir", "out"))
    for name in (STORE_FILE, CATALOG_FILE, SPLIT_FILE):
        if not (d / name).is_file():
            raise CommandError(f"missing {d / name}; run 'stgn ingest' first")
    store = EventStore.load(d / STORE_FILE)
    catalog = load_catalog(d / CATALOG_FILE)
    split = ChronoSplit.from_dict(json.loads((d / SPLIT_FILE).read_text(encoding="utf-8")))
    return store, catalog, split


def _table(cfg: RunConfig, catalog):
    from .semantics import GenreEmbeddingTable, load_embedding_table

    p = cfg.path("embedding_table")
    if p:
        if not Path(p).is_file():
            raise CommandError(f"embedding table not found: {p}")
        return load_embedding_table(p)
    return GenreEmbeddingTable.from_catalog(catalog)


def _load_model(cfg: RunConfig, path: str, store, catalog, check_config: bool = False):
    from .training import IncompatibleCheckpoint, load_checkpoint

    if not Path(path).is_file():
        raise CommandError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path, store, catalog, _table(cfg, catalog),
                               cfg.train_config() if check_config else None)
    except IncompatibleCheckpoint as exc:
        raise CommandError(f"{path}: {exc}") from exc


# ----------------------------------------------------------------- commands
def cmd_ingest(cfg: RunConfig, args) -> list[Path]:
    from .graph_store import (IngestError, chronological_split, ingest_trace, read_trace,
                              save_catalog, write_trace)
    from .synthetic import planted_trace

    out = _out_dir(cfg)
    if args.planted:
        trace = out / "planted_trace.csv"
        write_trace(planted_trace(seed=cfg.seed), trace)
    else:
        trace = cfg.path("trace")
        if not trace:
            raise CommandError("no trace given (use --trace or [paths] trace)")
        trace = Path(trace)
        if not trace.is_file():
            raise CommandError(f"trace not found: {trace}")
    rows, _ = read_trace(trace)
    try:
        store, catalog, report = ingest_trace(rows, d_v=cfg.train.d_v, d_e=cfg.train.d_e,
                                              seed=cfg.seed)
    except IngestError as exc:
        raise CommandError(f"{trace}: {exc}") from exc
    split = chronological_split(store)
    store.save(out / STORE_FILE)
    save_catalog(catalog, out / CATALOG_FILE)
    _dump(out / SPLIT_FILE, split.as_dict())
    rep = json.loads(report.to_json())
    rep["store_digest"] = store.digest()
    rep["trace"] = str(trace)
    return [out / STORE_FILE, out / CATALOG_FILE, out / SPLIT_FILE,
            _dump(out / "ingest_report.json", rep)]


def cmd_train(cfg: RunConfig, args) -> list[Path]:
    from . import plotting
    from .training import append_metrics, build_model, save_checkpoint, train

    store, catalog, split = _load_store(cfg)
    tc = cfg.train_config()
    model = build_model(tc, store, catalog, split, _table(cfg, catalog))
    metrics_path = _out_dir(cfg) / "metrics.jsonl"
    name = tc.variant.name
    res = train(model, split, validate=not args.no_validate,
                on_epoch=lambda rec: append_metrics(metrics_path,
                                                    {"variant": name, "kind": "epoch", **rec}))
    out = _out_dir(cfg)
    ckpt = Path(cfg.path("checkpoint") or out / f"{name}.pt")
    save_checkpoint(ckpt, model, {"loss_curve": res.loss_curve,
                                  "metadata": {"training_seconds": res.runtime_seconds}})
    curve_csv = out / f"{name}_loss.csv"
    with curve_csv.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        w.writerows([[e, f"{v:.6f}"] for e, v in enumerate(res.loss_curve)])
    png = plotting.loss_curve(res.loss_curve, out / f"{name}_loss.png")
    return [ckpt, curve_csv, png, metrics_path]


def _stub_scores(kind: str, n: int):
    if kind == "oracle":
        return np.ones(n), np.zeros(n)
    return np.full(n, 0.5), np.full(n, 0.5)


def cmd_eval(cfg: RunConfig, args) -> list[Path]:
    from .training import append_metrics, evaluate_modes, inductive_mask, report_from_scores

    store, catalog, split = _load_store(cfg)
    modes = ("transductive", "inductive") if args.mode == "both" else (args.mode,)
    start, stop = split.val if args.range == "val" else split.test
    if args.scorer == "model":
        ckpt = cfg.path("checkpoint")
        if not ckpt:
            raise CommandError("eval needs --checkpoint (or --scorer oracle/constant)")
        model, payload = _load_model(cfg, ckpt, store, catalog)
        reports = evaluate_modes(model, split, modes, (start, stop), seed=cfg.seed + 11)
        label = payload["variant"]
    else:
        pos, neg = _stub_scores(args.scorer, stop - start)
        reports = {}
        for m in modes:
            sel = (np.ones(stop - start, dtype=bool) if m == "transductive"
                   else inductive_mask(store, split, start, stop))
            if not sel.any():
                raise CommandError(f"no events for {m} evaluation")
            reports[m] = report_from_scores(pos[sel], neg[sel], m)
        label = f"{args.scorer}-stub"
    out = _out_dir(cfg)
    payload = {"scorer": label, "range": [start, stop],
               "reports": {m: {k: v for k, v in r.to_dict().items() if k != "runtime_seconds"}
                           for m, r in reports.items()},
               "metadata": {m: {"runtime_seconds": r.runtime_seconds} for m, r in reports.items()}}
    path = _dump(out / f"eval_{label}.json", payload)
    append_metrics(out / "metrics.jsonl", {"kind": "eval", "scorer": label,
                                           **{f"{m}_ap": r.ap for m, r in reports.items()},
                                           **{f"{m}_auc": r.auc for m, r in reports.items()}})
    return [path]


def _sim_inputs(cfg: RunConfig, store, split, start: float | None):
    sim = cfg.sim
    t0 = float(store.timestamps[split.test[0]]) if start is None else float(start)
    t1 = t0 + sim.n_periods * sim.delta_P
    sel = (store.timestamps >= t0) & (store.timestamps < t1)
    history = (store.timestamps, store.items)
    return t0, history, store.timestamps[sel], store.items[sel], store.users[sel]


def _scorer(cfg: RunConfig, kind: str, store, catalog):
    from .caching import ModelScorer, _zero_scorer

    if kind == "recency":
        return _zero_scorer, "recency"
    ckpt = cfg.path("checkpoint")
    if not ckpt:
        raise CommandError("model scorer needs --checkpoint (or --scorer recency)")
    model, payload = _load_model(cfg, ckpt, store, catalog)
    return ModelScorer(model), payload["variant"]


def cmd_cache_sim(cfg: RunConfig, args) -> list[Path]:
    from . import plotting
    from .caching import lru_baseline, plan_placements, simulate, write_hourly

    store, catalog, split = _load_store(cfg)
    t0, history, rt, ri, ru = _sim_inputs(cfg, store, split, args.start)
    scorer, label = _scorer(cfg, args.scorer, store, catalog)
    try:
        placements = plan_placements(scorer, history, rt, ri, t0, cfg.sim, ru)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    rep = simulate(rt, ri, placements, t0, cfg.sim)
    online = lru_baseline(rt, ri, t0, cfg.sim, "online", history=history)
    snap = lru_baseline(rt, ri, t0, cfg.sim, "snapshot", history=history)
    out = _out_dir(cfg)
    paths = []
    for name, r in (("cache_sim", rep), ("lru_online", online), ("lru_snapshot", snap)):
        write_hourly(r, t0, cfg.sim, out / f"{name}.csv")
        paths += [out / f"{name}.csv", out / f"{name}.json"]
    paths.append(plotting.hourly_hit_rate({label: rep.per_hour, "LRU": online.per_hour,
                                           "LRU (frozen)": snap.per_hour},
                                          out / "cache_sim_hourly.png"))
    return paths


def _grid(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise CommandError(f"bad grid {text!r}") from exc


def cmd_sweep(cfg: RunConfig, args) -> list[Path]:
    from . import plotting
    from .caching import sweep, write_sweep

    store, catalog, split = _load_store(cfg)
    t0, history, rt, ri, ru = _sim_inputs(cfg, store, split, args.start)
    scorer, _ = _scorer(cfg, args.scorer, store, catalog)
    windows = [w * 3600.0 for w in _grid(args.window_h_grid)]
    try:
        rows = sweep(scorer, history, rt, ri, ru, t0, cfg.sim, _grid(args.p_thre_grid),
                     _grid(args.delta_p_grid), windows)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    out = _out_dir(cfg)
    write_sweep(rows, out / "sweep.csv")
    png = plotting.sweep_heatmap(rows, "delta_p", "p_thre", out / "sweep_heatmap.png")
    return [out / "sweep.csv", out / "sweep.json", png]


TABLE_COLUMNS = ["group", "model", "auc_transductive", "ap_transductive", "auc_inductive",
                 "ap_inductive", "training_seconds"]


def cmd_report(cfg: RunConfig, args) -> list[Path]:
    from . import plotting
    from .semantics import genre_similarity_matrix
    from .training import evaluate_modes

    store, catalog, split = _load_store(cfg)
    ckpts = args.checkpoints or ([cfg.path("checkpoint")] if cfg.path("checkpoint") else [])
    if not ckpts:
        raise CommandError("report needs at least one checkpoint")
    rows = []
    for path in ckpts:
        model, payload = _load_model(cfg, path, store, catalog)
        reps = evaluate_modes(model, split, ("transductive", "inductive"), split.test,
                              seed=cfg.seed + 11)
        v = model.variant
        rows.append({
            "group": "Baseline" if v.semantics == "off" else v.family,
            "model": v.name,
            "auc_transductive": 100 * reps["transductive"].auc,
            "ap_transductive": 100 * reps["transductive"].ap,
            "auc_inductive": 100 * reps["inductive"].auc,
            "ap_inductive": 100 * reps["inductive"].ap,
            "training_seconds": payload.get("extra", {}).get("metadata", {}).get(
                "training_seconds"),
        })
    out = _out_dir(cfg)
    with (out / "report.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    (out / "report.md").write_text(render_table(rows), encoding="utf-8")

    table = _table(cfg, catalog)
    tokens = sorted({t for g in catalog.item_genres.values() for t in g})
    sim = genre_similarity_matrix(table, tokens)
    with (out / "genre_similarity.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["genre"] + tokens)
        for t, r in zip(tokens, sim):
            w.writerow([t] + [f"{x:.6f}" for x in r])
    figs = [plotting.genre_similarity(sim, tokens, out / "genre_similarity.png"),
            plotting.variant_bars([{"variant": r["model"], "inductive_ap": r["ap_inductive"]}
                                   for r in rows], out / "variant_ap.png")]
    return [out / "report.csv", out / "report.md", out / "genre_similarity.csv", *figs]


def render_table(rows: list[dict]) -> str:
    """Markdown table, one row per model, grouped like the results table."""
    head = ("| Group | Model | AUC (trans.) | AP (trans.) | AUC (ind.) | AP (ind.) "
            "| Training time |")
    lines = [head, "|" + "---|" * 7]
    last = None
    for r in rows:
        group = r["group"] if r["group"] != last else ""
        last = r["group"]
        secs = r["training_seconds"]
        lines.append(f"| {group} | {r['model']} | {r['auc_transductive']:.3f} | "
                     f"{r['ap_transductive']:.3f} | {r['auc_inductive']:.3f} | "
                     f"{r['ap_inductive']:.3f} | "
                     f"{'-' if secs is None else f'{secs:.3f}s'} |")
    return "\n".join(lines) + "\n"


COMMANDS = {"ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval,
            "cache-sim": cmd_cache_sim, "sweep": cmd_sweep, "report": cmd_report}


# ------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--store", help="directory holding an ingested store (default: --out)")
    common.add_argument("--embedding-table", help="genre vector file (token v1 ... vD)")

    p = argparse.ArgumentParser(prog="stgn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="filter and index a request trace")
    s.add_argument("--trace", help="CSV trace: timestamp,user,item,duration,genres")
    s.add_argument("--planted", action="store_true", help="generate the planted synthetic trace")

    s = sub.add_parser("train", parents=[common], help="train one variant")
    s.add_argument("--variant", help="e.g. TGN-L, M2-STGN-A+U+SPE, TGAT")
    s.add_argument("--epochs", type=int)
    s.add_argument("--checkpoint", help="checkpoint path (default: <out>/<variant>.pt)")
    s.add_argument("--no-validate", action="store_true")

    s = sub.add_parser("eval", parents=[common], help="AP/AUC on the test range")
    s.add_argument("--checkpoint")
    s.add_argument("--mode", choices=["transductive", "inductive", "both"], default="both")
    s.add_argument("--range", choices=["val", "test"], default="test")
    s.add_argument("--scorer", choices=["model", "oracle", "constant"], default="model")

    for name, helptext in (("cache-sim", "24-hour cache hit-rate simulation"),
                           ("sweep", "grid of caching hyperparameters")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--checkpoint")
        s.add_argument("--scorer", choices=["model", "recency"], default="model")
        s.add_argument("--start", type=float, help="simulation start (default: first test event)")
        s.add_argument("--p-thre", type=float)
        s.add_argument("--delta-p", type=float)
        s.add_argument("--window-h", type=float, help="candidate window in hours")
        if name == "sweep":
            s.add_argument("--p-thre-grid", default="0.99,0.995,0.999")
            s.add_argument("--delta-p-grid", default="60,300,600")
            s.add_argument("--window-h-grid", default="50")

    s = sub.add_parser("report", parents=[common], help="results table and genre similarity")
    s.add_argument("checkpoints", nargs="*")
    return p


def _overrides(args) -> dict:
    ov = {"seed": args.seed, "paths.out_dir": args.out, "paths.store_dir": args.store,
          "paths.embedding_table": args.embedding_table}
    for key, dest in (("paths.trace", "trace"), ("paths.checkpoint", "checkpoint"),
                      ("variant", "variant"), ("train.epochs", "epochs"),
                      ("sim.p_thre", "p_thre"), ("sim.delta_p", "delta_p")):
        ov[key] = getattr(args, dest, None)
    if getattr(args, "window_h", None) is not None:
        ov["sim.candidate_window"] = args.window_h * 3600.0
    return ov


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("STGN_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, _overrides(args), command=args.command)
        written = COMMANDS[args.command](cfg, args)
        cfg.write(_out_dir(cfg), f"resolved_{args.command}.ini")
    except (CommandError, ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"stgn {args.command}: error: {exc}", file=sys.stderr)
        return 1
    missing = [p for p in written if not Path(p).exists()]
    if missing:
        print(f"stgn {args.command}: error: artifacts not written: {missing}", file=sys.stderr)
        return 1
    for p in written:
        log.info("wrote %s", p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
