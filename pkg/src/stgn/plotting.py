"""Figures written next to the report's delimited outputs."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0

plt.rcParams.update({
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
})


def _figure(width: float = 5.0, height: float | None = None):
    return plt.subplots(figsize=(width, height or width * GOLDEN))


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def genre_similarity(sim: np.ndarray, tokens: Sequence[str], path: str | Path) -> Path:
    n = len(tokens)
    fig, ax = _figure(max(3.0, 0.45 * n + 1.5), max(3.0, 0.45 * n + 1.0))
    im = ax.imshow(sim, vmin=-1, vmax=1, cmap="RdBu_r")
    ax.set_xticks(range(n), tokens, rotation=60, ha="right")
    ax.set_yticks(range(n), tokens)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="cosine similarity")
    return _save(fig, path)


def hourly_hit_rate(series: dict[str, Sequence[float | None]], path: str | Path) -> Path:
    fig, ax = _figure()
    for label, ys in series.items():
        y = np.array([np.nan if v is None else v for v in ys], dtype=float)
        ax.plot(np.arange(len(y)), y, marker="o", ms=3, label=label)
    ax.set_xlabel("hour")
    ax.set_ylabel("hit rate")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    return _save(fig, path)


def sweep_heatmap(rows: list[dict], x: str, y: str, path: str | Path,
                  value: str = "h_overall") -> Path:
    """Mean of ``value`` over the grid cells sharing each ``(x, y)`` pair."""
    xs = sorted({r[x] for r in rows})
    ys = sorted({r[y] for r in rows})
    grid = np.full((len(ys), len(xs)), np.nan)
    for j, yv in enumerate(ys):
        for i, xv in enumerate(xs):
            vals = [r[value] for r in rows if r[x] == xv and r[y] == yv]
            if vals:
                grid[j, i] = float(np.mean(vals))
    fig, ax = _figure()
    im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(xs)), [f"{v:g}" for v in xs])
    ax.set_yticks(range(len(ys)), [f"{v:g}" for v in ys])
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    fig.colorbar(im, ax=ax, label=value)
    return _save(fig, path)


def loss_curve(losses: Sequence[float], path: str | Path) -> Path:
    fig, ax = _figure()
    ax.plot(np.arange(1, len(losses) + 1), losses, marker=".")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss (summed BCE)")
    return _save(fig, path)


def variant_bars(rows: list[dict], path: str | Path, metric: str = "inductive_ap") -> Path:
    names = [r["variant"] for r in rows]
    vals = [r.get(metric) or 0.0 for r in rows]
    fig, ax = _figure(max(4.0, 0.5 * len(names) + 1.0))
    ax.bar(range(len(names)), vals, color="0.4")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_ylabel(metric)
    return _save(fig, path)
