"""Planted-genre request traces for controlled experiments."""

from __future__ import annotations

import numpy as np

from .graph_store import RawRecord


def planted_trace(n_users: int = 200, n_items: int = 50, n_genres: int = 5,
                  n_events: int = 5000, seed: int = 0, mean_gap: float = 60.0,
                  second_genre_prob: float = 0.3, arrival_span: float = 0.9,
                  zipf_a: float = 1.0) -> list[RawRecord]:
    """Users each hold one genre and only request items tagged with it.

    Item ``k`` always carries genre ``k % n_genres``; with probability
    ``second_genre_prob`` it also carries a second one. Users arrive at
    uniform times over the first ``arrival_span`` of the trace, and every
    request picks an already-arrived user, so late users first appear after
    the training cut. Within a genre, item choice follows a Zipf law over a
    per-genre random order (popular items exist for caching).
    """
    rng = np.random.default_rng(seed)
    genres = [f"g{g}" for g in range(n_genres)]
    item_genres = []
    for k in range(n_items):
        gs = {k % n_genres}
        if rng.random() < second_genre_prob:
            gs.add(int(rng.integers(n_genres)))
        item_genres.append(sorted(gs))
    user_genre = rng.permutation(np.arange(n_users) % n_genres)

    by_genre = []
    for g in range(n_genres):
        members = np.array([k for k in range(n_items) if g in item_genres[k]])
        members = rng.permutation(members)
        w = 1.0 / np.arange(1, len(members) + 1) ** zipf_a
        by_genre.append((members, w / w.sum()))

    times = np.cumsum(rng.exponential(mean_gap, size=n_events))
    span = times[-1]
    arrivals = np.sort(rng.uniform(0.0, arrival_span * span, size=n_users))
    order = rng.permutation(n_users)  # arrival rank -> user token

    out = []
    for t in times:
        n_present = max(1, int(np.searchsorted(arrivals, t, side="right")))
        u = order[int(rng.integers(n_present))]
        members, p = by_genre[user_genre[u]]
        k = int(rng.choice(members, p=p))
        out.append(RawRecord(float(t), f"u{u}", f"i{k}", 600.0,
                             [genres[g] for g in item_genres[k]]))
    return out
