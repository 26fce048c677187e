import numpy as np
import pytest
import torch

from stgn.graph_store import RawRecord, chronological_split, ingest_trace
from stgn.synthetic import planted_trace

torch.set_num_threads(1)


def records(rows, genres=("drama",)):
    """``(t, user, item)`` triples to raw records with long durations."""
    return [RawRecord(float(t), u, i, 600.0, list(genres)) for t, u, i in rows]


@pytest.fixture(scope="session")
def small_planted():
    raw = planted_trace(n_users=30, n_items=12, n_genres=3, n_events=600, seed=3)
    store, catalog, _ = ingest_trace(raw, d_v=4, d_e=2, seed=0)
    return store, catalog, chronological_split(store)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_addoption(parser):
    parser.addoption("--netflix-trace", default=None,
                     help="filtered-trace count check against the full reference dataset")


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line and asserts it."""
    def record(n, ok, detail):
        ACCEPTANCE[n] = (bool(ok), detail)
        assert ok, f"criterion {n}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
