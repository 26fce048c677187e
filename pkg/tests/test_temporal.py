import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stgn.graph_store import InteractionEvent, NodeCatalog
from stgn.temporal import (MemoryDivergence, MemoryState, MemoryUpdater, MessageBuffer,
                           TemporalMessage, aggregate_aoi, aggregate_aoi_padded,
                           aggregate_last, aggregate_mean, build_message, fuse, gru_step,
                           load_memory_snapshot, raw_message, save_memory_snapshot,
                           update_memory)

D = torch.float64


def msg(values, t):
    return TemporalMessage(torch.tensor(values, dtype=D), None, float(t), 0)


def buffer(*pairs, **kw):
    b = MessageBuffer(**kw)
    for v, t in pairs:
        b.append(msg(v, t))
    return b


def test_raw_message_concatenation():
    cat = NodeCatalog(1, 1, np.array([[1.0, 0.0], [0.0, 1.0]]), {1: ["g"]}, ["u"], ["i"])
    ev = InteractionEvent(0, 0, 1, 7.0, np.array([2.0]), 600.0)
    m = build_message(ev, cat)
    assert m.raw.tolist() == [1.0, 0.0, 0.0, 1.0, 2.0, 7.0]
    assert m.fused is None


def test_semantics_requires_S_k():
    cat = NodeCatalog(1, 1, np.zeros((2, 2)), {1: ["g"]}, ["u"], ["i"])
    ev = InteractionEvent(0, 0, 1, 7.0, np.array([2.0]), 600.0)
    with pytest.raises(ValueError):
        build_message(ev, cat, W1_t=torch.eye(6, dtype=D), W2_t=torch.zeros(6, 3, dtype=D))


def test_build_message_fills_both_buffers():
    cat = NodeCatalog(1, 1, np.zeros((2, 2)), {1: ["g"]}, ["u"], ["i"])
    buffers = {}
    build_message(InteractionEvent(0, 0, 1, 7.0, np.array([2.0]), 600.0), cat, buffers=buffers)
    assert set(buffers) == {0, 1}


def test_fuse_examples():
    raw = torch.tensor([1.0, -2.0, 0.0, 3.0], dtype=D)
    S = torch.tensor([3.0, -1.0, 2.0], dtype=D)
    out = fuse(raw, S, torch.eye(4, dtype=D), torch.zeros(4, 3, dtype=D))
    assert out.tolist() == torch.relu(raw).tolist()
    W2 = torch.zeros(4, 3, dtype=D)
    W2[:3, :3] = torch.eye(3, dtype=D)
    out = fuse(raw, S, torch.zeros(4, 4, dtype=D), W2)
    assert out.tolist() == [3.0, 0.0, 2.0, 0.0]


def test_raw_message_time_normalisation():
    m = raw_message([0.0], [0.0], [0.0], 150.0, t_origin=50.0, t_scale=100.0)
    assert m[-1].item() == 1.0


def test_last_examples():
    b = buffer(([1.0], 1), ([4.0], 4))
    assert aggregate_last(b, 5.0).tolist() == [4.0]
    assert aggregate_last(b, 1.0) is None
    assert aggregate_last(buffer(([2.0], 3)), 9.0).tolist() == [2.0]


def test_mean_examples():
    assert aggregate_mean(buffer(([1.0, 0.0], 1), ([3.0, 2.0], 2)), 9).tolist() == [2.0, 1.0]
    assert aggregate_mean(buffer(([5.0], 1)), 9).tolist() == [5.0]
    assert aggregate_mean(buffer(([0.0], 1), ([3.0], 2), ([6.0], 3)), 9).tolist() == [3.0]
    assert aggregate_mean(buffer(([0.0], 1)), 1) is None


def test_aoi_examples():
    one = torch.eye(1, dtype=D)
    mem = MemoryState(torch.tensor([0.5], dtype=D))
    W_v = torch.tensor([[2.0]], dtype=D)
    assert aggregate_aoi(buffer(([3.0], 1)), 5.0, mem, one, one, W_v).tolist() == [6.0]
    stale = buffer(([3.0], 1), max_age=0.0)
    assert aggregate_aoi(stale, 5.0, mem, one, one, one) is None
    zero_q = MemoryState(torch.zeros(1, dtype=D))
    assert aggregate_aoi(buffer(([2.0], 1), ([4.0], 2)), 5.0, zero_q, one, one, one).tolist() == [3.0]


def test_aoi_capacity_keeps_newest():
    one = torch.eye(1, dtype=D)
    vecs = torch.tensor([[[1.0], [2.0], [3.0]]], dtype=D)
    times = torch.tensor([[1.0, 2.0, 3.0]], dtype=D)
    mask = torch.ones(1, 3, dtype=torch.bool)
    h, has, w = aggregate_aoi_padded(vecs, times, mask, torch.tensor([4.0], dtype=D),
                                     torch.zeros(1, 1, dtype=D), one, one, one,
                                     max_age=100.0, capacity=2, return_weights=True)
    assert bool(has[0]) and w[0].tolist() == [0.0, 0.5, 0.5] and h.item() == 2.5


def test_buffer_rejects_out_of_order():
    b = buffer(([1.0], 5))
    with pytest.raises(ValueError):
        b.append(msg([1.0], 4))


def zero_updater(d_in, d_m):
    u = MemoryUpdater(d_in, d_m).double()
    with torch.no_grad():
        for p in u.parameters():
            p.zero_()
    return u


def test_gru_zero_weights():
    u = zero_updater(3, 2)
    mem = torch.tensor([0.4, -2.0], dtype=D)
    out = u(torch.randn(3, dtype=D), mem)
    assert torch.allclose(out, 0.5 * mem, atol=0, rtol=0)
    assert u(torch.randn(3, dtype=D), torch.zeros(2, dtype=D)).tolist() == [0.0, 0.0]


def test_gru_scalar_hand_value():
    one, zero = torch.ones(1, 1, dtype=D), torch.zeros(1, dtype=D)
    h = mem = torch.ones(1, dtype=D)
    out = gru_step(h, mem, one, one, zero, one, one, zero, one, one, zero).item()
    f = 1 / (1 + math.exp(-2))
    expect = f * math.tanh(1 + f) + (1 - f) * 1.0
    assert out == pytest.approx(expect, abs=1e-12)
    assert round(out, 4) == 0.96


def test_update_memory_contract():
    u = zero_updater(1, 1)
    s = update_memory(MemoryState(torch.ones(1, dtype=D), 3.0), torch.ones(1, dtype=D), 5.0, u)
    assert s.last_update == 5.0 and s.mem.tolist() == [0.5]
    with pytest.raises(ValueError):
        update_memory(s, torch.ones(1, dtype=D), 4.0, u)
    with torch.no_grad():
        u.b_H.fill_(float("nan"))
    with pytest.raises(MemoryDivergence):
        update_memory(s, torch.ones(1, dtype=D), 6.0, u)


def test_memory_snapshot_roundtrip(tmp_path):
    mem = torch.randn(4, 3, dtype=D)
    last = torch.tensor([0.0, 1.0, 2.0, 3.0], dtype=D)
    save_memory_snapshot(tmp_path / "m.json", mem, last)
    m2, l2 = load_memory_snapshot(tmp_path / "m.json")
    assert torch.equal(m2, mem) and torch.equal(l2, last)


def test_memory_replay_is_deterministic():
    torch.manual_seed(3)
    u = MemoryUpdater(2, 3).double()
    hs = torch.randn(10, 2, dtype=D)

    def run():
        s = MemoryState(torch.zeros(3, dtype=D))
        for k, h in enumerate(hs):
            s = update_memory(s, h, float(k), u)
        return s.mem
    assert torch.equal(run(), run())


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_gru_output_is_convex_combination(d_in, d_m, seed):
    g = torch.Generator().manual_seed(seed)
    r = lambda *s: torch.randn(*s, generator=g, dtype=D) * 2
    h, mem = r(d_in), r(d_m)
    W = dict(W_hZ=r(d_m, d_in), W_MZ=r(d_m, d_m), b_Z=r(d_m), W_hH=r(d_m, d_in),
             W_MH=r(d_m, d_m), b_H=r(d_m), W_hF=r(d_m, d_in), W_MF=r(d_m, d_m), b_F=r(d_m))
    out = gru_step(h, mem, **W)
    Fg = torch.sigmoid(h @ W["W_hF"].T + mem @ W["W_MF"].T + W["b_F"])
    H = torch.tanh(h @ W["W_hH"].T + (Fg * mem) @ W["W_MH"].T + W["b_H"])
    lo, hi = torch.minimum(H, mem), torch.maximum(H, mem)
    assert torch.all(out >= lo - 1e-12) and torch.all(out <= hi + 1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=4), st.integers(1, 6))
def test_mean_of_copies_is_identity(values, k):
    b = buffer(*[(values, t) for t in range(k)])
    assert torch.allclose(aggregate_mean(b, float(k)), torch.tensor(values, dtype=D))
