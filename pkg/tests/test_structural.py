import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stgn.structural import (SemanticPositionalEncoder, TemporalGraphAttention, TimeEncoder,
                             augment_memory, encode_time, fourier_features,
                             neighbor_attention)

D = torch.float64


def test_time_encoding_examples():
    out = encode_time(0.0, torch.rand(4, dtype=D))
    assert out.tolist() == [0.5] * 4
    assert encode_time(1.0, torch.tensor([math.pi], dtype=D)).item() == pytest.approx(-1, abs=1e-12)
    out = encode_time(1.0, torch.tensor([math.pi / 2, math.pi], dtype=D))
    assert torch.allclose(out, torch.tensor([0.0, -1.0], dtype=D) / math.sqrt(2), atol=1e-12)


def test_time_encoder_rejects_zero_width():
    with pytest.raises(ValueError):
        TimeEncoder(0)


def test_fourier_norm_and_self_product():
    torch.manual_seed(0)
    spe = SemanticPositionalEncoder(5, 3, D_h=64, bypass_phi1=True).double()
    x = torch.randn(7, 5, dtype=D)
    R = spe.fourier(x)
    assert torch.allclose((R * R).sum(-1), torch.full((7,), 0.5, dtype=D), atol=1e-12)
    assert spe(x).shape == (7, 3)


def test_spe_rejects_odd_width():
    with pytest.raises(ValueError):
        SemanticPositionalEncoder(2, 2, D_h=7)


def test_augment_memory_widths():
    enc = TimeEncoder(3).double()
    mem = torch.zeros(2, 4, dtype=D)
    assert augment_memory(mem, torch.zeros(2, dtype=D), enc).shape == (2, 7)
    sem = torch.ones(2, 5, dtype=D)
    out = augment_memory(mem, torch.zeros(2, dtype=D), enc, sem)
    assert out.shape == (2, 12)
    assert torch.allclose(out[:, -3:], torch.full((2, 3), math.sqrt(1 / 3), dtype=D))
    with pytest.raises(ValueError):
        augment_memory(mem, torch.tensor([1.0, -1.0], dtype=D), enc)


def rand_attention(Q, N, d, heads, seed):
    g = torch.Generator().manual_seed(seed)
    r = lambda *s: torch.randn(*s, generator=g, dtype=D)
    return r(Q, d), r(Q, N, d), r(d, d), r(d, d), r(d, d)


def test_single_neighbor_weight_is_one():
    c, n, WQ, WK, WV = rand_attention(3, 1, 4, 2, 0)
    agg, w = neighbor_attention(c, n, torch.ones(3, 1, dtype=torch.bool), WQ, WK, WV, 2)
    assert torch.all(w == 1.0)
    assert torch.allclose(agg, n[:, 0] @ WV.T)


def test_zero_neighbors_aggregate_to_zero():
    c, n, WQ, WK, WV = rand_attention(2, 3, 4, 2, 1)
    agg, w = neighbor_attention(c, n, torch.zeros(2, 3, dtype=torch.bool), WQ, WK, WV, 2)
    assert torch.all(agg == 0) and torch.all(w == 0)


def test_identical_keys_split_evenly():
    c, n, WQ, WK, WV = rand_attention(1, 2, 4, 2, 2)
    n[:, 1] = n[:, 0]
    agg, w = neighbor_attention(c, n, torch.ones(1, 2, dtype=torch.bool), WQ, WK, WV, 2)
    assert torch.allclose(w, torch.full_like(w, 0.5))
    assert torch.allclose(agg, (n[0] @ WV.T).mean(0, keepdim=True))


def test_head_width_must_divide():
    c, n, WQ, WK, WV = rand_attention(1, 2, 3, 2, 3)
    with pytest.raises(ValueError):
        neighbor_attention(c, n, torch.ones(1, 2, dtype=torch.bool), WQ, WK, WV, 2)


def toy_graph(order):
    """Node 0 with neighbors 1..3; ``order`` permutes the neighbor list."""
    nbrs = np.array([1, 2, 3])[order]
    times = np.array([1.0, 2.0, 3.0])[order]

    def neighbor_fn(nodes, t):
        Q = len(nodes)
        out_n = np.zeros((Q, 3), dtype=np.int64)
        out_t = np.zeros((Q, 3))
        mask = np.zeros((Q, 3), dtype=bool)
        for q, node in enumerate(nodes):
            if node == 0:
                out_n[q], out_t[q], mask[q] = nbrs, times, True
            else:
                out_n[q, 0], out_t[q, 0], mask[q, 0] = 0, 0.5, True
        return out_n, out_t, mask
    return neighbor_fn


@pytest.mark.parametrize("layers", [1, 2])
def test_embedding_is_neighbor_order_free(layers):
    torch.manual_seed(0)
    tga = TemporalGraphAttention(3, 2, 4, n_layers=layers).double()
    base = torch.randn(4, 3, dtype=D)
    base_fn = lambda nodes: base[torch.as_tensor(nodes)]
    a = tga([0], [5.0], base_fn, toy_graph([0, 1, 2]))
    b = tga([0], [5.0], base_fn, toy_graph([2, 0, 1]))
    assert torch.allclose(a, b, atol=1e-12)


def test_embedding_weights_are_normalised():
    torch.manual_seed(1)
    tga = TemporalGraphAttention(3, 2, 4, n_layers=2).double()
    base = torch.randn(4, 3, dtype=D)
    ws = []
    tga([0, 1], [5.0, 5.0], lambda nodes: base[torch.as_tensor(nodes)], toy_graph([0, 1, 2]), ws)
    assert len(ws) == 3
    for w, mask in ws:
        assert torch.allclose(w.sum(-1), torch.ones(w.shape[:2], dtype=D), atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.floats(0, 1e6), st.integers(0, 10_000))
def test_time_encoding_zero_has_unit_norm(d_T, scale, seed):
    g = torch.Generator().manual_seed(seed)
    om = torch.rand(d_T, generator=g, dtype=D) * scale
    assert torch.linalg.norm(encode_time(0.0, om)).item() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.sampled_from([2, 8, 32]), st.floats(-3, 3), st.integers(0, 10_000))
def test_fourier_layer_norm_and_translation_invariance(d, D_h, shift, seed):
    g = torch.Generator().manual_seed(seed)
    W = torch.randn(D_h // 2, d, generator=g, dtype=D)
    a, b = torch.rand(2, d, generator=g, dtype=D) * 2 - 1
    c = torch.full((d,), shift, dtype=D)
    Ra, Rb = fourier_features(a, W), fourier_features(b, W)
    assert abs(Ra @ Ra - 0.5) <= 1e-12
    shifted = fourier_features(a + c, W) @ fourier_features(b + c, W)
    assert abs((Ra @ Rb) - shifted) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(0, 5), st.sampled_from([1, 2, 4]), st.integers(0, 10_000))
def test_attention_rows_sum_to_one(Q, N, heads, seed):
    c, n, WQ, WK, WV = rand_attention(Q, N, 4, heads, seed)
    g = torch.Generator().manual_seed(seed + 1)
    mask = torch.rand(Q, N, generator=g) < 0.7
    _, w = neighbor_attention(c, n, mask, WQ, WK, WV, heads)
    has = mask.any(-1)
    sums = w.sum(-1)
    assert torch.allclose(sums[has], torch.ones_like(sums[has]), atol=1e-6)
    assert torch.all(sums[~has] == 0)
    assert torch.all(w[~mask.unsqueeze(1).expand_as(w)] == 0)
