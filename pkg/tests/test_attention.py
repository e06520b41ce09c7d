import math

import numpy as np
import pytest
import torch

from sortrank.attention import (
    MaskSpec,
    PruneSchedule,
    SORTAttention,
    SeqMeta,
    attention_layer_forward,
    blockwise_masked_attention,
    build_mask,
    dense_masked_attention,
    geometric_keep,
    prune_queries,
    rope_rotate,
    visibility,
)
from sortrank.layers import Role

H, C = Role.HIST, Role.CAND


def seq(prefix, n_cand):
    roles = [H] * prefix + [C] * n_cand
    pos = list(range(prefix)) + [prefix] * n_cand
    return roles, pos


def reference_attention(x, layer, vis, pos):
    """Straightforward per-head loop, written independently of the layer's batched code."""
    pos = torch.as_tensor(pos)
    Lq = vis.shape[0]
    xq = x[-Lq:]
    heads = []
    for h in range(layer.n_heads):
        sl = slice(h * layer.head_dim, (h + 1) * layer.head_dim)
        q = xq @ layer.w_q.weight[sl].T
        k = x @ layer.w_k.weight[sl].T
        v = x @ layer.w_v.weight[sl].T
        if layer.q_gain is not None:
            q = q / torch.sqrt((q**2).mean(-1, keepdim=True) + 1e-6) * layer.q_gain[h]
            k = k / torch.sqrt((k**2).mean(-1, keepdim=True) + 1e-6) * layer.k_gain[h]
        q = rope_rotate(q, pos[-Lq:])
        k = rope_rotate(k, pos)
        out = torch.zeros(Lq, layer.head_dim, dtype=x.dtype)
        for i in range(Lq):
            s = [(q[i] @ k[j]) / math.sqrt(layer.head_dim) if vis[i, j] else -math.inf for j in range(x.shape[0])]
            w = torch.softmax(torch.stack([torch.as_tensor(v_, dtype=x.dtype) for v_ in s]), 0)
            out[i] = w @ v
        if layer.w_g is not None:
            out = torch.sigmoid(xq @ layer.w_g.weight[sl].T) * out
        heads.append(out)
    return torch.cat(heads, -1) @ layer.w_o.weight.T


# --------------------------------------------------------------------------- pruning


def test_prune_queries():
    x = torch.arange(10.0).reshape(10, 1)
    assert torch.equal(prune_queries(x, 10), x)
    assert torch.equal(prune_queries(x, 1), x[-1:])
    assert prune_queries(x, 4).flatten().tolist() == [6, 7, 8, 9]
    with pytest.raises(ValueError):
        prune_queries(x, 0)


def test_geometric_schedule():
    keep = PruneSchedule.geometric(1024, 4).keep
    assert keep[0] == 1024 and keep[-1] == 128
    assert list(keep) == sorted(keep, reverse=True)
    assert PruneSchedule.geometric(50, 4).keep == (50, 50, 50, 50)
    assert geometric_keep(np.array([0]), 3).tolist() == [[0, 0, 0]]
    with pytest.raises(ValueError):
        PruneSchedule((4, 8))


# --------------------------------------------------------------------------- masks


def test_causal_reduction():
    roles, pos = seq(6, 0)
    m = build_mask(MaskSpec(6, 6), roles, pos)
    assert torch.equal(torch.isfinite(m), torch.tril(torch.ones(6, 6, dtype=torch.bool)))


def test_candidate_diagonal_by_hand():
    roles, pos = seq(3, 2)
    vis = torch.isfinite(build_mask(MaskSpec(5, 5), roles, pos))
    expected = torch.tensor([
        [1, 0, 0, 0, 0],
        [1, 1, 0, 0, 0],
        [1, 1, 1, 0, 0],
        [1, 1, 1, 1, 0],
        [1, 1, 1, 0, 1],
    ], dtype=torch.bool)
    assert torch.equal(vis, expected)


def test_local_window_and_full_suffix():
    roles, pos = seq(10, 1)
    vis = torch.isfinite(build_mask(MaskSpec(11, 11, window=3, full_suffix=2), roles, pos))
    # Position 5 is far from the candidates: keys 3..5 only.
    assert vis[5].nonzero().flatten().tolist() == [3, 4, 5]
    # Positions 8 and 9 are inside the full suffix: full causal.
    assert vis[8, :9].all() and vis[9, :10].all()
    # Candidates always see the whole prefix.
    assert vis[10].all()


def test_pruned_rectangular_mask():
    roles, pos = seq(6, 2)
    full = torch.isfinite(build_mask(MaskSpec(8, 8), roles, pos))
    pruned = torch.isfinite(build_mask(MaskSpec(3, 8), roles, pos))
    assert torch.equal(pruned, full[-3:])


def test_all_masked_row_is_an_error():
    # A padding query whose only earlier key sits at a later position.
    with pytest.raises(ValueError, match="no visible key"):
        build_mask(MaskSpec(2, 2), [H, Role.PAD], [1, 0])


def test_bad_spec():
    with pytest.raises(ValueError):
        MaskSpec(5, 4)
    with pytest.raises(ValueError):
        MaskSpec(2, 4, window=0)


# --------------------------------------------------------------------------- RoPE


def test_rope_identity_at_zero():
    x = torch.randn(3, 8, dtype=torch.float64)
    assert torch.equal(rope_rotate(x, torch.zeros(3, dtype=torch.long)), x)


def test_rope_shift_invariance():
    g = torch.Generator().manual_seed(0)
    q, k = torch.randn(16, generator=g, dtype=torch.float64), torch.randn(16, generator=g, dtype=torch.float64)
    def dot(a, b):
        return float(rope_rotate(q[None], torch.tensor([a])) @ rope_rotate(k[None], torch.tensor([b])).T)
    assert dot(3, 7) == pytest.approx(dot(103, 107), abs=1e-6)
    # Shared candidate positions: zero relative angle, so the plain dot product.
    assert dot(9, 9) == pytest.approx(float(q @ k), abs=1e-9)


def test_rope_odd_dim():
    with pytest.raises(ValueError):
        rope_rotate(torch.zeros(2, 3), torch.arange(2))
    with pytest.raises(ValueError):
        SORTAttention(6, 2)


# --------------------------------------------------------------------------- layer


def test_layer_matches_reference_oracle():
    torch.manual_seed(0)
    layer = SORTAttention(16, 2, window=None, full_suffix=0).double()
    with torch.no_grad():
        layer.q_gain.uniform_(0.5, 1.5)
    x = torch.randn(12, 16, dtype=torch.float64)
    roles, pos = seq(9, 3)
    out = attention_layer_forward(x, layer, roles, pos, 12)
    vis = torch.isfinite(build_mask(MaskSpec(12, 12), roles, pos))
    assert torch.allclose(out, reference_attention(x, layer, vis, pos), atol=1e-5)


def test_zero_gate_halves_output():
    torch.manual_seed(1)
    gated = SORTAttention(8, 2).double()
    plain = SORTAttention(8, 2, gate=False).double()
    plain.load_state_dict({k: v for k, v in gated.state_dict().items() if not k.startswith("w_g")})
    with torch.no_grad():
        gated.w_g.weight.zero_()
    x = torch.randn(7, 8, dtype=torch.float64)
    roles, pos = seq(5, 2)
    a = attention_layer_forward(x, gated, roles, pos, 7)
    b = attention_layer_forward(x, plain, roles, pos, 7)
    assert torch.allclose(a, 0.5 * b, atol=1e-12)


def test_single_token_returns_gated_value():
    layer = SORTAttention(2, 1, qknorm=False).double()
    with torch.no_grad():
        for lin in (layer.w_q, layer.w_k, layer.w_v, layer.w_o, layer.w_g):
            lin.weight.copy_(torch.eye(2))
    x = torch.tensor([[0.3, -1.2]], dtype=torch.float64)
    out = attention_layer_forward(x, layer, [H], [0], 1)
    assert torch.allclose(out, torch.sigmoid(x) * x)


def test_pruning_is_restriction():
    torch.manual_seed(2)
    layer = SORTAttention(16, 2, window=None).double()
    x = torch.randn(14, 16, dtype=torch.float64)
    roles, pos = seq(10, 4)
    full = attention_layer_forward(x, layer, roles, pos, 14)
    for n in (4, 7, 13):
        assert torch.allclose(attention_layer_forward(x, layer, roles, pos, n), full[-n:], atol=1e-5)


def test_layer_candidate_isolation():
    torch.manual_seed(3)
    layer = SORTAttention(8, 2, window=2, full_suffix=1).double()
    x = torch.randn(9, 8, dtype=torch.float64)
    roles, pos = seq(6, 3)
    base = attention_layer_forward(x, layer, roles, pos, 9)
    x2 = x.clone()
    x2[7] += 5.0
    moved = attention_layer_forward(x2, layer, roles, pos, 9)
    assert torch.equal(base[[6, 8]], moved[[6, 8]])
    assert not torch.equal(base[7], moved[7])


def test_blockwise_layer_matches_dense():
    torch.manual_seed(4)
    dense = SORTAttention(16, 2, window=4, full_suffix=2).double()
    block = SORTAttention(16, 2, window=4, full_suffix=2, impl="blockwise", block=4).double()
    block.load_state_dict(dense.state_dict())
    x = torch.randn(20, 16, dtype=torch.float64)
    roles, pos = seq(15, 5)
    a = attention_layer_forward(x, dense, roles, pos, 11)
    b = attention_layer_forward(x, block, roles, pos, 11)
    assert (a - b).abs().max() < 1e-9


def test_non_finite_names_layer():
    layer = SORTAttention(4, 1)
    layer.layer_idx = 3
    with torch.no_grad():
        layer.w_o.weight.fill_(float("nan"))
    with pytest.raises(FloatingPointError, match="layer 3"):
        attention_layer_forward(torch.randn(3, 4), layer, [H, H, C], [0, 1, 2], 3)


# --------------------------------------------------------------------------- kernel


def test_blockwise_all_visible():
    g = torch.Generator().manual_seed(5)
    q, k, v = (torch.randn(2, 33, 8, generator=g, dtype=torch.float64) for _ in range(3))
    mask = torch.zeros(33, 33, dtype=torch.float64)
    out, skipped, total = blockwise_masked_attention(q, k, v, mask, block=8)
    assert skipped == 0 and total == 25
    assert (out - dense_masked_attention(q, k, v, mask)).abs().max() < 1e-6


def test_candidate_diagonal_tiles_skipped():
    P, N, B = 64, 64, 16
    roles, pos = seq(P, N)
    vis = torch.isfinite(build_mask(MaskSpec(P + N, P + N), roles, pos))
    q = k = v = torch.zeros(P + N, 4)
    _, skipped, _ = blockwise_masked_attention(q, k, v, vis, block=B)
    # Candidate-vs-candidate tiles off the diagonal are fully masked.
    cand_rows = vis[P:, P:].reshape(N // B, B, N // B, B).any(dim=(1, 3))
    cand_skipped = int((~cand_rows).sum())
    assert cand_skipped >= (N // B) ** 2 - N // B
    assert skipped >= cand_skipped


def test_long_local_window_skip_fraction():
    L, W, B = 4096, 256, 16
    idx = torch.arange(L)
    vis = (idx[None] <= idx[:, None]) & (idx[None] > idx[:, None] - W)
    g = torch.Generator().manual_seed(6)
    q, k, v = (torch.randn(1, L, 16, generator=g) for _ in range(3))
    out, skipped, total = blockwise_masked_attention(q, k, v, vis, block=B)
    assert skipped / total >= 0.85
    # Per query-block row, at most (W + B) / B + 1 live tiles survive.
    assert skipped / total >= 1 - (2 * W + B) / L
    ref = dense_masked_attention(q, k, v, torch.where(vis, 0.0, float("-inf")))
    assert (out - ref).abs().max() < 1e-5


def test_visibility_batched_prefix_lengths():
    # Two left-padded samples sharing one visibility call.
    pos = torch.tensor([[0, 0, 1, 2], [0, 1, 2, 3]])
    cand = torch.tensor([[False, False, False, True], [False, False, False, True]])
    valid = torch.tensor([[False, True, True, True], [True, True, True, True]])
    vis = visibility(pos, cand, pos, cand, valid, torch.tensor([2, 3]), window=1, full_suffix=0)
    assert not vis[0, :, 0].any()  # padding is never a key
    assert vis[0, 3].tolist() == [False, True, True, True]
    assert vis[1, 1].tolist() == [False, True, False, False]


def test_seqmeta_prune_marks_outside_rows_invalid():
    meta = SeqMeta(
        positions=torch.tensor([[0, 1, 2, 3, 4]]),
        roles=torch.tensor([[H, H, H, H, C]]),
        valid=torch.ones(1, 5, dtype=torch.bool),
        prefix_len=torch.tensor([4]),
    )
    out = meta.prune(3, keep=torch.tensor([1]))
    assert out.valid.tolist() == [[False, True, True]]
