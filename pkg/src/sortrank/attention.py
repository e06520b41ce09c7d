"""Structured-mask attention with RoPE, QK normalisation, output gating and query pruning.

The mask combines four rules:

* causal over non-candidate tokens,
* a sliding window of ``W`` keys for prefix queries far from the candidates,
* full causal attention for candidates and the last ``F`` prefix positions,
* a diagonal candidate block: a candidate sees the prefix and itself only.

Layer ``l`` keeps only the last ``L_out`` rows as queries, so the output is
shorter than the input; keys and values always come from the full input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .layers import NonFiniteError, Role, rms_norm


@dataclass
class MaskSpec:
    L_q: int
    L_kv: int
    window: int | None = None  # None means unbounded
    full_suffix: int = 0
    candidate_diagonal: bool = True

    def __post_init__(self):
        if not 1 <= self.L_q <= self.L_kv:
            raise ValueError(f"need 1 <= L_q <= L_kv, got L_q={self.L_q}, L_kv={self.L_kv}")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be >= 1 or None")
        if self.full_suffix < 0:
            raise ValueError("full_suffix must be >= 0")

    @property
    def prune_offset(self) -> int:
        return self.L_kv - self.L_q


@dataclass
class PruneSchedule:
    """Per-layer counts of non-candidate rows kept as queries (candidates always kept)."""

    keep: tuple[int, ...]

    def __post_init__(self):
        if any(b > a for a, b in zip(self.keep, self.keep[1:])):
            raise ValueError(f"keep counts must be non-increasing, got {self.keep}")
        if any(k < 0 for k in self.keep):
            raise ValueError("keep counts must be >= 0")

    @classmethod
    def geometric(cls, prefix_len: int, depth: int, final_keep: int = 128) -> "PruneSchedule":
        return cls(tuple(int(k) for k in geometric_keep(np.asarray([prefix_len]), depth, final_keep)[0]))

    @classmethod
    def none(cls, prefix_len: int, depth: int) -> "PruneSchedule":
        return cls((prefix_len,) * depth)


def geometric_keep(prefix_len: np.ndarray | torch.Tensor, depth: int, final_keep: int = 128):
    """Keep counts per (sample, layer): ``P`` at layer 1 shrinking geometrically to ``min(final_keep, P)``."""
    as_torch = isinstance(prefix_len, torch.Tensor)
    p = prefix_len.cpu().numpy() if as_torch else np.asarray(prefix_len)
    p = p.astype(np.float64)[:, None]
    final = np.minimum(float(final_keep), p)
    if depth == 1:
        keep = final
    else:
        frac = np.arange(depth, dtype=np.float64)[None, :] / (depth - 1)
        ratio = np.where(p > 0, final / np.maximum(p, 1.0), 1.0)
        keep = np.round(p * ratio**frac)
        keep = np.maximum(keep, final)
        keep = np.minimum.accumulate(keep, axis=1)
    keep = keep.astype(np.int64)
    return torch.as_tensor(keep) if as_torch else keep


def prune_queries(x: torch.Tensor, n: int) -> torch.Tensor:
    """Last ``n`` rows along the sequence axis (dimension -2)."""
    L = x.shape[-2]
    if not 1 <= n <= L:
        raise ValueError(f"cannot keep {n} rows of a length-{L} sequence")
    return x[..., L - n:, :]


# --------------------------------------------------------------------------- masks


def visibility(
    q_pos: torch.Tensor,
    q_cand: torch.Tensor,
    k_pos: torch.Tensor,
    k_cand: torch.Tensor,
    k_valid: torch.Tensor,
    prefix_len: torch.Tensor,
    window: int | None,
    full_suffix: int,
    candidate_diagonal: bool = True,
) -> torch.Tensor:
    """Boolean ``[..., L_q, L_kv]`` visibility; query row r is key row ``L_kv - L_q + r``.

    ``prefix_len`` (shape ``[...]``) is the number of non-candidate positions;
    candidates sit at position ``prefix_len``.
    """
    Lq, Lk = q_pos.shape[-1], k_pos.shape[-1]
    qp = q_pos.unsqueeze(-1)
    kp = k_pos.unsqueeze(-2)
    same = torch.arange(Lk, device=k_pos.device).unsqueeze(0) == (torch.arange(Lq, device=q_pos.device) + Lk - Lq).unsqueeze(1)
    key_ok = k_valid.unsqueeze(-2)
    if candidate_diagonal:
        prior = ~k_cand.unsqueeze(-2) & (kp <= qp)
    else:
        prior = kp <= qp
    if window is not None:
        near = qp >= (prefix_len.reshape(*prefix_len.shape, 1, 1) - full_suffix)
        local = (kp > qp - window) | q_cand.unsqueeze(-1) | near
        prior = prior & local
    return key_ok & (prior | same)


def build_mask(spec: MaskSpec, roles, position_ids) -> torch.Tensor:
    """Render the additive ``{0, -inf}`` mask for one sequence.

    ``roles`` and ``position_ids`` describe the ``L_kv`` key tokens; queries are
    the last ``L_q`` of them.
    """
    roles = torch.as_tensor(np.asarray(roles), dtype=torch.long)
    pos = torch.as_tensor(np.asarray(position_ids), dtype=torch.long)
    if roles.shape != (spec.L_kv,) or pos.shape != (spec.L_kv,):
        raise ValueError("roles and position_ids must have length L_kv")
    is_cand = roles == Role.CAND
    valid = roles != Role.PAD
    non_cand = pos[~is_cand & valid]
    prefix_len = torch.tensor(int(non_cand.max()) + 1 if len(non_cand) else 0)
    vis = visibility(
        pos[spec.prune_offset:], is_cand[spec.prune_offset:], pos, is_cand, valid,
        prefix_len, spec.window, spec.full_suffix, spec.candidate_diagonal,
    )
    empty = ~vis.any(dim=-1)
    if bool(empty.any()):
        row = int(torch.nonzero(empty)[0])
        raise ValueError(f"mask row {row} has no visible key")
    mask = torch.zeros(vis.shape, dtype=torch.float64)
    mask[~vis] = float("-inf")
    return mask


# --------------------------------------------------------------------------- RoPE


def rope_rotate(x: torch.Tensor, position_ids: torch.Tensor, theta: float = 10_000.0) -> torch.Tensor:
    """Rotate channel pairs (2i, 2i+1) of ``x[..., L, d_k]`` by ``pos * theta**(-2i/d_k)``."""
    d = x.shape[-1]
    if d % 2:
        raise ValueError(f"RoPE needs an even head dimension, got {d}")
    inv_freq = theta ** (-torch.arange(0, d, 2, dtype=torch.float64, device=x.device) / d)
    ang = position_ids.to(torch.float64).unsqueeze(-1) * inv_freq
    cos = torch.cos(ang).to(x.dtype)
    sin = torch.sin(ang).to(x.dtype)
    while cos.dim() < x.dim():
        cos = cos.unsqueeze(-3)
        sin = sin.unsqueeze(-3)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


# --------------------------------------------------------------------------- kernels


def dense_masked_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """softmax((q k^T + mask) / sqrt(d_k)) v with an additive mask."""
    logits = (q @ k.transpose(-1, -2) + mask) / math.sqrt(q.shape[-1])
    return torch.softmax(logits, dim=-1) @ v


def _as_bool_mask(mask: torch.Tensor) -> torch.Tensor:
    return mask if mask.dtype == torch.bool else torch.isfinite(mask)


def blockwise_masked_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor, block: int = 16
) -> tuple[torch.Tensor, int, int]:
    """Tile-by-tile attention that never touches a fully masked ``block x block`` tile.

    Each query block streams over its live key tiles with a running max and
    running normaliser (online softmax). ``mask`` is additive (0/-inf) or
    boolean (True = visible) and must broadcast against ``[..., L_q, L_kv]``;
    a tile is skipped only when it is masked for every leading index.

    Returns ``(output, skipped_tiles, total_tiles)``.
    """
    if block < 1:
        raise ValueError("block must be >= 1")
    vis = _as_bool_mask(mask)
    Lq, Lk, dk = q.shape[-2], k.shape[-2], q.shape[-1]
    lead = torch.broadcast_shapes(q.shape[:-2], k.shape[:-2], vis.shape[:-2])
    vis = vis.expand(*lead, Lq, Lk)
    nq, nk = -(-Lq // block), -(-Lk // block)
    # Tile occupancy: pad to whole tiles, then reduce each tile to "any visible".
    padded = F.pad(vis.reshape(-1, Lq, Lk), (0, nk * block - Lk, 0, nq * block - Lq))
    live = padded.reshape(-1, nq, block, nk, block).any(dim=(0, 2, 4))
    scale = 1.0 / math.sqrt(dk)
    out_blocks = []
    for i in range(nq):
        q0, q1 = i * block, min(Lq, (i + 1) * block)
        qb = q[..., q0:q1, :]
        m = torch.full((*lead, q1 - q0, 1), float("-inf"), dtype=q.dtype, device=q.device)
        s = torch.zeros((*lead, q1 - q0, 1), dtype=q.dtype, device=q.device)
        acc = torch.zeros((*lead, q1 - q0, v.shape[-1]), dtype=q.dtype, device=q.device)
        for j in torch.nonzero(live[i]).flatten().tolist():
            k0, k1 = j * block, min(Lk, (j + 1) * block)
            logits = (qb @ k[..., k0:k1, :].transpose(-1, -2)) * scale
            logits = logits.masked_fill(~vis[..., q0:q1, k0:k1], float("-inf"))
            m_new = torch.maximum(m, logits.amax(dim=-1, keepdim=True))
            # Rows with nothing visible yet keep m = -inf; guard exp(-inf - -inf).
            safe = torch.where(torch.isinf(m_new), torch.zeros_like(m_new), m_new)
            p = torch.exp(logits - safe)
            corr = torch.exp(m - safe)
            s = s * corr + p.sum(dim=-1, keepdim=True)
            acc = acc * corr + p @ v[..., k0:k1, :]
            m = m_new
        out_blocks.append(acc / s)
    skipped = int((~live).sum())
    return torch.cat(out_blocks, dim=-2), skipped, nq * nk


# --------------------------------------------------------------------------- layer


@dataclass
class SeqMeta:
    """Per-token bookkeeping that travels alongside the residual stream."""

    positions: torch.Tensor  # [B, L]
    roles: torch.Tensor  # [B, L]
    valid: torch.Tensor  # [B, L]
    prefix_len: torch.Tensor  # [B]

    @property
    def is_candidate(self) -> torch.Tensor:
        return self.roles == Role.CAND

    @property
    def length(self) -> int:
        return self.positions.shape[-1]

    def prune(self, n: int, keep: torch.Tensor | None = None) -> "SeqMeta":
        """Keep the last ``n`` rows; with per-sample ``keep`` counts, rows outside a
        sample's own kept prefix suffix are marked invalid."""
        L = self.length
        pos = self.positions[:, L - n:]
        roles = self.roles[:, L - n:]
        valid = self.valid[:, L - n:]
        if keep is not None:
            cand = roles == Role.CAND
            inside = pos >= (self.prefix_len - keep).unsqueeze(-1)
            valid = valid & (cand | inside)
        return SeqMeta(pos, roles, valid, self.prefix_len)


class SORTAttention(nn.Module):
    """Multi-head attention with optional QK RMSNorm, sigmoid output gate and query pruning."""

    def __init__(
        self,
        d_model: int,
        n_heads: int,
        head_dim: int | None = None,
        qknorm: bool = True,
        gate: bool = True,
        rope_theta: float = 10_000.0,
        window: int | None = 256,
        full_suffix: int = 128,
        candidate_diagonal: bool = True,
        impl: str = "dense",
        block: int = 16,
    ):
        super().__init__()
        head_dim = head_dim or d_model // n_heads
        if head_dim % 2:
            raise ValueError(f"head dimension must be even for RoPE, got {head_dim}")
        self.d_model, self.n_heads, self.head_dim = d_model, n_heads, head_dim
        inner = n_heads * head_dim
        self.w_q = nn.Linear(d_model, inner, bias=False)
        self.w_k = nn.Linear(d_model, inner, bias=False)
        self.w_v = nn.Linear(d_model, inner, bias=False)
        self.w_g = nn.Linear(d_model, inner, bias=False) if gate else None
        self.w_o = nn.Linear(inner, d_model, bias=False)
        self.q_gain = nn.Parameter(torch.ones(n_heads, head_dim)) if qknorm else None
        self.k_gain = nn.Parameter(torch.ones(n_heads, head_dim)) if qknorm else None
        self.rope_theta = rope_theta
        self.window = window
        self.full_suffix = full_suffix
        self.candidate_diagonal = candidate_diagonal
        if impl not in ("dense", "blockwise"):
            raise ValueError(f"unknown attention impl {impl!r}")
        self.impl = impl
        self.block = block
        self.layer_idx = -1
        self.record_logits = False
        self.last_logits: torch.Tensor | None = None
        self.last_visibility: torch.Tensor | None = None

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        B, L, _ = x.shape
        return x.view(B, L, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, meta: SeqMeta, out_meta: SeqMeta) -> torch.Tensor:
        """Attend from the last ``out_meta.length`` rows of ``x`` to all of ``x``."""
        B, L_in, _ = x.shape
        L_out = out_meta.length
        xq = prune_queries(x, L_out)
        q = self._heads(self.w_q(xq))
        k = self._heads(self.w_k(x))
        v = self._heads(self.w_v(x))
        if self.q_gain is not None:
            q = rms_norm(q, self.q_gain.unsqueeze(1))
            k = rms_norm(k, self.k_gain.unsqueeze(1))
        q = rope_rotate(q, out_meta.positions, self.rope_theta)
        k = rope_rotate(k, meta.positions, self.rope_theta)

        vis = visibility(
            out_meta.positions, out_meta.is_candidate, meta.positions, meta.is_candidate, meta.valid,
            meta.prefix_len, self.window, self.full_suffix, self.candidate_diagonal,
        )
        # Padded query rows may see nothing; let them see themselves (outputs are discarded).
        same = torch.eye(L_in, dtype=torch.bool, device=x.device)[L_in - L_out:]
        vis = vis | (~vis.any(dim=-1, keepdim=True) & same)
        vis = vis.unsqueeze(1)  # broadcast over heads

        if self.record_logits:
            self.last_logits = (q @ k.transpose(-1, -2)).detach() / math.sqrt(self.head_dim)
            self.last_visibility = vis.detach()
        if self.impl == "blockwise":
            attn, _, _ = blockwise_masked_attention(q, k, v, vis, self.block)
        else:
            logits = (q @ k.transpose(-1, -2)) / math.sqrt(self.head_dim)
            logits = logits.masked_fill(~vis, float("-inf"))
            attn = torch.softmax(logits, dim=-1) @ v
        if self.w_g is not None:
            attn = torch.sigmoid(self._heads(self.w_g(xq))) * attn
        out = self.w_o(attn.transpose(1, 2).reshape(B, L_out, -1))
        if not torch.isfinite(out).all():
            bad = [h for h in range(self.n_heads) if not torch.isfinite(attn[:, h]).all()]
            raise NonFiniteError(f"non-finite attention output in layer {self.layer_idx}, heads {bad or 'projection'}")
        return out


def attention_layer_forward(
    x: torch.Tensor,
    layer: SORTAttention,
    roles,
    position_ids,
    n_out: int,
) -> torch.Tensor:
    """Run one attention layer on a single unpadded sequence ``x[L_in, d]``, keeping ``n_out`` query rows."""
    roles = torch.as_tensor(np.asarray(roles), dtype=torch.long).unsqueeze(0)
    pos = torch.as_tensor(np.asarray(position_ids), dtype=torch.long).unsqueeze(0)
    non_cand = pos[roles != Role.CAND]
    prefix = torch.tensor([int(non_cand.max()) + 1 if len(non_cand) else 0])
    meta = SeqMeta(pos, roles, roles != Role.PAD, prefix)
    return layer(x.unsqueeze(0), meta, meta.prune(n_out))[0]
