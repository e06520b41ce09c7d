"""Analytic per-sample forward FLOPs.

One multiply-add counts as two FLOPs. Only matrix products are counted;
norms, RoPE, softmax and other elementwise work are left out, which is the
usual convention and keeps the estimate independent of kernel details.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .attention import geometric_keep, visibility
from .model import ModelConfig
from .tokenizer import TokenizerConfig, prefix_length


@dataclass(frozen=True)
class SeqComposition:
    """Token make-up of one request: history events, profile fields and candidates."""

    history: int
    candidates: int = 10
    profile_fields: int = 3

    def prefix_len(self, special_tokens: bool) -> int:
        return prefix_length(self.history, self.profile_fields, special_tokens)

    @classmethod
    def with_prefix(cls, prefix: int, special_tokens: bool = True, candidates: int = 10, profile_fields: int = 3):
        """Composition whose non-candidate prefix has exactly ``prefix`` tokens."""
        history = prefix - prefix_length(0, profile_fields, special_tokens)
        if history < 0:
            raise ValueError(f"prefix {prefix} too short for {profile_fields} profile fields")
        return cls(history, candidates, profile_fields)


@dataclass
class FlopsBreakdown:
    embedding: float = 0.0
    head: float = 0.0
    layers: list[dict[str, float]] = field(default_factory=list)

    @property
    def attention(self) -> float:
        return sum(l["qkvgo"] + l["scores"] for l in self.layers)

    @property
    def ffn(self) -> float:
        return sum(l["ffn"] for l in self.layers)

    @property
    def total(self) -> float:
        return self.embedding + self.head + self.attention + self.ffn


def visible_pairs(cfg: ModelConfig, prefix: int, n_cand: int, keep_in: int, keep_out: int) -> int:
    """Unmasked (query, key) entries of one layer for a single unpadded sequence."""
    L_in, L_out = keep_in + n_cand, keep_out + n_cand
    pos = torch.cat([torch.arange(prefix), torch.full((n_cand,), prefix)])[prefix - keep_in:]
    cand = torch.cat([torch.zeros(prefix, dtype=torch.bool), torch.ones(n_cand, dtype=torch.bool)])[prefix - keep_in:]
    vis = visibility(
        pos[L_in - L_out:], cand[L_in - L_out:], pos, cand, torch.ones(L_in, dtype=torch.bool),
        torch.tensor(prefix), cfg.effective_window, cfg.full_suffix, cfg.candidate_diagonal,
    )
    return int(vis.sum())


def ffn_flops_per_token(cfg: ModelConfig) -> float:
    d = cfg.d_model
    if not cfg.moe:
        return 2.0 * 3 * d * cfg.intermediate
    sp = cfg.sparsity
    shared = 0 if cfg.moe_style == "switch" else sp.shared
    m = max(1, cfg.intermediate // (sp.activated + shared))
    return 2.0 * 3 * d * m * (sp.activated + shared) + 2.0 * d * sp.total_experts


def flops_estimate(
    cfg: ModelConfig,
    seq: SeqComposition,
    tok_cfg: TokenizerConfig | None = None,
    sparse: bool = True,
) -> FlopsBreakdown:
    """Forward FLOPs for one request of composition ``seq``.

    With ``sparse`` the attention score/value products count only unmasked
    entries (what the block-skipping kernel can approach); otherwise the full
    ``L_out x L_in`` rectangle is charged.
    """
    d, inner = cfg.d_model, cfg.n_heads * cfg.head_dim
    P = seq.prefix_len(cfg.special_tokens)
    N = seq.candidates
    out = FlopsBreakdown()
    if tok_cfg is not None:
        out.embedding = 2.0 * d * (
            seq.history * tok_cfg.history_input_width
            + N * tok_cfg.candidate_input_width
            + seq.profile_fields * tok_cfg.profile_input_width
        )
    hidden = cfg.head_hidden or d
    out.head = 2.0 * N * (d * hidden + hidden * 3)

    if cfg.query_pruning and cfg.depth:
        keep = [int(k) for k in geometric_keep([P], cfg.depth, cfg.prune_final)[0]]
    else:
        keep = [P] * cfg.depth
    keep_in = P
    ffn_tok = ffn_flops_per_token(cfg)
    for l in range(cfg.depth):
        L_in, L_out = keep_in + N, keep[l] + N
        proj = 2.0 * d * inner * (2 * L_in + 2 * L_out)  # K, V on inputs; Q, O on kept rows
        if cfg.attention_gate:
            proj += 2.0 * d * inner * L_out
        pairs = visible_pairs(cfg, P, N, keep_in, keep[l]) if sparse else L_in * L_out
        out.layers.append({"qkvgo": proj, "scores": 2.0 * 2 * inner * pairs, "ffn": ffn_tok * L_out, "rows": L_out})
        keep_in = keep[l]
    return out


def pruning_ratio(cfg: ModelConfig, seq: SeqComposition, sparse: bool = True) -> float:
    """Total FLOPs with the configured pruning over the same model without it."""
    pruned = flops_estimate(cfg.with_toggles(query_pruning=True), seq, sparse=sparse).total
    full = flops_estimate(cfg.with_toggles(query_pruning=False), seq, sparse=sparse).total
    return pruned / full
