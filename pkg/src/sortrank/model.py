"""SORT and baseline ranking networks, the next-item pre-training network, and losses."""

from __future__ import annotations

import contextlib
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import torch
from torch import nn

from .attention import SeqMeta, SORTAttention, geometric_keep
from .data import ItemEvent, RequestSample
from .layers import NonFiniteError, RMSNorm, Role
from .moe import MoEFFN, SparsityConfig
from .tokenizer import Batch, Tokenizer, TokenizerConfig, time_bucket

OBJECTIVES = ("click", "cart", "purchase")
TOGGLES = ("special_tokens", "local_attention", "query_pruning", "attention_gate", "qknorm", "moe")

# (depth, width, intermediate)
PRESETS = {
    "small": (4, 256, 640),
    "base": (6, 512, 1280),
    "large": (12, 1024, 2560),
}
PRESET_LR = {"small": 2e-3, "base": 1e-3, "large": 5e-4}


@dataclass
class ModelConfig:
    depth: int = 4
    d_model: int = 256
    n_heads: int = 4
    intermediate: int = 640
    preset: str = "small"
    special_tokens: bool = True
    local_attention: bool = True
    query_pruning: bool = True
    attention_gate: bool = True
    qknorm: bool = True
    moe: bool = True
    window: int = 256
    full_suffix: int = 128
    prune_final: int = 128
    candidate_diagonal: bool = True
    moe_style: str = "deepseek"
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)
    balance_gamma: float = 1e-3
    switch_aux_coef: float = 0.01
    objective_weights: tuple[float, float, float] = (1.0, 0.5, 0.5)
    head_hidden: int | None = None
    rope_theta: float = 10_000.0
    init_std: float = 0.02
    attn_impl: str = "dense"
    block_size: int = 16
    precision: str = "float32"

    def __post_init__(self):
        if isinstance(self.sparsity, dict):
            self.sparsity = SparsityConfig(**self.sparsity)
        self.objective_weights = tuple(self.objective_weights)
        if self.depth < 0 or self.d_model < 2 or self.n_heads < 1:
            raise ValueError("depth >= 0, d_model >= 2 and n_heads >= 1 required")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.head_dim % 2:
            raise ValueError(f"head dimension {self.head_dim} must be even for RoPE")
        if self.window < 1 or self.full_suffix < 0 or self.prune_final < 0:
            raise ValueError("window >= 1, full_suffix >= 0, prune_final >= 0 required")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def effective_window(self) -> int | None:
        return self.window if self.local_attention else None

    @property
    def ffn_style(self) -> str:
        return self.moe_style if self.moe else "dense"

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32

    @classmethod
    def from_preset(cls, preset: str = "small", **overrides) -> "ModelConfig":
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        depth, width, inter = PRESETS[preset]
        base = dict(depth=depth, d_model=width, n_heads=max(1, width // 64), intermediate=inter, preset=preset)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def baseline(cls, preset: str = "small", **overrides) -> "ModelConfig":
        """The plain Transformer: every SORT toggle off."""
        off = {t: False for t in TOGGLES}
        off.update(overrides)
        return cls.from_preset(preset, **off)

    def with_toggles(self, **toggles) -> "ModelConfig":
        unknown = set(toggles) - set(TOGGLES)
        if unknown:
            raise ValueError(f"unknown toggles {sorted(unknown)}")
        return dataclasses.replace(self, **toggles)

    def for_pretraining(self) -> "ModelConfig":
        """Same blocks as a pure causal LM: no special tokens, local window or pruning."""
        return dataclasses.replace(self, special_tokens=False, local_attention=False, query_pruning=False)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["objective_weights"] = list(self.objective_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def keep_schedule(cfg: ModelConfig, prefix_len: torch.Tensor) -> torch.Tensor | None:
    """Per-sample, per-layer non-candidate keep counts, or None without pruning."""
    if not cfg.query_pruning or cfg.depth == 0:
        return None
    return geometric_keep(prefix_len, cfg.depth, cfg.prune_final)


# --------------------------------------------------------------------------- blocks


class Block(nn.Module):
    """Pre-norm block: attention on the normed stream, residual onto the kept rows, then FFN."""

    def __init__(self, cfg: ModelConfig, index: int):
        super().__init__()
        self.attn_norm = RMSNorm(cfg.d_model)
        self.attn = SORTAttention(
            cfg.d_model,
            cfg.n_heads,
            qknorm=cfg.qknorm,
            gate=cfg.attention_gate,
            rope_theta=cfg.rope_theta,
            window=cfg.effective_window,
            full_suffix=cfg.full_suffix,
            candidate_diagonal=cfg.candidate_diagonal,
            impl=cfg.attn_impl,
            block=cfg.block_size,
        )
        self.ffn_norm = RMSNorm(cfg.d_model)
        self.ffn = MoEFFN(
            cfg.d_model,
            cfg.intermediate,
            style=cfg.ffn_style,
            sparsity=cfg.sparsity,
            balance_gamma=cfg.balance_gamma,
            aux_coef=cfg.switch_aux_coef,
        )
        self.attn.layer_idx = index
        self.ffn.layer_idx = index

    def forward(self, x: torch.Tensor, meta: SeqMeta, out_meta: SeqMeta) -> torch.Tensor:
        a = self.attn(self.attn_norm(x), meta, out_meta)
        x = x[:, x.shape[1] - out_meta.length:] + a
        rows = out_meta.valid
        h = self.ffn(self.ffn_norm(x[rows]))
        return x.index_put((rows,), x[rows] + h)


class SORTNetwork(nn.Module):
    """Ranking network producing per-candidate click/cart/purchase probabilities."""

    def __init__(self, cfg: ModelConfig, tok_cfg: TokenizerConfig, seed: int | None = None):
        super().__init__()
        self.cfg = cfg
        self.tok_cfg = tok_cfg
        if seed is not None:
            torch.manual_seed(seed)
        self.tokenizer = Tokenizer(tok_cfg, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg, i) for i in range(cfg.depth))
        self.final_norm = RMSNorm(cfg.d_model)
        hidden = cfg.head_hidden or cfg.d_model
        self.head_hidden = nn.Linear(cfg.d_model, hidden)
        self.head_out = nn.Linear(hidden, len(OBJECTIVES))
        self.reset_parameters()
        self.to(cfg.dtype)

    def reset_parameters(self) -> None:
        cfg = self.cfg
        std = cfg.init_std
        out_std = std / math.sqrt(2 * max(1, cfg.depth))
        with torch.no_grad():
            for emb in self.tokenizer.tables().values():
                nn.init.normal_(emb.weight, std=std)
            # Special rows enter the stream un-normalised; give them unit scale like the other tokens.
            nn.init.normal_(self.tokenizer.special.weight, std=1.0)
            for lin in [self.tokenizer.hist_proj, self.tokenizer.cand_proj, *self.tokenizer.prof_proj,
                        self.head_hidden, self.head_out]:
                nn.init.normal_(lin.weight, std=std)
                nn.init.zeros_(lin.bias)
            for blk in self.blocks:
                a = blk.attn
                for lin in (a.w_q, a.w_k, a.w_v, a.w_g):
                    if lin is not None:
                        nn.init.normal_(lin.weight, std=std)
                nn.init.normal_(a.w_o.weight, std=out_std)
                blk.ffn.init_weights(std, out_std)

    # ------------------------------------------------------------------ forward

    def moe_layers(self) -> list[MoEFFN]:
        return [b.ffn for b in self.blocks if b.ffn.routed]

    def forward(self, batch: Batch) -> dict[str, torch.Tensor]:
        x = self.tokenizer(batch)
        meta = SeqMeta(batch.positions, batch.roles, batch.valid, batch.prefix_len)
        x, _ = self.run_blocks(x, meta, batch.n_candidates)
        h = self.final_norm(x[:, x.shape[1] - batch.n_candidates:])
        logits = self.head_out(torch.relu(self.head_hidden(h)))
        return {"logits": logits, "probs": torch.sigmoid(logits)}

    def run_blocks(self, x: torch.Tensor, meta: SeqMeta, n_candidates: int) -> tuple[torch.Tensor, SeqMeta]:
        keep = keep_schedule(self.cfg, meta.prefix_len)
        for l, block in enumerate(self.blocks):
            if keep is None:
                out_meta = meta
            else:
                k = keep[:, l]
                L_out = min(meta.length, int(k.max()) + n_candidates)
                out_meta = meta.prune(L_out, k)
            x = block(x, meta, out_meta)
            if not torch.isfinite(x).all():
                raise NonFiniteError(f"non-finite activations after block {l}")
            meta = out_meta
        return x, meta

    def aux_loss(self) -> torch.Tensor | None:
        terms = [m.last_aux_loss for m in self.moe_layers() if m.last_aux_loss is not None]
        return torch.stack(terms).sum() if terms else None

    def update_balance(self) -> None:
        for m in self.moe_layers():
            m.update_balance()

    def set_record_attention(self, on: bool) -> None:
        for b in self.blocks:
            b.attn.record_logits = on
            if not on:
                b.attn.last_logits = None
                b.attn.last_visibility = None


# --------------------------------------------------------------------------- losses


def total_loss(
    probs: torch.Tensor,
    labels: torch.Tensor,
    weights: Sequence[float] = (1.0, 0.5, 0.5),
    valid: torch.Tensor | None = None,
    eps: float = 1e-7,
) -> torch.Tensor:
    """Weighted sum over objectives of mean binary cross-entropy across candidates.

    ``probs`` and ``labels`` are ``[..., n_objectives]``; ``valid`` masks
    padded candidates.
    """
    p = probs.clamp(eps, 1.0 - eps)
    labels = labels.to(p.dtype)
    bce = -(labels * torch.log(p) + (1.0 - labels) * torch.log1p(-p))
    if valid is not None:
        bce = bce[valid]
    per_obj = bce.reshape(-1, bce.shape[-1]).mean(dim=0)
    w = torch.as_tensor(weights, dtype=p.dtype, device=p.device)
    return (w[: per_obj.shape[0]] * per_obj).sum()


def per_objective_bce(probs: torch.Tensor, labels: torch.Tensor, valid: torch.Tensor | None = None, eps: float = 1e-7) -> torch.Tensor:
    p = probs.clamp(eps, 1.0 - eps)
    bce = -(labels * torch.log(p) + (1.0 - labels) * torch.log1p(-p))
    if valid is not None:
        bce = bce[valid]
    return bce.reshape(-1, bce.shape[-1]).mean(dim=0)


# --------------------------------------------------------------------------- pre-training


@dataclass
class SequenceBatch:
    item: torch.Tensor
    action: torch.Tensor
    scene: torch.Tensor
    bucket: torch.Tensor
    targets: torch.Tensor  # next item, -100 where there is none
    positions: torch.Tensor
    roles: torch.Tensor
    valid: torch.Tensor
    prefix_len: torch.Tensor


IGNORE = -100


def click_sequences(samples: Sequence[RequestSample], max_len: int | None = None) -> list[tuple[ItemEvent, ...]]:
    """One chronological click sequence per user: their latest history plus that request's clicks."""
    last: dict[int, RequestSample] = {}
    for s in samples:
        cur = last.get(s.user_id)
        if cur is None or s.timestamp >= cur.timestamp:
            last[s.user_id] = s
    out = []
    for uid in sorted(last):
        s = last[uid]
        seq = list(s.history)
        for c in s.candidates:
            if c.click:
                action = 2 if c.purchase else 1 if c.cart else 0
                seq.append(ItemEvent(c.item_id, action, s.timestamp, s.scene_id))
        if max_len is not None:
            seq = seq[-max_len:]
        if len(seq) >= 2:
            out.append(tuple(seq))
    return out


def collate_sequences(seqs: Sequence[Sequence[ItemEvent]], time_edges: Sequence[int]) -> SequenceBatch:
    """Left-padded causal-LM batch; the recency bucket of event t is the gap since event t-1."""
    B = len(seqs)
    T = max(len(s) for s in seqs)
    arr = np.zeros((5, B, T), dtype=np.int64)
    targets = np.full((B, T), IGNORE, dtype=np.int64)
    positions = np.zeros((B, T), dtype=np.int64)
    valid = np.zeros((B, T), dtype=bool)
    lens = np.zeros(B, dtype=np.int64)
    for b, seq in enumerate(seqs):
        n = len(seq)
        lens[b] = n
        ev = np.asarray([(e.item_id, e.action_type, e.scene_id, e.timestamp) for e in seq], dtype=np.int64)
        gaps = np.diff(ev[:, 3], prepend=ev[0, 3])
        o = T - n
        arr[0, b, o:] = ev[:, 0]
        arr[1, b, o:] = ev[:, 1]
        arr[2, b, o:] = ev[:, 2]
        arr[3, b, o:] = time_bucket(gaps, time_edges)
        targets[b, o:T - 1] = ev[1:, 0]
        positions[b, o:] = np.arange(n)
        valid[b, o:] = True
    roles = np.where(valid, int(Role.HIST), int(Role.PAD))
    t = torch.as_tensor
    return SequenceBatch(t(arr[0]), t(arr[1]), t(arr[2]), t(arr[3]), t(targets), t(positions), t(roles), t(valid), t(lens))


class NextItemNetwork(nn.Module):
    """Causal next-item model whose output layer is tied to the item embedding table."""

    def __init__(self, cfg: ModelConfig, tok_cfg: TokenizerConfig, seed: int | None = None):
        super().__init__()
        cfg = cfg.for_pretraining()
        self.cfg = cfg
        self.tok_cfg = tok_cfg
        if seed is not None:
            torch.manual_seed(seed)
        self.tokenizer = Tokenizer(tok_cfg, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg, i) for i in range(cfg.depth))
        self.final_norm = RMSNorm(cfg.d_model)
        self.out_proj = nn.Linear(cfg.d_model, tok_cfg.item_dim, bias=False)
        std = cfg.init_std
        out_std = std / math.sqrt(2 * max(1, cfg.depth))
        with torch.no_grad():
            for emb in self.tokenizer.tables().values():
                nn.init.normal_(emb.weight, std=std)
            nn.init.normal_(self.tokenizer.hist_proj.weight, std=std)
            nn.init.zeros_(self.tokenizer.hist_proj.bias)
            nn.init.normal_(self.out_proj.weight, std=std)
            for blk in self.blocks:
                a = blk.attn
                for lin in (a.w_q, a.w_k, a.w_v, a.w_g):
                    if lin is not None:
                        nn.init.normal_(lin.weight, std=std)
                nn.init.normal_(a.w_o.weight, std=out_std)
                blk.ffn.init_weights(std, out_std)
        self.to(cfg.dtype)

    @property
    def item_table(self) -> torch.Tensor:
        return self.tokenizer.item.weight

    def hidden(self, batch: SequenceBatch) -> torch.Tensor:
        x = self.tokenizer.embed_history(batch.item, batch.action, batch.scene, batch.bucket)
        meta = SeqMeta(batch.positions, batch.roles, batch.valid, batch.prefix_len)
        for l, block in enumerate(self.blocks):
            x = block(x, meta, meta)
            if not torch.isfinite(x).all():
                raise NonFiniteError(f"non-finite activations after block {l}")
        return self.out_proj(self.final_norm(x))

    def forward(self, batch: SequenceBatch) -> torch.Tensor:
        """Logits over the whole item vocabulary at every position."""
        return self.hidden(batch) @ self.item_table.T

    def loss(self, batch: SequenceBatch) -> torch.Tensor:
        logits = self(batch)
        return nn.functional.cross_entropy(logits.reshape(-1, logits.shape[-1]), batch.targets.reshape(-1), ignore_index=IGNORE)

    def moe_layers(self) -> list[MoEFFN]:
        return [b.ffn for b in self.blocks if b.ffn.routed]

    def update_balance(self) -> None:
        for m in self.moe_layers():
            m.update_balance()

    def aux_loss(self) -> torch.Tensor | None:
        terms = [m.last_aux_loss for m in self.moe_layers() if m.last_aux_loss is not None]
        return torch.stack(terms).sum() if terms else None


def transfer_sparse(source: NextItemNetwork | torch.Tensor, target: SORTNetwork, freeze: bool = True) -> SORTNetwork:
    """Copy a pre-trained item table into ``target``; optionally freeze it there."""
    table = source.item_table if isinstance(source, NextItemNetwork) else source
    dst = target.tokenizer.item.weight
    if tuple(table.shape) != tuple(dst.shape):
        raise ValueError(f"item vocabulary mismatch: source {tuple(table.shape)} vs target {tuple(dst.shape)}")
    with torch.no_grad():
        dst.copy_(table.detach().to(dst.dtype))
    target.tokenizer.freeze("item_id", freeze)
    return target


# --------------------------------------------------------------------------- accounting


def block_parameter_count(cfg: ModelConfig) -> int:
    """Analytic count of Transformer-block parameters (embeddings, tokenizer and heads excluded)."""
    d, inner = cfg.d_model, cfg.n_heads * cfg.head_dim
    attn = 4 * d * inner + (d * inner if cfg.attention_gate else 0) + (2 * inner if cfg.qknorm else 0)
    norms = 2 * d
    if cfg.moe:
        sp = cfg.sparsity
        shared = 0 if cfg.moe_style == "switch" else sp.shared
        m = max(1, cfg.intermediate // (sp.activated + shared))
        ffn = (sp.total_experts + shared) * 3 * d * m + d * sp.total_experts
    else:
        ffn = 3 * d * cfg.intermediate
    return cfg.depth * (attn + norms + ffn)


def count_block_parameters(model: SORTNetwork | NextItemNetwork) -> int:
    return sum(p.numel() for p in model.blocks.parameters())


# --------------------------------------------------------------------------- routing control


@contextlib.contextmanager
def fixed_routing(model: nn.Module, run_once) -> Iterator[None]:
    """Record every MoE layer's expert choice from ``run_once()`` and replay it inside the block."""
    layers = [m for m in model.modules() if isinstance(m, MoEFFN) and m.routed]
    for m in layers:
        m.record_selection = True
    try:
        run_once()
        for m in layers:
            m.fixed_selection = m.last_selection
            m.record_selection = False
        yield
    finally:
        for m in layers:
            m.fixed_selection = None
            m.record_selection = False
