"""SwishGLU feed-forward layers: dense, Switch-style top-k MoE, and DeepSeek-style MoE.

DeepSeek-style here means one or more always-on shared experts plus routed
experts picked by ``sigmoid score + bias``; the bias is nudged after every
step towards a uniform load instead of training with an auxiliary loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .layers import NonFiniteError

STYLES = ("dense", "switch", "deepseek")


@dataclass
class SparsityConfig:
    total_experts: int = 16
    activated: int = 2
    shared: int = 1

    def __post_init__(self):
        if not 1 <= self.activated <= self.total_experts:
            raise ValueError(f"need 1 <= k <= E, got k={self.activated}, E={self.total_experts}")
        if self.shared < 0:
            raise ValueError("shared experts must be >= 0")

    @property
    def ratio(self) -> float:
        return self.activated / self.total_experts

    @classmethod
    def preset(cls, ratio: float, activated: int = 2, shared: int = 1) -> "SparsityConfig":
        """Presets for the explored ratios 1/2, 1/4 and 1/8."""
        total = round(activated / ratio)
        if not math.isclose(activated / total, ratio):
            raise ValueError(f"ratio {ratio} not reachable with k={activated}")
        return cls(total_experts=total, activated=activated, shared=shared)


def swish(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


def swishglu(x: torch.Tensor, w_gate: torch.Tensor, w_up: torch.Tensor, w_down: torch.Tensor) -> torch.Tensor:
    """``down(swish(x @ gate) * (x @ up))`` with weights ``[d, m]``, ``[d, m]``, ``[m, d]``."""
    return (swish(x @ w_gate) * (x @ w_up)) @ w_down


class SwishGLU(nn.Module):
    def __init__(self, d_model: int, hidden: int):
        super().__init__()
        self.w_gate = nn.Parameter(torch.empty(d_model, hidden))
        self.w_up = nn.Parameter(torch.empty(d_model, hidden))
        self.w_down = nn.Parameter(torch.empty(hidden, d_model))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return swishglu(x, self.w_gate, self.w_up, self.w_down)


def route_topk(
    scores: torch.Tensor, k: int, bias: torch.Tensor | None = None, style: str = "deepseek"
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pick ``k`` experts per token from router ``scores[T, E]``.

    Selection ranks ``scores + bias`` (ties go to the lower expert index); the
    combine weights are always read from the raw ``scores`` of the selected
    experts, so the bias only ever changes *which* experts run. Switch weights
    are the softmax probabilities themselves; DeepSeek sigmoid scores are
    renormalised over the selected experts.
    """
    key = scores if bias is None else scores + bias
    order = torch.sort(key, dim=-1, descending=True, stable=True).indices
    idx = order[..., :k]
    return idx, combine_weights(scores, idx, style)


def combine_weights(scores: torch.Tensor, idx: torch.Tensor, style: str) -> torch.Tensor:
    w = torch.gather(scores, -1, idx)
    if style == "deepseek":
        w = w / w.sum(dim=-1, keepdim=True)
    return w


def router_scores(logits: torch.Tensor, style: str) -> torch.Tensor:
    if style == "switch":
        return torch.softmax(logits, dim=-1)
    if style == "deepseek":
        return torch.sigmoid(logits)
    raise ValueError(f"no router for style {style!r}")


def switch_aux_loss(load_fraction: torch.Tensor, mean_prob: torch.Tensor) -> torch.Tensor:
    """``E * sum_e f_e * P_e``; equals 1 when routing is perfectly uniform."""
    E = load_fraction.shape[-1]
    return E * (load_fraction * mean_prob).sum(-1)


def bias_update(bias: torch.Tensor, load: torch.Tensor, gamma: float) -> torch.Tensor:
    """Raise the bias of under-loaded experts and lower it for over-loaded ones by ``gamma``."""
    load = load.to(bias.dtype)
    return bias + gamma * torch.sign(load.mean() - load)


class MoEFFN(nn.Module):
    """Feed-forward sublayer; ``style`` picks dense, switch or deepseek routing."""

    def __init__(
        self,
        d_model: int,
        intermediate: int,
        style: str = "deepseek",
        sparsity: SparsityConfig | None = None,
        balance_gamma: float = 1e-3,
        aux_coef: float = 0.01,
    ):
        super().__init__()
        if style not in STYLES:
            raise ValueError(f"style must be one of {STYLES}, got {style!r}")
        self.style = style
        self.d_model = d_model
        self.balance_gamma = balance_gamma
        self.aux_coef = aux_coef
        if style == "dense":
            self.sparsity = None
            self.expert_size = intermediate
            self.n_experts = 1
            self.shared = nn.ModuleList([SwishGLU(d_model, intermediate)])
            self.router = None
            return
        sp = sparsity or SparsityConfig()
        if style == "switch":
            sp = SparsityConfig(sp.total_experts, sp.activated, 0)
        self.sparsity = sp
        # Activated width (shared + routed) matches the dense intermediate size.
        self.expert_size = max(1, intermediate // (sp.activated + sp.shared))
        self.n_experts = sp.total_experts
        self.w_gate = nn.Parameter(torch.empty(sp.total_experts, d_model, self.expert_size))
        self.w_up = nn.Parameter(torch.empty(sp.total_experts, d_model, self.expert_size))
        self.w_down = nn.Parameter(torch.empty(sp.total_experts, self.expert_size, d_model))
        self.shared = nn.ModuleList(SwishGLU(d_model, self.expert_size) for _ in range(sp.shared))
        self.router = nn.Linear(d_model, sp.total_experts, bias=False)
        self.register_buffer("expert_bias", torch.zeros(sp.total_experts))
        self.fixed_selection: torch.Tensor | None = None
        self.record_selection = False
        self.last_selection: torch.Tensor | None = None
        self.last_load: torch.Tensor | None = None
        self.last_aux_loss: torch.Tensor | None = None
        self.last_mean_prob: torch.Tensor | None = None
        self.layer_idx = -1

    @property
    def routed(self) -> bool:
        return self.style != "dense"

    def expert(self, e: int, x: torch.Tensor) -> torch.Tensor:
        return swishglu(x, self.w_gate[e], self.w_up[e], self.w_down[e])

    def route(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        scores = router_scores(self.router(x), self.style)
        bias = self.expert_bias if self.style == "deepseek" else None
        idx, weights = route_topk(scores, self.sparsity.activated, bias, self.style)
        if self.fixed_selection is not None:
            idx = self.fixed_selection
            weights = combine_weights(scores, idx, self.style)
        return idx, weights, scores

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``x[T, d]`` -> ``[T, d]``; tokens are independent."""
        out = torch.zeros_like(x)
        for sh in self.shared:
            out = out + sh(x)
        if not self.routed:
            return out
        idx, weights, scores = self.route(x)
        if self.record_selection:
            self.last_selection = idx.detach().clone()
        E = self.n_experts
        routed = torch.zeros_like(x)
        for e in range(E):
            tok, slot = torch.nonzero(idx == e, as_tuple=True)
            if tok.numel() == 0:
                continue
            y = self.expert(e, x[tok]) * weights[tok, slot].unsqueeze(-1)
            routed.index_add_(0, tok, y)  # accumulate in place: one buffer instead of a copy per expert
        out = out + routed
        load = torch.bincount(idx.flatten(), minlength=E).to(x.dtype)
        self.last_load = load.detach()
        if self.style == "switch":
            mean_prob = scores.mean(0)
            self.last_mean_prob = mean_prob.detach()
            self.last_aux_loss = self.aux_coef * switch_aux_loss(load / max(1, idx.numel()), mean_prob)
        if not torch.isfinite(out).all():
            bad_tok = int(torch.nonzero(~torch.isfinite(out).all(-1))[0])
            raise NonFiniteError(
                f"non-finite FFN output in layer {self.layer_idx}, token {bad_tok}, experts {idx[bad_tok].tolist()}"
            )
        return out

    @torch.no_grad()
    def update_balance(self, load: torch.Tensor | None = None) -> torch.Tensor | None:
        """Apply the per-step balancing rule to ``load`` (default: the last forward's).

        DeepSeek style moves the selection bias and returns None. Switch style
        has no state to move and returns the auxiliary loss value for ``load``
        against the last mean router probabilities (or the load itself before
        any forward pass).
        """
        load = self.last_load if load is None else load
        if load is None or not self.routed:
            return None
        if self.style == "deepseek":
            self.expert_bias.copy_(bias_update(self.expert_bias, load, self.balance_gamma))
            return None
        frac = load / load.sum().clamp_min(1)
        prob = self.last_mean_prob if self.last_mean_prob is not None else frac
        return switch_aux_loss(frac, prob)

    def init_weights(self, std: float = 0.02, out_std: float | None = None) -> None:
        out_std = std if out_std is None else out_std
        with torch.no_grad():
            for sh in self.shared:
                nn.init.normal_(sh.w_gate, std=std)
                nn.init.normal_(sh.w_up, std=std)
                nn.init.normal_(sh.w_down, std=out_std)
            if self.routed:
                nn.init.normal_(self.w_gate, std=std)
                nn.init.normal_(self.w_up, std=std)
                nn.init.normal_(self.w_down, std=out_std)
                nn.init.normal_(self.router.weight, std=std)


def moe_forward(x: torch.Tensor, layer: MoEFFN) -> torch.Tensor:
    return layer(x)


def load_imbalance(load: torch.Tensor) -> float:
    """max / mean of an expert-load histogram."""
    load = load.to(torch.float64)
    return float(load.max() / load.mean().clamp_min(1e-12))


