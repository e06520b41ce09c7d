"""Optimiser, metrics, and the pre-training / ranking training loops."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .data import ItemEvent
from .layers import NonFiniteError
from .model import (
    OBJECTIVES,
    PRESET_LR,
    NextItemNetwork,
    SORTNetwork,
    collate_sequences,
    per_objective_bce,
    total_loss,
)
from .tokenizer import PackedRequests, collate

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- optimiser


class AdamW(torch.optim.Optimizer):
    """AdamW with bias-corrected moments and decoupled weight decay.

    Parameters with ``requires_grad=False`` (frozen tables) are dropped at
    construction, so no state is ever allocated for them. Pass
    ``(name, param)`` pairs to get named errors for non-finite gradients.
    """

    def __init__(self, params, lr: float = 5e-4, betas=(0.9, 0.99), eps: float = 1e-8, weight_decay: float = 0.01):
        if lr < 0:
            raise ValueError(f"invalid learning rate {lr}")
        params = list(params)
        names: dict[int, str] = {}
        plain = []
        for i, p in enumerate(params):
            if isinstance(p, tuple):
                name, p = p
            else:
                name = f"param[{i}]"
            if p.requires_grad:
                names[id(p)] = name
                plain.append(p)
        self._names = names
        super().__init__(plain, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure: Optional[Callable] = None):
        loss = None if closure is None else closure()
        for group in self.param_groups:
            lr, wd, eps = group["lr"], group["weight_decay"], group["eps"]
            b1, b2 = group["betas"]
            for p in group["params"]:
                if p.grad is None or not p.requires_grad:
                    continue
                g = p.grad
                if not torch.isfinite(g).all():
                    raise NonFiniteError(f"non-finite gradient for {self._names.get(id(p), 'parameter')}")
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["m"] = torch.zeros_like(p)
                    state["v"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                m, v = state["m"], state["v"]
                m.mul_(b1).add_(g, alpha=1 - b1)
                v.mul_(b2).addcmul_(g, g, value=1 - b2)
                m_hat = m / (1 - b1**t)
                v_hat = v / (1 - b2**t)
                if wd:
                    p.mul_(1 - lr * wd)
                p.addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr)
        return loss


def adamw_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: dict | None = None,
               lr: float = 5e-4, betas=(0.9, 0.99), eps: float = 1e-8, weight_decay: float = 0.01):
    """Functional single AdamW step: returns ``(new_params, new_state)`` without mutating inputs."""
    state = copy.deepcopy(state) if state else {"step": 0, "m": [torch.zeros_like(p) for p in params],
                                                "v": [torch.zeros_like(p) for p in params]}
    state["step"] += 1
    t = state["step"]
    b1, b2 = betas
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for param[{i}]")
        m = b1 * state["m"][i] + (1 - b1) * g
        v = b2 * state["v"][i] + (1 - b2) * g * g
        state["m"][i], state["v"][i] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        out.append(p * (1 - lr * weight_decay) - lr * m_hat / (v_hat.sqrt() + eps))
    return out, state


# --------------------------------------------------------------------------- metrics


def compute_auc(scores, labels) -> float | None:
    """Mann-Whitney AUC with half credit for ties; None when only one class is present."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def group_auc(scores, labels, groups) -> float | None:
    """Impression-weighted mean of per-group AUC over groups with both classes."""
    scores, labels, groups = map(np.asarray, (scores, labels, groups))
    order = np.argsort(groups, kind="stable")
    g_sorted = groups[order]
    bounds = np.flatnonzero(np.diff(g_sorted)) + 1
    total, weight = 0.0, 0
    for idx in np.split(order, bounds):
        a = compute_auc(scores[idx], labels[idx])
        if a is not None:
            total += a * len(idx)
            weight += len(idx)
    return total / weight if weight else None


@dataclass
class Metrics:
    step: int
    split: str
    auc: dict[str, float | None]
    loss: float
    per_objective_loss: dict[str, float] = field(default_factory=dict)
    flops: float | None = None
    load_max_over_mean: float | None = None
    wall_clock: float = 0.0
    epoch: float = 0.0

    def rows(self) -> list[dict]:
        """One CSV row per objective."""
        return [
            {
                "step": self.step,
                "split": self.split,
                "objective": obj,
                "auc": "" if self.auc.get(obj) is None else f"{self.auc[obj]:.6f}",
                "loss": f"{self.per_objective_loss.get(obj, self.loss):.6f}",
                "flops": "" if self.flops is None else f"{self.flops:.0f}",
                "load_max_over_mean": "" if self.load_max_over_mean is None else f"{self.load_max_over_mean:.4f}",
            }
            for obj in OBJECTIVES
        ]


METRICS_COLUMNS = ("step", "split", "objective", "auc", "loss", "flops", "load_max_over_mean")


# --------------------------------------------------------------------------- batching


def length_bucketed_batches(
    lengths: np.ndarray, batch_size: int, rng: np.random.Generator | None, bucket_factor: int = 50
) -> list[np.ndarray]:
    """Batches of similar total length; shuffled within and across buckets when ``rng`` is given."""
    n = len(lengths)
    idx = rng.permutation(n) if rng is not None else np.arange(n)
    chunk = batch_size * bucket_factor
    batches = []
    for start in range(0, n, chunk):
        part = idx[start:start + chunk]
        part = part[np.argsort(lengths[part], kind="stable")]
        batches.extend(part[i:i + batch_size] for i in range(0, len(part), batch_size))
    if rng is not None:
        order = rng.permutation(len(batches))
        batches = [batches[i] for i in order]
    return batches


def sequence_lengths(packed: PackedRequests) -> np.ndarray:
    return packed.hist_lengths + packed.cand_counts


def token_chunks(index: np.ndarray, lengths: np.ndarray, max_tokens: int | None,
                 max_pairs: int | None = None) -> list[np.ndarray]:
    """Split one batch so each chunk stays under a token and an attention-pair budget.

    A chunk of ``r`` rows padded to length ``L`` costs ``r * L`` tokens and
    ``r * L * L`` attention entries per head; the latter dominates memory for
    long sequences. Lengths are padded-token estimates (history + candidates);
    a single over-long row still forms its own chunk.
    """
    index = np.asarray(index)

    def fits(rows: int, L: int) -> bool:
        return (not max_tokens or rows * L <= max_tokens) and (not max_pairs or rows * L * L <= max_pairs)

    if fits(len(index), int(lengths[index].max())):
        return [index]
    order = index[np.argsort(lengths[index], kind="stable")]
    chunks, start = [], 0
    for end in range(1, len(order) + 1):
        if end - start > 1 and not fits(end - start, int(lengths[order[end - 1]])):
            chunks.append(order[start:end - 1])
            start = end - 1
    chunks.append(order[start:])
    return chunks


@torch.no_grad()
def predict_packed(model: SORTNetwork, packed: PackedRequests, batch_size: int = 512,
                   max_tokens: int | None = 16_384, max_pairs: int | None = 2_000_000) -> np.ndarray:
    """Probabilities ``[n_candidates_total, 3]`` in packed candidate order."""
    was_training = model.training
    model.eval()
    out = np.zeros((int(packed.cand_offsets[-1]), len(OBJECTIVES)), dtype=np.float64)
    lengths = sequence_lengths(packed)
    for bb in length_bucketed_batches(lengths, batch_size, rng=None):
        for b in token_chunks(bb, lengths, max_tokens, max_pairs):
            batch = collate(packed, b, special_tokens=model.cfg.special_tokens)
            probs = model(batch)["probs"].double().numpy()
            for row, i in enumerate(b):
                c0, c1 = packed.cand_offsets[i], packed.cand_offsets[i + 1]
                out[c0:c1] = probs[row, : c1 - c0]
    model.train(was_training)
    return out


def evaluate(model: SORTNetwork, packed: PackedRequests, split: str = "eval", step: int = 0,
             batch_size: int = 512, gauc: bool = False) -> Metrics:
    probs = predict_packed(model, packed, batch_size)
    labels = packed.cand_labels
    aucs = {}
    for j, obj in enumerate(OBJECTIVES):
        if gauc:
            aucs[obj] = group_auc(probs[:, j], labels[:, j], packed.candidate_request_index())
        else:
            aucs[obj] = compute_auc(probs[:, j], labels[:, j])
    p = torch.as_tensor(probs)
    y = torch.as_tensor(labels, dtype=torch.float64)
    per_obj = per_objective_bce(p, y).tolist()
    loss = float(total_loss(p, y, model.cfg.objective_weights))
    return Metrics(step=step, split=split, auc=aucs, loss=loss, per_objective_loss=dict(zip(OBJECTIVES, per_obj)))


def popularity_scores(train: PackedRequests, target: PackedRequests, objective: int = 0, prior: float = 20.0) -> np.ndarray:
    """Smoothed per-item training rate of ``objective``, scored on ``target`` candidates."""
    n_items = int(max(train.cand_item.max(initial=0), target.cand_item.max(initial=0))) + 1
    shows = np.bincount(train.cand_item, minlength=n_items).astype(np.float64)
    hits = np.bincount(train.cand_item, weights=train.cand_labels[:, objective], minlength=n_items)
    base = hits.sum() / max(shows.sum(), 1.0)
    rate = (hits + prior * base) / (shows + prior)
    return rate[target.cand_item]


def popularity_auc(train: PackedRequests, target: PackedRequests, objective: int = 0) -> float | None:
    return compute_auc(popularity_scores(train, target, objective), target.cand_labels[:, objective])


# --------------------------------------------------------------------------- training loops


@dataclass
class TrainConfig:
    epochs: float = 1.0
    batch_size: int = 256
    lr: float | None = None  # None: preset learning rate
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.99)
    warmup_steps: int = 100
    seed: int = 0
    eval_every: int = 0  # 0: evaluate once per epoch
    log_every: int = 50
    grad_clip: float | None = 1.0
    train_eval_size: int = 5_000
    gauc: bool = False
    # Gradient-accumulation chunking (see token_chunks); None disables either budget.
    max_batch_tokens: int | None = 8_192
    max_batch_pairs: int | None = 1_000_000

    def resolved_lr(self, preset: str) -> float:
        return self.lr if self.lr is not None else PRESET_LR.get(preset, 5e-4)


@dataclass
class TrainResult:
    model: SORTNetwork
    timeline: list[Metrics]
    steps: int
    wall_clock: float
    load_history: list[tuple[int, int, list[float]]] = field(default_factory=list)  # (step, layer, per-expert load)
    diverged: bool = False

    def final(self, split: str = "eval") -> Metrics | None:
        rows = [m for m in self.timeline if m.split == split]
        return rows[-1] if rows else None

    def by_epoch(self, split: str = "eval") -> list[Metrics]:
        return [m for m in self.timeline if m.split == split and float(m.epoch).is_integer()]


def _lr_at(step: int, base: float, warmup: int) -> float:
    return base * min(1.0, (step + 1) / warmup) if warmup > 0 else base


def named_trainable(model: torch.nn.Module) -> list[tuple[str, torch.nn.Parameter]]:
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad]


def _accumulate(model: SORTNetwork, train: PackedRequests, index: np.ndarray, lengths: np.ndarray,
                max_tokens: int | None, max_pairs: int | None = None) -> tuple[float, list[torch.Tensor | None]]:
    """Forward/backward one batch in token-capped chunks; returns the batch loss and summed expert loads."""
    n_valid = int(train.cand_counts[index].sum())
    moe = model.moe_layers()
    loads: list[torch.Tensor | None] = [None] * len(moe)
    loss = 0.0
    for chunk in token_chunks(index, lengths, max_tokens, max_pairs):
        batch = collate(train, chunk, special_tokens=model.cfg.special_tokens)
        out = model(batch)
        part = total_loss(out["probs"], batch.labels, model.cfg.objective_weights, valid=batch.cand_valid)
        aux = model.aux_loss()
        if aux is not None:
            part = part + aux
        # Chunk means weighted by their candidate share add up to the full-batch mean.
        part = part * (int(batch.cand_valid.sum()) / n_valid)
        if not torch.isfinite(part):
            return math.nan, loads
        part.backward()
        loss += float(part.detach())
        for i, ml in enumerate(moe):
            loads[i] = ml.last_load if loads[i] is None else loads[i] + ml.last_load
    return loss, loads


def train_rank(
    model: SORTNetwork,
    train: PackedRequests,
    evals: PackedRequests | None,
    cfg: TrainConfig,
    on_metrics: Callable[[Metrics], None] | None = None,
) -> TrainResult:
    """Train the ranking model for ``cfg.epochs`` epochs (fractional epochs allowed)."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.resolved_lr(model.cfg.preset)
    opt = AdamW(named_trainable(model), lr=lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    lengths = sequence_lengths(train)
    train_probe = train
    if cfg.train_eval_size and len(train) > cfg.train_eval_size:
        probe_idx = np.sort(np.random.default_rng(cfg.seed + 1).choice(len(train), cfg.train_eval_size, replace=False))
        train_probe = subset_packed(train, probe_idx)
    timeline: list[Metrics] = []
    load_history: list[tuple[int, int, list[float]]] = []
    start = time.time()
    step = 0
    last_good = copy.deepcopy(model.state_dict())
    n_full = int(math.floor(cfg.epochs))
    frac = cfg.epochs - n_full
    epoch_plan = [1.0] * n_full + ([frac] if frac > 1e-9 else [])

    def record(split: str, packed: PackedRequests, epoch: float):
        m = evaluate(model, packed, split=split, step=step, gauc=cfg.gauc)
        m.epoch = epoch
        m.wall_clock = time.time() - start
        loads = [ml.last_load for ml in model.moe_layers() if ml.last_load is not None]
        if loads:
            m.load_max_over_mean = float(np.mean([float(l.max() / l.mean().clamp_min(1e-12)) for l in loads]))
        timeline.append(m)
        if on_metrics:
            on_metrics(m)

    diverged = False
    epoch_pos = 0.0
    model.train()
    for ep, portion in enumerate(epoch_plan):
        batches = length_bucketed_batches(lengths, cfg.batch_size, rng)
        batches = batches[: max(1, int(round(len(batches) * portion)))]
        for bi, b in enumerate(batches):
            for g in opt.param_groups:
                g["lr"] = _lr_at(step, lr, cfg.warmup_steps)
            opt.zero_grad(set_to_none=True)
            try:
                loss, loads = _accumulate(model, train, b, lengths, cfg.max_batch_tokens, cfg.max_batch_pairs)
                if math.isfinite(loss):
                    if cfg.grad_clip:
                        torch.nn.utils.clip_grad_norm_([p for _, p in named_trainable(model)], cfg.grad_clip)
                    opt.step()
            except NonFiniteError as exc:
                log.error("%s", exc)
                loss = math.nan
            if not math.isfinite(loss):
                model.load_state_dict(last_good)
                diverged = True
                log.error("training diverged at step %d; restored last good parameters", step)
                break
            for ml, load in zip(model.moe_layers(), loads):
                ml.last_load = load
                ml.update_balance(load)
            step += 1
            if step % cfg.log_every == 0:
                for ml in model.moe_layers():
                    if ml.last_load is not None:
                        load_history.append((step, ml.layer_idx, ml.last_load.tolist()))
                log.info("step %d loss %.5f", step, loss)
            if step % 200 == 0:
                last_good = copy.deepcopy(model.state_dict())
            if cfg.eval_every and step % cfg.eval_every == 0 and evals is not None:
                record("eval", evals, epoch_pos + portion * (bi + 1) / len(batches))
        if diverged:
            break
        epoch_pos += portion
        record("train", train_probe, epoch_pos)
        if evals is not None and len(evals):
            record("eval", evals, epoch_pos)
    return TrainResult(model, timeline, step, time.time() - start, load_history, diverged)


def subset_packed(packed: PackedRequests, index: Sequence[int]) -> PackedRequests:
    """Copy of the requests at ``index`` (in that order)."""
    index = np.asarray(index, dtype=np.int64)
    h_len = packed.hist_lengths[index]
    c_len = packed.cand_counts[index]
    h_take = np.concatenate([np.arange(packed.hist_offsets[i], packed.hist_offsets[i + 1]) for i in index]) if len(index) else np.zeros(0, np.int64)
    c_take = np.concatenate([np.arange(packed.cand_offsets[i], packed.cand_offsets[i + 1]) for i in index]) if len(index) else np.zeros(0, np.int64)
    h_take = h_take.astype(np.int64)
    c_take = c_take.astype(np.int64)
    return PackedRequests(
        request_id=packed.request_id[index],
        user_id=packed.user_id[index],
        timestamp=packed.timestamp[index],
        profile=packed.profile[index],
        profile_side=packed.profile_side[index],
        hist_offsets=np.concatenate([[0], np.cumsum(h_len)]).astype(np.int64),
        hist_item=packed.hist_item[h_take],
        hist_action=packed.hist_action[h_take],
        hist_scene=packed.hist_scene[h_take],
        hist_bucket=packed.hist_bucket[h_take],
        cand_offsets=np.concatenate([[0], np.cumsum(c_len)]).astype(np.int64),
        cand_item=packed.cand_item[c_take],
        cand_side=packed.cand_side[c_take],
        cand_labels=packed.cand_labels[c_take],
    )


@dataclass
class PretrainConfig:
    epochs: int = 1
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_steps: int = 50
    seed: int = 0
    max_len: int = 256


def pretrain(model: NextItemNetwork, sequences: Sequence[Sequence[ItemEvent]], cfg: PretrainConfig) -> list[float]:
    """Next-item training over click sequences; returns the per-step loss trace."""
    seqs = [tuple(s[-cfg.max_len:]) for s in sequences if len(s) >= 2]
    if not seqs:
        raise ValueError("no click sequence has at least two events")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(named_trainable(model), lr=cfg.lr, weight_decay=cfg.weight_decay)
    lengths = np.asarray([len(s) for s in seqs])
    trace = []
    step = 0
    model.train()
    for _ in range(cfg.epochs):
        for b in length_bucketed_batches(lengths, cfg.batch_size, rng):
            batch = collate_sequences([seqs[i] for i in b], model.tok_cfg.time_edges)
            for g in opt.param_groups:
                g["lr"] = _lr_at(step, cfg.lr, cfg.warmup_steps)
            loss = model.loss(batch)
            aux = model.aux_loss()
            if aux is not None:
                loss = loss + aux
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_([p for _, p in named_trainable(model)], 1.0)
            opt.step()
            model.update_balance()
            trace.append(float(loss.detach()))
            step += 1
    return trace


@torch.no_grad()
def next_item_recall(model: NextItemNetwork, contexts: Sequence[Sequence[ItemEvent]], targets: Sequence[int],
                     k: int = 10, batch_size: int = 256, exclude_seen: bool = False) -> float:
    """Fraction of ``targets`` found in the model's top-``k`` after each context."""
    model.eval()
    hits = 0
    for start in range(0, len(contexts), batch_size):
        ctx = contexts[start:start + batch_size]
        batch = collate_sequences(ctx, model.tok_cfg.time_edges)
        logits = model(batch)[:, -1]
        if exclude_seen:
            for r, c in enumerate(ctx):
                logits[r, [e.item_id for e in c]] = float("-inf")
        top = torch.topk(logits, k, dim=-1).indices
        tgt = torch.as_tensor(targets[start:start + batch_size]).unsqueeze(-1)
        hits += int((top == tgt).any(-1).sum())
    model.train()
    return hits / max(1, len(contexts))


def popularity_recall(train_sequences: Sequence[Sequence[ItemEvent]], targets: Sequence[int], k: int = 10) -> float:
    counts: dict[int, int] = {}
    for s in train_sequences:
        for e in s:
            counts[e.item_id] = counts.get(e.item_id, 0) + 1
    top = {i for i, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]}
    return sum(t in top for t in targets) / max(1, len(targets))
