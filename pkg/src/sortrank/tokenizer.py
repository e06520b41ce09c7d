"""Turn request samples into token sequences.

Layout of one request (special tokens on)::

    [BOS ; history tokens ; SEP ; one token per profile field ; SEP ; candidate tokens]

Every non-candidate token gets the next position id; all candidates share the
id right after the prefix. Batches are left-padded so that the candidate block
and the most recent prefix tokens line up at the right edge, which makes
"keep the last n rows" a plain slice.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .data import Candidate, ItemEvent, RequestSample
from .layers import Role, rms_norm

# Log-spaced recency edges in seconds: 1m, 5m, 30m, 1h, 3h, 6h, 12h, 1d, 2d, 4d, 7d, 14d, 30d.
DEFAULT_TIME_EDGES = (60, 300, 1800, 3600, 10_800, 21_600, 43_200, 86_400, 172_800, 345_600, 604_800, 1_209_600, 2_592_000)

SPECIAL_BOS, SPECIAL_SEP, SPECIAL_PAD = 0, 1, 2
N_ACTIONS = 3


@dataclass
class FeatureGroup:
    name: str
    target: str  # "candidate" or "profile"
    width: int

    def __post_init__(self):
        if self.target not in ("candidate", "profile"):
            raise ValueError(f"feature group target must be 'candidate' or 'profile', got {self.target!r}")
        if self.width < 1:
            raise ValueError("feature group width must be >= 1")


@dataclass
class TokenizerConfig:
    n_items: int
    profile_cardinalities: tuple[int, ...]
    n_scenes: int
    item_dim: int = 64
    action_dim: int = 8
    scene_dim: int = 8
    time_dim: int = 8
    profile_dim: int = 16
    time_edges: tuple[int, ...] = DEFAULT_TIME_EDGES
    feature_groups: tuple[FeatureGroup, ...] = ()

    @property
    def n_time_buckets(self) -> int:
        return len(self.time_edges) + 1

    @property
    def candidate_side_width(self) -> int:
        return sum(g.width for g in self.feature_groups if g.target == "candidate")

    @property
    def profile_side_width(self) -> int:
        return sum(g.width for g in self.feature_groups if g.target == "profile")

    @property
    def history_input_width(self) -> int:
        return self.item_dim + self.action_dim + self.scene_dim + self.time_dim

    @property
    def candidate_input_width(self) -> int:
        return self.item_dim + self.candidate_side_width

    @property
    def profile_input_width(self) -> int:
        return self.profile_dim + self.profile_side_width

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["profile_cardinalities"] = list(self.profile_cardinalities)
        d["time_edges"] = list(self.time_edges)
        d["feature_groups"] = [dataclasses.asdict(g) for g in self.feature_groups]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TokenizerConfig":
        d = dict(d)
        d["profile_cardinalities"] = tuple(d["profile_cardinalities"])
        d["time_edges"] = tuple(d.get("time_edges", DEFAULT_TIME_EDGES))
        d["feature_groups"] = tuple(FeatureGroup(**g) for g in d.get("feature_groups", ()))
        return cls(**d)


def time_bucket(recency_seconds, edges: Sequence[int] = DEFAULT_TIME_EDGES) -> np.ndarray:
    return np.searchsorted(np.asarray(edges), np.asarray(recency_seconds), side="right")


def attach_side_features(
    sample: RequestSample,
    groups: Sequence[FeatureGroup],
    vectors: Mapping[str, np.ndarray],
) -> RequestSample:
    """Append per-group side features to candidate and profile inputs.

    Candidate groups take an ``(N, width)`` array, profile groups a ``(width,)``
    vector. Groups are appended in ``groups`` order; with no groups the sample
    is returned unchanged.
    """
    if not groups:
        return sample
    n = len(sample.candidates)
    cand_parts: list[np.ndarray] = []
    prof_parts: list[np.ndarray] = []
    for g in groups:
        if g.name not in vectors:
            raise KeyError(f"no vectors supplied for feature group {g.name!r}")
        v = np.asarray(vectors[g.name], dtype=np.float64)
        if g.target == "candidate":
            if v.shape != (n, g.width):
                raise ValueError(f"group {g.name!r}: expected shape {(n, g.width)}, got {v.shape}")
            cand_parts.append(v)
        else:
            if v.shape != (g.width,):
                raise ValueError(f"group {g.name!r}: expected shape {(g.width,)}, got {v.shape}")
            prof_parts.append(v)
    cands = sample.candidates
    if cand_parts:
        extra = np.concatenate(cand_parts, axis=1)
        cands = tuple(
            dataclasses.replace(c, side_features=c.side_features + tuple(float(x) for x in extra[j]))
            for j, c in enumerate(cands)
        )
    prof_side = sample.profile_side
    if prof_parts:
        prof_side = prof_side + tuple(float(x) for x in np.concatenate(prof_parts))
    return dataclasses.replace(sample, candidates=cands, profile_side=prof_side)


# --------------------------------------------------------------------------- packing


@dataclass
class PackedRequests:
    """Columnar (ragged) copy of a list of requests, cheap to slice into batches."""

    request_id: np.ndarray
    user_id: np.ndarray
    timestamp: np.ndarray
    profile: np.ndarray
    profile_side: np.ndarray
    hist_offsets: np.ndarray
    hist_item: np.ndarray
    hist_action: np.ndarray
    hist_scene: np.ndarray
    hist_bucket: np.ndarray
    cand_offsets: np.ndarray
    cand_item: np.ndarray
    cand_side: np.ndarray
    cand_labels: np.ndarray

    def __len__(self) -> int:
        return len(self.request_id)

    @property
    def hist_lengths(self) -> np.ndarray:
        return np.diff(self.hist_offsets)

    @property
    def cand_counts(self) -> np.ndarray:
        return np.diff(self.cand_offsets)

    def candidate_request_index(self) -> np.ndarray:
        return np.repeat(np.arange(len(self)), self.cand_counts)


def pack_requests(samples: Sequence[RequestSample], cfg: TokenizerConfig, history_max: int | None = None) -> PackedRequests:
    """Flatten samples into arrays, validating vocabularies and widths."""
    n = len(samples)
    n_fields = len(cfg.profile_cardinalities)
    wc, wp = cfg.candidate_side_width, cfg.profile_side_width
    hist_off = np.zeros(n + 1, dtype=np.int64)
    cand_off = np.zeros(n + 1, dtype=np.int64)
    hist_rows: list[tuple] = []
    hist_rel: list[int] = []
    cand_rows: list[tuple] = []
    cand_side: list[tuple] = []
    profile = np.zeros((n, n_fields), dtype=np.int64)
    profile_side = np.zeros((n, wp), dtype=np.float32)
    for i, s in enumerate(samples):
        if not s.candidates:
            raise ValueError(f"request {s.request_id}: zero candidates")
        if len(s.user_profile) != n_fields:
            raise ValueError(f"request {s.request_id}: expected {n_fields} profile fields, got {len(s.user_profile)}")
        if len(s.profile_side) != wp:
            raise ValueError(f"request {s.request_id}: profile side width {len(s.profile_side)} != {wp}")
        hist = s.history if history_max is None else s.history[len(s.history) - min(len(s.history), history_max):]
        hist_rows.extend((e.item_id, e.action_type, e.scene_id) for e in hist)
        hist_rel.extend(s.timestamp - e.timestamp for e in hist)
        hist_off[i + 1] = hist_off[i] + len(hist)
        for c in s.candidates:
            if len(c.side_features) != wc:
                raise ValueError(f"request {s.request_id}: candidate side width {len(c.side_features)} != {wc}")
            cand_rows.append((c.item_id, *c.labels))
            cand_side.append(c.side_features)
        cand_off[i + 1] = cand_off[i] + len(s.candidates)
        profile[i] = s.user_profile
        if wp:
            profile_side[i] = s.profile_side

    hist = np.asarray(hist_rows, dtype=np.int64).reshape(-1, 3)
    cands = np.asarray(cand_rows, dtype=np.int64).reshape(-1, 4)
    _check_vocab(hist[:, 0], cfg.n_items, "history item_id")
    _check_vocab(hist[:, 1], N_ACTIONS, "action_type")
    _check_vocab(hist[:, 2], cfg.n_scenes, "history scene_id")
    _check_vocab(cands[:, 0], cfg.n_items, "candidate item_id")
    for f, card in enumerate(cfg.profile_cardinalities):
        _check_vocab(profile[:, f], card, f"profile field {f}")
    rel = np.asarray(hist_rel, dtype=np.int64)
    if rel.size and rel.min() <= 0:
        raise ValueError("history events must strictly precede their request")
    return PackedRequests(
        request_id=np.asarray([s.request_id for s in samples], dtype=np.int64),
        user_id=np.asarray([s.user_id for s in samples], dtype=np.int64),
        timestamp=np.asarray([s.timestamp for s in samples], dtype=np.int64),
        profile=profile,
        profile_side=profile_side,
        hist_offsets=hist_off,
        hist_item=hist[:, 0].copy(),
        hist_action=hist[:, 1].copy(),
        hist_scene=hist[:, 2].copy(),
        hist_bucket=time_bucket(rel, cfg.time_edges).astype(np.int64),
        cand_offsets=cand_off,
        cand_item=cands[:, 0].copy(),
        cand_side=np.asarray(cand_side, dtype=np.float32).reshape(len(cands), wc),
        cand_labels=cands[:, 1:].copy(),
    )


def _check_vocab(ids: np.ndarray, size: int, name: str) -> None:
    if ids.size == 0:
        return
    lo, hi = int(ids.min()), int(ids.max())
    if lo < 0 or hi >= size:
        bad = lo if lo < 0 else hi
        raise ValueError(f"{name} {bad} out of vocabulary (size {size})")


@dataclass
class Batch:
    hist_item: torch.Tensor
    hist_action: torch.Tensor
    hist_scene: torch.Tensor
    hist_bucket: torch.Tensor
    profile: torch.Tensor
    profile_side: torch.Tensor
    cand_item: torch.Tensor
    cand_side: torch.Tensor
    cand_valid: torch.Tensor
    labels: torch.Tensor
    gather: torch.Tensor
    roles: torch.Tensor
    positions: torch.Tensor
    valid: torch.Tensor
    prefix_len: torch.Tensor
    request_index: np.ndarray = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.cand_item.shape[0]

    @property
    def n_candidates(self) -> int:
        return self.cand_item.shape[1]

    @property
    def is_candidate(self) -> torch.Tensor:
        return self.roles == Role.CAND


def prefix_length(hist_len: int, n_profile: int, special_tokens: bool) -> int:
    return hist_len + n_profile + (3 if special_tokens else 0)


def collate(packed: PackedRequests, index: Sequence[int], special_tokens: bool = True) -> Batch:
    """Assemble a left-padded batch for the requests at ``index``."""
    index = np.asarray(index, dtype=np.int64)
    B = len(index)
    F = packed.profile.shape[1]
    hl = packed.hist_lengths[index]
    cn = packed.cand_counts[index]
    H = int(hl.max()) if B else 0
    N = int(cn.max()) if B else 0
    hist = np.zeros((4, B, H), dtype=np.int64)
    cand_item = np.zeros((B, N), dtype=np.int64)
    cand_side = np.zeros((B, N, packed.cand_side.shape[1]), dtype=np.float32)
    cand_valid = np.zeros((B, N), dtype=bool)
    labels = np.zeros((B, N, 3), dtype=np.float32)
    for b, i in enumerate(index):
        h0, h1 = packed.hist_offsets[i], packed.hist_offsets[i + 1]
        n = h1 - h0
        hist[0, b, :n] = packed.hist_item[h0:h1]
        hist[1, b, :n] = packed.hist_action[h0:h1]
        hist[2, b, :n] = packed.hist_scene[h0:h1]
        hist[3, b, :n] = packed.hist_bucket[h0:h1]
        c0, c1 = packed.cand_offsets[i], packed.cand_offsets[i + 1]
        m = c1 - c0
        cand_item[b, :m] = packed.cand_item[c0:c1]
        cand_side[b, :m] = packed.cand_side[c0:c1]
        cand_valid[b, :m] = True
        labels[b, :m] = packed.cand_labels[c0:c1]

    prefix = np.array([prefix_length(h, F, special_tokens) for h in hl], dtype=np.int64)
    P = int(prefix.max()) if B else 0
    T = P + N
    # Source rows: 0 BOS, 1 SEP, 2 PAD, 3..3+H history, 3+H.. profile fields.
    gather = np.full((B, P), SPECIAL_PAD, dtype=np.int64)
    roles = np.full((B, T), int(Role.PAD), dtype=np.int64)
    positions = np.zeros((B, T), dtype=np.int64)
    valid = np.zeros((B, T), dtype=bool)
    prof_src = 3 + H + np.arange(F)
    for b in range(B):
        h = hl[b]
        if special_tokens:
            src = np.concatenate([[SPECIAL_BOS], 3 + np.arange(h), [SPECIAL_SEP], prof_src, [SPECIAL_SEP]])
            role = np.concatenate([[Role.BOS], np.full(h, Role.HIST), [Role.SEP], np.full(F, Role.PROF), [Role.SEP]])
        else:
            src = np.concatenate([3 + np.arange(h), prof_src])
            role = np.concatenate([np.full(h, Role.HIST), np.full(F, Role.PROF)])
        p = len(src)
        gather[b, P - p:] = src
        roles[b, P - p:P] = role
        positions[b, P - p:P] = np.arange(p)
        valid[b, P - p:P] = True
        roles[b, P:] = Role.CAND
        positions[b, P:] = p
        valid[b, P:] = cand_valid[b]

    t = torch.as_tensor
    return Batch(
        hist_item=t(hist[0]),
        hist_action=t(hist[1]),
        hist_scene=t(hist[2]),
        hist_bucket=t(hist[3]),
        profile=t(packed.profile[index]),
        profile_side=t(packed.profile_side[index]),
        cand_item=t(cand_item),
        cand_side=t(cand_side),
        cand_valid=t(cand_valid),
        labels=t(labels),
        gather=t(gather),
        roles=t(roles),
        positions=t(positions),
        valid=t(valid),
        prefix_len=t(prefix),
        request_index=index,
    )


# --------------------------------------------------------------------------- module


class Tokenizer(nn.Module):
    """Embedding tables, per-token-type projections and the special-token rows."""

    def __init__(self, cfg: TokenizerConfig, d_model: int):
        super().__init__()
        self.cfg = cfg
        self.d_model = d_model
        self.item = nn.Embedding(cfg.n_items, cfg.item_dim)
        self.action = nn.Embedding(N_ACTIONS, cfg.action_dim)
        self.scene = nn.Embedding(cfg.n_scenes, cfg.scene_dim)
        self.time = nn.Embedding(cfg.n_time_buckets, cfg.time_dim)
        self.profile = nn.ModuleList(nn.Embedding(c, cfg.profile_dim) for c in cfg.profile_cardinalities)
        self.special = nn.Embedding(3, d_model)
        self.hist_proj = nn.Linear(cfg.history_input_width, d_model)
        self.cand_proj = nn.Linear(cfg.candidate_input_width, d_model)
        self.prof_proj = nn.ModuleList(nn.Linear(cfg.profile_input_width, d_model) for _ in cfg.profile_cardinalities)
        self.hist_norm = nn.Parameter(torch.ones(d_model))
        self.cand_norm = nn.Parameter(torch.ones(d_model))
        self.prof_norm = nn.Parameter(torch.ones(d_model))

    def tables(self) -> dict[str, nn.Embedding]:
        out = {"item_id": self.item, "action_type": self.action, "scene_id": self.scene, "timestamp": self.time}
        for f, emb in enumerate(self.profile):
            out[f"profile_{f}"] = emb
        out["special"] = self.special
        return out

    def freeze(self, table: str, frozen: bool = True) -> None:
        self.tables()[table].weight.requires_grad_(not frozen)

    def frozen_tables(self) -> list[str]:
        return [name for name, t in self.tables().items() if not t.weight.requires_grad]

    def embed_history(self, item, action, scene, bucket) -> torch.Tensor:
        z = torch.cat([self.item(item), self.action(action), self.scene(scene), self.time(bucket)], dim=-1)
        if z.shape[-1] != self.hist_proj.in_features:
            raise ValueError("history concat width does not match projection input")
        return rms_norm(self.hist_proj(z), self.hist_norm)

    def embed_candidates(self, item, side) -> torch.Tensor:
        z = torch.cat([self.item(item), side.to(self.item.weight.dtype)], dim=-1)
        if z.shape[-1] != self.cand_proj.in_features:
            raise ValueError("candidate concat width does not match projection input")
        return rms_norm(self.cand_proj(z), self.cand_norm)

    def embed_profile(self, profile, side) -> torch.Tensor:
        side = side.to(self.item.weight.dtype)
        if not len(self.profile):
            return side.new_zeros(*profile.shape[:-1], 0, self.d_model)
        toks = []
        for f, (emb, proj) in enumerate(zip(self.profile, self.prof_proj)):
            toks.append(proj(torch.cat([emb(profile[..., f]), side], dim=-1)))
        return rms_norm(torch.stack(toks, dim=-2), self.prof_norm)

    def forward(self, batch: Batch) -> torch.Tensor:
        B = batch.size
        hist = self.embed_history(batch.hist_item, batch.hist_action, batch.hist_scene, batch.hist_bucket)
        prof = self.embed_profile(batch.profile, batch.profile_side)
        special = self.special.weight.unsqueeze(0).expand(B, -1, -1)
        src = torch.cat([special, hist, prof], dim=1)
        idx = batch.gather.unsqueeze(-1).expand(-1, -1, self.d_model)
        prefix = torch.gather(src, 1, idx)
        cands = self.embed_candidates(batch.cand_item, batch.cand_side)
        return torch.cat([prefix, cands], dim=1)


# --------------------------------------------------------------------------- single-sample views


@dataclass
class TokenSequence:
    tokens: torch.Tensor
    position_ids: np.ndarray
    roles: np.ndarray
    candidate_index: np.ndarray  # -1 for non-candidate tokens

    def __len__(self) -> int:
        return len(self.roles)


def tokenize_sample(sample: RequestSample, tokenizer: Tokenizer, special_tokens: bool = True) -> TokenSequence:
    if not sample.candidates:
        raise ValueError(f"request {sample.request_id}: zero candidates")
    packed = pack_requests([sample], tokenizer.cfg)
    batch = collate(packed, [0], special_tokens=special_tokens)
    tokens = tokenizer(batch)[0]
    roles = batch.roles[0].numpy()
    cand_index = np.full(len(roles), -1, dtype=np.int64)
    is_cand = roles == Role.CAND
    cand_index[is_cand] = np.arange(int(is_cand.sum()))
    return TokenSequence(tokens=tokens, position_ids=batch.positions[0].numpy(), roles=roles, candidate_index=cand_index)


def tokenize_item(item: ItemEvent | Candidate, tokenizer: Tokenizer, request_timestamp: int | None = None) -> torch.Tensor:
    """Single token for one history event (needs the request time) or one candidate."""
    cfg = tokenizer.cfg
    if not 0 <= item.item_id < cfg.n_items:
        raise ValueError(f"item_id {item.item_id} out of vocabulary (size {cfg.n_items})")
    t = lambda v: torch.tensor([v], dtype=torch.long)  # noqa: E731
    if isinstance(item, Candidate):
        if len(item.side_features) != cfg.candidate_side_width:
            raise ValueError("candidate side feature width mismatch")
        side = torch.tensor([item.side_features], dtype=torch.float32).reshape(1, cfg.candidate_side_width)
        return tokenizer.embed_candidates(t(item.item_id), side)[0]
    if request_timestamp is None:
        raise ValueError("history events need the request timestamp for recency bucketing")
    if not 0 <= item.action_type < N_ACTIONS:
        raise ValueError(f"action_type {item.action_type} out of vocabulary")
    if not 0 <= item.scene_id < cfg.n_scenes:
        raise ValueError(f"scene_id {item.scene_id} out of vocabulary")
    bucket = int(time_bucket(request_timestamp - item.timestamp, cfg.time_edges))
    return tokenizer.embed_history(t(item.item_id), t(item.action_type), t(item.scene_id), t(bucket))[0]
