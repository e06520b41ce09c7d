"""Request-centric samples, a synthetic log generator, and the dataset file format.

A request bundles one user's behaviour history and profile with every
candidate shown on the page. The generator draws users and items from a
latent-factor world so that click/cart/purchase labels carry learnable,
personalised structure.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

FORMAT_NAME = "sortrank-requests"
FORMAT_VERSION = 1


class Action(enum.IntEnum):
    CLICK = 0
    CART = 1
    PURCHASE = 2


@dataclass(frozen=True, slots=True)
class ItemEvent:
    item_id: int
    action_type: int
    timestamp: int
    scene_id: int


@dataclass(frozen=True, slots=True)
class Candidate:
    item_id: int
    labels: tuple[int, int, int]
    side_features: tuple[float, ...] = ()

    @property
    def click(self) -> int:
        return self.labels[0]

    @property
    def cart(self) -> int:
        return self.labels[1]

    @property
    def purchase(self) -> int:
        return self.labels[2]


@dataclass(frozen=True, slots=True)
class RequestSample:
    """One page request: shared history and profile plus all its candidates.

    ``user_id`` is bookkeeping only (grouping click sequences for
    pre-training, ground-truth scoring); it is never a model feature.
    """

    request_id: int
    user_id: int
    timestamp: int
    scene_id: int
    user_profile: tuple[int, ...]
    history: tuple[ItemEvent, ...]
    candidates: tuple[Candidate, ...]
    profile_side: tuple[float, ...] = ()


class DatasetFormatError(ValueError):
    """Raised when a dataset file record cannot be ingested."""

    def __init__(self, line: int, field_name: str, message: str):
        self.line = line
        self.field = field_name
        super().__init__(f"line {line}: field '{field_name}': {message}")


@dataclass
class SynthConfig:
    n_users: int = 50_000
    n_items: int = 1_000
    latent_dim: int = 16
    n_requests: int = 120_000
    candidates_per_request: int = 10
    history_max: int = 256
    rng_seed: int = 0
    click_rate: float = 0.1
    cart_rate: float = 0.3
    purchase_rate: float = 0.15
    n_days: int = 20
    n_scenes: int = 4
    n_categories: int = 16
    profile_cardinalities: tuple[int, ...] = (32, 8, 16)
    affinity_scale: float = 2.0
    popularity_scale: float = 0.5
    noise_std: float = 0.3
    start_timestamp: int = 1_600_000_000

    def validate(self) -> "SynthConfig":
        counts = {
            "n_users": self.n_users,
            "n_items": self.n_items,
            "latent_dim": self.latent_dim,
            "n_requests": self.n_requests,
            "candidates_per_request": self.candidates_per_request,
            "history_max": self.history_max,
            "n_days": self.n_days,
            "n_scenes": self.n_scenes,
            "n_categories": self.n_categories,
        }
        for name, value in counts.items():
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {value!r}")
        if self.candidates_per_request > self.n_items:
            raise ValueError("candidates_per_request cannot exceed n_items")
        for name in ("click_rate", "cart_rate", "purchase_rate"):
            rate = getattr(self, name)
            if not 0.0 < rate < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {rate!r}")
        if not self.profile_cardinalities or min(self.profile_cardinalities) < 1:
            raise ValueError("profile_cardinalities must be non-empty and positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["profile_cardinalities"] = list(self.profile_cardinalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SynthConfig fields: {sorted(unknown)}")
        d = dict(d)
        if "profile_cardinalities" in d:
            d["profile_cardinalities"] = tuple(d["profile_cardinalities"])
        return cls(**d)


@dataclass
class World:
    """Ground-truth latent factors behind a synthetic log."""

    user_vectors: np.ndarray
    item_vectors: np.ndarray
    popularity: np.ndarray
    user_profiles: np.ndarray
    item_categories: np.ndarray
    user_activity: np.ndarray
    scene_bias: np.ndarray
    cart_mix: np.ndarray
    purchase_mix: np.ndarray
    config: SynthConfig = field(repr=False)

    def click_logits(self, user_ids: np.ndarray, item_ids: np.ndarray) -> np.ndarray:
        """Noise-free click logit (affinity + popularity) without base rate or scene."""
        cfg = self.config
        u = self.user_vectors[user_ids]
        v = self.item_vectors[item_ids]
        affinity = np.einsum("...k,...k->...", u, v) / math.sqrt(cfg.latent_dim)
        pop = np.log(self.popularity[item_ids] * cfg.n_items)
        return cfg.affinity_scale * affinity + cfg.popularity_scale * pop


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def generate_world(cfg: SynthConfig) -> World:
    """Draw user/item latent factors, profiles and a long-tailed popularity."""
    cfg.validate()
    rng = np.random.default_rng(cfg.rng_seed)
    D = cfg.latent_dim

    n_fields = len(cfg.profile_cardinalities)
    profiles = np.stack(
        [rng.integers(0, c, size=cfg.n_users) for c in cfg.profile_cardinalities], axis=1
    )
    # Profile values shift the user vector so that profile tokens alone are informative.
    user_vec = 0.6 * rng.standard_normal((cfg.n_users, D))
    for f, card in enumerate(cfg.profile_cardinalities):
        centroids = rng.standard_normal((card, D)) * (0.8 / math.sqrt(n_fields))
        user_vec += centroids[profiles[:, f]]

    categories = rng.integers(0, cfg.n_categories, size=cfg.n_items)
    cat_centroids = rng.standard_normal((cfg.n_categories, D))
    item_vec = 0.8 * cat_centroids[categories] + 0.6 * rng.standard_normal((cfg.n_items, D))

    # Zipf-like exposure: rank-based power law with a random permutation.
    ranks = rng.permutation(cfg.n_items) + 1
    popularity = ranks.astype(np.float64) ** -0.8
    popularity /= popularity.sum()

    activity = rng.lognormal(0.0, 1.0, size=cfg.n_users)
    activity /= activity.sum()

    scene_bias = 0.3 * rng.standard_normal(cfg.n_scenes)
    # Cart/purchase use their own projections of the item space: correlated with
    # the click affinity, but not identical to it.
    cart_mix = 0.6 * np.eye(D) + 0.8 * rng.standard_normal((D, D)) / math.sqrt(D)
    purchase_mix = 0.6 * np.eye(D) + 0.8 * rng.standard_normal((D, D)) / math.sqrt(D)

    return World(
        user_vectors=user_vec,
        item_vectors=item_vec,
        popularity=popularity,
        user_profiles=profiles,
        item_categories=categories,
        user_activity=activity,
        scene_bias=scene_bias,
        cart_mix=cart_mix,
        purchase_mix=purchase_mix,
        config=cfg,
    )


def _sample_candidates(rng: np.random.Generator, cfg: SynthConfig, popularity: np.ndarray) -> np.ndarray:
    """Per-request candidate items without replacement, exposure ~ popularity^0.5."""
    n, N = cfg.n_requests, cfg.candidates_per_request
    exposure = np.sqrt(popularity)
    exposure /= exposure.sum()
    # Oversample with replacement, then keep the first N distinct items per row.
    M = 3 * N
    draws = rng.choice(cfg.n_items, size=(n, M), p=exposure)
    order = np.argsort(draws, axis=1, kind="stable")
    sorted_draws = np.take_along_axis(draws, order, axis=1)
    dup_sorted = np.zeros_like(draws, dtype=bool)
    dup_sorted[:, 1:] = sorted_draws[:, 1:] == sorted_draws[:, :-1]
    dup = np.empty_like(dup_sorted)
    np.put_along_axis(dup, order, dup_sorted, axis=1)
    key = np.where(dup, M, np.arange(M)[None, :])
    first = np.argsort(key, axis=1, kind="stable")[:, :N]
    out = np.take_along_axis(draws, first, axis=1)
    short = np.flatnonzero((~dup).sum(axis=1) < N)
    for r in short:
        out[r] = rng.choice(cfg.n_items, size=N, replace=False, p=exposure)
    return out


def simulate_requests(world: World, cfg: SynthConfig | None = None) -> Iterator[RequestSample]:
    """Yield requests in timestamp order.

    Clicks are Bernoulli(sigmoid(base + affinity + popularity + scene + noise));
    cart and purchase are drawn only for clicked candidates. Each user's history
    is their earlier clicked items, most recent last, capped at ``history_max``.
    """
    cfg = (cfg or world.config).validate()
    rng = np.random.default_rng([cfg.rng_seed, 1])
    n, N, D = cfg.n_requests, cfg.candidates_per_request, cfg.latent_dim

    span = cfg.n_days * 86_400
    if n > span:
        raise ValueError("n_requests exceeds the number of distinct seconds in n_days")
    ts = np.sort(rng.choice(span, size=n, replace=False)) + cfg.start_timestamp
    users = rng.choice(cfg.n_users, size=n, p=world.user_activity)
    scenes = rng.integers(0, cfg.n_scenes, size=n)
    items = _sample_candidates(rng, cfg, world.popularity)

    logits = world.click_logits(users[:, None], items)
    logits = logits - logits.mean() + _logit(cfg.click_rate)
    logits += world.scene_bias[scenes][:, None]
    logits += cfg.noise_std * rng.standard_normal(logits.shape)
    click = rng.random(logits.shape) < 1.0 / (1.0 + np.exp(-logits))

    u = world.user_vectors[users][:, None, :]
    v = world.item_vectors[items]
    cart_aff = np.einsum("rnk,kj,rnj->rn", u, world.cart_mix, v) / math.sqrt(D)
    purch_aff = np.einsum("rnk,kj,rnj->rn", u, world.purchase_mix, v) / math.sqrt(D)
    cart_p = 1.0 / (1.0 + np.exp(-(_logit(cfg.cart_rate) + 1.5 * cart_aff)))
    purch_p = 1.0 / (1.0 + np.exp(-(_logit(cfg.purchase_rate) + 1.5 * purch_aff)))
    cart = click & (rng.random(logits.shape) < cart_p)
    purchase = click & (rng.random(logits.shape) < purch_p)

    histories: dict[int, list[ItemEvent]] = {}
    for r in range(n):
        uid = int(users[r])
        past = histories.setdefault(uid, [])
        hist = tuple(past[-cfg.history_max:])
        cands = []
        for j in range(N):
            labels = (int(click[r, j]), int(cart[r, j]), int(purchase[r, j]))
            cands.append(Candidate(item_id=int(items[r, j]), labels=labels))
        sample = RequestSample(
            request_id=r,
            user_id=uid,
            timestamp=int(ts[r]),
            scene_id=int(scenes[r]),
            user_profile=tuple(int(x) for x in world.user_profiles[uid]),
            history=hist,
            candidates=tuple(cands),
        )
        for c in cands:
            if c.click:
                action = Action.PURCHASE if c.purchase else Action.CART if c.cart else Action.CLICK
                past.append(ItemEvent(c.item_id, int(action), int(ts[r]), int(scenes[r])))
        if len(past) > 2 * cfg.history_max:
            del past[: len(past) - cfg.history_max]
        yield sample


def generate_dataset(cfg: SynthConfig) -> tuple[World, list[RequestSample]]:
    world = generate_world(cfg)
    return world, list(simulate_requests(world, cfg))


def bayes_click_scores(world: World, samples: Sequence[RequestSample]) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth click logits and labels, flattened over all candidates."""
    users, items, labels = [], [], []
    for s in samples:
        for c in s.candidates:
            users.append(s.user_id)
            items.append(c.item_id)
            labels.append(c.click)
    scores = world.click_logits(np.asarray(users, dtype=np.int64), np.asarray(items, dtype=np.int64))
    return scores, np.asarray(labels, dtype=np.int64)


# --------------------------------------------------------------------------- file format


def _record(sample: RequestSample) -> dict:
    return {
        "request_id": sample.request_id,
        "user_id": sample.user_id,
        "timestamp": sample.timestamp,
        "scene_id": sample.scene_id,
        "profile": list(sample.user_profile),
        "history": [[e.item_id, e.action_type, e.timestamp, e.scene_id] for e in sample.history],
        "candidates": [
            {"item_id": c.item_id, "labels": list(c.labels), "side": list(c.side_features)}
            for c in sample.candidates
        ],
        "profile_side": list(sample.profile_side),
    }


def _header(meta: dict | None) -> dict:
    return {"format": FORMAT_NAME, "version": FORMAT_VERSION, "meta": meta or {}}


def write_dataset(samples: Iterable[RequestSample], path: str | Path, meta: dict | None = None) -> int:
    """Write samples as JSON lines behind a one-line schema header. Returns the record count."""
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(_header(meta), sort_keys=True, separators=(",", ":")) + "\n")
        for s in samples:
            fh.write(json.dumps(_record(s), separators=(",", ":")) + "\n")
            count += 1
    return count


def _expect_int(value, line: int, name: str, lo: int | None = None, hi: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise DatasetFormatError(line, name, f"expected integer, got {value!r}")
    if lo is not None and value < lo:
        raise DatasetFormatError(line, name, f"value {value} below minimum {lo}")
    if hi is not None and value > hi:
        raise DatasetFormatError(line, name, f"value {value} above maximum {hi}")
    return value


def _parse_record(rec, line: int) -> RequestSample:
    if not isinstance(rec, dict):
        raise DatasetFormatError(line, "<record>", "expected a JSON object")
    for key in ("request_id", "user_id", "timestamp", "scene_id", "profile", "history", "candidates"):
        if key not in rec:
            raise DatasetFormatError(line, key, "missing")
    ts = _expect_int(rec["timestamp"], line, "timestamp", lo=0)
    profile = rec["profile"]
    if not isinstance(profile, list):
        raise DatasetFormatError(line, "profile", "expected a list")
    profile_t = tuple(_expect_int(v, line, f"profile[{i}]", lo=0) for i, v in enumerate(profile))

    history = []
    prev_ts = -1
    if not isinstance(rec["history"], list):
        raise DatasetFormatError(line, "history", "expected a list")
    for i, ev in enumerate(rec["history"]):
        name = f"history[{i}]"
        if not isinstance(ev, list) or len(ev) != 4:
            raise DatasetFormatError(line, name, "expected [item_id, action_type, timestamp, scene_id]")
        item = _expect_int(ev[0], line, f"{name}.item_id", lo=0)
        action = _expect_int(ev[1], line, f"{name}.action_type", lo=0, hi=len(Action) - 1)
        ev_ts = _expect_int(ev[2], line, f"{name}.timestamp", lo=0)
        scene = _expect_int(ev[3], line, f"{name}.scene_id", lo=0)
        if ev_ts < prev_ts:
            raise DatasetFormatError(line, f"{name}.timestamp", "history timestamps must be non-decreasing")
        if ev_ts >= ts:
            raise DatasetFormatError(line, f"{name}.timestamp", "history must precede the request timestamp")
        prev_ts = ev_ts
        history.append(ItemEvent(item, action, ev_ts, scene))

    cands = rec["candidates"]
    if not isinstance(cands, list) or not cands:
        raise DatasetFormatError(line, "candidates", "expected a non-empty list")
    parsed = []
    for j, c in enumerate(cands):
        name = f"candidates[{j}]"
        if not isinstance(c, dict):
            raise DatasetFormatError(line, name, "expected an object")
        item = _expect_int(c.get("item_id"), line, f"{name}.item_id", lo=0)
        labels = c.get("labels")
        if not isinstance(labels, list) or len(labels) != 3:
            raise DatasetFormatError(line, f"{name}.labels", "expected [click, cart, purchase]")
        lab = tuple(_expect_int(v, line, f"{name}.labels[{k}]", lo=0, hi=1) for k, v in enumerate(labels))
        if lab[2] and not lab[0]:
            raise DatasetFormatError(line, f"{name}.labels", "purchase=1 requires click=1")
        if lab[1] and not lab[0]:
            raise DatasetFormatError(line, f"{name}.labels", "cart=1 requires click=1")
        side = c.get("side", [])
        if not isinstance(side, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in side):
            raise DatasetFormatError(line, f"{name}.side", "expected a list of numbers")
        parsed.append(Candidate(item, lab, tuple(float(x) for x in side)))

    profile_side = rec.get("profile_side", [])
    if not isinstance(profile_side, list) or not all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in profile_side
    ):
        raise DatasetFormatError(line, "profile_side", "expected a list of numbers")

    return RequestSample(
        request_id=_expect_int(rec["request_id"], line, "request_id", lo=0),
        user_id=_expect_int(rec["user_id"], line, "user_id", lo=0),
        timestamp=ts,
        scene_id=_expect_int(rec["scene_id"], line, "scene_id", lo=0),
        user_profile=profile_t,
        history=tuple(history),
        candidates=tuple(parsed),
        profile_side=tuple(float(x) for x in profile_side),
    )


def iter_dataset(path: str | Path) -> Iterator[RequestSample]:
    with open(path, encoding="utf-8") as fh:
        yield from _iter_lines(fh)


def _iter_lines(fh: IO[str]) -> Iterator[RequestSample]:
    first = fh.readline()
    if not first:
        raise DatasetFormatError(1, "<header>", "empty file, schema header required")
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(1, "<header>", f"invalid JSON: {exc.msg}") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise DatasetFormatError(1, "format", f"expected '{FORMAT_NAME}'")
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(1, "version", f"unsupported version {header.get('version')!r}")
    seen: set[int] = set()
    for lineno, raw in enumerate(fh, start=2):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(lineno, "<record>", f"invalid JSON: {exc.msg}") from None
        sample = _parse_record(rec, lineno)
        if sample.request_id in seen:
            raise DatasetFormatError(lineno, "request_id", f"duplicate id {sample.request_id}")
        seen.add(sample.request_id)
        yield sample


def read_dataset(path: str | Path) -> list[RequestSample]:
    return list(iter_dataset(path))


def read_header(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.loads(fh.readline())


# --------------------------------------------------------------------------- splitting


def split_train_eval(
    samples: Sequence[RequestSample], boundary_timestamp: int
) -> tuple[list[RequestSample], list[RequestSample]]:
    """Requests before ``boundary_timestamp`` train; the rest evaluate.

    A boundary before (after) all data yields an empty train (eval) side.
    """
    if isinstance(boundary_timestamp, bool) or not isinstance(boundary_timestamp, (int, np.integer)):
        raise TypeError("boundary_timestamp must be an integer number of seconds")
    if boundary_timestamp < 0:
        raise ValueError(f"boundary_timestamp {boundary_timestamp} is outside the timestamp domain")
    train = [s for s in samples if s.timestamp < boundary_timestamp]
    evals = [s for s in samples if s.timestamp >= boundary_timestamp]
    return train, evals


def last_day_boundary(samples: Sequence[RequestSample]) -> int:
    """Start of the final whole day counted from the first request; the held-out day."""
    if not samples:
        raise ValueError("no samples")
    first = min(s.timestamp for s in samples)
    last = max(s.timestamp for s in samples)
    return first + ((last - first) // 86_400) * 86_400


def default_boundary(cfg: SynthConfig) -> int:
    return cfg.start_timestamp + (cfg.n_days - 1) * 86_400


def check_sample(sample: RequestSample, n_items: int | None = None) -> None:
    """Validate the invariants of one request; raises ``ValueError``."""
    if not sample.candidates:
        raise ValueError(f"request {sample.request_id}: no candidates")
    prev = -1
    for e in sample.history:
        if e.timestamp < prev:
            raise ValueError(f"request {sample.request_id}: history timestamps decrease")
        if e.timestamp >= sample.timestamp:
            raise ValueError(f"request {sample.request_id}: history does not precede the request")
        if n_items is not None and not 0 <= e.item_id < n_items:
            raise ValueError(f"request {sample.request_id}: history item {e.item_id} out of vocabulary")
        prev = e.timestamp
    for c in sample.candidates:
        click, cart, purchase = c.labels
        if purchase > click or cart > click:
            raise ValueError(f"request {sample.request_id}: label funnel violated for item {c.item_id}")
        if n_items is not None and not 0 <= c.item_id < n_items:
            raise ValueError(f"request {sample.request_id}: candidate item {c.item_id} out of vocabulary")
