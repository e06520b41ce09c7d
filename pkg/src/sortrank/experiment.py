"""Data preparation shared by the CLI, and the experiment-grid driver.

A grid spec is a JSON file::

    {
      "format": "sortrank-grid",
      "version": 1,
      "data":  {...SynthConfig overrides...},
      "train": {...TrainConfig overrides...},
      "baseline": "transformer",
      "cells": [
        {"name": "transformer", "preset": "small", "model": {"special_tokens": false, ...}},
        {"name": "sort", "preset": "small"}
      ],
      "sweep": {"window": [64, 128, 256, null], "history_max": [256, 512, 1024]}
    }

``sweep`` (optional) expands every cell over the cartesian product of the
listed values; model fields go to the model config, ``history_max`` caps the
tokenised history length, ``seed`` overrides the training seed.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import itertools
import json
import logging
import math
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .data import SynthConfig, World, default_boundary, generate_dataset, split_train_eval
from .flops import SeqComposition, flops_estimate
from .model import ModelConfig, NextItemNetwork, SORTNetwork, block_parameter_count, click_sequences, transfer_sparse
from .tokenizer import PackedRequests, TokenizerConfig, pack_requests
from .training import PretrainConfig, TrainConfig, popularity_auc, pretrain, subset_packed, train_rank

log = logging.getLogger(__name__)

GRID_FORMAT = "sortrank-grid"
GRID_VERSION = 1
GRID_COLUMNS = (
    "cell", "preset", "status", "auc_click", "imp_click", "auc_cart", "imp_cart",
    "auc_purchase", "imp_purchase", "params", "flops", "steps", "wall_clock", "error",
)
SWEEP_EXTRA = ("history_max", "seed")


class GridSpecError(ValueError):
    pass


@dataclass
class PreparedData:
    world: World
    synth: SynthConfig
    tok_cfg: TokenizerConfig
    train: PackedRequests
    eval: PackedRequests
    train_samples: list
    eval_samples: list


def tokenizer_config_for(synth: SynthConfig, **overrides) -> TokenizerConfig:
    return TokenizerConfig(
        n_items=synth.n_items,
        profile_cardinalities=tuple(synth.profile_cardinalities),
        n_scenes=synth.n_scenes,
        **overrides,
    )


def prepare_data(synth: SynthConfig, history_max: int | None = None, boundary: int | None = None) -> PreparedData:
    world, samples = generate_dataset(synth)
    train, evals = split_train_eval(samples, default_boundary(synth) if boundary is None else boundary)
    tok_cfg = tokenizer_config_for(synth)
    return PreparedData(
        world, synth, tok_cfg,
        pack_requests(train, tok_cfg, history_max), pack_requests(evals, tok_cfg, history_max),
        train, evals,
    )


def mean_composition(packed: PackedRequests) -> SeqComposition:
    """Rounded mean history length / candidate count of a dataset, for FLOPs reporting."""
    return SeqComposition(
        history=int(round(float(packed.hist_lengths.mean()))) if len(packed) else 0,
        candidates=int(round(float(packed.cand_counts.mean()))) if len(packed) else 1,
        profile_fields=packed.profile.shape[1],
    )


# --------------------------------------------------------------------------- grid spec


def load_grid_spec(path: str | Path) -> dict:
    try:
        spec = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise GridSpecError(f"{path}: invalid JSON ({exc})") from exc
    return validate_grid_spec(spec)


def validate_grid_spec(spec: dict) -> dict:
    if spec.get("format") != GRID_FORMAT:
        raise GridSpecError(f"grid spec must declare format {GRID_FORMAT!r}")
    if int(spec.get("version", 0)) != GRID_VERSION:
        raise GridSpecError(f"unsupported grid spec version {spec.get('version')!r}")
    cells = spec.get("cells")
    if not cells:
        raise GridSpecError("grid spec has no cells")
    names = [c.get("name") for c in cells]
    if None in names or len(set(names)) != len(names):
        raise GridSpecError("every cell needs a unique name")
    if spec.get("baseline") is not None and spec["baseline"] not in names:
        raise GridSpecError(f"baseline {spec['baseline']!r} is not a cell name")
    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    for key in spec.get("sweep", {}):
        if key not in model_fields and key not in SWEEP_EXTRA:
            raise GridSpecError(f"cannot sweep over unknown field {key!r}")
    for c in cells:
        unknown = set(c.get("model", {})) - model_fields
        if unknown:
            raise GridSpecError(f"cell {c['name']}: unknown model fields {sorted(unknown)}")
    SynthConfig.from_dict(spec.get("data", {})).validate()
    _train_config(spec.get("train", {}))
    return spec


def _train_config(d: dict) -> TrainConfig:
    unknown = set(d) - {f.name for f in dataclasses.fields(TrainConfig)}
    if unknown:
        raise GridSpecError(f"unknown train fields {sorted(unknown)}")
    d = dict(d)
    if "betas" in d:
        d["betas"] = tuple(d["betas"])
    return TrainConfig(**d)


def expand_cells(spec: dict) -> list[dict]:
    """Cells after applying the sweep; names gain ``/key=value`` suffixes."""
    sweep = spec.get("sweep") or {}
    keys = list(sweep)
    out = []
    for cell in spec["cells"]:
        for values in itertools.product(*(sweep[k] for k in keys)) if keys else [()]:
            c = copy.deepcopy(cell)
            c.setdefault("model", {})
            suffix = []
            for k, v in zip(keys, values):
                if k in SWEEP_EXTRA:
                    c[k] = v
                else:
                    c["model"][k] = v
                suffix.append(f"{k}={'inf' if v is None else v}")
            c["base_name"] = cell["name"]
            if suffix:
                c["name"] = cell["name"] + "/" + ",".join(suffix)
            out.append(c)
    return out


def cell_model_config(cell: dict) -> ModelConfig:
    overrides = dict(cell.get("model", {}))
    preset = cell.get("preset", overrides.pop("preset", "small"))
    # A window of null in the grid spec means unbounded local attention, i.e. the toggle off.
    if "window" in overrides and overrides["window"] is None:
        overrides.pop("window")
        overrides["local_attention"] = False
    return ModelConfig.from_preset(preset, **overrides)


# --------------------------------------------------------------------------- driver


def run_experiment_grid(
    spec: dict,
    out_dir: str | Path | None = None,
    data_cache: dict | None = None,
    on_row: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Train every cell; failures are recorded in the row and the grid moves on."""
    spec = validate_grid_spec(spec)
    synth = SynthConfig.from_dict(spec.get("data", {}))
    base_train = _train_config(spec.get("train", {}))
    cache = data_cache if data_cache is not None else {}
    rows = []
    for cell in expand_cells(spec):
        row = {"cell": cell["name"], "preset": cell.get("preset", "small"), "status": "ok", "error": ""}
        try:
            cfg = cell_model_config(cell)
            hmax = cell.get("history_max")
            key = (json.dumps(synth.to_dict(), sort_keys=True), hmax)
            if key not in cache:
                cache[key] = prepare_data(synth, hmax)
            data = cache[key]
            tcfg = dataclasses.replace(base_train, **({"seed": cell["seed"]} if "seed" in cell else {}))
            model = SORTNetwork(cfg, data.tok_cfg, seed=tcfg.seed)
            result = train_rank(model, data.train, data.eval, tcfg)
            final = result.final("eval")
            for obj, auc in final.auc.items():
                row[f"auc_{obj}"] = auc
            row.update(
                params=block_parameter_count(cfg),
                flops=flops_estimate(cfg, mean_composition(data.eval), data.tok_cfg).total,
                steps=result.steps,
                wall_clock=result.wall_clock,
            )
            if result.diverged:
                row["status"] = "diverged"
        except Exception as exc:  # a broken cell must not take the grid down
            log.error("cell %s failed: %s", cell["name"], exc)
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            log.debug(traceback.format_exc())
        rows.append(row)
        if on_row:
            on_row(row)
    _add_improvements(rows, spec.get("baseline"))
    if out_dir is not None:
        write_grid_csv(rows, Path(out_dir) / "grid.csv")
    return rows


def _add_improvements(rows: list[dict], baseline: str | None) -> None:
    """Absolute AUC improvement in points (x100) over the baseline cell with the same sweep suffix."""
    if baseline is None:
        return
    by_name = {r["cell"]: r for r in rows}
    for r in rows:
        suffix = r["cell"].split("/", 1)[1] if "/" in r["cell"] else None
        ref = by_name.get(baseline if suffix is None else f"{baseline}/{suffix}")
        for obj in ("click", "cart", "purchase"):
            a, b = r.get(f"auc_{obj}"), ref.get(f"auc_{obj}") if ref else None
            r[f"imp_{obj}"] = None if a is None or b is None else 100.0 * (a - b)


def write_grid_csv(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(GRID_COLUMNS), lineterminator="\n")
        w.writeheader()
        for r in rows:
            out = {}
            for c in GRID_COLUMNS:
                v = r.get(c)
                if v is None or (isinstance(v, float) and math.isnan(v)):
                    out[c] = ""
                elif isinstance(v, float):
                    out[c] = f"{v:.6g}"
                else:
                    out[c] = v
            w.writerow(out)
    return path


def popularity_baseline(data: PreparedData) -> float | None:
    return popularity_auc(data.train, data.eval)


def example_grid_spec() -> dict:
    """The ablation grid: baseline Transformer, full SORT, and one toggle off at a time."""
    from .model import TOGGLES

    cells = [
        {"name": "transformer", "preset": "small", "model": {t: False for t in TOGGLES}},
        {"name": "sort", "preset": "small"},
    ]
    cells += [{"name": f"sort-no-{t}", "preset": "small", "model": {t: False}} for t in TOGGLES]
    return {
        "format": GRID_FORMAT,
        "version": GRID_VERSION,
        "data": {"n_requests": 20_000, "n_users": 5_000},
        "train": {"epochs": 1.0, "batch_size": 256, "seed": 0},
        "baseline": "transformer",
        "cells": cells,
    }


# --------------------------------------------------------------------------- sparse transfer


SPARSE_ARMS = ("scratch", "transfer", "transfer_freeze")


@dataclass
class ArmResult:
    arm: str
    seed: int
    eval_auc: list[float]  # click AUC after each epoch
    train_auc: list[float]

    @property
    def gap(self) -> float:
        """Train minus eval click-AUC after the last epoch."""
        return self.train_auc[-1] - self.eval_auc[-1]


def sparse_transfer_arms(
    data: PreparedData,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    pretrain_cfg: PretrainConfig,
    seed: int = 0,
    rank_requests: int | None = None,
) -> dict[str, ArmResult]:
    """Scratch / transfer / transfer+freeze ranking runs sharing one pre-trained item table.

    The next-item model sees every training-period click sequence; the ranking
    arms train on only the first ``rank_requests`` training requests (all when
    None), which puts the item vocabulary large relative to the ranking data.
    """
    pcfg = dataclasses.replace(pretrain_cfg, seed=seed)
    tcfg = dataclasses.replace(train_cfg, seed=seed, eval_every=0)
    source = NextItemNetwork(model_cfg, data.tok_cfg, seed=seed)
    pretrain(source, click_sequences(data.train_samples, pcfg.max_len), pcfg)
    train = data.train
    if rank_requests is not None and rank_requests < len(train):
        train = subset_packed(train, range(rank_requests))
    out = {}
    for arm in SPARSE_ARMS:
        model = SORTNetwork(model_cfg, data.tok_cfg, seed=seed)
        if arm != "scratch":
            transfer_sparse(source, model, freeze=arm == "transfer_freeze")
        res = train_rank(model, train, data.eval, tcfg)
        curve = {split: [m.auc["click"] for m in res.timeline if m.split == split] for split in ("train", "eval")}
        out[arm] = ArmResult(arm, seed, curve["eval"], curve["train"])
        log.info("seed %d %s: eval %s train %s", seed, arm, curve["eval"], curve["train"])
    return out
