"""``sortrank`` command line: data generation, training, evaluation, grids, benchmarks, plots.

Every subcommand writes ``manifest.json`` next to its outputs. Exit codes:
0 success, 1 configuration error, 2 runtime failure, 3 failed ``eval --check``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import subprocess
import sys
from pathlib import Path

import torch

from . import __version__
from .bench import DEFAULT_SHAPES, BenchShape, bench_attn, write_bench_csv
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    SynthConfig,
    bayes_click_scores,
    default_boundary,
    generate_dataset,
    generate_world,
    last_day_boundary,
    read_dataset,
    read_header,
    split_train_eval,
    write_dataset,
)
from .experiment import (
    GridSpecError,
    example_grid_spec,
    load_grid_spec,
    mean_composition,
    run_experiment_grid,
    tokenizer_config_for,
)
from .estimator import infer_tokenizer_config
from .flops import flops_estimate
from .model import ModelConfig, NextItemNetwork, SORTNetwork, click_sequences, transfer_sparse
from .plots import plot_attention_heatmap, plot_qk_logit_curve
from .tokenizer import pack_requests
from .training import (
    METRICS_COLUMNS,
    PretrainConfig,
    TrainConfig,
    compute_auc,
    evaluate,
    popularity_auc,
    pretrain,
    train_rank,
)

log = logging.getLogger("sortrank")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------- config & manifests


def load_run_config(path: str | None) -> dict:
    """Run config JSON with optional sections data/model/train/pretrain and key history_max."""
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON ({exc})") from None
    unknown = set(cfg) - {"data", "model", "train", "pretrain", "history_max"}
    if unknown:
        raise ConfigError(f"config file {path}: unknown sections {sorted(unknown)}")
    return cfg


def _build(kind, d: dict, **overrides):
    d = {**d, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        if kind is SynthConfig:
            return SynthConfig.from_dict(d).validate()
        if kind is ModelConfig:
            d = dict(d)
            return ModelConfig.from_preset(d.pop("preset", "small"), **d)
        known = {f.name for f in dataclasses.fields(kind)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown {kind.__name__} fields {sorted(unknown)}")
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return kind(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{kind.__name__}: {exc}") from None


def code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed: int | None, outputs: list[Path], **extra) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "code_version": code_version(),
        "outputs": sorted(str(Path(p).relative_to(out_dir)) if Path(p).is_relative_to(out_dir) else str(p)
                          for p in outputs),
        **extra,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _write_rows(path: Path, columns, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


# --------------------------------------------------------------------------- data helpers


def load_requests(path: str):
    """Samples from a dataset file plus the generator config recorded in its header, if any."""
    if not Path(path).exists():
        raise ConfigError(f"dataset {path} not found")
    header = read_header(path)
    samples = read_dataset(path)
    synth = header.get("meta", {}).get("synth")
    return samples, (SynthConfig.from_dict(synth) if synth else None)


def split_requests(samples, synth):
    boundary = default_boundary(synth) if synth else last_day_boundary(samples)
    return split_train_eval(samples, boundary)


def tokenizer_for(samples, synth):
    return tokenizer_config_for(synth) if synth else infer_tokenizer_config(samples)


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    synth = _build(SynthConfig, cfg.get("data", {}), rng_seed=args.seed, n_requests=args.n_requests)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, samples = generate_dataset(synth)
    path = out / "requests.jsonl"
    n = write_dataset(samples, path, meta={"synth": synth.to_dict()})
    write_manifest(out, "gen-data", {"data": synth.to_dict()}, synth.rng_seed, [path], records=n)
    print(f"wrote {n} requests to {path}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config)
    mcfg = _build(ModelConfig, cfg.get("model", {}), preset=args.preset)
    pcfg = _build(PretrainConfig, cfg.get("pretrain", {}), seed=args.seed, epochs=args.epochs)
    samples, synth = load_requests(args.data)
    train, _ = split_requests(samples, synth)
    tok_cfg = tokenizer_for(samples, synth)
    model = NextItemNetwork(mcfg, tok_cfg, seed=pcfg.seed)
    trace = pretrain(model, click_sequences(train, pcfg.max_len), pcfg)
    out = Path(args.out)
    ckpt = save_checkpoint(model, out / "pretrain.safetensors", extra={"seed": pcfg.seed, "steps": len(trace)})
    loss_csv = _write_rows(out / "pretrain_loss.csv", ("step", "loss"),
                           [{"step": i + 1, "loss": f"{l:.6f}"} for i, l in enumerate(trace)])
    config = {"model": mcfg.to_dict(), "pretrain": dataclasses.asdict(pcfg), "data": args.data}
    write_manifest(out, "pretrain", config, pcfg.seed, [ckpt, loss_csv])
    print(f"pre-trained {len(trace)} steps, final loss {trace[-1]:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    mcfg = _build(ModelConfig, cfg.get("model", {}), preset=args.preset)
    tcfg = _build(TrainConfig, cfg.get("train", {}), seed=args.seed, epochs=args.epochs, lr=args.lr)
    history_max = cfg.get("history_max", 256)
    samples, synth = load_requests(args.data)
    train, evals = split_requests(samples, synth)
    tok_cfg = tokenizer_for(samples, synth)
    model = SORTNetwork(mcfg, tok_cfg, seed=tcfg.seed)
    if args.init_items:
        try:
            source, _ = load_checkpoint(args.init_items)
        except (CheckpointError, FileNotFoundError) as exc:
            raise ConfigError(str(exc)) from None
        transfer_sparse(source, model, freeze=args.freeze)
    ptrain = pack_requests(train, tok_cfg, history_max)
    peval = pack_requests(evals, tok_cfg, history_max) if evals else None
    flops = flops_estimate(mcfg, mean_composition(peval if peval is not None else ptrain), tok_cfg).total
    out = Path(args.out)
    rows = []

    def on_metrics(m):
        m.flops = flops
        rows.extend(m.rows())
        log.info("step %d %s click-auc %s", m.step, m.split, m.auc.get("click"))

    result = train_rank(model, ptrain, peval, tcfg, on_metrics=on_metrics)
    ckpt = save_checkpoint(model, out / "model.safetensors",
                           extra={"seed": tcfg.seed, "steps": result.steps, "diverged": result.diverged})
    metrics_csv = _write_rows(out / "metrics.csv", METRICS_COLUMNS, rows)
    load_rows = [{"step": s, "layer": l, "expert": e, "load": int(v)}
                 for s, l, loads in result.load_history for e, v in enumerate(loads)]
    load_csv = _write_rows(out / "expert_load.csv", ("step", "layer", "expert", "load"), load_rows)
    config = {"model": mcfg.to_dict(), "train": dataclasses.asdict(tcfg), "history_max": history_max,
              "data": args.data, "init_items": args.init_items, "freeze": args.freeze}
    write_manifest(out, "train", config, tcfg.seed, [ckpt, metrics_csv, load_csv])
    final = result.final("eval")
    print(f"trained {result.steps} steps; eval click-AUC {final.auc['click'] if final else 'n/a'}")
    return EXIT_RUNTIME if result.diverged else EXIT_OK


def cmd_eval(args) -> int:
    try:
        model, meta = load_checkpoint(args.checkpoint)
    except (CheckpointError, FileNotFoundError) as exc:
        raise ConfigError(str(exc)) from None
    if not isinstance(model, SORTNetwork):
        raise ConfigError("eval needs a ranking checkpoint, not a pre-training one")
    samples, synth = load_requests(args.data)
    train, evals = split_requests(samples, synth)
    if not evals:
        raise ConfigError("the dataset has no held-out requests")
    ptrain = pack_requests(train, model.tok_cfg, args.history_max)
    peval = pack_requests(evals, model.tok_cfg, args.history_max)
    m = evaluate(model, peval, split="eval", step=int(meta["extra"].get("steps", 0)))
    m.flops = flops_estimate(model.cfg, mean_composition(peval), model.tok_cfg).total
    summary = {"auc": m.auc, "loss": m.loss, "popularity_auc": popularity_auc(ptrain, peval)}
    if synth is not None:
        scores, labels = bayes_click_scores(generate_world(synth), evals)
        summary["bayes_auc"] = compute_auc(scores, labels)
    out = Path(args.out)
    metrics_csv = _write_rows(out / "metrics.csv", METRICS_COLUMNS, m.rows())
    code = EXIT_OK
    if args.check:
        lift = m.auc["click"] - summary["popularity_auc"]
        ok = lift >= args.min_lift
        if "bayes_auc" in summary:
            ok = ok and summary["bayes_auc"] > m.auc["click"]
        summary["check"] = {"lift_over_popularity": lift, "min_lift": args.min_lift, "passed": ok}
        code = EXIT_OK if ok else EXIT_CHECK
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "eval", {"checkpoint": args.checkpoint, "data": args.data, "history_max": args.history_max,
                                 "min_lift": args.min_lift if args.check else None},
                   meta["extra"].get("seed"), [metrics_csv, out / "summary.json"])
    print(json.dumps(summary, indent=2, sort_keys=True))
    return code


def cmd_grid(args) -> int:
    if args.write_example:
        path = Path(args.write_example)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(example_grid_spec(), indent=2) + "\n")
        print(f"wrote example grid spec to {path}")
        return EXIT_OK
    if not args.spec:
        raise ConfigError("grid needs --spec (or --write-example)")
    try:
        spec = load_grid_spec(args.spec)
    except FileNotFoundError:
        raise ConfigError(f"grid spec {args.spec} not found") from None
    except GridSpecError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    rows = run_experiment_grid(spec, out, on_row=lambda r: print(f"{r['cell']}: {r['status']} click-AUC {r.get('auc_click')}"))
    write_manifest(out, "grid", spec, spec.get("train", {}).get("seed", 0), [out / "grid.csv"])
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_RUNTIME


def _parse_shape(text: str) -> BenchShape:
    try:
        parts = text.split(":")
        L, W, N, B = (parts + ["0", "16"])[:4] if len(parts) >= 2 else (parts[0], "inf", "0", "16")
        return BenchShape(int(L), None if W in ("inf", "none") else int(W), int(N), int(B))
    except (ValueError, IndexError):
        raise ConfigError(f"bad shape {text!r}; expected PREFIX:WINDOW[:CANDIDATES[:BLOCK]]") from None


def cmd_bench_attn(args) -> int:
    shapes = [_parse_shape(s) for s in args.shape] if args.shape else list(DEFAULT_SHAPES)
    dtype = {"float32": torch.float32, "float64": torch.float64}[args.dtype]
    rows = bench_attn(shapes, dtype, args.seed)
    out = Path(args.out)
    path = write_bench_csv(rows, out / "bench_attn.csv")
    write_manifest(out, "bench-attn", {"shapes": [dataclasses.asdict(s) for s in shapes], "dtype": args.dtype},
                   args.seed, [path])
    for r in rows:
        print(f"L={r['prefix_len']} W={r['window']} N={r['n_candidates']}: skipped {r['skipped_fraction']:.3f}, "
              f"dense {r['dense_ms']:.1f} ms, blockwise {r['blockwise_ms']:.1f} ms, diff {r['max_abs_diff']:.2e}")
    return EXIT_OK


def cmd_plot(args) -> int:
    try:
        model, meta = load_checkpoint(args.checkpoint)
    except (CheckpointError, FileNotFoundError) as exc:
        raise ConfigError(str(exc)) from None
    if not isinstance(model, SORTNetwork):
        raise ConfigError("plots need a ranking checkpoint")
    samples, _ = load_requests(args.data)
    idx = args.sample_index or [0]
    if any(not 0 <= i < len(samples) for i in idx):
        raise ConfigError(f"sample index out of range (dataset has {len(samples)} requests)")
    out = Path(args.out)
    if args.kind == "heatmap":
        if args.layer is not None and not 0 <= args.layer < model.cfg.depth:
            raise ConfigError(f"layer {args.layer} out of range for a {model.cfg.depth}-layer model")
        res = plot_attention_heatmap(model, samples[idx[0]], args.layer, out)
        outputs = [res["csv"], *res["svg"]]
        print(json.dumps({"bos_dominance": res["bos_dominance"]}))
    else:
        res = plot_qk_logit_curve(model, [samples[i] for i in idx], out)
        outputs = [res["csv"], res["svg"]]
        print(json.dumps({"total_variation": res["total_variation"]}))
    write_manifest(out, f"plot {args.kind}", {"checkpoint": args.checkpoint, "data": args.data,
                                              "sample_index": idx, "layer": args.layer},
                   meta["extra"].get("seed"), outputs)
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sortrank", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"sortrank {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, config=True):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        if config:
            sp.add_argument("--config", help="run config JSON (sections data/model/train/pretrain)")
        if data:
            sp.add_argument("--data", required=True, help="dataset file written by gen-data")

    sp = sub.add_parser("gen-data", help="generate a synthetic request log")
    common(sp, data=False)
    sp.add_argument("--n-requests", type=int, default=None)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="next-item pre-training on click sequences")
    common(sp)
    sp.add_argument("--preset", choices=["small", "base", "large"], default=None)
    sp.add_argument("--epochs", type=int, default=None)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="train the ranking model")
    common(sp)
    sp.add_argument("--preset", choices=["small", "base", "large"], default=None)
    sp.add_argument("--epochs", type=float, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--init-items", help="pre-training checkpoint to copy the item table from")
    sp.add_argument("--freeze", action=argparse.BooleanOptionalAction, default=True,
                    help="freeze the transferred item table (default: on)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the held-out day")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--history-max", type=int, default=256)
    sp.add_argument("--check", action="store_true",
                    help="exit 3 unless click-AUC beats popularity by --min-lift and stays below the Bayes ceiling")
    sp.add_argument("--min-lift", type=float, default=0.05)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("grid", help="run an experiment grid from a spec file")
    sp.add_argument("--spec", help="grid spec JSON")
    sp.add_argument("--out", default="grid_out")
    sp.add_argument("--write-example", metavar="PATH", help="write an example spec and exit")
    sp.set_defaults(func=cmd_grid)

    sp = sub.add_parser("bench-attn", help="dense vs block-skipping attention benchmark")
    sp.add_argument("--out", required=True)
    sp.add_argument("--shape", action="append", help="PREFIX:WINDOW[:CANDIDATES[:BLOCK]], repeatable; WINDOW may be inf")
    sp.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_bench_attn)

    sp = sub.add_parser("plot", help="attention heatmap or QK-logit distance curve")
    sp.add_argument("kind", choices=["heatmap", "qk-curve"])
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--sample-index", type=int, action="append", help="request index in the file, repeatable")
    sp.add_argument("--layer", type=int, default=None, help="heatmap layer (default: all)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: usage errors are configuration errors
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - the exit code contract needs a catch-all
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
