import csv
import json
import subprocess
import sys

import pytest

from conftest import TINY_SYNTH
from sortrank.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from sortrank.plots import CURVE_COLUMNS, HEATMAP_COLUMNS
from sortrank.training import METRICS_COLUMNS

TINY_MODEL = {"depth": 2, "d_model": 16, "n_heads": 2, "intermediate": 16, "window": 8, "full_suffix": 2,
              "prune_final": 4, "sparsity": {"total_experts": 4, "activated": 1, "shared": 1}}
RUN_CONFIG = {
    "data": TINY_SYNTH,
    "model": TINY_MODEL,
    "train": {"epochs": 0.5, "batch_size": 64, "train_eval_size": 200, "log_every": 2},
    "pretrain": {"epochs": 1, "batch_size": 32},
}


def header(path):
    with open(path) as fh:
        return tuple(next(csv.reader(fh)))


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(RUN_CONFIG))
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data"), "--seed", "3"]) == EXIT_OK
    data = root / "data" / "requests.jsonl"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(root / "train"), "--seed", "1"]) == EXIT_OK
    return {"root": root, "cfg": str(cfg), "data": str(data), "ckpt": str(root / "train" / "model.safetensors")}


def test_gen_data_manifest_and_idempotence(ws, tmp_path):
    m = manifest(ws["root"] / "data")
    assert {"config_hash", "seed", "code_version", "outputs"} <= set(m) and m["seed"] == 3
    assert main(["gen-data", "--config", ws["cfg"], "--out", str(tmp_path), "--seed", "3"]) == EXIT_OK
    assert (tmp_path / "requests.jsonl").read_bytes() == (ws["root"] / "data" / "requests.jsonl").read_bytes()
    assert manifest(tmp_path)["config_hash"] == m["config_hash"]


def test_train_outputs(ws):
    out = ws["root"] / "train"
    assert header(out / "metrics.csv") == METRICS_COLUMNS
    assert header(out / "expert_load.csv") == ("step", "layer", "expert", "load")
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["split"] for r in rows} == {"train", "eval"}
    assert {r["objective"] for r in rows} == {"click", "cart", "purchase"}
    m = manifest(out)
    assert m["seed"] == 1 and sorted(m["outputs"]) == ["expert_load.csv", "metrics.csv", "model.safetensors"]


def test_train_is_idempotent(ws, tmp_path):
    args = ["train", "--config", ws["cfg"], "--data", ws["data"], "--out", str(tmp_path), "--seed", "1"]
    assert main(args) == EXIT_OK
    first = ws["root"] / "train"
    for name in ("metrics.csv", "expert_load.csv", "model.safetensors"):
        assert (tmp_path / name).read_bytes() == (first / name).read_bytes(), name


def test_eval_and_check_exit_codes(ws, tmp_path):
    base = ["eval", "--checkpoint", ws["ckpt"], "--data", ws["data"]]
    assert main(base + ["--out", str(tmp_path / "a")]) == EXIT_OK
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert {"auc", "popularity_auc", "bayes_auc"} <= set(summary)
    assert header(tmp_path / "a" / "metrics.csv") == METRICS_COLUMNS
    assert main(base + ["--out", str(tmp_path / "b"), "--check", "--min-lift", "1.0"]) == EXIT_CHECK
    assert json.loads((tmp_path / "b" / "summary.json").read_text())["check"]["passed"] is False
    assert main(base + ["--out", str(tmp_path / "c"), "--check", "--min-lift", "-1.0"]) == EXIT_OK


def test_pretrain_then_transfer(ws, tmp_path):
    assert main(["pretrain", "--config", ws["cfg"], "--data", ws["data"], "--out", str(tmp_path / "pre")]) == EXIT_OK
    assert header(tmp_path / "pre" / "pretrain_loss.csv") == ("step", "loss")
    ckpt = str(tmp_path / "pre" / "pretrain.safetensors")
    args = ["train", "--config", ws["cfg"], "--data", ws["data"], "--out", str(tmp_path / "tr"),
            "--init-items", ckpt, "--epochs", "0.2"]
    assert main(args) == EXIT_OK
    assert manifest(tmp_path / "tr")["config"]["freeze"] is True
    # A pre-training checkpoint cannot be evaluated as a ranker.
    assert main(["eval", "--checkpoint", ckpt, "--data", ws["data"], "--out", str(tmp_path / "ev")]) == EXIT_CONFIG


@pytest.mark.parametrize("kind,columns", [("heatmap", HEATMAP_COLUMNS), ("qk-curve", CURVE_COLUMNS)])
def test_plot(ws, tmp_path, kind, columns):
    args = ["plot", kind, "--checkpoint", ws["ckpt"], "--data", ws["data"], "--out", str(tmp_path)]
    assert main(args + ["--sample-index", "0", "--sample-index", "1"]) == EXIT_OK
    csv_name = "heatmap.csv" if kind == "heatmap" else "qk_curve.csv"
    assert header(tmp_path / csv_name) == columns
    assert list(tmp_path.glob("*.svg")) and "config_hash" in manifest(tmp_path)


def test_bench_attn(tmp_path):
    assert main(["bench-attn", "--out", str(tmp_path), "--shape", "16:inf:0:4", "--shape", "64:8:4:8"]) == EXIT_OK
    with open(tmp_path / "bench_attn.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and all(float(r["max_abs_diff"]) < 1e-5 for r in rows)
    assert main(["bench-attn", "--out", str(tmp_path), "--shape", "abc"]) == EXIT_CONFIG


def test_grid(ws, tmp_path):
    example = tmp_path / "example.json"
    assert main(["grid", "--write-example", str(example)]) == EXIT_OK
    spec = json.loads(example.read_text())
    spec.update(data=TINY_SYNTH, train={"epochs": 0.2, "batch_size": 64, "train_eval_size": 0})
    spec["cells"] = [{**c, "model": {**TINY_MODEL, **c.get("model", {})}} for c in spec["cells"][:2]]
    path = tmp_path / "grid.json"
    path.write_text(json.dumps(spec))
    assert main(["grid", "--spec", str(path), "--out", str(tmp_path / "out")]) == EXIT_OK
    with open(tmp_path / "out" / "grid.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["cell"] for r in rows] == ["transformer", "sort"] and rows[0]["imp_click"] == "0"
    spec["cells"].append({"name": "broken", "model": {**TINY_MODEL, "n_heads": 3}})
    path.write_text(json.dumps(spec))
    assert main(["grid", "--spec", str(path), "--out", str(tmp_path / "bad")]) == EXIT_RUNTIME


@pytest.mark.parametrize("argv", [
    ["train", "--data", "x.jsonl", "--out", "o", "--config", "/nonexistent.json"],
    ["gen-data", "--out", "o", "--no-such-flag"],
    ["frobnicate"],
    ["grid", "--out", "o"],
])
def test_config_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_CONFIG


def test_invalid_config_contents(ws, tmp_path):
    bad = tmp_path / "bad.json"
    for content in ["{oops", json.dumps({"colour": {}}), json.dumps({"model": {"wings": 2}}),
                    json.dumps({"data": {"click_rate": 2.0}})]:
        bad.write_text(content)
        cmd = "gen-data" if "data" in content else "train"
        extra = [] if cmd == "gen-data" else ["--data", ws["data"]]
        assert main([cmd, "--config", str(bad), "--out", str(tmp_path / "o"), *extra]) == EXIT_CONFIG, content


def test_runtime_failure_exit_code(ws, tmp_path):
    corrupt = tmp_path / "corrupt.jsonl"
    lines = open(ws["data"]).read().splitlines()
    corrupt.write_text("\n".join(lines[:3] + ['{"truncated": '] + lines[3:10]) + "\n")
    assert main(["train", "--config", ws["cfg"], "--data", str(corrupt), "--out", str(tmp_path / "o")]) == EXIT_RUNTIME


def test_console_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "sortrank.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("gen-data", "pretrain", "train", "eval", "grid", "bench-attn", "plot"):
        assert sub in res.stdout
