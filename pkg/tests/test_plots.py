import numpy as np
import pytest
import torch

from conftest import tiny_config
from sortrank.data import Candidate, RequestSample
from sortrank.model import SORTNetwork
from sortrank.plots import (
    CURVE_COLUMNS,
    HEATMAP_COLUMNS,
    bos_dominance,
    heatmap_rows,
    plot_attention_heatmap,
    plot_qk_logit_curve,
    qk_curve,
    read_csv,
    total_variation,
)
from sortrank.tokenizer import TokenizerConfig


@pytest.fixture
def model(tiny_data):
    return SORTNetwork(tiny_config(), tiny_data.tok_cfg, seed=0)


def test_single_token_heatmap_is_zero():
    tok_cfg = TokenizerConfig(n_items=10, profile_cardinalities=(), n_scenes=1)
    cfg = tiny_config(special_tokens=False, moe=False)
    net = SORTNetwork(cfg, tok_cfg, seed=0)
    sample = RequestSample(0, 0, 100, 0, (), (), (Candidate(3, (0, 0, 0)),))
    rows = heatmap_rows(net, sample)
    assert len(rows) == cfg.depth
    assert all(r["centered_logit"] == 0.0 and r["query"] == r["key"] == 0 for r in rows)


def test_heatmap_csv_schema_and_determinism(model, tiny_data, tmp_path):
    sample = tiny_data.eval_samples[0]
    a = plot_attention_heatmap(model, sample, None, tmp_path / "a")
    b = plot_attention_heatmap(model, sample, None, tmp_path / "b")
    assert a["csv"].read_bytes() == b["csv"].read_bytes()
    assert tuple(read_csv(a["csv"])[0]) == HEATMAP_COLUMNS
    assert len(a["svg"]) == model.cfg.depth and all(p.read_text().startswith("<svg") for p in a["svg"])


def test_heatmap_layer_out_of_range(model, tiny_data):
    with pytest.raises(ValueError, match="out of range"):
        heatmap_rows(model, tiny_data.eval_samples[0], layer=5)
    assert {r["layer"] for r in heatmap_rows(model, tiny_data.eval_samples[0], layer=1)} == {1}


def test_only_visible_entries_are_reported(model, tiny_data):
    rows = heatmap_rows(model, tiny_data.eval_samples[0], layer=0)
    # Candidates never attend to other candidates.
    assert not any(r["query_role"] == r["key_role"] == "CAND" and r["query"] != r["key"] for r in rows)
    # Every row has a zero centred maximum.
    by_q = {}
    for r in rows:
        by_q[r["query"]] = max(by_q.get(r["query"], -np.inf), r["centered_logit"])
    assert all(v == 0.0 for v in by_q.values())


def test_curve_schema(model, tiny_data, tmp_path):
    out = plot_qk_logit_curve(model, tiny_data.eval_samples[:3], tmp_path)
    rows = read_csv(out["csv"])
    assert tuple(rows[0]) == CURVE_COLUMNS
    assert all(abs(float(r["normalized_logit"])) <= 1.0 + 1e-9 for r in rows)
    assert out["svg"].read_text().startswith("<svg")


def test_constant_keys_give_flat_curve(model, tiny_data):
    with torch.no_grad():
        for block in model.blocks:
            block.attn.w_k.weight.zero_()
    rows = qk_curve(model, tiny_data.eval_samples[:2])
    assert all(r["normalized_logit"] == 0.0 for r in rows)
    assert all(v == 0.0 for v in total_variation(rows).values())


def test_total_variation_hand_case():
    rows = [{"layer": 0, "distance": d, "normalized_logit": y} for d, y in [(2, 0.5), (0, 1.0), (1, -0.5)]]
    assert total_variation(rows) == {0: pytest.approx(2.5)}


def test_bos_dominance_hand_case():
    def row(layer, key, role, v):
        return {"layer": layer, "key": key, "key_role": role, "centered_logit": v}

    rows = [row(0, 0, "BOS", -0.1), row(0, 1, "HIST", -2.0), row(0, 2, "HIST", -1.0),
            row(1, 0, "BOS", -3.0), row(1, 1, "HIST", -1.0), row(2, 5, "HIST", 0.0)]
    assert bos_dominance(rows) == {0: True, 1: False, 2: None}
