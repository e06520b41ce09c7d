import dataclasses
import math

import numpy as np
import pytest
import torch

from conftest import tiny_config
from sortrank.data import Candidate, ItemEvent
from sortrank.model import (
    TOGGLES,
    ModelConfig,
    NextItemNetwork,
    SORTNetwork,
    block_parameter_count,
    click_sequences,
    collate_sequences,
    count_block_parameters,
    total_loss,
    transfer_sparse,
)
from sortrank.tokenizer import TokenizerConfig, collate, pack_requests
from sortrank.training import AdamW


def probs_for(model, samples):
    packed = pack_requests(samples, model.tok_cfg)
    batch = collate(packed, np.arange(len(samples)), special_tokens=model.cfg.special_tokens)
    with torch.no_grad():
        out = model(batch)["probs"]
    return out, batch


def request_with_history(tiny_data, min_hist=3):
    return next(s for s in tiny_data.eval_samples if len(s.history) >= min_hist and len(s.candidates) >= 4)


# --------------------------------------------------------------------------- forward


def test_zero_parameters_give_one_half(tiny_data):
    model = SORTNetwork(tiny_config(), tiny_data.tok_cfg, seed=0)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    probs, batch = probs_for(model, tiny_data.eval_samples[:5])
    assert torch.equal(probs[batch.cand_valid], torch.full_like(probs[batch.cand_valid], 0.5))


def test_permuting_candidates_permutes_outputs(tiny_data):
    model = SORTNetwork(tiny_config(), tiny_data.tok_cfg, seed=0).eval()
    s = request_with_history(tiny_data)
    perm = np.random.default_rng(0).permutation(len(s.candidates))
    s2 = dataclasses.replace(s, candidates=tuple(s.candidates[i] for i in perm))
    a, _ = probs_for(model, [s])
    b, _ = probs_for(model, [s2])
    assert torch.allclose(a[0, perm], b[0], atol=1e-6)


def test_request_centric_equals_impression_centric(tiny_data):
    model = SORTNetwork(tiny_config(), tiny_data.tok_cfg, seed=1).eval()
    for s in tiny_data.eval_samples[:10]:
        together, _ = probs_for(model, [s])
        for j, c in enumerate(s.candidates):
            alone, _ = probs_for(model, [dataclasses.replace(s, candidates=(c,))])
            assert torch.allclose(together[0, j], alone[0, 0], atol=1e-4)


def test_candidate_perturbation_is_isolated(tiny_data):
    cfg = tiny_config(precision="float64")
    model = SORTNetwork(cfg, tiny_data.tok_cfg, seed=2).eval()
    s = request_with_history(tiny_data)
    base, _ = probs_for(model, [s])
    cands = list(s.candidates)
    cands[1] = Candidate((cands[1].item_id + 7) % tiny_data.tok_cfg.n_items, cands[1].labels)
    moved, _ = probs_for(model, [dataclasses.replace(s, candidates=tuple(cands))])
    others = [j for j in range(len(cands)) if j != 1]
    assert torch.equal(base[0, others], moved[0, others])
    assert not torch.equal(base[0, 1], moved[0, 1])


def test_padding_does_not_leak(tiny_data):
    model = SORTNetwork(tiny_config(), tiny_data.tok_cfg, seed=3).eval()
    samples = tiny_data.eval_samples[:6]
    batched, batch = probs_for(model, samples)
    for i, s in enumerate(samples):
        alone, _ = probs_for(model, [s])
        n = len(s.candidates)
        assert torch.allclose(batched[i, :n], alone[0, :n], atol=1e-5)


@pytest.mark.parametrize("toggle", TOGGLES)
def test_each_toggle_runs(tiny_data, toggle):
    model = SORTNetwork(tiny_config(**{toggle: False}), tiny_data.tok_cfg, seed=0)
    probs, batch = probs_for(model, tiny_data.eval_samples[:3])
    assert torch.isfinite(probs).all()


def test_baseline_has_no_sort_parameters(tiny_data):
    base = SORTNetwork(ModelConfig.baseline("small", depth=1), tiny_data.tok_cfg)
    names = {n for n, _ in base.named_parameters()}
    assert not any(".attn.w_g." in n or "q_gain" in n or "router" in n for n in names)
    full = SORTNetwork(ModelConfig.from_preset("small", depth=1), tiny_data.tok_cfg)
    assert {n for n, _ in full.named_parameters()} > {n for n in names if "ffn" not in n}


def test_saturated_gate_reduces_to_ungated(tiny_data):
    """Gate logits at +inf pass everything; with the gate removed the rest of the stack is identical."""
    torch.manual_seed(0)
    cfg = tiny_config(moe=False, local_attention=False, query_pruning=False, precision="float64")
    gated = SORTNetwork(cfg, tiny_data.tok_cfg, seed=4).eval()
    plain = SORTNetwork(dataclasses.replace(cfg, attention_gate=False), tiny_data.tok_cfg, seed=4).eval()
    plain.load_state_dict({k: v for k, v in gated.state_dict().items() if ".w_g." not in k})
    for b in gated.blocks:
        b.attn.w_g = _ConstLinear(b.attn.w_g.out_features, 1e4)
    a, _ = probs_for(gated, tiny_data.eval_samples[:4])
    b, _ = probs_for(plain, tiny_data.eval_samples[:4])
    assert torch.allclose(a, b, atol=1e-12)


class _ConstLinear(torch.nn.Module):
    def __init__(self, out, value):
        super().__init__()
        self.out_features, self.value = out, value

    def forward(self, x):
        return x.new_full((*x.shape[:-1], self.out_features), self.value)


def test_local_window_larger_than_sequence_is_no_window(tiny_data):
    on = SORTNetwork(tiny_config(window=10_000, precision="float64"), tiny_data.tok_cfg, seed=5).eval()
    off = SORTNetwork(tiny_config(local_attention=False, precision="float64"), tiny_data.tok_cfg, seed=5).eval()
    off.load_state_dict(on.state_dict())
    a, _ = probs_for(on, tiny_data.eval_samples[:4])
    b, _ = probs_for(off, tiny_data.eval_samples[:4])
    assert torch.equal(a, b)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(d_model=12, n_heads=4)  # odd head dim
    with pytest.raises(ValueError, match="preset"):
        ModelConfig.from_preset("huge")
    with pytest.raises(ValueError, match="toggles"):
        ModelConfig().with_toggles(flash=True)
    cfg = ModelConfig.from_preset("base")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.n_heads == 8 and cfg.sparsity.ratio == 1 / 8


# --------------------------------------------------------------------------- losses


def test_loss_at_one_half():
    probs = torch.full((4, 3), 0.5)
    labels = torch.tensor([[1, 0, 0], [0, 0, 0], [1, 1, 1], [0, 0, 0]])
    assert total_loss(probs, labels, (1, 0, 0)).item() == pytest.approx(math.log(2), abs=1e-6)
    assert total_loss(probs, labels, (1, 1, 1)).item() == pytest.approx(3 * math.log(2), abs=1e-6)


def test_loss_hand_case():
    assert total_loss(torch.tensor([[0.9]]), torch.tensor([[1]]), (1.0,)).item() == pytest.approx(-math.log(0.9), abs=1e-6)
    assert -math.log(0.9) == pytest.approx(0.10536, abs=1e-5)


def test_loss_weights_select_objective():
    g = torch.Generator().manual_seed(0)
    probs = torch.rand(6, 3, generator=g) * 0.98 + 0.01
    labels = (torch.rand(6, 3, generator=g) > 0.5).long()
    click_only = -(labels[:, 0] * probs[:, 0].log() + (1 - labels[:, 0]) * (1 - probs[:, 0]).log()).mean()
    assert total_loss(probs, labels, (1, 0, 0)).item() == pytest.approx(click_only.item(), rel=1e-6)


def test_loss_clamps_and_masks():
    probs = torch.tensor([[0.0], [1.0]])
    labels = torch.tensor([[1], [1]])
    assert math.isfinite(total_loss(probs, labels, (1.0,)).item())
    valid = torch.tensor([False, True])
    assert total_loss(probs, labels, (1.0,), valid=valid).item() == pytest.approx(0.0, abs=1e-6)


# --------------------------------------------------------------------------- pre-training


def test_pretrain_uniform_logits_give_ln2():
    tok = TokenizerConfig(n_items=2, profile_cardinalities=(2,), n_scenes=1)
    model = NextItemNetwork(tiny_config(), tok, seed=0)
    with torch.no_grad():
        model.out_proj.weight.zero_()
    seqs = [(ItemEvent(0, 0, 1, 0), ItemEvent(1, 0, 2, 0), ItemEvent(0, 0, 3, 0))]
    batch = collate_sequences(seqs, tok.time_edges)
    assert model.loss(batch).item() == pytest.approx(math.log(2), abs=1e-6)


def test_pretrain_head_is_tied(tiny_data):
    model = NextItemNetwork(tiny_config(), tiny_data.tok_cfg, seed=0)
    assert model.item_table.data_ptr() == model.tokenizer.item.weight.data_ptr()
    seqs = click_sequences(tiny_data.train_samples)[:4]
    batch = collate_sequences(seqs, tiny_data.tok_cfg.time_edges)
    logits = model(batch)
    h = model.hidden(batch)
    assert torch.allclose(logits[0, -1, 5], h[0, -1] @ model.tokenizer.item.weight[5], atol=1e-6)


def test_pretrain_targets_shift_by_one():
    seq = tuple(ItemEvent(i, 0, 10 * i, 0) for i in (3, 1, 4))
    batch = collate_sequences([seq, seq[:2]], TokenizerConfig(5, (2,), 1).time_edges)
    assert batch.targets[0].tolist() == [1, 4, -100]
    assert batch.targets[1].tolist() == [-100, 1, -100]


def test_click_sequences_skip_short(tiny_data):
    seqs = click_sequences(tiny_data.train_samples)
    assert seqs and all(len(s) >= 2 for s in seqs)
    for s in seqs:
        assert [e.timestamp for e in s] == sorted(e.timestamp for e in s)


# --------------------------------------------------------------------------- transfer


def _train_steps(model, data, n):
    opt = AdamW([(n_, p) for n_, p in model.named_parameters() if p.requires_grad], lr=1e-2)
    for step in range(n):
        idx = np.arange(step * 8, step * 8 + 8) % len(data.train)
        batch = collate(data.train, idx)
        loss = total_loss(model(batch)["probs"], batch.labels, valid=batch.cand_valid)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return opt


def test_transfer_freeze_keeps_table(tiny_data):
    src = NextItemNetwork(tiny_config(), tiny_data.tok_cfg, seed=0)
    dst = transfer_sparse(src, SORTNetwork(tiny_config(), tiny_data.tok_cfg, seed=1), freeze=True)
    before = dst.tokenizer.item.weight.detach().clone()
    assert torch.equal(before, src.item_table.detach())
    opt = _train_steps(dst, tiny_data, 100)
    assert torch.equal(dst.tokenizer.item.weight, before)
    assert dst.tokenizer.item.weight not in opt.state
    assert dst.tokenizer.frozen_tables() == ["item_id"]


def test_transfer_without_freeze_drifts(tiny_data):
    src = NextItemNetwork(tiny_config(), tiny_data.tok_cfg, seed=0)
    dst = transfer_sparse(src, SORTNetwork(tiny_config(), tiny_data.tok_cfg, seed=1), freeze=False)
    before = dst.tokenizer.item.weight.detach().clone()
    _train_steps(dst, tiny_data, 5)
    assert (dst.tokenizer.item.weight - before).norm() > 0


def test_transfer_vocab_mismatch(tiny_data):
    other = dataclasses.replace(tiny_data.tok_cfg, n_items=tiny_data.tok_cfg.n_items + 1)
    with pytest.raises(ValueError, match="vocabulary mismatch"):
        transfer_sparse(NextItemNetwork(tiny_config(), other), SORTNetwork(tiny_config(), tiny_data.tok_cfg))


# --------------------------------------------------------------------------- accounting


@pytest.mark.parametrize("overrides", [{}, {"moe": False}, {"attention_gate": False, "qknorm": False},
                                       {"moe_style": "switch"}])
def test_analytic_count_matches_modules(tiny_data, overrides):
    cfg = ModelConfig.from_preset("small", **overrides)
    assert block_parameter_count(cfg) == count_block_parameters(SORTNetwork(cfg, tiny_data.tok_cfg))


def test_base_dense_is_about_18m():
    n = block_parameter_count(ModelConfig.from_preset("base", moe=False))
    assert abs(n - 18e6) / 18e6 < 0.10
