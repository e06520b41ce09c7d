import json
import struct

import pytest
import torch

from conftest import tiny_config
from sortrank.checkpoint import CHECKPOINT_FORMAT, CheckpointError, load_checkpoint, read_metadata, save_checkpoint
from sortrank.model import NextItemNetwork, SORTNetwork
from sortrank.tokenizer import collate


def test_round_trip_preserves_outputs(tiny_data, tmp_path):
    model = SORTNetwork(tiny_config(), tiny_data.tok_cfg, seed=3)
    model.tokenizer.freeze("item_id", True)
    path = save_checkpoint(model, tmp_path / "m.safetensors", extra={"step": 7})
    loaded, meta = load_checkpoint(path)
    assert meta["kind"] == "ranking" and meta["extra"] == {"step": 7} and meta["frozen_tables"] == ["item_id"]
    assert not loaded.tokenizer.item.weight.requires_grad
    batch = collate(tiny_data.eval, list(range(4)))
    model.eval(), loaded.eval()
    with torch.no_grad():
        assert torch.equal(model(batch)["probs"], loaded(batch)["probs"])


def test_pretrain_kind(tiny_data, tmp_path):
    net = NextItemNetwork(tiny_config().for_pretraining(), tiny_data.tok_cfg, seed=0)
    loaded, meta = load_checkpoint(save_checkpoint(net, tmp_path / "p.safetensors"))
    assert meta["kind"] == "pretrain" and isinstance(loaded, NextItemNetwork)
    assert torch.equal(loaded.item_table, net.item_table)


def test_documented_byte_layout(tiny_data, tmp_path):
    path = save_checkpoint(SORTNetwork(tiny_config(), tiny_data.tok_cfg, seed=0), tmp_path / "m.safetensors")
    raw = path.read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n])
    assert n % 8 == 0
    assert header["__metadata__"]["format"] == CHECKPOINT_FORMAT
    end = max(v["data_offsets"][1] for k, v in header.items() if k != "__metadata__")
    assert 8 + n + end == len(raw)


def test_foreign_and_newer_files_rejected(tiny_data, tmp_path):
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError, match="not a readable"):
        read_metadata(junk)
    from safetensors.torch import save_file

    save_file({"x": torch.zeros(1)}, str(tmp_path / "other.safetensors"), metadata={"format": "other"})
    with pytest.raises(CheckpointError, match="not a"):
        read_metadata(tmp_path / "other.safetensors")
    meta = {"format": CHECKPOINT_FORMAT, "version": "99", "kind": "ranking"}
    save_file({"x": torch.zeros(1)}, str(tmp_path / "new.safetensors"), metadata=meta)
    with pytest.raises(CheckpointError, match="newer"):
        read_metadata(tmp_path / "new.safetensors")


def test_mismatched_tensors_rejected(tiny_data, tmp_path):
    path = save_checkpoint(SORTNetwork(tiny_config(), tiny_data.tok_cfg, seed=0), tmp_path / "m.safetensors")
    meta = json.loads(json.dumps(read_metadata(path)))
    from safetensors.torch import save_file

    raw = {k: json.dumps(v) if not isinstance(v, str) else v for k, v in meta.items()}
    raw.update(format=CHECKPOINT_FORMAT, version="1", kind="ranking")
    save_file({"bogus": torch.zeros(1)}, str(tmp_path / "bad.safetensors"), metadata=raw)
    with pytest.raises(CheckpointError, match="missing tensors"):
        load_checkpoint(tmp_path / "bad.safetensors")
