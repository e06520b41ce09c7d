"""Versioned checkpoints on top of the safetensors container.

Byte layout (all integers little-endian)::

    [0:8)        u64  N = length of the JSON header
    [8:8+N)      JSON header, UTF-8, keys sorted, no whitespace, space-padded to a multiple of 8 bytes
    [8+N:EOF)    raw tensor bytes, row-major, concatenated

The header maps each tensor name to ``{"dtype", "shape", "data_offsets"}``
(offsets relative to the data section) and carries a ``__metadata__`` map of
strings:

    format            "sortrank-checkpoint"
    version           "1"
    kind              "ranking" | "pretrain"
    model_config      JSON of ModelConfig.to_dict()
    tokenizer_config  JSON of TokenizerConfig.to_dict()
    frozen_tables     JSON list of embedding-table names with the freeze flag set
    extra             JSON object (training step, seed, code version, ...)

Tensor names are the PyTorch ``state_dict`` keys, so embedding tables live
under ``tokenizer.*`` and routing biases under ``blocks.<l>.ffn.expert_bias``.
"""

from __future__ import annotations

import json
from pathlib import Path

from safetensors import safe_open
from safetensors.torch import save

from .model import ModelConfig, NextItemNetwork, SORTNetwork
from .tokenizer import TokenizerConfig

CHECKPOINT_FORMAT = "sortrank-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: SORTNetwork | NextItemNetwork, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kind = "pretrain" if isinstance(model, NextItemNetwork) else "ranking"
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": str(CHECKPOINT_VERSION),
        "kind": kind,
        "model_config": json.dumps(model.cfg.to_dict(), sort_keys=True),
        "tokenizer_config": json.dumps(model.tok_cfg.to_dict(), sort_keys=True),
        "frozen_tables": json.dumps(model.tokenizer.frozen_tables()),
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    tensors = {k: v.detach().contiguous() for k, v in model.state_dict().items()}
    path.write_bytes(_canonical(save(tensors, metadata=meta)))
    return path


def _canonical(blob: bytes) -> bytes:
    """Rewrite the header with sorted keys; safetensors emits the metadata map in hash order."""
    n = int.from_bytes(blob[:8], "little")
    header = json.dumps(json.loads(blob[8:8 + n]), sort_keys=True, separators=(",", ":")).encode()
    header += b" " * (-len(header) % 8)
    return len(header).to_bytes(8, "little") + header + blob[8 + n:]


def read_metadata(path: str | Path) -> dict:
    """Parsed checkpoint metadata; raises CheckpointError on a foreign or newer file."""
    try:
        with safe_open(str(path), framework="pt") as fh:
            raw = fh.metadata() or {}
    except Exception as exc:  # safetensors raises its own error types
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if raw.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    version = int(raw.get("version", "0"))
    if version > CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} is newer than supported {CHECKPOINT_VERSION}")
    return {
        "version": version,
        "kind": raw["kind"],
        "model_config": json.loads(raw["model_config"]),
        "tokenizer_config": json.loads(raw["tokenizer_config"]),
        "frozen_tables": json.loads(raw["frozen_tables"]),
        "extra": json.loads(raw.get("extra", "{}")),
    }


def load_checkpoint(path: str | Path) -> tuple[SORTNetwork | NextItemNetwork, dict]:
    """Rebuild the network stored at ``path``; returns ``(model, metadata)``."""
    meta = read_metadata(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    tok_cfg = TokenizerConfig.from_dict(meta["tokenizer_config"])
    cls = NextItemNetwork if meta["kind"] == "pretrain" else SORTNetwork
    model = cls(cfg, tok_cfg)
    with safe_open(str(path), framework="pt") as fh:
        state = {k: fh.get_tensor(k) for k in fh.keys()}
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise CheckpointError(f"{path}: missing tensors {missing}, unexpected tensors {unexpected}")
    for name in meta["frozen_tables"]:
        model.tokenizer.freeze(name, True)
    return model, meta
