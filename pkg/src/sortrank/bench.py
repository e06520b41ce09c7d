"""Dense vs block-skipping attention: wall time, skipped tiles, output agreement."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch

from .attention import blockwise_masked_attention, visibility

BENCH_COLUMNS = (
    "prefix_len", "window", "n_candidates", "block", "heads", "head_dim", "dtype",
    "dense_ms", "blockwise_ms", "skipped_tiles", "total_tiles", "skipped_fraction", "max_abs_diff",
)


@dataclass(frozen=True)
class BenchShape:
    prefix_len: int
    window: int | None = 256
    n_candidates: int = 0
    block: int = 16
    heads: int = 1
    head_dim: int = 64
    full_suffix: int = 0


DEFAULT_SHAPES = (
    BenchShape(16, None, 0, 4),
    BenchShape(512, 64, 16),
    BenchShape(1024, 128, 32),
    BenchShape(4096, 256, 0),
    BenchShape(4096, 256, 64, full_suffix=128),
)


def request_visibility(shape: BenchShape) -> torch.Tensor:
    """``[L, L]`` visibility of one unpadded request with ``n_candidates`` candidates."""
    P, N = shape.prefix_len, shape.n_candidates
    pos = torch.cat([torch.arange(P), torch.full((N,), P)])
    cand = torch.cat([torch.zeros(P, dtype=torch.bool), torch.ones(N, dtype=torch.bool)])
    return visibility(pos, cand, pos, cand, torch.ones(P + N, dtype=torch.bool), torch.tensor(P),
                      shape.window, shape.full_suffix)


def bench_one(shape: BenchShape, dtype: torch.dtype = torch.float32, seed: int = 0, repeats: int = 1) -> dict:
    g = torch.Generator().manual_seed(seed)
    L = shape.prefix_len + shape.n_candidates
    q, k, v = (torch.randn(shape.heads, L, shape.head_dim, generator=g, dtype=dtype) for _ in range(3))
    vis = request_visibility(shape)

    def dense():
        logits = (q @ k.transpose(-1, -2)) / shape.head_dim**0.5
        return torch.softmax(logits.masked_fill(~vis, float("-inf")), dim=-1) @ v

    t0 = time.perf_counter()
    for _ in range(repeats):
        ref = dense()
    t_dense = (time.perf_counter() - t0) / repeats
    t0 = time.perf_counter()
    for _ in range(repeats):
        out, skipped, total = blockwise_masked_attention(q, k, v, vis, shape.block)
    t_block = (time.perf_counter() - t0) / repeats
    row = asdict(shape)
    row.pop("full_suffix")
    row.update(
        window="inf" if shape.window is None else shape.window,
        dtype=str(dtype).replace("torch.", ""),
        dense_ms=1e3 * t_dense,
        blockwise_ms=1e3 * t_block,
        skipped_tiles=skipped,
        total_tiles=total,
        skipped_fraction=skipped / total,
        max_abs_diff=float((out - ref).abs().max()),
    )
    return row


def bench_attn(shapes: Iterable[BenchShape] = DEFAULT_SHAPES, dtype: torch.dtype = torch.float32, seed: int = 0) -> list[dict]:
    return [bench_one(s, dtype, seed) for s in shapes]


def write_bench_csv(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(BENCH_COLUMNS), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: (f"{r[c]:.6g}" if isinstance(r[c], float) else r[c]) for c in BENCH_COLUMNS})
    return path
