"""Attention heatmaps and QK-logit distance curves, as CSV (canonical) plus SVG.

Both figures read the pre-softmax logits ``q.k / sqrt(d_k)`` recorded inside
each attention layer, averaged over heads, restricted to visible entries.
"""

from __future__ import annotations

import csv
import html
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import RequestSample
from .layers import Role
from .model import SORTNetwork
from .tokenizer import collate, pack_requests

HEATMAP_COLUMNS = ("layer", "query", "key", "query_pos", "key_pos", "query_role", "key_role", "logit", "centered_logit")
CURVE_COLUMNS = ("layer", "distance", "normalized_logit")


def layer_logits(model: SORTNetwork, sample: RequestSample) -> list[dict]:
    """Per layer: head-averaged logits ``[L_out, L_in]`` plus visibility, positions and roles."""
    packed = pack_requests([sample], model.tok_cfg)
    batch = collate(packed, [0], special_tokens=model.cfg.special_tokens)
    model.set_record_attention(True)
    try:
        with torch.no_grad():
            model(batch)
        layers = []
        L = batch.roles.shape[1]
        pos, roles = batch.positions[0].numpy(), batch.roles[0].numpy()
        L_in = L
        for block in model.blocks:
            a = block.attn
            logits = a.last_logits[0].double().mean(0).numpy()
            vis = a.last_visibility[0, 0].numpy()
            L_out = logits.shape[0]
            layers.append({
                "logits": logits,
                "visible": vis,
                "q_pos": pos[L - L_out:],
                "k_pos": pos[L - L_in:],
                "q_roles": roles[L - L_out:],
                "k_roles": roles[L - L_in:],
            })
            L_in = L_out
    finally:
        model.set_record_attention(False)
    return layers


def _check_layer(model: SORTNetwork, layer: int | None) -> list[int]:
    depth = len(model.blocks)
    if layer is None:
        return list(range(depth))
    if not 0 <= layer < depth:
        raise ValueError(f"layer {layer} out of range for a {depth}-layer model")
    return [layer]


def heatmap_rows(model: SORTNetwork, sample: RequestSample, layer: int | None = None) -> list[dict]:
    """One row per visible (query, key) entry; ``centered_logit`` subtracts the row max."""
    wanted = _check_layer(model, layer)
    rows = []
    for l, info in enumerate(layer_logits(model, sample)):
        if l not in wanted:
            continue
        logits, vis = info["logits"], info["visible"]
        masked = np.where(vis, logits, -np.inf)
        row_max = masked.max(axis=1, keepdims=True)
        centered = logits - row_max
        for qi, ki in zip(*np.nonzero(vis)):
            rows.append({
                "layer": l,
                "query": int(qi),
                "key": int(ki),
                "query_pos": int(info["q_pos"][qi]),
                "key_pos": int(info["k_pos"][ki]),
                "query_role": Role(int(info["q_roles"][qi])).name,
                "key_role": Role(int(info["k_roles"][ki])).name,
                "logit": float(logits[qi, ki]),
                "centered_logit": float(centered[qi, ki]),
            })
    return rows


def bos_dominance(rows: Sequence[dict], value: str = "centered_logit") -> dict[int, bool | None]:
    """Per layer: does the BOS column's mean beat the median of the other columns' means?

    None for layers where BOS is no longer among the keys (pruned away).
    """
    cols: dict[int, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    bos_key: dict[int, int] = {}
    for r in rows:
        cols[r["layer"]][r["key"]].append(float(r[value]))
        if r["key_role"] == "BOS":
            bos_key[r["layer"]] = r["key"]
    out = {}
    for layer, by_key in sorted(cols.items()):
        if layer not in bos_key:
            out[layer] = None
            continue
        means = {k: float(np.mean(v)) for k, v in by_key.items()}
        others = [m for k, m in means.items() if k != bos_key[layer]]
        out[layer] = bool(others) and means[bos_key[layer]] > float(np.median(others))
    return out


def qk_curve(model: SORTNetwork, samples: Sequence[RequestSample]) -> list[dict]:
    """Normalised logit vs relative distance ``|i - j|`` per layer.

    Each layer's logits are divided by that layer's largest absolute visible
    logit, then averaged over all visible entries at each distance across the
    given samples.
    """
    sums: dict[tuple[int, int], float] = defaultdict(float)
    counts: dict[tuple[int, int], int] = defaultdict(int)
    for sample in samples:
        for l, info in enumerate(layer_logits(model, sample)):
            vis = info["visible"]
            a = info["logits"]
            x_max = float(np.abs(a[vis]).max()) if vis.any() else 0.0
            norm = a / x_max if x_max > 0 else np.zeros_like(a)
            dist = np.abs(info["q_pos"][:, None] - info["k_pos"][None, :])
            for d in np.unique(dist[vis]):
                sel = vis & (dist == d)
                sums[(l, int(d))] += float(norm[sel].sum())
                counts[(l, int(d))] += int(sel.sum())
    return [
        {"layer": l, "distance": d, "normalized_logit": sums[(l, d)] / counts[(l, d)]}
        for (l, d) in sorted(sums)
    ]


def total_variation(rows: Sequence[dict]) -> dict[int, float]:
    """Sum of absolute differences between adjacent distances, per layer."""
    by_layer: dict[int, list[tuple[int, float]]] = defaultdict(list)
    for r in rows:
        by_layer[int(r["layer"])].append((int(r["distance"]), float(r["normalized_logit"])))
    out = {}
    for layer, pts in sorted(by_layer.items()):
        ys = np.asarray([y for _, y in sorted(pts)])
        out[layer] = float(np.abs(np.diff(ys)).sum())
    return out


# --------------------------------------------------------------------------- files


def write_csv(rows: Sequence[dict], path: str | Path, columns: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: (f"{r[c]:.9g}" if isinstance(r[c], float) else r[c]) for c in columns})
    return path


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _color(t: float) -> str:
    """White-to-blue ramp for t in [0, 1]."""
    t = min(1.0, max(0.0, t))
    r = int(255 * (1 - t) + 8 * t)
    g = int(255 * (1 - t) + 48 * t)
    b = int(255 * (1 - t) + 107 * t)
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(rows: Sequence[dict], layer: int, path: str | Path, value: str = "centered_logit", cell: int = 8) -> Path:
    sel = [r for r in rows if int(r["layer"]) == layer]
    if not sel:
        raise ValueError(f"no heatmap rows for layer {layer}")
    nq = max(int(r["query"]) for r in sel) + 1
    nk = max(int(r["key"]) for r in sel) + 1
    vals = np.asarray([float(r[value]) for r in sel])
    lo, hi = float(vals.min()), float(vals.max())
    span = hi - lo or 1.0
    margin = 40
    w, h = margin + nk * cell + 10, margin + nq * cell + 10
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
             f'<text x="4" y="14" font-size="11">layer {layer}: head-averaged {html.escape(value)}</text>']
    for r in sel:
        x = margin + int(r["key"]) * cell
        y = margin + int(r["query"]) * cell
        parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{_color((float(r[value]) - lo) / span)}"/>')
    for r in sel:
        if r["key_role"] == "BOS":
            x = margin + int(r["key"]) * cell
            parts.append(f'<rect x="{x}" y="{margin}" width="{cell}" height="{nq * cell}" fill="none" stroke="#c00"/>')
            parts.append(f'<text x="{x}" y="{margin - 4}" font-size="9" fill="#c00">BOS</text>')
            break
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
    return Path(path)


def curve_svg(rows: Sequence[dict], path: str | Path, width: int = 480, height: int = 300) -> Path:
    by_layer: dict[int, list[tuple[int, float]]] = defaultdict(list)
    for r in rows:
        by_layer[int(r["layer"])].append((int(r["distance"]), float(r["normalized_logit"])))
    max_d = max((d for pts in by_layer.values() for d, _ in pts), default=1) or 1
    pad = 40
    sx = lambda d: pad + (width - 2 * pad) * d / max_d  # noqa: E731
    sy = lambda y: height / 2 - (height / 2 - pad) * y  # noqa: E731
    palette = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<line x1="{pad}" y1="{sy(0)}" x2="{width - pad}" y2="{sy(0)}" stroke="#999"/>',
             f'<text x="{pad}" y="{height - 8}" font-size="11">relative distance (0..{max_d})</text>']
    for i, (layer, pts) in enumerate(sorted(by_layer.items())):
        pts.sort()
        coords = " ".join(f"{sx(d):.1f},{sy(y):.1f}" for d, y in pts)
        c = palette[i % len(palette)]
        parts.append(f'<polyline fill="none" stroke="{c}" points="{coords}"/>')
        parts.append(f'<text x="{width - pad + 2}" y="{pad + 12 * i}" font-size="10" fill="{c}">L{layer}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
    return Path(path)


def plot_attention_heatmap(model: SORTNetwork, sample: RequestSample, layer: int | None, out_dir: str | Path) -> dict:
    out_dir = Path(out_dir)
    rows = heatmap_rows(model, sample, layer)
    csv_path = write_csv(rows, out_dir / "heatmap.csv", HEATMAP_COLUMNS)
    svgs = [heatmap_svg(rows, l, out_dir / f"heatmap_layer{l}.svg") for l in _check_layer(model, layer)]
    return {"csv": csv_path, "svg": svgs, "bos_dominance": bos_dominance(rows)}


def plot_qk_logit_curve(model: SORTNetwork, samples: Sequence[RequestSample], out_dir: str | Path) -> dict:
    out_dir = Path(out_dir)
    rows = qk_curve(model, samples)
    csv_path = write_csv(rows, out_dir / "qk_curve.csv", CURVE_COLUMNS)
    svg = curve_svg(rows, out_dir / "qk_curve.svg")
    return {"csv": csv_path, "svg": svg, "total_variation": total_variation(rows)}
