"""Evaluation report writers: CSV rows, JSON summary, and the per-layer SVG profile.

Every writer is byte-deterministic: fixed float formatting, sorted JSON
keys, no timestamps or absolute paths, so reruning an identical config
reproduces identical artifacts.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

CSV_COLUMNS = ["detector", "layer", "split_name", "auroc", "fpr_at_tpr95", "n_id", "n_ood"]

_SVG_COLORS = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
]


@dataclass(frozen=True)
class EvalRow:
    detector: str
    layer: str
    split_name: str
    auroc: float
    fpr_at_tpr95: float
    n_id: int
    n_ood: int


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def write_report_csv(rows: list[EvalRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(
                [r.detector, r.layer, r.split_name, _fmt(r.auroc), _fmt(r.fpr_at_tpr95),
                 r.n_id, r.n_ood]
            )


def write_summary_json(rows: list[EvalRow], extras: dict, path) -> None:
    payload = dict(extras)
    payload["rows"] = [asdict(r) for r in rows]
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def write_layer_profile_svg(
    per_split_oriented: dict[str, np.ndarray], logits_last: bool, path
) -> None:
    """Line plot of oriented per-layer AUROC, one polyline per OoD split."""
    width, height = 640, 400
    ml, mr, mt, mb = 60, 200, 30, 50
    pw, ph = width - ml - mr, height - mt - mb
    n_layers = max(len(v) for v in per_split_oriented.values())
    y_lo, y_hi = 0.45, 1.0

    def sx(i: int) -> float:
        return ml + (pw * i / max(n_layers - 1, 1))

    def sy(v: float) -> float:
        return mt + ph * (1.0 - (min(max(v, y_lo), y_hi) - y_lo) / (y_hi - y_lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>',
    ]
    for tick in (0.5, 0.6, 0.7, 0.8, 0.9, 1.0):
        y = sy(tick)
        parts.append(
            f'<line x1="{ml - 4}" y1="{y:.2f}" x2="{ml}" y2="{y:.2f}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{ml - 8}" y="{y + 4:.2f}" font-size="11" text-anchor="end">{tick:.1f}</text>'
        )
    for i in range(n_layers):
        label = "logits" if (logits_last and i == n_layers - 1) else str(i)
        parts.append(
            f'<text x="{sx(i):.2f}" y="{mt + ph + 16}" font-size="11" '
            f'text-anchor="middle">{label}</text>'
        )
    parts.append(
        f'<text x="{ml + pw / 2:.2f}" y="{height - 12}" font-size="12" '
        f'text-anchor="middle">layer index</text>'
    )
    parts.append(
        f'<text x="16" y="{mt + ph / 2:.2f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 16 {mt + ph / 2:.2f})">oriented AUROC</text>'
    )
    for k, (name, values) in enumerate(sorted(per_split_oriented.items())):
        color = _SVG_COLORS[k % len(_SVG_COLORS)]
        pts = " ".join(f"{sx(i):.2f},{sy(float(v)):.2f}" for i, v in enumerate(values))
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        ly = mt + 14 + 16 * k
        parts.append(
            f'<line x1="{ml + pw + 10}" y1="{ly - 4}" x2="{ml + pw + 30}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(
            f'<text x="{ml + pw + 36}" y="{ly}" font-size="11">{name}</text>'
        )
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts))
        f.write("\n")
