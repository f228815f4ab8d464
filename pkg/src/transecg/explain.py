"""Attention attribution: class-token importance from the final encoder block,
head weighting from the output projection, and interval-level reports.

Percentages are normalized over the disjoint base partition of each beat, so
they sum to 100; the overlapping clinical composites (P-R, S-T, Q-T) are
reported as sums of their constituents.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .delineation import BASE_INTERVALS, COMPOSITE_INTERVALS, IntervalMap
from .vit import ForwardArtifacts, VitConfig

# candidate features for the top-3 table, with their base-partition constituents
FEATURE_CANDIDATES: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("R-Wave (QRS Complex)", ("QRS",)),
    ("S-T Interval", ("ST_SEGMENT", "T_WAVE")),
    ("P-R Interval", ("P_WAVE", "PQ_SEGMENT")),
    ("Q-T Interval", ("QRS", "ST_SEGMENT", "T_WAVE")),
)


@dataclass
class PatchImportance:
    per_head: np.ndarray   # [H, N]
    importance: np.ndarray  # [N], mean over heads
    head_weights: np.ndarray | None = None  # [H], max-normalized


@dataclass
class AttributionReport:
    task: str
    percentages: dict[str, float]            # base partition, sums to 100
    composites: dict[str, float]             # derived sums
    top3: list[tuple[str, float]]
    n_windows: int = 1
    head_weights: list[float] | None = None


def extract_importance(artifacts: ForwardArtifacts, window_index: int = 0,
                       layer: int = -1) -> PatchImportance:
    """Class-token -> patch attention of the final block, averaged over heads."""
    if not artifacts.attention:
        raise ValueError("attention was not captured during the forward pass")
    maps = artifacts.attention[layer][window_index]  # [H, T, T]
    per_head = maps[:, 0, 1:]                        # a_h = A_h[0, 1:N]
    return PatchImportance(per_head=per_head, importance=per_head.mean(axis=0))


def head_weights(params: dict[str, Tensor], config: VitConfig,
                 layer: int | None = None) -> np.ndarray:
    """Per-head weights from the final block's output projection.

    Each head's weight is the Frobenius norm of its rows of W_O, normalized so
    the dominant head scores exactly 1.0.
    """
    layer = config.n_layers - 1 if layer is None else layer
    w_o = params[f"layers.{layer}.w_o"].data
    dh = config.head_dim
    raw = np.array([
        np.linalg.norm(w_o[h * dh:(h + 1) * dh, :]) for h in range(config.n_heads)
    ])
    return raw / raw.max()


def attribute(importance: np.ndarray, interval_map: IntervalMap,
              config: VitConfig, task: str = "gender") -> AttributionReport:
    """Distribute patch importance over the delineated base intervals.

    Each patch's importance is assigned to intervals in proportion to sample
    overlap; masses are summed across all beats, then normalized to percent.
    """
    importance = np.asarray(importance, dtype=np.float64)
    p = config.patch_size
    mass = {name: 0.0 for name in BASE_INTERVALS}
    for beat in interval_map.beats:
        for name in BASE_INTERVALS:
            if name not in beat:
                continue
            lo, hi = beat[name]
            first, last = lo // p, (hi - 1) // p
            for i in range(max(0, first), min(importance.size - 1, last) + 1):
                overlap = min(hi, (i + 1) * p) - max(lo, i * p)
                if overlap > 0:
                    mass[name] += importance[i] * overlap / p

    total = sum(mass.values())
    if total <= 0.0:
        raise ValueError("unattributable window: no importance mass over delineated beats")
    pct = {name: 100.0 * m / total for name, m in mass.items()}
    composites = {
        name: sum(pct[part] for part in parts)
        for name, parts in COMPOSITE_INTERVALS.items()
    }
    return AttributionReport(
        task=task, percentages=pct, composites=composites,
        top3=_top3(pct), n_windows=1,
    )


def _top3(pct: dict[str, float]) -> list[tuple[str, float]]:
    """Greedy top-3 over the candidate feature set, counting each base interval once."""
    pool = set(BASE_INTERVALS)
    out: list[tuple[str, float]] = []
    while len(out) < 3:
        best = None
        for name, parts in FEATURE_CANDIDATES:
            if not all(p in pool for p in parts):
                continue
            value = sum(pct[p] for p in parts)
            if best is None or value > best[1]:
                best = (name, value)
        if best is None or best[1] <= 0.0:
            break
        out.append((best[0], best[1]))
        for cand_name, parts in FEATURE_CANDIDATES:
            if cand_name == best[0]:
                pool -= set(parts)
                break
    return out


def aggregate(reports: list[AttributionReport]) -> AttributionReport:
    """Window-count-weighted mean of per-window percentages."""
    if not reports:
        raise ValueError("nothing to aggregate")
    weights = np.array([r.n_windows for r in reports], dtype=np.float64)
    weights /= weights.sum()
    pct = {
        name: float(sum(w * r.percentages[name] for w, r in zip(weights, reports)))
        for name in BASE_INTERVALS
    }
    composites = {
        name: sum(pct[part] for part in parts)
        for name, parts in COMPOSITE_INTERVALS.items()
    }
    return AttributionReport(
        task=reports[0].task, percentages=pct, composites=composites,
        top3=_top3(pct), n_windows=int(sum(r.n_windows for r in reports)),
        head_weights=reports[0].head_weights,
    )


# ---------------------------------------------------------------------------
# report output


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def emit_report(report: AttributionReport, per_head: np.ndarray,
                window_samples: np.ndarray, outdir: str | Path,
                config: VitConfig, prefix: str = "attribution") -> dict[str, Path]:
    """Write the CSV/JSON/SVG artifact set; byte-deterministic for fixed inputs."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {}

    head_csv = outdir / f"{prefix}_per_head.csv"
    with open(head_csv, "w", encoding="utf-8", newline="\n") as f:
        f.write("head,patch,importance\n")
        for h in range(per_head.shape[0]):
            for i in range(per_head.shape[1]):
                f.write(f"{h},{i},{_fmt(per_head[h, i])}\n")
    paths["per_head_csv"] = head_csv

    interval_csv = outdir / f"{prefix}_intervals.csv"
    with open(interval_csv, "w", encoding="utf-8", newline="\n") as f:
        f.write("interval,percent\n")
        for name in sorted(report.percentages):
            f.write(f"{name},{_fmt(report.percentages[name])}\n")
        for name in sorted(report.composites):
            f.write(f"{name},{_fmt(report.composites[name])}\n")
    paths["intervals_csv"] = interval_csv

    json_path = outdir / f"{prefix}.json"
    doc = {
        "task": report.task,
        "n_windows": report.n_windows,
        "percentages": report.percentages,
        "composites": report.composites,
        "top3": [{"feature": n, "percent": v} for n, v in report.top3],
        "head_weights": report.head_weights,
    }
    with open(json_path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")
    paths["json"] = json_path

    svg_path = outdir / f"{prefix}.svg"
    with open(svg_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(_render_svg(report, per_head.mean(axis=0), window_samples, config))
    paths["svg"] = svg_path
    return paths


def _render_svg(report: AttributionReport, importance: np.ndarray,
                samples: np.ndarray, config: VitConfig,
                width: int = 1200, height: int = 360) -> str:
    """ECG trace with one shaded rectangle per patch and interval labels."""
    n = config.n_patches
    pad = 30
    plot_w, plot_h = width - 2 * pad, height - 2 * pad
    peak = importance.max() if importance.size and importance.max() > 0 else 1.0

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]
    patch_w = plot_w / n
    for i in range(n):
        opacity = 0.85 * float(importance[i]) / peak if i < importance.size else 0.0
        parts.append(
            f'<rect class="patch" x="{_fmt(pad + i * patch_w)}" y="{pad}" '
            f'width="{_fmt(patch_w)}" height="{plot_h}" '
            f'fill="crimson" fill-opacity="{_fmt(opacity)}"/>'
        )
    s = np.asarray(samples, dtype=np.float64)
    lo, hi = float(s.min()), float(s.max())
    rng = hi - lo if hi > lo else 1.0
    pts = " ".join(
        f"{_fmt(pad + plot_w * i / max(1, s.size - 1))},"
        f"{_fmt(pad + plot_h * (1.0 - (v - lo) / rng))}"
        for i, v in enumerate(s)
    )
    parts.append(f'<polyline points="{pts}" fill="none" stroke="black" stroke-width="1"/>')
    for j, (name, value) in enumerate(report.top3):
        parts.append(
            f'<text x="{pad}" y="{18 + 0 * j}" dx="{j * 320}" font-size="14" '
            f'font-family="monospace">{name}: {_fmt(value)}%</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
