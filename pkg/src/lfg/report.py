"""Deterministic report rendering: plain-SVG histogram overlays and loss
curves, plus the regime-comparison text table. Output bytes depend only on
the input CSVs (no timestamps), so identical runs produce identical files.
"""

from __future__ import annotations

import csv
from pathlib import Path

from .errors import DataError

_W, _H = 640, 400
_ML, _MR, _MT, _MB = 60, 20, 30, 45

REGIME_LABELS = {"real": "Real", "real+syn": "Real+Syn[PCGAN]"}


def _svg_header(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.1f}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
    ]


def _axes(lo_x, hi_x, lo_y, hi_y, xlabel, ylabel) -> list[str]:
    parts = [
        f'<line x1="{_ML}" y1="{_H - _MB}" x2="{_W - _MR}" y2="{_H - _MB}" stroke="black"/>',
        f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H - _MB}" stroke="black"/>',
        f'<text x="{(_ML + _W - _MR) / 2:.1f}" y="{_H - 10}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{xlabel}</text>',
        f'<text x="15" y="{(_MT + _H - _MB) / 2:.1f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 15 {(_MT + _H - _MB) / 2:.1f})">{ylabel}</text>',
        f'<text x="{_ML}" y="{_H - _MB + 15}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="10">{lo_x:.4g}</text>',
        f'<text x="{_W - _MR}" y="{_H - _MB + 15}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="10">{hi_x:.4g}</text>',
        f'<text x="{_ML - 5}" y="{_H - _MB}" text-anchor="end" '
        f'font-family="sans-serif" font-size="10">{lo_y:.4g}</text>',
        f'<text x="{_ML - 5}" y="{_MT + 10}" text-anchor="end" '
        f'font-family="sans-serif" font-size="10">{hi_y:.4g}</text>',
    ]
    return parts


def histogram_overlay_svg(path, heights_a, heights_b, lo, hi,
                          label_a, label_b, title, annotation=""):
    """Two semi-transparent bar series over a shared range."""
    heights_a = list(heights_a)
    heights_b = list(heights_b)
    if len(heights_a) != len(heights_b):
        raise DataError("histogram series must share bin count")
    n = len(heights_a)
    top = max(max(heights_a), max(heights_b), 1e-12)
    plot_w = _W - _ML - _MR
    plot_h = _H - _MT - _MB
    parts = _svg_header(title)
    parts += _axes(lo, hi, 0.0, top, "feature value", "fraction")
    bw = plot_w / n
    for series, color in ((heights_a, "#1f77b4"), (heights_b, "#d62728")):
        for i, h in enumerate(series):
            if h <= 0:
                continue
            x = _ML + i * bw
            bh = h / top * plot_h
            parts.append(f'<rect x="{x:.2f}" y="{_H - _MB - bh:.2f}" '
                         f'width="{bw:.2f}" height="{bh:.2f}" '
                         f'fill="{color}" fill-opacity="0.45"/>')
    parts.append(f'<rect x="{_W - _MR - 170}" y="{_MT}" width="12" height="12" fill="#1f77b4" fill-opacity="0.45"/>')
    parts.append(f'<text x="{_W - _MR - 152}" y="{_MT + 11}" font-family="sans-serif" font-size="12">{label_a}</text>')
    parts.append(f'<rect x="{_W - _MR - 170}" y="{_MT + 18}" width="12" height="12" fill="#d62728" fill-opacity="0.45"/>')
    parts.append(f'<text x="{_W - _MR - 152}" y="{_MT + 29}" font-family="sans-serif" font-size="12">{label_b}</text>')
    if annotation:
        parts.append(f'<text x="{_W - _MR - 170}" y="{_MT + 48}" '
                     f'font-family="sans-serif" font-size="12">{annotation}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def loss_curve_svg(path, steps, values, title, ylabel="loss"):
    steps = list(steps)
    values = list(values)
    if not steps:
        raise DataError("no telemetry rows to plot")
    lo_y, hi_y = min(values), max(values)
    if hi_y <= lo_y:
        hi_y = lo_y + 1e-12
    lo_x, hi_x = min(steps), max(steps)
    if hi_x <= lo_x:
        hi_x = lo_x + 1
    plot_w = _W - _ML - _MR
    plot_h = _H - _MT - _MB
    pts = []
    for s, v in zip(steps, values):
        x = _ML + (s - lo_x) / (hi_x - lo_x) * plot_w
        y = _H - _MB - (v - lo_y) / (hi_y - lo_y) * plot_h
        pts.append(f"{x:.2f},{y:.2f}")
    parts = _svg_header(title)
    parts += _axes(lo_x, hi_x, lo_y, hi_y, "step", ylabel)
    parts.append(f'<polyline points="{" ".join(pts)}" fill="none" '
                 f'stroke="#1f77b4" stroke-width="1.5"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def smooth(values, window: int):
    """Trailing moving average (full windows only on warm rows)."""
    out = []
    acc = []
    for v in values:
        acc.append(v)
        if len(acc) > window:
            acc.pop(0)
        out.append(sum(acc) / len(acc))
    return out


def raster_panel_svg(path, panels, scale: int = 4):
    """Side-by-side grayscale rasters with optional mask outlines.

    panels: list of (title, values in [0,1] as 2-D array, mask or None).
    Pixels are drawn as run-length merged rects, so smooth images stay
    small; masks overlay as semi-transparent red runs.
    """
    import numpy as np
    if not panels:
        raise DataError("nothing to render")
    gap = 10
    title_h = 18
    h = max(p[1].shape[0] for p in panels) * scale + title_h
    w = sum(p[1].shape[1] * scale for p in panels) + gap * (len(panels) - 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
             f'viewBox="0 0 {w} {h}">',
             f'<rect width="{w}" height="{h}" fill="white"/>']
    x0 = 0
    for title, values, mask in panels:
        values = np.asarray(values)
        rows, cols = values.shape
        levels = np.clip((values * 255).round().astype(int), 0, 255)
        parts.append(f'<text x="{x0 + cols * scale / 2}" y="13" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="12">{title}</text>')
        for r in range(rows):
            c = 0
            while c < cols:
                v = levels[r, c]
                run = 1
                while c + run < cols and levels[r, c + run] == v:
                    run += 1
                parts.append(f'<rect x="{x0 + c * scale}" y="{title_h + r * scale}" '
                             f'width="{run * scale}" height="{scale}" '
                             f'fill="rgb({v},{v},{v})"/>')
                c += run
        if mask is not None:
            bits = np.asarray(mask)
            for r in range(rows):
                c = 0
                while c < cols:
                    if not bits[r, c]:
                        c += 1
                        continue
                    run = 1
                    while c + run < cols and bits[r, c + run]:
                        run += 1
                    parts.append(f'<rect x="{x0 + c * scale}" y="{title_h + r * scale}" '
                                 f'width="{run * scale}" height="{scale}" '
                                 f'fill="rgb(255,0,0)" fill-opacity="0.25"/>')
                    c += run
        x0 += cols * scale + gap
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def comparison_text_table(csv_path) -> str:
    """Regime rows x metric columns, pooled over seeds, rendered as a
    fixed-width text table."""
    rows = {}
    deltas = []
    with open(csv_path) as f:
        for rec in csv.DictReader(f):
            if rec["regime"] == "delta_dsc":
                deltas.append((rec["seed"], float(rec["dsc_mean"])))
            elif rec["seed"] == "pooled":
                rows[rec["regime"]] = rec
    if not rows:
        raise DataError(f"{csv_path}: no pooled regime rows found")
    lines = []
    header = f"{'Method':<18}{'DSC(%)':>16}{'vPSC(%)':>16}{'vSEN(%)':>16}"
    lines.append(header)
    lines.append("-" * len(header))
    for regime in ("real", "real+syn"):
        if regime not in rows:
            continue
        r = rows[regime]
        label = REGIME_LABELS.get(regime, regime)
        lines.append(
            f"{label:<18}"
            f"{float(r['dsc_mean']):>8.1f} ± {float(r['dsc_std']):<5.1f}"
            f"{float(r['vpsc_mean']):>8.1f} ± {float(r['vpsc_std']):<5.1f}"
            f"{float(r['vsen_mean']):>8.1f} ± {float(r['vsen_std']):<5.1f}")
    for seed, delta in deltas:
        lines.append(f"DSC delta (seed {seed}): {delta:+.3f}")
    return "\n".join(lines) + "\n"


def render_run_reports(run_dir) -> list[str]:
    """Emit every figure/table the run directory has inputs for; returns
    the list of written file names (also saved as report_manifest.txt).
    Missing inputs are skipped with a notice line in the manifest."""
    run_dir = Path(run_dir)
    written = []
    notices = []

    telemetry = run_dir / "telemetry.csv"
    if telemetry.exists():
        steps, totals = [], []
        with open(telemetry) as f:
            for rec in csv.DictReader(f):
                steps.append(int(rec["step"]))
                totals.append(float(rec["total"]))
        if steps:
            loss_curve_svg(run_dir / "loss_curve.svg", steps,
                           smooth(totals, 100), "generator total loss (smoothed, window 100)")
            written.append("loss_curve.svg")
        else:
            notices.append("telemetry.csv is empty; loss curve skipped")
    else:
        notices.append("telemetry.csv missing; loss curve skipped")

    kl_summary = run_dir / "kl_summary.csv"
    features = run_dir / "features.csv"
    if kl_summary.exists() and features.exists():
        import numpy as np

        from .radiomics import compare_feature_sets
        vals: dict[str, dict[str, list[float]]] = {"energy": {}, "correlation": {}}
        with open(features) as f:
            for rec in csv.DictReader(f):
                vals["energy"].setdefault(rec["source"], []).append(float(rec["energy"]))
                vals["correlation"].setdefault(rec["source"], []).append(float(rec["correlation"]))
        for feat in ("energy", "correlation"):
            groups = vals[feat]
            if "real" in groups and "synthetic" in groups:
                cmpres = compare_feature_sets(groups["real"], groups["synthetic"], feat)
                histogram_overlay_svg(
                    run_dir / f"histogram_{feat}.svg",
                    cmpres.real_histogram.heights.tolist(),
                    cmpres.synthetic_histogram.heights.tolist(),
                    cmpres.real_histogram.lo, cmpres.real_histogram.hi,
                    "real", "synthetic",
                    f"co-occurrence {feat} distribution",
                    annotation=f"KL = {cmpres.kl:.4f}")
                written.append(f"histogram_{feat}.svg")
    else:
        notices.append("features.csv / kl_summary.csv missing; histograms skipped")

    comparison = run_dir / "comparison.csv"
    if comparison.exists():
        table = comparison_text_table(comparison)
        (run_dir / "comparison_table.txt").write_text(table)
        written.append("comparison_table.txt")
    else:
        notices.append("comparison.csv missing; comparison table skipped")

    manifest_lines = [f"file {name}" for name in written]
    manifest_lines += [f"notice {n}" for n in notices]
    (run_dir / "report_manifest.txt").write_text("\n".join(manifest_lines) + "\n")
    written.append("report_manifest.txt")
    return written
