"""Table, CSV, JSON, and SVG renderers for pipeline artifacts.

Tables are the contract; the SVG plots are thin conveniences drawn from
the same exported values.  Every writer is deterministic and goes
through an atomic temp-file rename, so reruns produce byte-identical
artifacts.
"""

from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path
from typing import Mapping, Sequence

from .stats import RegressionFit


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_json(path: str | Path, doc) -> None:
    atomic_write_text(path, json.dumps(doc, sort_keys=True, indent=2) + "\n")


def write_csv(
    path: str | Path,
    rows: Sequence[Mapping],
    fieldnames: Sequence[str],
    meta: Mapping[str, object] | None = None,
) -> None:
    """CSV writer with an optional leading comment embedding provenance."""
    buf = io.StringIO()
    if meta:
        pairs = " ".join(f"{k}={v}" for k, v in sorted(meta.items()))
        buf.write(f"# assimlab {pairs}\n")
    writer = csv.DictWriter(buf, fieldnames=list(fieldnames), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    atomic_write_text(path, buf.getvalue())


def _fmt_float(value: float, digits: int = 3) -> str:
    return f"{value:.{digits}f}"


def _axis_display(name: str) -> str:
    return " ".join(
        part if part == "x" else part.capitalize() for part in name.split()
    )


def regression_rows(fit: RegressionFit) -> list[dict]:
    """Flat row list mirroring the rendered table, footer included."""
    rows = []
    for idx, column in enumerate(fit.columns):
        if column.kind == "intercept":
            section = ""
        else:
            section = _axis_display(column.axis or "")
        rows.append(
            {
                "section": section,
                "term": column.name,
                "estimate": _fmt_float(float(fit.beta[idx])),
                "se": _fmt_float(float(fit.stderr[idx])),
                "p_value": f"{float(fit.p_values[idx]):.6g}",
                "stars": fit.stars(idx),
            }
        )
    footer_p = "p<0.001" if fit.f_p_value < 0.001 else f"p={fit.f_p_value:.3f}"
    rows.append({"section": "footer", "term": "N", "estimate": str(fit.n_obs), "se": "", "p_value": "", "stars": ""})
    rows.append({"section": "footer", "term": "R2", "estimate": _fmt_float(fit.r_squared), "se": "", "p_value": "", "stars": ""})
    rows.append(
        {
            "section": "footer",
            "term": "F",
            "estimate": f"{fit.f_statistic:.1f} ({footer_p})",
            "se": "",
            "p_value": "",
            "stars": "",
        }
    )
    return rows


def regression_text_table(fit: RegressionFit, title: str = "") -> str:
    """Plain-text regression table: grouped axis headers, indented
    category rows, a beta (S.E.) column, and an N / R-squared / F footer."""
    entries: list[tuple[str, str, str]] = []  # (term cell, beta cell, star cell)
    seen_axes: list[str] = []
    by_axis: dict[str, list[int]] = {}
    intercept_idx = None
    for idx, column in enumerate(fit.columns):
        if column.kind == "intercept":
            intercept_idx = idx
            continue
        axis = column.axis or "other"
        if axis not in by_axis:
            by_axis[axis] = []
            seen_axes.append(axis)
        by_axis[axis].append(idx)

    def beta_cell(idx: int) -> str:
        return f"{_fmt_float(float(fit.beta[idx]))} ({_fmt_float(float(fit.stderr[idx]))})"

    if intercept_idx is not None:
        entries.append(("Intercept", beta_cell(intercept_idx), fit.stars(intercept_idx)))
    for axis in seen_axes:
        entries.append((_axis_display(axis), "", ""))
        for idx in by_axis[axis]:
            entries.append((f"  {fit.columns[idx].name}", beta_cell(idx), fit.stars(idx)))

    term_width = max(len(e[0]) for e in entries) + 2
    beta_width = max(len("β (S.E.)"), max(len(e[1]) for e in entries)) + 2
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'':<{term_width}}{'β (S.E.)':>{beta_width}}  {'p':>4}".rstrip())
    for term, beta, stars in entries:
        lines.append(f"{term:<{term_width}}{beta:>{beta_width}}  {stars:>4}".rstrip())
    footer_p = "p<0.001" if fit.f_p_value < 0.001 else f"p={fit.f_p_value:.3f}"
    lines.append(
        f"N={fit.n_obs}  R²={_fmt_float(fit.r_squared)}  "
        f"F={fit.f_statistic:.1f} ({footer_p})"
    )
    if fit.dropped_columns:
        lines.append(f"dropped (all-zero): {', '.join(fit.dropped_columns)}")
    return "\n".join(lines) + "\n"


# --- SVG ----------------------------------------------------------------

_SVG_W, _SVG_H, _PAD = 640, 400, 48
_COLORS = ("#c23b22", "#1f6fb2", "#3a9e5f", "#8b5da8", "#c98a1b", "#555555")


def _scale(lo: float, hi: float, size: float, pad: float):
    span = (hi - lo) or 1.0

    def to_px(v: float) -> float:
        return pad + (v - lo) / span * (size - 2 * pad)

    return to_px


def _svg_meta_comment(meta: Mapping[str, object] | None) -> list[str]:
    if not meta:
        return []
    pairs = " ".join(f"{k}={v}" for k, v in sorted(meta.items()))
    return [f"<!-- assimlab {pairs} -->"]


def svg_density(
    curves: Mapping[str, tuple[Sequence[float], Sequence[float]]],
    meta: Mapping[str, object] | None = None,
) -> str:
    """Overlaid density curves; curves maps label -> (grid, density)."""
    xs = [x for grid, _ in curves.values() for x in grid]
    ys = [y for _, density in curves.values() for y in density]
    to_x = _scale(min(xs), max(xs), _SVG_W, _PAD)
    to_y = _scale(0.0, max(ys), _SVG_H, _PAD)
    parts = _svg_meta_comment(meta) + [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}">',
        f'<line x1="{_PAD}" y1="{_SVG_H - _PAD}" x2="{_SVG_W - _PAD}" y2="{_SVG_H - _PAD}" stroke="#000"/>',
        f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_SVG_H - _PAD}" stroke="#000"/>',
    ]
    for k, (label, (grid, density)) in enumerate(sorted(curves.items())):
        color = _COLORS[k % len(_COLORS)]
        points = " ".join(
            f"{to_x(float(x)):.2f},{_SVG_H - to_y(float(y)):.2f}"
            for x, y in zip(grid, density)
        )
        parts.append(f'<polyline points="{points}" fill="none" stroke="{color}"/>')
        parts.append(
            f'<text x="{_SVG_W - _PAD + 4}" y="{_PAD + 16 * k}" font-size="12" fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def svg_median_bars(
    entries: Sequence[tuple[str, float, float, float]],
    meta: Mapping[str, object] | None = None,
) -> str:
    """Median markers with CI whiskers; entries are (label, median, lo, hi)."""
    values = [v for _, m, lo, hi in entries for v in (m, lo, hi)]
    to_x = _scale(min(values + [0.0]), max(values + [0.0]), _SVG_W, _PAD)
    row_h = (_SVG_H - 2 * _PAD) / max(len(entries), 1)
    parts = _svg_meta_comment(meta) + [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}">',
        f'<line x1="{to_x(0.0):.2f}" y1="{_PAD}" x2="{to_x(0.0):.2f}" y2="{_SVG_H - _PAD}" stroke="#999" stroke-dasharray="4 3"/>',
    ]
    for k, (label, median, lo, hi) in enumerate(entries):
        y = _PAD + row_h * (k + 0.5)
        parts.append(
            f'<line x1="{to_x(lo):.2f}" y1="{y:.2f}" x2="{to_x(hi):.2f}" y2="{y:.2f}" stroke="#1f6fb2" stroke-width="2"/>'
        )
        parts.append(
            f'<circle cx="{to_x(median):.2f}" cy="{y:.2f}" r="4" fill="#c23b22"/>'
        )
        parts.append(
            f'<text x="4" y="{y + 4:.2f}" font-size="12">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
