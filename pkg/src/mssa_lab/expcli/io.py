"""CSV and SVG writers.

Floats are written with 17 significant digits so every value round-trips
exactly; files use LF line endings.
"""

from __future__ import annotations

import csv
import math
from html import escape
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..core import Trajectory
from ..verify.rates import estimate_rate_slope

__all__ = ["format_value", "emit_csv", "read_csv", "aggregate", "emit_plot", "PLOT_KINDS"]

PLOT_KINDS = ("loglog-rate", "loss-curve")
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


def _columns(data) -> dict[str, Sequence]:
    if isinstance(data, Trajectory):
        return data.columns
    if isinstance(data, Mapping):
        return data
    raise TypeError("expected a Trajectory or a mapping of columns")


def emit_csv(data, path) -> Path:
    """Header row plus one row per recorded iteration."""
    cols = _columns(data)
    names = list(cols)
    if not names:
        raise ValueError("nothing to write: no columns")
    lengths = {len(cols[n]) for n in names}
    if len(lengths) != 1:
        raise ValueError(f"columns have different lengths: {sorted(lengths)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*(cols[n] for n in names)):
            w.writerow([format_value(v) for v in row])
    return path


def read_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    return {name: np.array([float(r[i]) for r in body]) for i, name in enumerate(header)}


def aggregate(runs: Sequence, key: str = "k") -> dict[str, list[float]]:
    """Across-seed ``<name>_mean`` and ``<name>_stderr`` per recorded row.

    Means use a correctly rounded sum, so they do not depend on seed order.
    """
    if not runs:
        raise ValueError("no runs to aggregate")
    cols = [_columns(r) for r in runs]
    keys = [list(c[key]) for c in cols]
    if any(k != keys[0] for k in keys[1:]):
        raise ValueError(f"runs disagree on their {key!r} column")
    out: dict[str, list[float]] = {key: keys[0]}
    n = len(cols)
    for name in cols[0]:
        if name == key:
            continue
        vals = np.array([c[name] for c in cols], dtype=float)
        means = [math.fsum(vals[:, j]) / n for j in range(vals.shape[1])]
        if n > 1:
            se = list(vals.std(axis=0, ddof=1) / math.sqrt(n))
        else:
            se = [0.0] * vals.shape[1]
        out[f"{name}_mean"] = means
        out[f"{name}_stderr"] = [float(s) for s in se]
    return out


# SVG ---------------------------------------------------------------------

_W, _H = 640, 420
_ML, _MR, _MT, _MB = 70, 20, 40, 50


def _ticks_log(lo, hi):
    return [10.0**e for e in range(math.floor(lo), math.ceil(hi) + 1) if lo - 1e-9 <= e <= hi + 1e-9]


def _ticks_lin(lo, hi, n=5):
    if hi == lo:
        return [lo]
    return list(np.linspace(lo, hi, n))


def emit_plot(
    data,
    kind: str,
    path,
    *,
    x: str | None = None,
    series: Sequence[str] | None = None,
    fit=None,
    title: str = "",
    log_y: bool = True,
) -> Path:
    """Write a self-contained SVG.

    ``loglog-rate`` puts both axes on log scale and annotates the fitted
    slope (computed from the first series when ``fit`` is not given);
    ``loss-curve`` plots against a linear x axis. One polyline per series.
    """
    if kind not in PLOT_KINDS:
        raise ValueError(f"plot kind must be one of {PLOT_KINDS}")
    cols = _columns(data) if data is not None else {}
    names = list(cols)
    if not names or all(len(cols[n]) == 0 for n in names):
        raise ValueError("empty aggregate: nothing to plot")
    x = names[0] if x is None else x
    if series is None:
        series = [n for n in names if n != x and not n.endswith("_stderr")]
    if not series:
        raise ValueError("no series to plot")
    xs = np.asarray(cols[x], dtype=float)
    log_x = kind == "loglog-rate"
    log_y = True if kind == "loglog-rate" else log_y

    def tx(v):
        return np.log10(v) if log_x else v

    def ty(v):
        return np.log10(v) if log_y else v

    lines = []
    for name in series:
        ys = np.asarray(cols[name], dtype=float)
        ok = np.isfinite(ys) & np.isfinite(xs)
        if log_x:
            ok &= xs > 0
        if log_y:
            ok &= ys > 0
        if ok.any():
            lines.append((name, tx(xs[ok]), ty(ys[ok])))
    if not lines:
        raise ValueError("no plottable points (log axes need positive values)")
    x_lo = min(l[1].min() for l in lines)
    x_hi = max(l[1].max() for l in lines)
    y_lo = min(l[2].min() for l in lines)
    y_hi = max(l[2].max() for l in lines)
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5

    def px(v):
        return _ML + (v - x_lo) / (x_hi - x_lo) * (_W - _ML - _MR)

    def py(v):
        return _H - _MB - (v - y_lo) / (y_hi - y_lo) * (_H - _MT - _MB)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<line x1="{_ML}" y1="{_H - _MB}" x2="{_W - _MR}" y2="{_H - _MB}" stroke="black"/>',
        f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H - _MB}" stroke="black"/>',
    ]
    if title:
        out.append(f'<text x="{_W / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>')
    xt = _ticks_log(x_lo, x_hi) if log_x else _ticks_lin(x_lo, x_hi)
    for t in xt:
        v = np.log10(t) if log_x else t
        label = f"1e{int(round(v))}" if log_x else f"{t:.4g}"
        out.append(f'<line x1="{px(v):.2f}" y1="{_H - _MB}" x2="{px(v):.2f}" y2="{_H - _MB + 5}" stroke="black"/>')
        out.append(f'<text x="{px(v):.2f}" y="{_H - _MB + 18}" text-anchor="middle" font-size="11">{label}</text>')
    yt = _ticks_log(y_lo, y_hi) if log_y else _ticks_lin(y_lo, y_hi)
    for t in yt:
        v = np.log10(t) if log_y else t
        label = f"1e{int(round(v))}" if log_y else f"{t:.4g}"
        out.append(f'<line x1="{_ML - 5}" y1="{py(v):.2f}" x2="{_ML}" y2="{py(v):.2f}" stroke="black"/>')
        out.append(f'<text x="{_ML - 8}" y="{py(v) + 4:.2f}" text-anchor="end" font-size="11">{label}</text>')
    out.append(f'<text x="{(_ML + _W - _MR) / 2:.1f}" y="{_H - 12}" text-anchor="middle" font-size="12">{escape(x)}</text>')
    for i, (name, lx, ly) in enumerate(lines):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(lx, ly))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly0 = _MT + 16 * i + 8
        out.append(f'<line x1="{_W - _MR - 170}" y1="{ly0}" x2="{_W - _MR - 150}" y2="{ly0}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{_W - _MR - 145}" y="{ly0 + 4}" font-size="11">{escape(name)}</text>')
    if kind == "loglog-rate":
        if fit is None:
            name = series[0]
            fit = estimate_rate_slope(list(zip(cols[x], cols[name])))
        slope = fit.slope if hasattr(fit, "slope") else float(fit)
        out.append(f'<text x="{_ML + 10}" y="{_H - _MB - 10}" font-size="13">slope = {slope:.3f}</text>')
    out.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(out) + "\n")
    return path
