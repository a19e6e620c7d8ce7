"""Minimal deterministic SVG figures (no timestamps, fixed float formatting)."""

from __future__ import annotations

import numpy as np

W, H, PAD = 640, 400, 50


def _scale(lo, hi, a, b):
    if hi == lo:
        hi = lo + 1.0
    return lambda v: a + (np.asarray(v, dtype=float) - lo) / (hi - lo) * (b - a)


def _pts(xs, ys):
    return " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))


def _frame(title, xlabel, ylabel, x0, x1, y0, y1, sx, sy):
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.0f}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<text x="{W / 2:.0f}" y="{H - 12}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="14" y="{H / 2:.0f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {H / 2:.0f})">{ylabel}</text>',
    ]
    for v in np.linspace(x0, x1, 5):
        out.append(f'<text x="{float(sx(v)):.2f}" y="{H - PAD + 16}" text-anchor="middle" font-size="10">{v:.3g}</text>')
    for v in np.linspace(y0, y1, 5):
        out.append(f'<text x="{PAD - 6}" y="{float(sy(v)) + 3:.2f}" text-anchor="end" font-size="10">{v:.3g}</text>')
    return out


def line_with_band(x, mean, lo, hi, title="", xlabel="", ylabel="") -> str:
    x, mean, lo, hi = map(lambda a: np.asarray(a, dtype=float), (x, mean, lo, hi))
    x0, x1 = float(x.min()), float(x.max())
    y0, y1 = float(min(lo.min(), 0.0)), float(max(hi.max(), 0.0))
    sx = _scale(x0, x1, PAD, W - PAD)
    sy = _scale(y0, y1, H - PAD, PAD)
    out = _frame(title, xlabel, ylabel, x0, x1, y0, y1, sx, sy)
    band = _pts(sx(x), sy(hi)) + " " + _pts(sx(x[::-1]), sy(lo[::-1]))
    out.append(f'<polygon points="{band}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>')
    out.append(f'<line x1="{PAD}" y1="{float(sy(0)):.2f}" x2="{W - PAD}" y2="{float(sy(0)):.2f}" '
               'stroke="gray" stroke-dasharray="4,3"/>')
    out.append(f'<polyline points="{_pts(sx(x), sy(mean))}" fill="none" stroke="#08519c" stroke-width="2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def step_plot(curves, title="", xlabel="", ylabel="") -> str:
    """``curves`` is a list of ``(label, times, survival)``."""
    colors = ["#08519c", "#cb181d", "#238b45", "#6a51a3"]
    tmax = max([float(np.max(t)) for _, t, _ in curves if len(t)] + [1.0])
    sx = _scale(0.0, tmax, PAD, W - PAD)
    sy = _scale(0.0, 1.0, H - PAD, PAD)
    out = _frame(title, xlabel, ylabel, 0.0, tmax, 0.0, 1.0, sx, sy)
    for k, (label, t, s) in enumerate(curves):
        xs, ys = [0.0], [1.0]
        prev = 1.0
        for ti, si in zip(t, s):
            xs += [float(ti), float(ti)]
            ys += [prev, float(si)]
            prev = float(si)
        xs.append(tmax)
        ys.append(prev)
        c = colors[k % len(colors)]
        out.append(f'<polyline points="{_pts(sx(xs), sy(ys))}" fill="none" stroke="{c}" stroke-width="2"/>')
        out.append(f'<text x="{W - PAD - 4}" y="{PAD + 14 * (k + 1)}" text-anchor="end" font-size="12" fill="{c}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
