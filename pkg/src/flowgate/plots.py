"""Minimal hand-written SVG plots (axes, polylines, markers)."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

W, H = 360, 300
LEFT, RIGHT, TOP, BOTTOM = 50, 20, 30, 40
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]


class _Frame:
    def __init__(self, xlim, ylim):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 == self.y0:
            self.y1 = self.y0 + 1.0

    def px(self, x):
        return LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)

    def py(self, y):
        return H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)


def _doc(body: list[str], title: str, frame: _Frame, xlabel: str, ylabel: str) -> str:
    head = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{LEFT}" y1="{H - BOTTOM}" x2="{W - RIGHT}" y2="{H - BOTTOM}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{H - BOTTOM}" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle" font-size="11">{escape(xlabel)}</text>',
        f'<text x="12" y="{H / 2}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 12 {H / 2})">{escape(ylabel)}</text>',
    ]
    for v in np.linspace(frame.x0, frame.x1, 5):
        head.append(
            f'<text x="{frame.px(v):.1f}" y="{H - BOTTOM + 14}" text-anchor="middle" font-size="9">{v:.3g}</text>'
        )
    for v in np.linspace(frame.y0, frame.y1, 5):
        head.append(
            f'<text x="{LEFT - 4}" y="{frame.py(v) + 3:.1f}" text-anchor="end" font-size="9">{v:.3g}</text>'
        )
    return "\n".join(head + body + ["</svg>"]) + "\n"


def _polyline(frame, xs, ys, color, dash=False) -> str:
    pts = " ".join(f"{frame.px(x):.2f},{frame.py(y):.2f}" for x, y in zip(xs, ys))
    style = ' stroke-dasharray="4,3"' if dash else ""
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{style} points="{pts}"/>'


def roc_svg(curves: dict, title: str = "ROC") -> str:
    """ROC polylines with a circle at each Youden cutoff; legend shows AUCs."""
    frame = _Frame((0.0, 1.0), (0.0, 1.0))
    body = [_polyline(frame, [0, 1], [0, 1], "#999999", dash=True)]
    for i, (name, c) in enumerate(curves.items()):
        color = COLORS[i % len(COLORS)]
        body.append(_polyline(frame, c.fpr, c.tpr, color))
        j = c.tpr - c.fpr
        k = int(np.argmax(j))
        body.append(
            f'<circle cx="{frame.px(c.fpr[k]):.2f}" cy="{frame.py(c.tpr[k]):.2f}" r="4" '
            f'fill="none" stroke="{color}"/>'
        )
        body.append(
            f'<text x="{W - RIGHT - 4}" y="{H - BOTTOM - 8 - 14 * i}" text-anchor="end" '
            f'font-size="10" fill="{color}">{escape(name)} ({c.auc:.3f})</text>'
        )
    return _doc(body, title, frame, "False positive rate", "True positive rate")


def histogram_svg(hist, title: str = "Histogram") -> str:
    edges = hist.edges
    ymax = max((int(c.max()) for c in hist.counts.values()), default=1) or 1
    frame = _Frame((edges[0], edges[-1]), (0.0, float(ymax)))
    body = []
    for i, (cls, counts) in enumerate(hist.counts.items()):
        color = COLORS[i % len(COLORS)]
        xs, ys = [edges[0]], [0.0]
        for k, n in enumerate(counts):
            xs += [edges[k], edges[k + 1]]
            ys += [float(n), float(n)]
        xs.append(edges[-1])
        ys.append(0.0)
        body.append(_polyline(frame, xs, ys, color))
        body.append(
            f'<text x="{W - RIGHT - 4}" y="{TOP + 12 + 14 * i}" text-anchor="end" '
            f'font-size="10" fill="{color}">{escape(cls)}</text>'
        )
    return _doc(body, title, frame, hist.field, "count")


def scatter_svg(scatter: dict) -> str:
    x = np.asarray(scatter["zero_pixel_fraction"], dtype=float)
    series = [
        ("likelihood_score", scatter["corr_likelihood"]),
        ("posterior_score", scatter["corr_posterior"]),
    ]
    # each series is min-max normalised so both share one axis
    body = []
    frame = _Frame((float(x.min()), float(x.max())), (0.0, 1.0))
    for i, (name, r) in enumerate(series):
        y = np.asarray(scatter[name], dtype=float)
        span = y.max() - y.min()
        yn = (y - y.min()) / span if span > 0 else np.full_like(y, 0.5)
        color = COLORS[i]
        for a, b in zip(x, yn):
            body.append(f'<circle cx="{frame.px(a):.2f}" cy="{frame.py(b):.2f}" r="1.8" fill="{color}"/>')
        body.append(
            f'<text x="{W - RIGHT - 4}" y="{TOP + 12 + 14 * i}" text-anchor="end" '
            f'font-size="10" fill="{color}">{name} (r={r:.3f})</text>'
        )
    return _doc(body, "Score vs zero-pixel fraction", frame, "zero-pixel fraction", "normalised score")
