"""Tiny dependency-free SVG emitters for line plots and heatmaps."""

import numpy as np

_COLORS = ("#1f6feb", "#d1242f", "#1a7f37", "#8250df", "#bf8700", "#0598a8")


def _scale(v, lo, hi, out_lo, out_hi):
    span = hi - lo if hi > lo else 1.0
    return out_lo + (v - lo) / span * (out_hi - out_lo)


def line_svg(path, x, ys, title="", width=640, height=400, labels=None):
    """Plot columns of ys [N, d] against x [N] as polylines."""
    x = np.asarray(x, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if ys.ndim == 1:
        ys = ys[:, None]
    lo, hi = float(np.min(ys)), float(np.max(ys))
    margin = 45
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{margin}" y="{margin}" width="{width - 2 * margin}" '
        f'height="{height - 2 * margin}" fill="none" stroke="#888"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" '
        f'font-family="monospace" font-size="13">{title}</text>',
    ]
    for c in range(ys.shape[1]):
        pts = " ".join(
            f"{_scale(xv, x[0], x[-1], margin, width - margin):.1f},"
            f"{_scale(yv, lo, hi, height - margin, margin):.1f}"
            for xv, yv in zip(x, ys[:, c])
        )
        color = _COLORS[c % len(_COLORS)]
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        label = labels[c] if labels else f"y{c}"
        parts.append(
            f'<text x="{width - margin + 4}" y="{margin + 14 * c + 10}" '
            f'font-family="monospace" font-size="11" fill="{color}">{label}</text>'
        )
    parts.append(
        f'<text x="{margin}" y="{height - margin + 16}" font-family="monospace" '
        f'font-size="10">[{x[0]:.3g}, {x[-1]:.3g}] / [{lo:.3g}, {hi:.3g}]</text>'
    )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


def heatmap_svg(path, matrix, title="", cell=4):
    """Grayscale heatmap of a 2-d matrix (dark = large)."""
    m = np.asarray(matrix, dtype=float)
    lo, hi = float(m.min()), float(m.max())
    span = hi - lo if hi > lo else 1.0
    rows, cols = m.shape
    width, height = cols * cell + 20, rows * cell + 30
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="10" y="15" font-family="monospace" font-size="12">{title}</text>',
    ]
    for r in range(rows):
        for c in range(cols):
            shade = int(255 * (1.0 - (m[r, c] - lo) / span))
            parts.append(
                f'<rect x="{10 + c * cell}" y="{20 + r * cell}" width="{cell}" '
                f'height="{cell}" fill="rgb({shade},{shade},{shade})"/>'
            )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))
