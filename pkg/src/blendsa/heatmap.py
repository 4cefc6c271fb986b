"""Deterministic SVG heat maps for two-way sweeps."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

LOW = (247, 251, 255)
HIGH = (8, 48, 107)
FAILED = "#bdbdbd"
CELL = 14
MARGIN_L = 70
MARGIN_T = 40
MARGIN_B = 60
LEGEND_W = 90


def _fmt(v):
    return f"{v:.4g}"


def color(t: float) -> str:
    """Linear ramp between LOW (t=0) and HIGH (t=1)."""
    t = min(max(t, 0.0), 1.0)
    rgb = [round(a + (b - a) * t) for a, b in zip(LOW, HIGH)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def render_heatmap(values, x_grid, y_grid, x_label, y_label, title="") -> str:
    """SVG text for ``values`` shaped (len(x_grid), len(y_grid)); NaN cells are gray.

    Rows of the picture run over ``y_grid`` (largest at the top), columns over
    ``x_grid``. Every grid value gets a tick; labels thin out on dense axes.
    """
    V = np.asarray(values, dtype=np.float64)
    nx, ny = len(x_grid), len(y_grid)
    if V.shape != (nx, ny):
        raise ValueError(f"values have shape {V.shape}, expected {(nx, ny)}")
    finite = V[np.isfinite(V)]
    vmin = float(finite.min()) if finite.size else 0.0
    vmax = float(finite.max()) if finite.size else 0.0
    span = vmax - vmin
    w = MARGIN_L + nx * CELL + 20 + LEGEND_W
    h = MARGIN_T + ny * CELL + MARGIN_B
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" '
        f'font-family="sans-serif" font-size="9">',
        f'<text x="{MARGIN_L}" y="16" font-size="12">{escape(title)}</text>',
        '<g id="cells">',
    ]
    for i in range(nx):
        for j in range(ny):
            v = V[i, j]
            x = MARGIN_L + i * CELL
            y = MARGIN_T + (ny - 1 - j) * CELL
            if np.isfinite(v):
                fill = color((v - vmin) / span if span > 0 else 0.5)
                tip = f"{x_label}={_fmt(x_grid[i])}, {y_label}={_fmt(y_grid[j])}: {_fmt(v)}"
            else:
                fill = FAILED
                tip = f"{x_label}={_fmt(x_grid[i])}, {y_label}={_fmt(y_grid[j])}: failed"
            out.append(
                f'<rect class="cell" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}">'
                f"<title>{escape(tip)}</title></rect>"
            )
    out.append("</g>")
    every_x = max(1, int(np.ceil(nx / 11)))
    every_y = max(1, int(np.ceil(ny / 11)))
    base_y = MARGIN_T + ny * CELL
    out.append('<g id="axes" stroke="#000">')
    for i, g in enumerate(x_grid):
        cx = MARGIN_L + i * CELL + CELL / 2
        out.append(f'<line x1="{cx}" y1="{base_y}" x2="{cx}" y2="{base_y + 4}"/>')
    for j, g in enumerate(y_grid):
        cy = MARGIN_T + (ny - 1 - j) * CELL + CELL / 2
        out.append(f'<line x1="{MARGIN_L - 4}" y1="{cy}" x2="{MARGIN_L}" y2="{cy}"/>')
    out.append("</g>")
    out.append('<g id="labels">')
    for i, g in enumerate(x_grid):
        if i % every_x == 0 or i == nx - 1:
            cx = MARGIN_L + i * CELL + CELL / 2
            out.append(f'<text x="{cx}" y="{base_y + 14}" text-anchor="middle">{_fmt(g)}</text>')
    for j, g in enumerate(y_grid):
        if j % every_y == 0 or j == ny - 1:
            cy = MARGIN_T + (ny - 1 - j) * CELL + CELL / 2 + 3
            out.append(f'<text x="{MARGIN_L - 6}" y="{cy}" text-anchor="end">{_fmt(g)}</text>')
    out.append(
        f'<text x="{MARGIN_L + nx * CELL / 2}" y="{base_y + 32}" text-anchor="middle" font-size="11">'
        f"{escape(x_label)}</text>"
    )
    out.append(
        f'<text x="14" y="{MARGIN_T + ny * CELL / 2}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 14 {MARGIN_T + ny * CELL / 2})">{escape(y_label)}</text>'
    )
    out.append("</g>")
    # legend: gradient bar with min / mid / max
    lx = MARGIN_L + nx * CELL + 20
    bar_h = max(60, ny * CELL)
    out.append('<defs><linearGradient id="ramp" x1="0" y1="1" x2="0" y2="0">')
    out.append(f'<stop offset="0" stop-color="{color(0.0)}"/><stop offset="1" stop-color="{color(1.0)}"/>')
    out.append("</linearGradient></defs>")
    out.append('<g id="legend">')
    out.append(f'<rect x="{lx}" y="{MARGIN_T}" width="14" height="{bar_h}" fill="url(#ramp)" stroke="#000"/>')
    for frac, val in ((0.0, vmin), (0.5, 0.5 * (vmin + vmax)), (1.0, vmax)):
        y = MARGIN_T + bar_h * (1 - frac) + 3
        out.append(f'<text x="{lx + 18}" y="{y}">{_fmt(val)}</text>')
    out.append(
        f'<rect x="{lx}" y="{MARGIN_T + bar_h + 10}" width="14" height="10" fill="{FAILED}"/>'
        f'<text x="{lx + 18}" y="{MARGIN_T + bar_h + 19}">failed</text>'
    )
    out.append("</g></svg>")
    return "\n".join(out) + "\n"


def sweep_heatmap(result, coef) -> str:
    """Heat map of one coefficient over a two-axis SweepResult."""
    if len(result.axes) != 2:
        raise ValueError("heat maps need exactly two sweep axes")
    (kx, gx), (ky, gy) = result.axes
    return render_heatmap(
        result.estimates(coef), gx, gy,
        f"delta ({result.mechanisms[kx]})", f"delta ({result.mechanisms[ky]})", title=coef,
    )
