"""Sensitivity sweeps over delta grids, connecting-quantity diagnostics and
tipping-point search."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from scipy.special import log_expit

from . import glm
from ._parallel import pmap
from .engine import BlendedFit, ModularizationSpec, as_delta, run_blended
from .errors import NumericalError, SpecError
from .inference import bootstrap_mi
from .mnar import SelectionSolution
from .tabular import ColumnSchema, ColumnTable, derive_indicators, read_csv, write_csv

IPW_STEP = 0.1
MI_STEP = 0.3
TIPPING_RESOLUTION = 0.05


def make_grid(lo, hi, step) -> np.ndarray:
    """Evenly spaced grid from lo to hi inclusive, snapped so 0 is exact."""
    if step <= 0 or hi < lo:
        raise SpecError(f"bad grid {lo}:{hi}:{step}")
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    g = np.round(lo + step * np.arange(n), 10)
    g[np.abs(g) < 1e-12] = 0.0
    return g


def parse_grid(text: str) -> np.ndarray:
    """``lo:hi:step`` or a comma list."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise SpecError(f"grid {text!r} must be lo:hi:step")
        lo, hi, step = (float(p) for p in parts)
        return make_grid(lo, hi, step)
    return np.array(sorted(float(p) for p in text.split(",") if p.strip()))


def default_grid(spec: ModularizationSpec, k) -> np.ndarray:
    m = spec.mechanisms[k]
    if m.method == "MI":
        return make_grid(-6.0, 6.0, MI_STEP)
    return make_grid(-2.0, 2.0, IPW_STEP)


# --------------------------------------------------------------------------
# connecting quantities


@dataclass(frozen=True)
class Connecting:
    value: float
    raw: float
    clipped: bool = False


def _aux_inputs(table, sol: SelectionSolution, target_column):
    if sol.rows is None:
        raise SpecError("selection solution does not record its table rows")
    R = sol.observed
    if R.all():
        raise NumericalError("no R = 0 rows; the connecting quantity is undefined")
    X = sol.design
    V = np.zeros(R.size)
    col = table[target_column]
    V[R] = col.values[sol.rows[R]]
    if not np.all(np.isfinite(V)):
        raise NumericalError(f"{target_column} missing on an observed row")
    return X, R, V


def _delta_scale(sol, delta):
    xi = sol.sensitivity
    scale = xi.scale if xi.kind == "ipw_linear" else 1.0
    return delta if delta is not None else xi.delta, scale


def connecting_binary(table: ColumnTable, sol: SelectionSolution, target_column, delta=None) -> Connecting:
    """Estimated P(V = 1 | R = 0) implied by the delta-adjusted selection model.

    Averages exp(-x'psi - delta/s) * P(R=1, V=1 | x) / P(R=0 | x) over R = 0
    rows, where the two probabilities come from logistic fits on the
    selection covariates. The mean is clipped to [0, 1].
    """
    X, R, V = _aux_inputs(table, sol, target_column)
    delta, scale = _delta_scale(sol, delta)
    p11 = glm.fit_logistic(X, R * V)
    pr = glm.fit_logistic(X, R.astype(np.float64))
    X0 = X[~R]
    lead = np.exp(-X0 @ sol.psi - delta / scale)
    ratio = np.exp(log_expit(X0 @ p11.coefficients) - log_expit(-(X0 @ pr.coefficients)))
    raw = float(np.mean(lead * ratio))
    val = min(max(raw, 0.0), 1.0)
    return Connecting(val, raw, val != raw)


def connecting_continuous(table: ColumnTable, sol: SelectionSolution, target_column, delta=None) -> Connecting:
    """Estimated E(V | R = 0): regress V * exp(-x'psi - delta V/s) * odds(R=1 | x)
    on x over R = 1 rows, then average the fitted line over R = 0 rows."""
    X, R, V = _aux_inputs(table, sol, target_column)
    delta, scale = _delta_scale(sol, delta)
    pr = glm.fit_logistic(X, R.astype(np.float64))
    X1 = X[R]
    odds = np.exp(X1 @ pr.coefficients)
    target = V[R] * np.exp(-X1 @ sol.psi - delta * V[R] / scale) * odds
    alpha = glm.fit_linear(X1, target).coefficients
    val = float(np.mean(X[~R] @ alpha))
    return Connecting(val, val, False)


def connecting_for(table, spec: ModularizationSpec, fit: BlendedFit, k) -> float:
    """Connecting quantity for mechanism ``k`` at the fit's delta; NaN when
    it does not apply (decision mechanisms, categorical variables)."""
    m = spec.mechanisms[k]
    if m.method == "MI":
        for v in m.variables:
            if (m.name, v) in fit.imputed_means:
                return fit.imputed_means[(m.name, v)]
        return float("nan")
    if m.method != "IPW" or m.sensitivity_column is None or m.name not in fit.selections:
        return float("nan")
    kind = table[m.sensitivity_column].kind
    sol = fit.selections[m.name]
    d = float(fit.delta[k])
    if kind == "binary":
        return connecting_binary(table, sol, m.sensitivity_column, d).value
    if kind == "continuous":
        return connecting_continuous(table, sol, m.sensitivity_column, d).value
    return float("nan")


# --------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True, eq=False)
class SweepCell:
    delta: np.ndarray  # full K vector
    theta: np.ndarray | None
    status: str = "ok"
    error: str = ""
    ess_min: float = float("nan")
    min_pi: float = float("nan")
    max_w: float = float("nan")
    connecting: dict = field(default_factory=dict)  # mechanism name -> value
    ci_lower: np.ndarray | None = None
    ci_upper: np.ndarray | None = None

    @property
    def ok(self):
        return self.status == "ok"


@dataclass(frozen=True, eq=False)
class SweepResult:
    mechanisms: tuple[str, ...]
    axes: tuple[tuple[int, np.ndarray], ...]  # (mechanism index, sorted grid)
    coef_names: tuple[str, ...]
    cells: tuple[SweepCell, ...]  # canonical order: itertools.product over axes

    @property
    def shape(self):
        return tuple(len(g) for _, g in self.axes)

    @property
    def n_failed(self):
        return sum(not c.ok for c in self.cells)

    def cell(self, *values) -> SweepCell:
        pos = [int(np.flatnonzero(np.isclose(g, v, atol=1e-9))[0]) for (_, g), v in zip(self.axes, values)]
        return self.cells[int(np.ravel_multi_index(pos, self.shape))]

    def estimates(self, coef) -> np.ndarray:
        """Array of one coefficient shaped like the grid; NaN for failed cells."""
        j = self.coef_names.index(coef)
        vals = [c.theta[j] if c.ok else np.nan for c in self.cells]
        return np.asarray(vals, dtype=np.float64).reshape(self.shape)

    def is_anchor(self, cell: SweepCell) -> bool:
        return all(cell.delta[k] == 0.0 for k, _ in self.axes)

    # ---- CSV
    def schema(self) -> dict:
        s = {f"delta_{m}": ColumnSchema("continuous") for m in self.mechanisms}
        s["coef"] = ColumnSchema("categorical", self.coef_names, self.coef_names[0])
        for c in ("estimate", "ci_lo", "ci_hi", "ess_min", "min_pi", "max_w"):
            s[c] = ColumnSchema("continuous")
        for k, _ in self.axes:
            s[f"connecting_{self.mechanisms[k]}"] = ColumnSchema("continuous")
        s["status"] = ColumnSchema("categorical", ("ok", "failed"), "ok")
        s["mar_anchor"] = ColumnSchema("binary")
        return s

    def to_table(self) -> ColumnTable:
        schema = self.schema()
        cols = {name: [] for name in schema}
        for cell in self.cells:
            for j, coef in enumerate(self.coef_names):
                for k, m in enumerate(self.mechanisms):
                    cols[f"delta_{m}"].append(float(cell.delta[k]))
                cols["coef"].append(coef)
                cols["estimate"].append(cell.theta[j] if cell.ok else np.nan)
                cols["ci_lo"].append(cell.ci_lower[j] if cell.ci_lower is not None else np.nan)
                cols["ci_hi"].append(cell.ci_upper[j] if cell.ci_upper is not None else np.nan)
                cols["ess_min"].append(cell.ess_min)
                cols["min_pi"].append(cell.min_pi)
                cols["max_w"].append(cell.max_w)
                for k, _ in self.axes:
                    name = self.mechanisms[k]
                    cols[f"connecting_{name}"].append(cell.connecting.get(name, np.nan))
                cols["status"].append(cell.status)
                cols["mar_anchor"].append(1.0 if self.is_anchor(cell) else 0.0)
        return ColumnTable.from_arrays(cols, schema)

    def metadata(self) -> dict:
        return {
            "mechanisms": list(self.mechanisms),
            "axes": [{"mechanism": self.mechanisms[k], "grid": [float(v) for v in g]} for k, g in self.axes],
            "coefficients": list(self.coef_names),
            "note": "connecting quantities assume the distribution of covariates among R = 0 rows does not depend on delta",
        }


def write_sweep(result: SweepResult, path):
    """CSV plus ``<path>.schema.json`` carrying the column schema and the axes."""
    write_csv(result.to_table(), path)
    schema = result.schema()
    doc = {"columns": [s.to_dict(name) for name, s in schema.items()], "sweep": result.metadata()}
    with open(f"{path}.schema.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=False)
        fh.write("\n")


def read_sweep(path) -> SweepResult:
    from .tabular import parse_schema

    with open(f"{path}.schema.json", encoding="utf-8") as fh:
        doc = json.load(fh)
    table = read_csv(path, parse_schema(doc))
    meta = doc["sweep"]
    mechs = tuple(meta["mechanisms"])
    axes = tuple((mechs.index(a["mechanism"]), np.asarray(a["grid"], dtype=np.float64)) for a in meta["axes"])
    coefs = tuple(meta["coefficients"])
    p = len(coefs)
    n_cells = table.n_rows // p
    est = table["estimate"]
    cells = []
    for c in range(n_cells):
        r0 = c * p
        rows = slice(r0, r0 + p)
        delta = np.array([table[f"delta_{m}"].values[r0] for m in mechs])
        ok = table["status"].values[r0] == 0
        theta = est.values[rows].copy() if ok else None
        lo, hi = table["ci_lo"], table["ci_hi"]
        cells.append(
            SweepCell(
                delta=delta,
                theta=theta,
                status="ok" if ok else "failed",
                ess_min=float(table["ess_min"].values[r0]),
                min_pi=float(table["min_pi"].values[r0]),
                max_w=float(table["max_w"].values[r0]),
                connecting={
                    mechs[k]: float(table[f"connecting_{mechs[k]}"].values[r0])
                    for k, _ in axes
                    if table[f"connecting_{mechs[k]}"].mask[r0]
                },
                ci_lower=lo.values[rows].copy() if lo.mask[r0] else None,
                ci_upper=hi.values[rows].copy() if hi.mask[r0] else None,
            )
        )
    return SweepResult(mechs, axes, coefs, tuple(cells))


def _nan_to_missing(x):
    return float(x) if x is not None and np.isfinite(x) else float("nan")


def _run_cell(delta, table, spec, M, seed, ind, axes_k, per_cell_B, alpha, weight_cap):
    try:
        fit = run_blended(table, spec, delta, M=M, seed=seed, weight_cap=weight_cap, indicators=ind)
        conn = {}
        for k in axes_k:
            try:
                conn[spec.mechanisms[k].name] = connecting_for(table, spec, fit, k)
            except NumericalError:
                conn[spec.mechanisms[k].name] = float("nan")
        conn = {name: v for name, v in conn.items() if np.isfinite(v)}
        diags = list(fit.weight_diagnostics.values())
        lo = hi = None
        if per_cell_B:
            br = bootstrap_mi(table, spec, delta, B=per_cell_B, M=M, alpha=alpha, seed=seed,
                              weight_cap=weight_cap, point=fit)
            lo, hi = br.ci_lower, br.ci_upper
        return SweepCell(
            delta=np.asarray(delta, dtype=np.float64),
            theta=fit.theta_hat,
            ess_min=float(np.min(fit.ess)),
            min_pi=_nan_to_missing(min((d.min_pi for d in diags), default=None)),
            max_w=_nan_to_missing(max((d.max_w for d in diags), default=None)),
            connecting=conn,
            ci_lower=lo,
            ci_upper=hi,
        ), fit.coef_names
    except NumericalError as exc:
        return SweepCell(delta=np.asarray(delta, dtype=np.float64), theta=None, status="failed", error=str(exc)), None


def sweep_grid(table, spec: ModularizationSpec, axes: dict, M=10, seed=0, per_cell_B=0, alpha=0.05,
               threads=None, weight_cap=None, base_delta=None) -> SweepResult:
    """Evaluate the blended fit over the Cartesian product of ``axes``
    (mechanism -> grid). Every cell uses the same seed, so the anchor cell is
    bit-identical to ``run_blended`` at delta = 0 and a slice through the grid
    reproduces the lower-dimensional sweep. Failing cells are recorded with
    status "failed" and the sweep continues."""
    if not axes:
        raise SpecError("a sweep needs at least one axis")
    norm = []
    for key, grid in axes.items():
        k = spec.index(key)
        g = np.unique(np.asarray(grid, dtype=np.float64))
        if not np.any(g == 0.0):
            raise SpecError(f"grid for {spec.mechanisms[k].name} must include 0")
        if any(k == kk for kk, _ in norm):
            raise SpecError("each mechanism may appear on one axis only")
        norm.append((k, g))
    base = as_delta(spec, base_delta)
    for k, _ in norm:
        if base[k] != 0:
            raise SpecError("swept mechanisms must have zero base delta")
    # validate every delta value (decision mechanisms reject nonzero deltas)
    for k, g in norm:
        probe = base.copy()
        probe[k] = g[0] if g[0] != 0 else g[-1]
        as_delta(spec, probe)
    ind = derive_indicators(table, spec)
    deltas = []
    for combo in itertools.product(*(g for _, g in norm)):
        d = base.copy()
        for (k, _), v in zip(norm, combo):
            d[k] = v
        deltas.append(d)
    job = partial(_run_cell, table=table, spec=spec, M=M, seed=seed, ind=ind, axes_k=[k for k, _ in norm],
                  per_cell_B=per_cell_B, alpha=alpha, weight_cap=weight_cap)
    out = pmap(job, deltas, threads)
    names = next((n for _, n in out if n is not None), None)
    if names is None:
        raise NumericalError("every sweep cell failed")
    return SweepResult(tuple(spec.names), tuple(norm), tuple(names), tuple(c for c, _ in out))


def conditional_sweep(table, spec, k, grid=None, M=10, seed=0, **kw) -> SweepResult:
    """Vary delta_k over ``grid`` with every other delta held at 0."""
    k = spec.index(k)
    grid = default_grid(spec, k) if grid is None else grid
    return sweep_grid(table, spec, {k: grid}, M=M, seed=seed, **kw)


def two_way_sweep(table, spec, j, k, grid_j=None, grid_k=None, M=10, seed=0, **kw) -> SweepResult:
    j, k = spec.index(j), spec.index(k)
    if j == k:
        raise SpecError("two-way sweep needs two different mechanisms")
    grid_j = default_grid(spec, j) if grid_j is None else grid_j
    grid_k = default_grid(spec, k) if grid_k is None else grid_k
    return sweep_grid(table, spec, {j: grid_j, k: grid_k}, M=M, seed=seed, **kw)


def full_grid_size(spec, axes: dict) -> int:
    return int(np.prod([len(np.unique(g)) for g in axes.values()]))


def full_grid_sweep(table, spec, axes: dict, confirm_cells: int | None = None, **kw) -> SweepResult:
    """Sweep over more than two axes. Cost is multiplicative, so the caller
    must pass the exact cell count as ``confirm_cells``."""
    n = full_grid_size(spec, axes)
    if confirm_cells != n:
        raise SpecError(f"full grid has {n} cells; pass confirm_cells={n} to run it")
    return sweep_grid(table, spec, axes, **kw)


# --------------------------------------------------------------------------
# tipping point


@dataclass(frozen=True)
class TippingProbe:
    delta: float
    lower: float
    upper: float

    @property
    def significant(self):
        return self.lower > 0 or self.upper < 0

    @property
    def status(self) -> int:
        """+1 / -1 when the interval lies above / below 0, else 0. A jump
        from +1 to -1 passes through 0, so it also brackets a flip."""
        return 1 if self.lower > 0 else (-1 if self.upper < 0 else 0)


def _probe(table, spec, k, j, d, B, M, alpha, seed, threads, cache):
    key = round(float(d), 12)
    if key not in cache:
        delta = np.zeros(spec.K)
        delta[k] = d
        br = bootstrap_mi(table, spec, delta, B=B, M=M, alpha=alpha, seed=seed, threads=threads)
        cache[key] = TippingProbe(float(d), float(br.ci_lower[j]), float(br.ci_upper[j]))
    return cache[key]


def _crossing(a: TippingProbe, b: TippingProbe) -> float:
    """Linear interpolation of whichever interval bound changes sign."""
    for fa, fb in ((a.lower, b.lower), (a.upper, b.upper)):
        if (fa > 0) != (fb > 0) and fa != fb:
            return a.delta + (b.delta - a.delta) * fa / (fa - fb)
    return b.delta


def tipping_point(table, spec: ModularizationSpec, k, coefficient, search_interval=(-2.0, 2.0), B=300, M=10,
                  seed=0, alpha=0.05, resolution=TIPPING_RESOLUTION, threads=None, trace=None):
    """Smallest |delta_k| at which the significance of ``coefficient`` flips.

    Significance means 0 lies outside the percentile Bootstrap-MI interval;
    an interval that jumps from one side of 0 to the other also counts as a
    flip. All probes share one seed. Each side of 0 whose endpoint or half-way probe
    disagrees with the MAR status is bisected down to ``resolution``; the
    crossing of the interval bound is then interpolated linearly and snapped
    to the resolution grid. Returns None when no probe changes status.
    """
    k = spec.index(k)
    lo, hi = (float(v) for v in search_interval)
    if not lo <= 0 <= hi:
        raise SpecError("search interval must contain 0")
    cache: dict = {}
    j = None
    base_fit = run_blended(table, spec, np.zeros(spec.K), M=M, seed=seed)
    if coefficient not in base_fit.coef_names:
        raise SpecError(f"unknown coefficient {coefficient!r}")
    j = base_fit.coef_names.index(coefficient)
    probe = partial(_probe, table, spec, k, j, B=B, M=M, alpha=alpha, seed=seed, threads=threads, cache=cache)
    p0 = probe(0.0)
    found = []
    for end in (lo, hi):
        if end == 0:
            continue
        inner, outer = p0, None
        for d in (end / 2, end):
            p = probe(d)
            if p.status != p0.status:
                outer = p
                break
            inner = p
        if outer is None:
            continue
        while abs(outer.delta - inner.delta) > resolution:
            mid = probe(0.5 * (inner.delta + outer.delta))
            if mid.status == p0.status:
                inner = mid
            else:
                outer = mid
        x = _crossing(inner, outer)
        x = round(x / resolution) * resolution
        found.append(round(x, 10) + 0.0)
    if trace is not None:
        trace.extend(sorted(cache.values(), key=lambda p: p.delta))
    if not found:
        return None
    return min(found, key=lambda v: (abs(v), v))
