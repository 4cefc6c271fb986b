"""Blended analysis: sub-mechanisms processed in order, each by weighting
or by delta-shifted multiple imputation, then a weighted linear analysis
model fitted per imputation and averaged."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import glm, mnar, survival
from .errors import EngineError, MissingValueError, NumericalError, SeparationError, SpecError
from .tabular import (
    Column,
    ColumnTable,
    Formula,
    available,
    derive_indicators,
    design_matrix,
    parse_formula,
    response_vector,
)

METHODS = ("IPW", "MI", "COX_IPW")


@dataclass(frozen=True)
class Mechanism:
    """One sub-mechanism.

    ``variables`` is empty for decision mechanisms, which read their 0/1
    status from ``indicator``. IPW and COX_IPW use ``model`` (right-hand side
    only); MI uses ``models``: per variable, a fallback chain of formulas. A
    subject is handled by the first formula whose predictors it has.
    """

    name: str
    method: str
    variables: tuple[str, ...] = ()
    indicator: str | None = None
    model: Formula | None = None
    models: tuple[tuple[str, tuple[Formula, ...]], ...] = ()
    sensitivity_column: str | None = None
    scale: float = 1.0
    time: str | None = None
    event: str | None = None
    horizon: float | None = None

    @property
    def is_decision(self):
        return not self.variables

    @property
    def letter(self):
        return "M" if self.method == "MI" else "I"

    def chain(self, var) -> tuple[Formula, ...]:
        return dict(self.models)[var]

    def validate(self):
        if self.method not in METHODS:
            raise SpecError(f"{self.name}: unknown method {self.method!r}")
        if self.is_decision:
            if self.method == "MI":
                raise SpecError(f"{self.name}: decision mechanisms can only be weighted")
            if not self.indicator:
                raise SpecError(f"{self.name}: decision mechanism needs an indicator column")
        if self.method in ("IPW", "COX_IPW") and self.model is None:
            raise SpecError(f"{self.name}: {self.method} needs a selection model")
        if self.method == "COX_IPW":
            if not (self.time and self.event and self.horizon is not None):
                raise SpecError(f"{self.name}: COX_IPW needs time, event and horizon")
            if self.model.intercept and self.model.terms:
                # Cox models carry no intercept; drop it silently
                object.__setattr__(self, "model", Formula(None, self.model.terms, False))
        if self.method == "MI":
            have = {v for v, _ in self.models}
            missing = [v for v in self.variables if v not in have]
            if missing:
                raise SpecError(f"{self.name}: no imputation model for {missing}")
            for v, chain in self.models:
                for f in chain:
                    if f.response != v:
                        raise SpecError(f"{self.name}: model {f} does not have response {v}")
        if self.method == "IPW" and self.sensitivity_column is not None:
            if self.sensitivity_column not in self.variables:
                raise SpecError(
                    f"{self.name}: sensitivity column {self.sensitivity_column!r} is not one of its variables"
                )
        if self.scale <= 0:
            raise SpecError(f"{self.name}: sensitivity scale must be positive")


@dataclass(frozen=True)
class DerivedColumn:
    """Column computed on the imputed overlay before the analysis fit."""

    name: str
    op: str
    args: tuple[str, ...]

    def compute(self, table: ColumnTable) -> Column:
        if self.op == "pct_change":
            base, follow = (table[a] for a in self.args)
            mask = base.mask & follow.mask
            with np.errstate(divide="ignore", invalid="ignore"):
                vals = np.where(mask, 100.0 * (follow.values - base.values) / base.values, np.nan)
            if not np.all(np.isfinite(vals[mask])):
                raise NumericalError(f"derived column {self.name}: division by zero")
            return Column("continuous", vals, mask)
        if self.op == "difference":
            a, b = (table[x] for x in self.args)
            mask = a.mask & b.mask
            return Column("continuous", np.where(mask, a.values - b.values, np.nan), mask)
        raise SpecError(f"unknown derived-column op {self.op!r}")


@dataclass(frozen=True)
class ModularizationSpec:
    mechanisms: tuple[Mechanism, ...]
    analysis: Formula
    derived: tuple[DerivedColumn, ...] = ()
    # every sensitivity function replaced by zero (the MAR analysis)
    zero_sensitivity: bool = False
    source: dict | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        names = [m.name for m in self.mechanisms]
        if len(set(names)) != len(names):
            raise SpecError("mechanism names must be unique")
        if self.analysis.response is None:
            raise SpecError("analysis formula needs a response")
        for m in self.mechanisms:
            m.validate()

    @property
    def K(self):
        return len(self.mechanisms)

    @property
    def assignment(self) -> str:
        return "".join(m.letter for m in self.mechanisms)

    @property
    def names(self):
        return [m.name for m in self.mechanisms]

    def index(self, key) -> int:
        if isinstance(key, (int, np.integer)):
            if not 0 <= key < self.K:
                raise SpecError(f"mechanism index {key} out of range")
            return int(key)
        try:
            return self.names.index(key)
        except ValueError:
            raise SpecError(f"no mechanism named {key!r}") from None

    def without_sensitivity(self) -> "ModularizationSpec":
        """Same spec with every sensitivity function replaced by zero."""
        return replace(self, zero_sensitivity=True)

    def sensitivity(self, k, delta) -> mnar.SensitivityFunction:
        m = self.mechanisms[k]
        if self.zero_sensitivity:
            return mnar.SensitivityFunction("none", delta)
        if m.method == "MI":
            return mnar.SensitivityFunction("mi_shift", delta)
        if m.method == "IPW" and m.sensitivity_column is not None:
            return mnar.SensitivityFunction("ipw_linear", delta, m.scale)
        return mnar.SensitivityFunction("none", delta)

    def with_assignment(self, code: str) -> "ModularizationSpec":
        """Switch each mechanism between weighting and imputation."""
        if self.source is None:
            raise SpecError("spec was not built from a dict; cannot switch assignment")
        spec = _build_spec(self.source, assignment=code)
        return replace(spec, zero_sensitivity=self.zero_sensitivity)


def _formula(text, where):
    try:
        return parse_formula(text)
    except Exception as exc:
        raise SpecError(f"{where}: {exc}") from None


def _build_spec(obj: Mapping, assignment: str | None = None) -> ModularizationSpec:
    mechs_raw = obj.get("mechanisms")
    if not isinstance(mechs_raw, list) or not mechs_raw:
        raise SpecError("spec needs a non-empty 'mechanisms' list")
    code = assignment if assignment is not None else obj.get("assignment")
    if code is not None and len(code) != len(mechs_raw):
        raise SpecError(f"assignment {code!r} has length {len(code)}, expected {len(mechs_raw)}")
    if code is not None and set(code) - {"I", "M"}:
        raise SpecError(f"assignment {code!r} may only use letters I and M")
    mechs = []
    for k, m in enumerate(mechs_raw):
        name = m.get("name", f"R{k + 1}")
        method = m.get("method")
        if code is not None:
            letter = code[k]
            if letter == "M":
                if method not in (None, "MI") and "models" not in m:
                    raise SpecError(f"{name}: assignment asks for MI but no imputation models are given")
                method = "MI"
            else:
                if method == "MI" or method is None:
                    method = "COX_IPW" if m.get("time") else "IPW"
        if method is None:
            raise SpecError(f"{name}: method not given and no assignment code")
        sens = m.get("sensitivity") or {}
        models = []
        for var, chain in (m.get("models") or {}).items():
            if isinstance(chain, str):
                chain = [chain]
            models.append((var, tuple(_formula(t, f"{name}.models.{var}") for t in chain)))
        mechs.append(
            Mechanism(
                name=name,
                method=method,
                variables=tuple(m.get("variables", ())),
                indicator=m.get("indicator"),
                model=_formula(m["model"], f"{name}.model") if m.get("model") else None,
                models=tuple(models),
                sensitivity_column=sens.get("column"),
                scale=float(sens.get("scale", 1.0)),
                time=m.get("time"),
                event=m.get("event"),
                horizon=None if m.get("horizon") is None else float(m["horizon"]),
            )
        )
    derived = tuple(
        DerivedColumn(d["name"], d["op"], tuple(d["args"])) for d in obj.get("derived", ())
    )
    src = dict(obj)
    if code is not None:
        src["assignment"] = code
    return ModularizationSpec(tuple(mechs), _formula(obj["analysis"], "analysis"), derived, source=src)


def load_spec(obj) -> ModularizationSpec:
    """Spec from a JSON-like dict or a path to a JSON file."""
    if not isinstance(obj, Mapping):
        with open(obj, encoding="utf-8") as fh:
            obj = json.load(fh)
    if "analysis" not in obj:
        raise SpecError("spec needs an 'analysis' formula")
    return _build_spec(obj)


def as_delta(spec: ModularizationSpec, delta) -> np.ndarray:
    """DeltaVector as a float array of length K; accepts None, a sequence,
    or a mapping from mechanism name to value."""
    d = np.zeros(spec.K)
    if delta is None:
        return d
    if isinstance(delta, Mapping):
        for key, v in delta.items():
            d[spec.index(key)] = float(v)
    else:
        arr = np.asarray(delta, dtype=np.float64).ravel()
        if arr.size != spec.K:
            raise SpecError(f"delta has {arr.size} entries, expected {spec.K}")
        d[:] = arr
    for k, m in enumerate(spec.mechanisms):
        if d[k] != 0.0 and (m.is_decision or m.method == "COX_IPW"):
            raise SpecError(f"{m.name}: decision mechanisms take no sensitivity parameter")
        if d[k] != 0.0 and m.method == "IPW" and m.sensitivity_column is None:
            raise SpecError(f"{m.name}: nonzero delta but no sensitivity column")
    return d


# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightDiagnostics:
    min_pi: float
    max_w: float
    ess: float


@dataclass(frozen=True, eq=False)
class BlendedFit:
    theta_per_imputation: np.ndarray  # M x p
    theta_hat: np.ndarray
    coef_names: tuple[str, ...]
    delta: np.ndarray
    weight_diagnostics: dict  # mechanism name -> WeightDiagnostics (worst case over imputations)
    ess: np.ndarray  # final-weight effective sample size per imputation
    analysis_n: int
    imputed_means: dict = field(default_factory=dict)  # (mechanism, variable) -> mean imputed value
    selections: dict = field(default_factory=dict)  # mechanism name -> SelectionSolution (imputation 0)
    warnings: tuple[str, ...] = ()

    @property
    def M(self):
        return self.theta_per_imputation.shape[0]

    def coefficient(self, name):
        return float(self.theta_hat[self.coef_names.index(name)])


def ess(w):
    w = np.asarray(w, dtype=np.float64)
    return float(w.sum() ** 2 / np.sum(w * w)) if w.size else 0.0


def fit_analysis(table: ColumnTable, formula, weights=None, rows=None):
    """Weighted least squares coefficients of ``formula`` on ``rows``.

    Returns (coefficients, names)."""
    formula = parse_formula(formula)
    X, names = design_matrix(table, formula, rows)
    y = response_vector(table, formula, rows)
    if X.shape[0] == 0:
        raise NumericalError("no rows enter the analysis model")
    w = None if weights is None else np.asarray(weights, dtype=np.float64)
    if w is not None and np.any(w <= 0):
        raise ValueError("analysis weights must be positive")
    fit = glm.fit_linear(X, y, w, names)
    return fit.coefficients, tuple(names)


def _flatten(keys) -> list:
    # nested seeds such as ((seed, r, 2), b, 1) name the same path as the flat tuple
    out = []
    for k in keys:
        out.extend(_flatten(k) if isinstance(k, (tuple, list)) else [k])
    return out


def stream(seed, *keys) -> np.random.Generator:
    """Independent generator for (seed, keys...) via SeedSequence spawning keys."""
    if isinstance(seed, np.random.SeedSequence):
        entropy = seed.entropy
        keys = (*seed.spawn_key, *keys)
    elif isinstance(seed, (tuple, list)):
        flat = _flatten(seed)
        entropy = int(flat[0])
        keys = (*flat[1:], *keys)
    else:
        entropy = int(seed)
    return np.random.default_rng(np.random.SeedSequence(entropy, spawn_key=tuple(int(k) for k in keys)))


def _fit_imputation_model(table, formula, rows, col: Column):
    X, names = design_matrix(table, formula, rows)
    if col.kind == "continuous":
        return glm.fit_linear(X, response_vector(table, formula, rows), names=names)
    # separated training data fall back to a fit with pseudo-observations,
    # which stays finite and drawable; overlapping data use the plain MLE
    if col.kind == "binary":
        y = response_vector(table, formula, rows)
        try:
            return glm.fit_logistic(X, y, names=names)
        except SeparationError:
            Xa, ya, wa = glm.augment(X, y, (0.0, 1.0))
            return glm.fit_logistic(Xa, ya, wa, names=names)
    base = col.baseline_code
    cats = [base] + [c for c in range(len(col.levels)) if c != base]
    y = col.values[rows]
    try:
        return glm.fit_multinomial(X, y, cats, names=names)
    except SeparationError:
        Xa, ya, wa = glm.augment(X, y, cats)
        return glm.fit_multinomial(Xa, ya, cats, wa, names=names)


def _impute(draw, X, delta, kind, rng):
    if kind == "continuous":
        return mnar.impute_continuous(draw, X, delta, rng)
    if kind == "binary":
        return mnar.impute_binary(draw, X, delta, rng)
    return mnar.impute_categorical(draw, X, delta, rng)


def _impute_variable(overlay: ColumnTable, mech: Mechanism, var, active, Rk, delta, rng):
    """Impute ``var`` on active rows where it is masked; return new overlay
    and the imputed values."""
    col = overlay[var]
    chain = mech.chain(var)
    train_rows = active & Rk
    target = active & ~col.mask
    if not target.any():
        return overlay, np.empty(0)
    # route every row to the first formula whose predictors it has
    route = np.full(overlay.n_rows, -1)
    for j, f in enumerate(chain):
        ok = available(overlay, f.variables) & (route < 0)
        route[ok] = j
    stuck = target & (route < 0)
    if stuck.any():
        i = int(np.flatnonzero(stuck)[0])
        raise MissingValueError(chain[-1].variables[0] if chain[-1].variables else var, i)
    values = col.values.copy()
    mask = col.mask.copy()
    for j, f in enumerate(chain):
        imp = target & (route == j)
        if not imp.any():
            continue
        tr = train_rows & (route == j)
        fit = _fit_imputation_model(overlay, f, tr, col)
        draw = glm.posterior_draw(fit, rng)
        X, _ = design_matrix(overlay, f, imp)
        values[imp] = _impute(draw, X, delta, col.kind, rng)
        mask[imp] = True
    filled = ~col.mask & mask
    return overlay.with_column(var, col.replace(values, mask)), values[filled]


def _one_imputation(table, spec: ModularizationSpec, ind, delta, rng, weight_cap=None):
    n = table.n_rows
    overlay = table
    active = np.ones(n, dtype=bool)
    w = np.ones(n)
    diags = {}
    imputed = {}
    sels = {}
    notes = []
    for k, mech in enumerate(spec.mechanisms):
        Rk = ind.R[k]
        try:
            if mech.method == "IPW":
                X, _ = design_matrix(overlay, mech.model, active)
                xi = spec.sensitivity(k, delta[k])
                D = None
                if xi.kind != "none":
                    dcol = overlay[mech.sensitivity_column]
                    D = dcol.values[active]
                sol = mnar.solve_selection(X, D, Rk[active], xi, rows=np.flatnonzero(active))
                notes.extend(f"{mech.name}: {m}" for m in sol.warnings)
                wk = sol.weights
                diags[mech.name] = WeightDiagnostics(sol.min_pi, sol.max_weight, ess(wk))
                sels[mech.name] = sol
                new_active = active & Rk
                w[new_active] *= wk
                active = new_active
            elif mech.method == "COX_IPW":
                X, names = design_matrix(overlay, mech.model, active)
                fit = survival.fit_cox(
                    X, overlay[mech.time].values[active], overlay[mech.event].values[active], names
                )
                new_active = active & Rk
                Xk, _ = design_matrix(overlay, mech.model, new_active)
                wk = survival.enrollment_weight(fit, Xk, mech.horizon)
                diags[mech.name] = WeightDiagnostics(float(1.0 / wk.max()), float(wk.max()), ess(wk))
                w[new_active] *= wk
                active = new_active
            else:
                xi = spec.sensitivity(k, delta[k])
                shift = xi.delta if xi.kind == "mi_shift" else 0.0
                for var in mech.variables:
                    overlay, vals = _impute_variable(overlay, mech, var, active, Rk, shift, rng)
                    imputed[(mech.name, var)] = vals
        except (NumericalError, MissingValueError, ValueError) as exc:
            raise EngineError(str(exc), mechanism=mech.name, cause=exc) from exc
    if not active.any():
        raise EngineError("no rows enter the analysis model", mechanism="analysis")
    for d in spec.derived:
        overlay = overlay.with_column(d.name, d.compute(overlay))
    if weight_cap is not None:
        w = np.minimum(w, weight_cap)
    try:
        theta, names = fit_analysis(overlay, spec.analysis, w[active], active)
    except (NumericalError, MissingValueError, ValueError) as exc:
        raise EngineError(str(exc), mechanism="analysis", cause=exc) from exc
    return theta, names, diags, ess(w[active]), int(active.sum()), imputed, sels, notes


def run_blended(table: ColumnTable, spec: ModularizationSpec, delta=None, M=10, seed=0,
                weight_cap=None, indicators=None) -> BlendedFit:
    """Blended estimate of the analysis coefficients at sensitivity vector ``delta``.

    Imputation ``l`` draws from ``stream(seed, l)``; without MI mechanisms
    no randomness is used and a single pass is replicated M times.
    """
    if M < 1:
        raise SpecError("M must be at least 1")
    d = as_delta(spec, delta)
    ind = indicators if indicators is not None else derive_indicators(table, spec)
    has_mi = any(m.method == "MI" for m in spec.mechanisms)
    passes = M if has_mi else 1
    thetas = []
    diag_all: dict[str, list] = {}
    ess_all = []
    imputed_all: dict = {}
    sels0 = {}
    notes = []
    names = ()
    analysis_n = 0
    for l in range(passes):
        rng = stream(seed, l)
        try:
            theta, names, diags, e, analysis_n, imputed, sels, nt = _one_imputation(
                table, spec, ind, d, rng, weight_cap
            )
        except EngineError as exc:
            raise EngineError(str(exc.cause or exc), imputation=l, mechanism=exc.mechanism, cause=exc.cause) from exc
        thetas.append(theta)
        ess_all.append(e)
        for key, v in diags.items():
            diag_all.setdefault(key, []).append(v)
        for key, v in imputed.items():
            if table[key[1]].kind == "categorical":
                continue
            imputed_all.setdefault(key, []).append(float(v.mean()) if v.size else float("nan"))
        if l == 0:
            sels0 = sels
        notes.extend(nt)
    T = np.vstack(thetas)
    if passes < M:
        T = np.repeat(T, M, axis=0)
        ess_all = ess_all * M
    diagnostics = {
        key: WeightDiagnostics(min(v.min_pi for v in vs), max(v.max_w for v in vs), float(np.mean([v.ess for v in vs])))
        for key, vs in diag_all.items()
    }
    return BlendedFit(
        theta_per_imputation=T,
        theta_hat=T.mean(axis=0),
        coef_names=tuple(names),
        delta=d,
        weight_diagnostics=diagnostics,
        ess=np.asarray(ess_all),
        analysis_n=analysis_n,
        imputed_means={key: float(np.mean(v)) for key, v in imputed_all.items()},
        selections=sels0,
        warnings=tuple(dict.fromkeys(notes)),
    )
