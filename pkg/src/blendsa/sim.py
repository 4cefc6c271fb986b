"""Simulation scenarios with a known analysis-model truth, the replication
harness that measures relative bias and coverage, and a synthetic
five-mechanism cohort generator (baseline and follow-up comorbidity and BMI,
with disenrollment in between)."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from functools import partial
from importlib import resources

import numpy as np
from scipy.special import expit

from ._parallel import pmap
from .engine import load_spec, run_blended, stream
from .errors import NumericalError, SpecError
from .inference import bootstrap_mi
from .tabular import ColumnSchema, ColumnTable, derive_indicators

HORIZON = 2.0 / 3.0
ASSIGNMENTS = ("III", "IMI", "IIM", "IMM")
# generator MNAR strengths (delta_2, delta_3) per scenario
SCENARIO_GENERATOR = {1: (0.5, 0.0), 2: (0.0, 0.5)}
# which analysis mechanism carries the swept delta
SCENARIO_AXIS = {1: 1, 2: 2}

SCENARIO_SCHEMA = {
    "X": ColumnSchema("binary"),
    "Z1": ColumnSchema("binary"),
    "Z2": ColumnSchema("binary"),
    "Y": ColumnSchema("continuous"),
    "T": ColumnSchema("continuous"),
    "T_event": ColumnSchema("binary"),
    "R1": ColumnSchema("binary"),
}
LATENT_SCHEMA = {
    "Z2": ColumnSchema("binary"),
    "Y": ColumnSchema("continuous"),
    "T": ColumnSchema("continuous"),
    "R1": ColumnSchema("binary"),
    "R2": ColumnSchema("binary"),
    "R3": ColumnSchema("binary"),
}


@dataclass(frozen=True)
class ScenarioConfig:
    n: int = 1000
    delta_gen: tuple[float, float] = (0.0, 0.0)
    seed: int = 0
    horizon: float = HORIZON
    noise_sd: float = 0.3

    def __post_init__(self):
        if self.n < 1:
            raise SpecError("n must be at least 1")


def _z2_prob(x, z1):
    return expit(-1.15 - 0.35 * x + 0.6 * z1 + 0.4 * x * z1)


def _y_mean(x, z2):
    return 0.45 - 0.45 * x + 1.40 * z2 - 1.8 * x * z2


def complete_data(n, rng, noise_sd=0.3):
    """X, Z1, Z2, Y before any masking."""
    z1 = (rng.random(n) < expit(-0.5)).astype(np.float64)
    x = (rng.random(n) < expit(-0.5 - 0.25 * z1)).astype(np.float64)
    z2 = (rng.random(n) < _z2_prob(x, z1)).astype(np.float64)
    y = _y_mean(x, z2) + noise_sd * rng.standard_normal(n)
    return x, z1, z2, y


def generate_scenario(config: ScenarioConfig, rng=None):
    """Returns (table, latent). ``latent`` maps Z2, Y, T, R1, R2, R3 to the
    full arrays, including values hidden in the table.

    Z2 is observed when enrolled and R2 = 1; Y is observed when enrolled and
    R3 = 1, whether or not Z2 was seen.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    n = config.n
    d2, d3 = config.delta_gen
    x, z1, z2, y = complete_data(n, rng, config.noise_sd)
    shape = np.exp(1.25 + 0.5 * x - 0.55 * z1 - 0.2 * x * z1)
    t = rng.weibull(shape)  # survival exp(-t^shape), scale 1
    r1 = t > config.horizon
    r2 = rng.random(n) < expit(1.20 - 0.70 * x + 0.65 * z1 - 0.55 * x * z1 + d2 * z2)
    r3 = rng.random(n) < expit(0.45 + 0.35 * x - 0.70 * z2 - 0.65 * x * z2 + d3 * y)
    r2 &= r1
    r3 &= r1
    table = ColumnTable.from_arrays(
        {
            "X": x,
            "Z1": z1,
            "Z2": np.where(r2, z2, np.nan),
            "Y": np.where(r3, y, np.nan),
            "T": t,
            "T_event": np.ones(n),
            "R1": r1.astype(np.float64),
        },
        SCENARIO_SCHEMA,
    )
    latent = {"Z2": z2, "Y": y, "T": t, "R1": r1, "R2": r2, "R3": r3}
    return table, latent


def latent_table(latent) -> ColumnTable:
    return ColumnTable.from_arrays(
        {k: np.asarray(latent[k], dtype=np.float64) for k in LATENT_SCHEMA}, LATENT_SCHEMA
    )


def analytic_beta() -> np.ndarray:
    """Exact coefficients of Y ~ X + Z1 + X:Z1 under the complete-data model.

    The model is saturated in (X, Z1), so the population least-squares fit
    reproduces the four cell means E[Y | X, Z1].
    """
    m = {}
    for x in (0.0, 1.0):
        for z1 in (0.0, 1.0):
            p = _z2_prob(x, z1)
            m[x, z1] = (1 - p) * _y_mean(x, 0.0) + p * _y_mean(x, 1.0)
    b0 = m[0, 0]
    b1 = m[1, 0] - m[0, 0]
    b2 = m[0, 1] - m[0, 0]
    b3 = m[1, 1] - m[1, 0] - m[0, 1] + m[0, 0]
    return np.array([b0, b1, b2, b3])


REFERENCE_BETA = analytic_beta()
COEF_NAMES = ("(Intercept)", "X", "Z1", "X:Z1")


def approximate_true_beta(n_large=10**7, rng=None, noise_sd=0.3, chunk=10**6) -> np.ndarray:
    """Monte Carlo OLS of Y on (1, X, Z1, X*Z1) from complete data,
    accumulated in chunks to bound memory."""
    if n_large < 1:
        raise ValueError("n_large must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    xtx = np.zeros((4, 4))
    xty = np.zeros(4)
    left = int(n_large)
    while left > 0:
        m = min(chunk, left)
        x, z1, _, y = complete_data(m, rng, noise_sd)
        X = np.column_stack([np.ones(m), x, z1, x * z1])
        xtx += X.T @ X
        xty += X.T @ y
        left -= m
    return np.linalg.solve(xtx, xty)


SCENARIO_SPEC = {
    "mechanisms": [
        {
            "name": "R1",
            "method": "COX_IPW",
            "variables": [],
            "indicator": "R1",
            "time": "T",
            "event": "T_event",
            "horizon": HORIZON,
            "model": "~ X + Z1 + X:Z1 - 1",
        },
        {
            "name": "R2",
            "variables": ["Z2"],
            "model": "~ X + Z1 + X:Z1",
            "sensitivity": {"column": "Z2", "scale": 1.0},
            "models": {"Z2": ["Z2 ~ X + Z1 + X:Z1 + Y + X:Y", "Z2 ~ X + Z1 + X:Z1"]},
        },
        {
            "name": "R3",
            "variables": ["Y"],
            "model": "~ X + Z2 + X:Z2",
            "sensitivity": {"column": "Y", "scale": 1.0},
            "models": {"Y": ["Y ~ X + Z2 + X:Z2"]},
        },
    ],
    "analysis": "Y ~ X + Z1 + X:Z1",
}


def scenario_spec(assignment="III", horizon=HORIZON):
    if assignment not in ASSIGNMENTS:
        raise SpecError(f"assignment must be one of {ASSIGNMENTS}, got {assignment!r}")
    obj = copy.deepcopy(SCENARIO_SPEC)
    obj["mechanisms"][0]["horizon"] = horizon
    obj["assignment"] = assignment
    return load_spec(obj)


def analysis_delta(scenario, d) -> np.ndarray:
    out = np.zeros(3)
    out[SCENARIO_AXIS[scenario]] = d
    return out


@dataclass(frozen=True, eq=False)
class BiasReport:
    delta: float
    coef_names: tuple[str, ...]
    pct_bias: np.ndarray  # mean relative bias, percent
    mc_se: np.ndarray  # Monte Carlo s.e. of pct_bias
    coverage: np.ndarray | None
    n_reps: int
    n_ok: int

    @property
    def n_failed(self):
        return self.n_reps - self.n_ok


def replicate_seeds(seed, r):
    """(data seed, analysis seed, bootstrap seed) for replicate ``r``."""
    return (seed, r, 0), (seed, r, 1), (seed, r, 2)


def _replicate(r, scenario, assignment, deltas, n, M, seed, coverage_B, coverage_M):
    data_seed, fit_seed, boot_seed = replicate_seeds(seed, r)
    cfg = ScenarioConfig(n=n, delta_gen=SCENARIO_GENERATOR[scenario], seed=seed)
    table, _ = generate_scenario(cfg, stream(*data_seed))
    spec = scenario_spec(assignment)
    ind = derive_indicators(table, spec)
    est = np.full((len(deltas), 4), np.nan)
    cover = np.full((len(deltas), 4), np.nan)
    for j, d in enumerate(deltas):
        dv = analysis_delta(scenario, d)
        try:
            fit = run_blended(table, spec, dv, M=M, seed=fit_seed, indicators=ind)
        except NumericalError:
            continue
        est[j] = fit.theta_hat
        if coverage_B:
            try:
                br = bootstrap_mi(table, spec, dv, B=coverage_B, M=coverage_M, seed=boot_seed, point=fit)
            except NumericalError:
                continue
            cover[j] = (br.ci_lower <= REFERENCE_BETA) & (REFERENCE_BETA <= br.ci_upper)
    return est, cover


def run_scenario(scenario, assignment, deltas, n=1000, n_reps=200, M=10, seed=0,
                 coverage_B=0, coverage_M=None, threads=None) -> list[BiasReport]:
    """Relative bias of the blended estimator over replicated data sets.

    Each replicate's data set is analysed at every delta with the same
    analysis seed, so the curve over delta is smooth within a replicate.
    """
    if scenario not in SCENARIO_GENERATOR:
        raise SpecError(f"scenario must be 1 or 2, got {scenario!r}")
    if assignment not in ASSIGNMENTS:
        raise SpecError(f"assignment must be one of {ASSIGNMENTS}, got {assignment!r}")
    deltas = [float(d) for d in deltas]
    job = partial(
        _replicate, scenario=scenario, assignment=assignment, deltas=deltas, n=n, M=M, seed=seed,
        coverage_B=coverage_B, coverage_M=coverage_M or M,
    )
    results = pmap(job, range(n_reps), threads)
    est = np.stack([r[0] for r in results])  # reps x deltas x 4
    cov = np.stack([r[1] for r in results])
    scale = np.abs(REFERENCE_BETA)
    reports = []
    for j, d in enumerate(deltas):
        ok = np.all(np.isfinite(est[:, j]), axis=1)
        k = int(ok.sum())
        rel = 100.0 * (est[ok, j] - REFERENCE_BETA) / scale
        mean = np.array([math.fsum(c) / k for c in rel.T]) if k else np.full(4, np.nan)
        se = rel.std(axis=0, ddof=1) / np.sqrt(k) if k > 1 else np.full(4, np.nan)
        coverage = None
        if coverage_B:
            c = cov[:, j]
            okc = np.all(np.isfinite(c), axis=1)
            coverage = c[okc].mean(axis=0) if okc.any() else np.full(4, np.nan)
        reports.append(BiasReport(d, COEF_NAMES, mean, se, coverage, n_reps, k))
    return reports


BIAS_SCHEMA = {
    "delta": ColumnSchema("continuous"),
    "coef": ColumnSchema("categorical", COEF_NAMES, COEF_NAMES[0]),
    "pct_bias": ColumnSchema("continuous"),
    "mc_se": ColumnSchema("continuous"),
    "coverage": ColumnSchema("continuous"),
    "n_ok": ColumnSchema("continuous"),
}


def bias_table(reports) -> ColumnTable:
    """Long format: one row per (delta, coefficient)."""
    cols = {k: [] for k in BIAS_SCHEMA}
    for rep in reports:
        for i, name in enumerate(rep.coef_names):
            cols["delta"].append(rep.delta)
            cols["coef"].append(name)
            cols["pct_bias"].append(rep.pct_bias[i])
            cols["mc_se"].append(rep.mc_se[i])
            cols["coverage"].append(np.nan if rep.coverage is None else rep.coverage[i])
            cols["n_ok"].append(float(rep.n_ok))
    return ColumnTable.from_arrays(cols, BIAS_SCHEMA)


# --------------------------------------------------------------------------
# Synthetic five-mechanism cohort


def _data_file(name):
    return json.loads(resources.files("blendsa").joinpath("data", name).read_text(encoding="utf-8"))


def durable_like_config():
    return _data_file("durable_like.json")


def durable_like_spec(assignment="IMIIM"):
    obj = _data_file("durable_like_spec.json")
    obj["assignment"] = assignment
    return load_spec(obj)


def _lin(coefs: dict, env: dict, n):
    out = np.full(n, float(coefs.get("const", 0.0)))
    for term, b in coefs.items():
        if term == "const":
            continue
        v = np.ones(n)
        for f in term.split(":"):
            v = v * env[f]
        out += b * v
    return out


def generate_durable_like(n, seed, config=None):
    """Synthetic cohort with five sub-mechanisms.

    R1 baseline CKD/CCS observed, R2 baseline BMI observed, R3 enrolled past
    the follow-up horizon (decision), R4 follow-up CKD/CCS observed, R5
    follow-up BMI observed. Returns (table, latent)."""
    cfg = config or durable_like_config()
    g = cfg["generator"]
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    env = {}
    env["RYGB"] = (rng.random(n) < g["p_rygb"]).astype(float)
    env["AGE"] = rng.standard_normal(n)
    env["FEMALE"] = (rng.random(n) < g["p_female"]).astype(float)
    env["CKD0"] = (rng.random(n) < expit(_lin(g["ckd0"], env, n))).astype(float)
    levels = cfg["ccs_levels"]

    def draw_ccs(spec):
        eta = np.column_stack([np.zeros(n)] + [_lin(spec[lv], env, n) for lv in levels[1:]])
        p = np.exp(eta - eta.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        u = rng.random(n)
        return (u[:, None] >= np.cumsum(p, axis=1)).sum(axis=1).clip(0, len(levels) - 1)

    env["CCS0"] = draw_ccs(g["ccs0"])
    env["CCS0_any"] = (env["CCS0"] > 0).astype(float)
    env["BMI0"] = _lin(g["bmi0"], env, n) + g["bmi0_sd"] * rng.standard_normal(n)
    env["BMI0c"] = env["BMI0"] - g["bmi_center"]
    rate = np.exp(_lin(g["disenroll"], env, n))
    t_raw = rng.exponential(1.0 / rate)
    admin = g["admin_censor"]
    time = np.minimum(t_raw, admin)
    event = (t_raw < admin).astype(float)
    enrolled = time > g["horizon"]
    env["CKD5"] = (rng.random(n) < expit(_lin(g["ckd5"], env, n))).astype(float)
    env["CCS5"] = draw_ccs(g["ccs5"])
    pc5 = _lin(g["pc5"], env, n) + g["pc5_sd"] * rng.standard_normal(n)
    env["BMI5"] = env["BMI0"] * (1 + pc5 / 100.0)
    env["BMI5c"] = env["BMI5"] - g["bmi_center"]
    m = g["missing"]
    r1 = rng.random(n) < expit(_lin(m["r1"], env, n))
    r2 = rng.random(n) < expit(_lin(m["r2"], env, n))
    r4 = (rng.random(n) < expit(_lin(m["r4"], env, n))) & enrolled
    r5 = (rng.random(n) < expit(_lin(m["r5"], env, n))) & enrolled

    schema = {
        "RYGB": ColumnSchema("binary"),
        "AGE": ColumnSchema("continuous"),
        "FEMALE": ColumnSchema("binary"),
        "CKD0": ColumnSchema("binary"),
        "CCS0": ColumnSchema("categorical", tuple(levels), levels[0]),
        "BMI0": ColumnSchema("continuous"),
        "TIME": ColumnSchema("continuous"),
        "EVENT": ColumnSchema("binary"),
        "ENROLLED": ColumnSchema("binary"),
        "CKD5": ColumnSchema("binary"),
        "CCS5": ColumnSchema("categorical", tuple(levels), levels[0]),
        "BMI5": ColumnSchema("continuous"),
    }

    def hide(v, r):
        return np.where(r, v, np.nan)

    def hide_cat(v, r):
        return [int(c) if ok else None for c, ok in zip(v, r)]

    table = ColumnTable.from_arrays(
        {
            "RYGB": env["RYGB"],
            "AGE": env["AGE"],
            "FEMALE": env["FEMALE"],
            "CKD0": hide(env["CKD0"], r1),
            "CCS0": hide_cat(env["CCS0"], r1),
            "BMI0": hide(env["BMI0"], r2),
            "TIME": time,
            "EVENT": event,
            "ENROLLED": enrolled.astype(float),
            "CKD5": hide(env["CKD5"], r4),
            "CCS5": hide_cat(env["CCS5"], r4),
            "BMI5": hide(env["BMI5"], r5),
        },
        schema,
    )
    latent = {k: env[k] for k in ("CKD0", "CCS0", "BMI0", "CKD5", "CCS5", "BMI5")}
    latent.update(PC5=pc5, R1=r1, R2=r2, R3=enrolled, R4=r4, R5=r5)
    return table, latent
