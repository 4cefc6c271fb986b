"""Delta-adjusted selection models (weighting) and delta-shifted imputation.

Weighting side: P(R = 1 | x, D) = expit(x'psi + delta * D / scale). The
coefficients psi solve the moment equation

    sum_i x_i (R_i / pi_i - 1) = 0,

which only touches D where R = 1. Imputation side: imputed draws are
shifted by delta on the mean (continuous) or logit (binary, categorical)
scale; observed rows are never modified.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import expit

from .errors import ConvergenceError, NumericalError
from .glm import ParameterDraw, multinomial_probs

PI_FLOOR = 1e-4
SOLVER_TOL = 1e-10
RESIDUAL_ACCEPT = 1e-8
MAX_ITER = 100


class ExtremeWeightWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SensitivityFunction:
    """``ipw_linear``: xi(D) = delta * D / scale. ``mi_shift``: xi(R) = delta * (1 - R).
    ``none``: identically zero (the MAR model)."""

    kind: str
    delta: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("ipw_linear", "mi_shift", "none"):
            raise ValueError(f"unknown sensitivity function {self.kind!r}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @property
    def is_zero(self):
        return self.kind == "none" or self.delta == 0.0

    def offset(self, d):
        """xi evaluated on variable values ``d`` (ipw_linear only)."""
        if self.kind == "none":
            return np.zeros_like(np.asarray(d, dtype=np.float64))
        if self.kind != "ipw_linear":
            raise ValueError("offset() applies to ipw_linear functions")
        return self.delta * (np.asarray(d, dtype=np.float64) / self.scale)

    def shift(self, r):
        """xi evaluated on missingness indicators ``r`` (mi_shift only)."""
        r = np.asarray(r, dtype=np.float64)
        if self.kind == "none":
            return np.zeros_like(r)
        if self.kind != "mi_shift":
            raise ValueError("shift() applies to mi_shift functions")
        return self.delta * (1.0 - r)


@dataclass(frozen=True, eq=False)
class SelectionSolution:
    psi: np.ndarray
    pi: np.ndarray  # fitted P(R=1) on observed rows, in row order of `observed`
    weights: np.ndarray  # 1 / pi on observed rows
    residual_norm: float
    iterations: int
    observed: np.ndarray  # R on the fitted rows (bool)
    design: np.ndarray  # covariates on the fitted rows
    sensitivity: SensitivityFunction
    rows: np.ndarray | None = None  # table row indices of the fitted rows, if known
    warnings: tuple[str, ...] = field(default=())

    @property
    def min_pi(self):
        return float(self.pi.min()) if self.pi.size else float("nan")

    @property
    def max_weight(self):
        return float(self.weights.max()) if self.weights.size else float("nan")


def estimating_equation(X, offset_obs, R, psi):
    """sum_i x_i (R_i / pi_i - 1) with pi_i = expit(x_i'psi + xi_i).

    ``offset_obs`` holds xi on the R = 1 rows only (in row order).
    """
    R = np.asarray(R, dtype=bool)
    return _residual(X[R], X[~R], offset_obs, psi)


def _residual(X1, X0, off, psi):
    # two large sums nearly cancel; fsum keeps the error at the rounding
    # level of the result rather than growing with n
    e = np.exp(-(X1 @ psi + off))
    return np.array([
        math.fsum(np.concatenate([X1[:, j] * e, -X0[:, j]])) for j in range(X1.shape[1])
    ])


def solve_selection(X, D, R, xi: SensitivityFunction, rows=None,
                    tol=SOLVER_TOL, max_iter=MAX_ITER, pi_floor=PI_FLOOR) -> SelectionSolution:
    """Solve the delta-offset weighting equation by damped Newton.

    Parameters
    ----------
    X : (n, p) covariates on the rows still at risk for this mechanism.
    D : (n,) sensitivity-variable values; read only where ``R`` is true.
    R : (n,) observation indicator for this mechanism.
    xi : sensitivity function; ``kind="none"`` gives the MAR equation.

    The equation is the gradient of the convex function
    F(psi) = sum_{R=1} exp(-eta_i) + sum_{R=0} x_i'psi, so Newton steps are
    halved until F decreases.
    """
    X = np.asarray(X, dtype=np.float64)
    R = np.asarray(R, dtype=bool)
    n, p = X.shape
    if R.shape != (n,):
        raise ValueError("R must have one entry per row")
    if not R.any():
        raise NumericalError("no observed rows for selection model")
    X1 = X[R]
    if xi.kind == "none":
        off = np.zeros(int(R.sum()))
    else:
        d_obs = np.asarray(D, dtype=np.float64)[R]
        if not np.all(np.isfinite(d_obs)):
            raise NumericalError("sensitivity variable missing on an observed row")
        off = xi.offset(d_obs)
    x0sum = X[~R].sum(axis=0)

    if R.all():
        # every row observed: pi = 1 solves the equation at psi = +inf
        ones = np.ones(n)
        return SelectionSolution(np.full(p, np.nan), ones, ones, 0.0, 0, R, X, xi, rows)

    def objective(psi):
        eta = X1 @ psi + off
        return float(np.sum(np.exp(-eta)) + x0sum @ psi)

    X0 = X[~R]

    def residual(psi):
        return _residual(X1, X0, off, psi)

    psi = np.zeros(p)
    if p:
        # intercept-like start if a constant column exists
        const = np.flatnonzero(np.all(X == X[0], axis=0) & (X[0] != 0))
        if const.size:
            j = const[0]
            rbar = R.mean()
            psi[j] = (np.log(rbar / (1 - rbar)) - np.mean(off)) / X[0, j]
    F = objective(psi)
    g = residual(psi)
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        eta = X1 @ psi + off
        H = X1.T @ (X1 * np.exp(-eta)[:, None])
        try:
            step = linalg.solve(H, g, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            raise NumericalError("selection Jacobian is singular") from None
        t = 1.0
        new = psi + step
        newF = objective(new)
        while not (newF <= F + 1e-12 * abs(F)) and t > 1e-10:
            t /= 2
            new = psi + t * step
            newF = objective(new)
        psi, F = new, newF
        g = residual(psi)
        res = float(np.max(np.abs(g))) if p else 0.0
        if res < tol:
            converged = True
            break
        if np.max(np.abs(t * step)) < 1e-14 * (1 + np.max(np.abs(psi))) and res < RESIDUAL_ACCEPT:
            converged = True
            break
    res = float(np.max(np.abs(g))) if p else 0.0
    if not converged:
        raise ConvergenceError(
            f"selection solver failed to converge (residual {res:.3g})", last_iterate=psi, residual=res
        )
    eta = X1 @ psi + off
    pi = expit(eta)
    if np.any(pi <= 0):
        raise NumericalError("fitted selection probability underflowed to zero")
    notes = []
    if pi.min() < pi_floor:
        msg = f"extreme weights: min selection probability {pi.min():.3g} < {pi_floor:g}"
        notes.append(msg)
        warnings.warn(msg, ExtremeWeightWarning, stacklevel=2)
    # 1/pi = 1 + exp(-eta), exact even when pi rounds to 1
    w = 1.0 + np.exp(-eta)
    return SelectionSolution(psi, pi, w, res, it, R, X, xi, rows, tuple(notes))


def impute_continuous(draw: ParameterDraw, X, delta, rng: np.random.Generator) -> np.ndarray:
    """x'psi* + Normal(0, sigma*^2) + delta for each row of ``X`` (all missing)."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != draw.coefficients.size:
        raise ValueError("design width does not match parameter draw")
    noise = rng.standard_normal(X.shape[0])
    return (X @ draw.coefficients + draw.sigma * noise) + delta


def binary_probability(draw: ParameterDraw, X, delta) -> np.ndarray:
    return expit(np.asarray(X, dtype=np.float64) @ draw.coefficients + delta)


def impute_binary(draw: ParameterDraw, X, delta, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli(expit(x'psi* + delta)) draws, returned as 0.0/1.0."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != draw.coefficients.size:
        raise ValueError("design width does not match parameter draw")
    u = rng.random(X.shape[0])
    return (u < binary_probability(draw, X, delta)).astype(np.float64)


def categorical_probabilities(draw: ParameterDraw, X, delta) -> np.ndarray:
    """Probabilities with every non-baseline logit shifted by ``delta``;
    columns follow ``draw.categories`` (baseline first)."""
    X = np.asarray(X, dtype=np.float64)
    J = len(draw.categories)
    B = draw.coefficients.reshape(J - 1, -1)
    if B.shape[1] != X.shape[1]:
        raise ValueError("design width does not match parameter draw")
    eta = X @ B.T + delta
    full = np.column_stack([np.zeros(X.shape[0]), eta])
    full -= full.max(axis=1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=1, keepdims=True)


def impute_categorical(draw: ParameterDraw, X, delta, rng: np.random.Generator) -> np.ndarray:
    """Draw category codes. One uniform per row is compared against the
    cumulative probabilities of the non-baseline categories first, so a
    two-category model reproduces :func:`impute_binary` under a shared seed."""
    P = categorical_probabilities(draw, X, delta)
    u = rng.random(P.shape[0])
    cats = np.asarray(draw.categories)
    order = np.r_[np.arange(1, P.shape[1]), 0]
    cum = np.cumsum(P[:, order], axis=1)
    pick = (u[:, None] >= cum).sum(axis=1)
    pick = np.minimum(pick, P.shape[1] - 1)
    return cats[order[pick]]
