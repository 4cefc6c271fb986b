"""Cox proportional hazards with Breslow ties, Breslow baseline survival,
and inverse-survival enrollment weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ConvergenceError, InfiniteWeightError, NumericalError
from .glm import check_rank

MAX_ITER = 100
SCORE_TOL = 1e-10
COEF_BOUND = 30.0
STEP_TOL = 1e-7
DIVERGENT_COEF = 10.0


@dataclass(frozen=True, eq=False)
class CoxFit:
    coefficients: np.ndarray
    event_times: np.ndarray  # sorted unique event times
    baseline_cumhaz: np.ndarray  # H0 at each event time (x = 0 reference)
    covariance: np.ndarray
    max_time: float
    iterations: int = 0
    names: tuple[str, ...] = ()

    def baseline_survival(self, t):
        """S0(t) = exp(-H0(t)) as a right-continuous step function."""
        t = np.asarray(t, dtype=np.float64)
        j = np.searchsorted(self.event_times, t, side="right")
        H = np.concatenate([[0.0], self.baseline_cumhaz])[j]
        return np.exp(-H)

    def cumulative_hazard(self, t):
        t = np.asarray(t, dtype=np.float64)
        j = np.searchsorted(self.event_times, t, side="right")
        return np.concatenate([[0.0], self.baseline_cumhaz])[j]


class _RiskSets:
    """Sorted data with the index of each distinct event time's risk set."""

    def __init__(self, X, time, event):
        order = np.argsort(time, kind="stable")
        self.t = time[order]
        self.X = X[order]
        self.e = event[order].astype(bool)
        ev_t = self.t[self.e]
        self.times, self.d = np.unique(ev_t, return_counts=True)
        # risk set for time u = rows with t >= u; first sorted index at u
        self.first = np.searchsorted(self.t, self.times, side="left")
        # sum of covariates over events at each distinct time
        grp = np.searchsorted(self.times, ev_t)
        self.xsum_events = np.zeros((self.times.size, X.shape[1]))
        np.add.at(self.xsum_events, grp, self.X[self.e])

    def sums(self, beta):
        eta = self.X @ beta
        c = eta.max() if eta.size else 0.0
        r = np.exp(eta - c)
        S0 = np.cumsum(r[::-1])[::-1][self.first]
        rX = self.X * r[:, None]
        S1 = np.cumsum(rX[::-1], axis=0)[::-1][self.first]
        return eta, c, r, S0, S1

    def loglik(self, beta):
        eta, c, _, S0, _ = self.sums(beta)
        return float(eta[self.e].sum() - np.sum(self.d * (np.log(S0) + c)))

    def derivatives(self, beta):
        eta, c, r, S0, S1 = self.sums(beta)
        p = self.X.shape[1]
        ll = float(eta[self.e].sum() - np.sum(self.d * (np.log(S0) + c)))
        xbar = S1 / S0[:, None]
        score = self.xsum_events.sum(axis=0) - (self.d[:, None] * xbar).sum(axis=0)
        outer = self.X[:, :, None] * self.X[:, None, :] * r[:, None, None]
        S2 = np.cumsum(outer[::-1], axis=0)[::-1][self.first]
        info = np.einsum("j,jab->ab", self.d, S2 / S0[:, None, None]) - np.einsum(
            "j,ja,jb->ab", self.d, xbar, xbar
        )
        return ll, score, 0.5 * (info + info.T).reshape(p, p)


def fit_cox(X, time, event, names=None, max_iter=MAX_ITER) -> CoxFit:
    """Maximize the Breslow partial likelihood by damped Newton steps."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=np.float64)
    n, p = X.shape
    if time.shape != (n,) or event.shape != (n,):
        raise ValueError("time and event must have one entry per row")
    if np.any(time <= 0) or not np.all(np.isfinite(time)):
        raise ValueError("event times must be positive and finite")
    if not np.all((event == 0) | (event == 1)):
        raise ValueError("event indicator must be 0/1")
    if event.sum() == 0:
        raise NumericalError("Cox model needs at least one event")
    if p:
        const = np.ptp(X, axis=0) == 0
        if const.any():
            j = int(np.flatnonzero(const)[0])
            label = names[j] if names else f"column {j}"
            raise NumericalError(f"constant covariate {label} (Cox model has no intercept)")
        check_rank(X - X.mean(axis=0), names)

    rs = _RiskSets(X, time, event)
    beta = np.zeros(p)
    it = 0
    info = np.zeros((p, p))
    if p:
        ll, score, info = rs.derivatives(beta)
        converged = False
        for it in range(1, max_iter + 1):
            try:
                step = linalg.solve(info, score, assume_a="pos")
            except (linalg.LinAlgError, ValueError):
                raise NumericalError("Cox information matrix is singular (monotone likelihood?)") from None
            new = beta + step
            new_ll = rs.loglik(new)
            halvings = 0
            while not (new_ll >= ll - 1e-12 * abs(ll)) and halvings < 30:
                step = step / 2
                new = beta + step
                new_ll = rs.loglik(new)
                halvings += 1
            beta = new
            if np.max(np.abs(beta)) > COEF_BOUND:
                raise NumericalError("Cox coefficients diverging (monotone likelihood)")
            ll, score, info = rs.derivatives(beta)
            # the score also vanishes as coefficients run off to infinity, so
            # the step must have settled too
            small_step = np.max(np.abs(step)) < STEP_TOL * (1.0 + np.max(np.abs(beta)))
            if small_step and np.max(np.abs(score)) < SCORE_TOL * max(1.0, np.sqrt(n)):
                converged = True
                break
            if np.max(np.abs(step)) < 1e-13:
                converged = True
                break
        if not converged:
            if np.max(np.abs(beta)) > DIVERGENT_COEF:
                raise NumericalError("Cox coefficients diverging (monotone likelihood)")
            raise ConvergenceError("Cox Newton iterations did not converge", last_iterate=beta)

    # Breslow cumulative baseline hazard at x = 0
    eta = rs.X @ beta
    c = eta.max() if n else 0.0
    r = np.exp(eta - c)
    S0 = np.cumsum(r[::-1])[::-1][rs.first]
    with np.errstate(over="ignore"):
        H0 = np.cumsum(rs.d / S0 * np.exp(-c))
    cov = linalg.inv(info) if p else np.zeros((0, 0))
    return CoxFit(
        coefficients=beta,
        event_times=rs.times,
        baseline_cumhaz=H0,
        covariance=0.5 * (cov + cov.T),
        max_time=float(time.max()),
        iterations=it,
        names=tuple(names or ()),
    )


def survival_probability(fit: CoxFit, x, horizon) -> np.ndarray:
    """P(T > horizon | x) = S0(horizon) ** exp(x'alpha)."""
    if horizon < 0 or horizon > fit.max_time:
        raise ValueError(f"horizon {horizon} outside observed time range [0, {fit.max_time}]")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    H = float(fit.cumulative_hazard(horizon))
    with np.errstate(over="ignore"):
        return np.exp(-H * np.exp(x @ fit.coefficients))


def enrollment_weight(fit: CoxFit, x, horizon) -> np.ndarray:
    """Inverse of the predicted probability of remaining enrolled past ``horizon``.

    ``x`` may be one covariate row or a matrix of rows; weights are >= 1.
    """
    if horizon < 0 or horizon > fit.max_time:
        raise ValueError(f"horizon {horizon} outside observed time range [0, {fit.max_time}]")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    H = float(fit.cumulative_hazard(horizon))
    if not np.isfinite(H):
        raise InfiniteWeightError(f"baseline survival is zero at horizon {horizon}")
    with np.errstate(over="ignore"):
        w = np.exp(H * np.exp(x @ fit.coefficients))
    if not np.all(np.isfinite(w)):
        raise InfiniteWeightError(f"predicted survival underflows to zero at horizon {horizon}")
    return w
