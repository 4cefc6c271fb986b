"""Weighted linear, logistic and baseline-category multinomial fits, plus
approximate-posterior parameter draws for imputation models.

The imputation posterior is the large-sample normal approximation
N(psi_hat, inverse information); linear models add a scaled inverse
chi-square draw for the residual variance.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import expit, log_expit

from .errors import ConvergenceError, NumericalError, SeparationError, SingularDesignError

MAX_ITER = 100
DEVIANCE_TOL = 1e-10
STEP_TOL = 1e-7
# guard against overflow; divergence is normally caught by non-convergence
SEPARATION_BOUND = 1e3
DIVERGENT_COEF = 10.0


@dataclass(frozen=True, eq=False)
class ModelFit:
    coefficients: np.ndarray
    covariance: np.ndarray
    link: str  # "identity" | "logit" | "multinomial-logit"
    converged: bool = True
    iterations: int = 0
    residual_variance: float | None = None
    n_obs: int = 0
    df_resid: int = 0
    # multinomial only: category codes, baseline first
    categories: tuple[int, ...] = ()
    names: tuple[str, ...] = ()

    @property
    def n_params(self):
        return self.coefficients.size


@dataclass(frozen=True, eq=False)
class ParameterDraw:
    coefficients: np.ndarray
    sigma: float | None = None
    link: str = "identity"
    categories: tuple[int, ...] = ()


def _weights(w, n):
    if w is None:
        return np.ones(n)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError("weights must have one entry per row")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    return w


def _solve_pos(H, g):
    # near-separation makes H ill-conditioned; divergence is caught by the
    # coefficient and step checks, so the LAPACK warning adds nothing
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", linalg.LinAlgWarning)
        return linalg.solve(H, g, assume_a="pos")


def check_rank(X, names=None, rtol=1e-10):
    """Raise SingularDesignError naming columns that are linear combinations of others."""
    n, p = X.shape
    if p == 0:
        return
    if n < p:
        raise SingularDesignError(f"{n} rows cannot identify {p} coefficients")
    _, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = rtol * max(d[0], 1e-300) * max(1.0, np.sqrt(n))
    rank = int(np.sum(d > tol))
    if d[0] == 0:
        rank = 0
    if rank < p:
        bad = sorted(piv[rank:])
        labels = [names[j] if names else f"column {j}" for j in bad]
        raise SingularDesignError(
            f"design is rank deficient; collinear columns: {', '.join(map(str, labels))}",
            columns=labels,
        )


def fit_linear(X, y, w=None, names=None) -> ModelFit:
    """Weighted least squares; sigma^2 = weighted RSS / (n - p)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    w = _weights(w, n)
    keep = w > 0
    sw = np.sqrt(w[keep])
    Xw = X[keep] * sw[:, None]
    yw = y[keep] * sw
    check_rank(Xw, names)
    Q, R = np.linalg.qr(Xw)
    beta = linalg.solve_triangular(R, Q.T @ yw)
    resid = yw - Xw @ beta
    n_obs = int(keep.sum())
    df = n_obs - p
    rss = float(resid @ resid)
    sigma2 = rss / df if df > 0 else float("nan")
    Rinv = linalg.solve_triangular(R, np.eye(p))
    xtwx_inv = Rinv @ Rinv.T
    cov = sigma2 * xtwx_inv if df > 0 else np.full((p, p), np.nan)
    cov = 0.5 * (cov + cov.T)
    return ModelFit(
        coefficients=beta,
        covariance=cov,
        link="identity",
        converged=True,
        iterations=1,
        residual_variance=sigma2,
        n_obs=n_obs,
        df_resid=df,
        names=tuple(names or ()),
    )


def _logistic_deviance(eta, y, w):
    return -2.0 * float(np.sum(w * (y * log_expit(eta) + (1 - y) * log_expit(-eta))))


def logistic_score(X, y, w, beta):
    return X.T @ (w * (y - expit(X @ beta)))


def fit_logistic(X, y, w=None, names=None, max_iter=MAX_ITER, tol=DEVIANCE_TOL) -> ModelFit:
    """Logistic regression by iteratively reweighted least squares (Newton).

    Stops when the relative deviance change falls below ``tol`` and the last
    step is small, then takes a final Newton step so the score vanishes to
    rounding. Under separation the MLE does not exist and Newton steps keep a
    roughly constant size, so a fit that fails to settle with large
    coefficients is reported as separation.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("logistic response must be 0/1")
    w = _weights(w, n)
    check_rank(X[w > 0], names)
    beta = np.zeros(p)
    dev = _logistic_deviance(X @ beta, y, w)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ beta
        mu = expit(eta)
        score = X.T @ (w * (y - mu))
        H = X.T @ (X * (w * mu * (1 - mu))[:, None])
        try:
            step = _solve_pos(H, score)
        except (linalg.LinAlgError, ValueError):
            raise SeparationError("information matrix became singular (quasi-separation)") from None
        beta = beta + step
        if np.max(np.abs(beta)) > SEPARATION_BOUND:
            raise SeparationError(
                f"coefficients diverging (|coef| > {SEPARATION_BOUND:g}); data appear separated"
            )
        new_dev = _logistic_deviance(X @ beta, y, w)
        small = np.max(np.abs(step)) < STEP_TOL * (1 + np.max(np.abs(beta)))
        if abs(new_dev - dev) / (abs(new_dev) + 0.1) < tol and small:
            dev = new_dev
            converged = True
            break
        dev = new_dev
    if not converged:
        if np.max(np.abs(beta)) > DIVERGENT_COEF:
            raise SeparationError("coefficients diverging; data appear separated")
        raise ConvergenceError(
            f"IRLS did not converge in {max_iter} iterations", last_iterate=beta
        )
    # polish
    mu = expit(X @ beta)
    H = X.T @ (X * (w * mu * (1 - mu))[:, None])
    beta = beta + _solve_pos(H, X.T @ (w * (y - mu)))
    mu = expit(X @ beta)
    H = X.T @ (X * (w * mu * (1 - mu))[:, None])
    cov = linalg.inv(H)
    cov = 0.5 * (cov + cov.T)
    return ModelFit(
        coefficients=beta,
        covariance=cov,
        link="logit",
        converged=True,
        iterations=it + 1,
        n_obs=int(np.sum(w > 0)),
        df_resid=int(np.sum(w > 0)) - p,
        names=tuple(names or ()),
    )


def augment(X, y, categories):
    """Pseudo-observations that keep a categorical-response fit finite under
    (quasi-)separation.

    For every non-constant predictor column j and every category c, two rows
    sit at the column means with column j moved to mean +/- sd/2 (clamped to
    the observed range) and response c. All 2pk rows share a total weight of
    p + 1, so they are negligible once the data overlap. Returns (X, y, w).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    n, q = X.shape
    const = np.ptp(X, axis=0) == 0 if n else np.ones(q, dtype=bool)
    cols = np.flatnonzero(~const)
    p = cols.size
    if p == 0 or n < 2:
        return X, y, np.ones(n)
    k = len(categories)
    mean = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    lo, hi = X.min(axis=0), X.max(axis=0)
    rows, resp = [], []
    for j in cols:
        for c in categories:
            for sign in (0.5, -0.5):
                r = mean.copy()
                r[j] = min(max(mean[j] + sign * sd[j], lo[j]), hi[j])
                rows.append(r)
                resp.append(c)
    nr = len(rows)
    Xa = np.vstack([X, np.asarray(rows)])
    ya = np.concatenate([y, np.asarray(resp, dtype=y.dtype)])
    wa = np.concatenate([np.ones(n), np.full(nr, (p + 1) / nr)])
    return Xa, ya, wa


def _softmax_probs(X, B):
    """Row probabilities for logits [0, X @ B.T]; column 0 is the baseline."""
    eta = X @ B.T
    full = np.column_stack([np.zeros(X.shape[0]), eta])
    full -= full.max(axis=1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=1, keepdims=True)


def fit_multinomial(X, y, categories, w=None, names=None, max_iter=MAX_ITER, tol=DEVIANCE_TOL) -> ModelFit:
    """Baseline-category logit MLE.

    ``y`` holds integer category codes and ``categories`` lists every code,
    baseline first. Coefficients are stacked level by level, one length-p
    block per non-baseline category in the given order.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    n, p = X.shape
    categories = tuple(int(c) for c in categories)
    J = len(categories)
    if J < 2:
        raise ValueError("multinomial model needs at least two categories")
    w = _weights(w, n)
    Y = np.column_stack([(y == c).astype(np.float64) for c in categories])
    if not np.all(Y.sum(axis=1) == 1):
        raise ValueError("response holds a code outside the declared categories")
    counts = (Y * (w > 0)[:, None]).sum(axis=0)
    for c, cnt in zip(categories, counts):
        if cnt == 0:
            raise NumericalError(f"category code {c} is empty on the training rows")
    check_rank(X[w > 0], names)
    q = (J - 1) * p
    B = np.zeros((J - 1, p))

    def pieces(B):
        P = _softmax_probs(X, B)
        logP = np.log(np.clip(P, 1e-300, None))
        dev = -2.0 * float(np.sum(w[:, None] * Y * logP))
        G = ((Y[:, 1:] - P[:, 1:]) * w[:, None]).T @ X  # (J-1) x p
        H = np.zeros((q, q))
        for a in range(J - 1):
            for b in range(a, J - 1):
                wt = P[:, a + 1] * ((a == b) - P[:, b + 1]) * w
                blk = X.T @ (X * wt[:, None])
                H[a * p:(a + 1) * p, b * p:(b + 1) * p] = blk
                H[b * p:(b + 1) * p, a * p:(a + 1) * p] = blk.T
        return dev, G.ravel(), H

    dev, g, H = pieces(B)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        try:
            step = _solve_pos(H, g)
        except (linalg.LinAlgError, ValueError):
            raise SeparationError("multinomial information matrix became singular") from None
        B = B + step.reshape(J - 1, p)
        if np.max(np.abs(B)) > SEPARATION_BOUND:
            raise SeparationError("multinomial coefficients diverging; data appear separated")
        new_dev, g, H = pieces(B)
        small = np.max(np.abs(step)) < STEP_TOL * (1 + np.max(np.abs(B)))
        if abs(new_dev - dev) / (abs(new_dev) + 0.1) < tol and small:
            converged = True
            break
        dev = new_dev
    if not converged:
        if np.max(np.abs(B)) > DIVERGENT_COEF:
            raise SeparationError("multinomial coefficients diverging; data appear separated")
        raise ConvergenceError(
            f"multinomial Newton did not converge in {max_iter} iterations", last_iterate=B.ravel()
        )
    B = B + _solve_pos(H, g).reshape(J - 1, p)
    _, g, H = pieces(B)
    cov = linalg.inv(H)
    cov = 0.5 * (cov + cov.T)
    return ModelFit(
        coefficients=B.ravel(),
        covariance=cov,
        link="multinomial-logit",
        converged=True,
        iterations=it + 1,
        n_obs=int(np.sum(w > 0)),
        df_resid=int(np.sum(w > 0)) - q,
        categories=categories,
        names=tuple(names or ()),
    )


def multinomial_probs(X, coefficients, n_categories):
    """Category probabilities (baseline first) for stacked coefficients."""
    B = np.asarray(coefficients).reshape(n_categories - 1, -1)
    return _softmax_probs(np.asarray(X, dtype=np.float64), B)


def _sqrt_cov(cov, rtol=1e-8):
    C = 0.5 * (cov + cov.T)
    if not np.all(np.isfinite(C)):
        raise NumericalError("covariance matrix has non-finite entries")
    vals, vecs = np.linalg.eigh(C)
    scale = max(1.0, float(np.max(np.abs(vals)))) if vals.size else 1.0
    if vals.size and vals.min() < -rtol * scale:
        raise NumericalError(f"covariance is not positive semi-definite (min eigenvalue {vals.min():.3g})")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def posterior_draw(fit: ModelFit, rng: np.random.Generator) -> ParameterDraw:
    """Draw psi* ~ N(psi_hat, covariance); linear fits also draw
    sigma*^2 = sigma_hat^2 (n - p) / chi2_{n-p}."""
    if not fit.converged:
        raise NumericalError("cannot draw from an unconverged fit")
    L = _sqrt_cov(fit.covariance)
    z = rng.standard_normal(fit.n_params)
    psi = fit.coefficients + L @ z
    sigma = None
    if fit.link == "identity":
        df = fit.df_resid
        if df <= 0 or not np.isfinite(fit.residual_variance):
            raise NumericalError("linear fit has no residual degrees of freedom")
        sigma = float(np.sqrt(fit.residual_variance * df / rng.chisquare(df)))
    return ParameterDraw(psi, sigma, fit.link, fit.categories)
