"""Bootstrap-MI: resample subjects from the raw (incomplete) table, rerun the
whole blended analysis per replicate, and read percentile intervals off
the replicate estimates."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial

import numpy as np

from ._parallel import pmap
from .engine import BlendedFit, ModularizationSpec, run_blended, stream
from .errors import BootstrapError, NumericalError, SpecError
from .tabular import ColumnTable

MAX_FAIL_FRACTION = 0.05


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    point: np.ndarray
    replicate_estimates: np.ndarray  # B_ok x p
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    B: int
    M: int
    alpha: float
    seed: object
    coef_names: tuple[str, ...] = ()
    n_failed: int = 0

    def significant(self, j) -> bool:
        """0 lies outside the percentile interval of coefficient ``j``."""
        return bool(self.ci_lower[j] > 0 or self.ci_upper[j] < 0)


def percentile_ci(estimates, alpha=0.05):
    """Order-statistic interval: the ceil(B*alpha/2)-th and
    ceil(B*(1-alpha/2))-th smallest values (1-based), no interpolation."""
    E = np.sort(np.atleast_2d(np.asarray(estimates, dtype=np.float64)), axis=0)
    B = E.shape[0]
    if B < 1:
        raise BootstrapError("no bootstrap replicates")
    # round away representation noise before taking the ceiling
    lo = max(1, math.ceil(round(B * alpha / 2, 9)))
    hi = min(B, max(1, math.ceil(round(B * (1 - alpha / 2), 9))))
    return E[lo - 1], E[hi - 1]


def _replicate(b, table, spec, delta, M, seed, weight_cap):
    rng = stream(seed, b, 0)
    idx = rng.integers(0, table.n_rows, table.n_rows)
    try:
        fit = run_blended(table.take(idx), spec, delta, M=M, seed=(seed, b, 1), weight_cap=weight_cap)
    except NumericalError:
        return None
    return fit.theta_hat


def bootstrap_mi(table: ColumnTable, spec: ModularizationSpec, delta=None, B=300, M=10, alpha=0.05,
                 seed=0, threads=None, weight_cap=None, point: BlendedFit | None = None) -> BootstrapResult:
    """Percentile Bootstrap-MI interval for the blended estimate.

    Replicate ``b`` resamples with ``stream(seed, b, 0)`` and imputes with
    seed ``(seed, b, 1)``. Failed replicates are skipped; more than 5% failing
    raises BootstrapError.
    """
    if B < 1:
        raise SpecError("B must be at least 1")
    if not 0 < alpha < 1:
        raise SpecError("alpha must lie in (0, 1)")
    if isinstance(seed, (int, np.integer)):
        seed = int(seed)
    if point is None:
        point = run_blended(table, spec, delta, M=M, seed=seed, weight_cap=weight_cap)
    job = partial(_replicate, table=table, spec=spec, delta=delta, M=M, seed=seed, weight_cap=weight_cap)
    out = pmap(job, range(B), threads)
    ok = [e for e in out if e is not None]
    failed = B - len(ok)
    if failed > MAX_FAIL_FRACTION * B:
        raise BootstrapError(
            f"{failed} of {B} bootstrap replicates failed; delta may be too extreme for these data"
        )
    E = np.vstack(ok)
    lo, hi = percentile_ci(E, alpha)
    return BootstrapResult(point.theta_hat, E, lo, hi, B, M, alpha, seed, point.coef_names, failed)
