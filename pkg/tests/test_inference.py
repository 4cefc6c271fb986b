import numpy as np
import pytest

from blendsa import sim
from blendsa.engine import load_spec, run_blended, stream
from blendsa.errors import BootstrapError, SpecError
from blendsa.inference import bootstrap_mi, percentile_ci
from blendsa.tabular import ColumnTable

SIMPLE = {
    "mechanisms": [{"name": "A", "variables": ["V"], "model": "~ 1", "models": {"V": ["V ~ 1"]}}],
    "analysis": "Y ~ 1",
    "assignment": "I",
}


def test_percentile_order_statistics_b20():
    E = np.arange(1.0, 21.0)[::-1, None]  # 20..1, unsorted
    lo, hi = percentile_ci(E, 0.05)
    assert (lo[0], hi[0]) == (1.0, 20.0)  # ceil(0.5)=1, ceil(19.5)=20
    lo, hi = percentile_ci(E, 0.2)
    assert (lo[0], hi[0]) == (2.0, 18.0)  # ceil(2)=2, ceil(18)=18
    lo, hi = percentile_ci(E, 0.3)
    assert (lo[0], hi[0]) == (3.0, 17.0)
    lo, hi = percentile_ci(E, 0.25)
    assert (lo[0], hi[0]) == (3.0, 18.0)  # ceil(2.5)=3, ceil(17.5)=18


def test_percentile_columns_independent():
    rng = np.random.default_rng(0)
    E = rng.normal(size=(40, 3))
    lo, hi = percentile_ci(E, 0.1)
    for j in range(3):
        s = np.sort(E[:, j])
        assert lo[j] == s[1] and hi[j] == s[37]
    assert np.all(lo <= hi)


def test_single_replicate(scenario1):
    table, _ = scenario1
    res = bootstrap_mi(table, sim.scenario_spec("III"), [0, 0.5, 0], B=1, M=1, seed=3)
    np.testing.assert_array_equal(res.ci_lower, res.ci_upper)
    np.testing.assert_array_equal(res.ci_lower, res.replicate_estimates[0])


def test_identical_rows_zero_width():
    t = ColumnTable.from_arrays({"V": np.full(30, 2.0), "Y": np.full(30, 1.5)})
    res = bootstrap_mi(t, load_spec(SIMPLE), B=25, M=2, seed=1)
    assert np.all(res.replicate_estimates == res.replicate_estimates[0])
    np.testing.assert_array_equal(res.ci_lower, res.ci_upper)


def test_point_replicates_and_determinism(scenario1):
    table, _ = scenario1
    spec = sim.scenario_spec("IMI")
    d = [0, -0.4, 0]
    res = bootstrap_mi(table, spec, d, B=6, M=2, seed=11, threads=1)
    np.testing.assert_array_equal(res.point, run_blended(table, spec, d, M=2, seed=11).theta_hat)
    # replicate b by hand: resample with stream(seed, b, 0), impute with (seed, b, 1)
    idx = stream(11, 4, 0).integers(0, table.n_rows, table.n_rows)
    by_hand = run_blended(table.take(idx), spec, d, M=2, seed=(11, 4, 1))
    np.testing.assert_array_equal(res.replicate_estimates[4], by_hand.theta_hat)
    np.testing.assert_array_equal(res.replicate_estimates[4], by_hand.theta_per_imputation.mean(axis=0))
    again = bootstrap_mi(table, spec, d, B=6, M=2, seed=11, threads=2)
    np.testing.assert_array_equal(res.replicate_estimates, again.replicate_estimates)
    assert np.all(res.ci_lower <= res.ci_upper)


def test_too_many_failures():
    # one treated subject: most resamples lose it and the design turns singular
    rng = np.random.default_rng(0)
    x = np.zeros(12)
    x[0] = 1
    t = ColumnTable.from_arrays({"X": x, "V": rng.normal(size=12), "Y": rng.normal(size=12)})
    spec = load_spec({**SIMPLE, "analysis": "Y ~ X"})
    with pytest.raises(BootstrapError):
        bootstrap_mi(t, spec, B=20, M=1, seed=0)


def test_argument_checks(scenario1):
    table, _ = scenario1
    with pytest.raises(SpecError):
        bootstrap_mi(table, sim.scenario_spec("III"), B=0)
    with pytest.raises(SpecError):
        bootstrap_mi(table, sim.scenario_spec("III"), B=5, alpha=1.5)
