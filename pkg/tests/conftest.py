import copy

import numpy as np
import pytest

from blendsa import sim
from blendsa.engine import load_spec


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance runs")


@pytest.fixture(scope="session")
def scenario1():
    table, latent = sim.generate_scenario(sim.ScenarioConfig(n=1000, delta_gen=(0.5, 0.0), seed=101))
    return table, latent


@pytest.fixture(scope="session")
def durable():
    return sim.generate_durable_like(2000, seed=5)


def strip_sensitivity(spec_dict):
    """The same modularization written with no sensitivity functions at all."""
    obj = copy.deepcopy(spec_dict)
    for m in obj["mechanisms"]:
        m.pop("sensitivity", None)
    return obj


def mar_free_spec(assignment):
    obj = strip_sensitivity(sim.SCENARIO_SPEC)
    obj["assignment"] = assignment
    return load_spec(obj)


def theta_equal(a, b):
    return np.array_equal(a.theta_per_imputation, b.theta_per_imputation)
