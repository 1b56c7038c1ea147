import numpy as np
import pytest

from cma_planner.mdp import SolverConfig, value_iteration
from cma_planner.model import default_model
from cma_planner.pbvi import PBVIConfig, pbvi_solve
from cma_planner.pomdp import build_observation_model

P_OBS_GRID = (1.0, 0.9, 0.8, 0.6)


@pytest.fixture(scope="session")
def model():
    return default_model()


@pytest.fixture(scope="session")
def vf(model):
    return value_iteration(model, SolverConfig(discount=0.99))


@pytest.fixture(scope="session")
def obs_models():
    return {p: build_observation_model(p) for p in P_OBS_GRID}


@pytest.fixture(scope="session")
def pbvi_alphas(model, vf, obs_models):
    """Lazily solved PBVI alpha sets keyed by p_obs (a solve takes seconds)."""
    cache = {}

    def get(p_obs):
        if p_obs not in cache:
            cache[p_obs] = pbvi_solve(model, obs_models[p_obs], PBVIConfig(), vf=vf)
        return cache[p_obs]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Acceptance results: criterion number -> (passed, detail). Filled by
# test_acceptance.py and printed once at the end of the run.
ACCEPTANCE: dict = {}


@pytest.fixture
def record():
    def _record(number, passed, detail):
        ACCEPTANCE[number] = (bool(passed), detail)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
