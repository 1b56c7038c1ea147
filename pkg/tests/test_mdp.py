import numpy as np
import pytest

from cma_planner.mdp import (
    ConvergenceError,
    SolverConfig,
    TabularMDP,
    ValueFunction,
    bellman_backup,
    greedy_policy,
    value_iteration,
)
from cma_planner.model import BH, LEGAL, N_LIVE, Absorbing, Action, decode, state_index


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(discount=1.0)
    with pytest.raises(ValueError):
        SolverConfig(bellman_tolerance=0.0)
    with pytest.raises(ValueError):
        SolverConfig(max_iterations=0)


def test_backup_from_zero_is_best_one_step_reward(model):
    v, q = bellman_backup(np.zeros(model.p.shape[1]), model)
    expected = np.where(LEGAL, model.r, -np.inf).max(axis=1)
    np.testing.assert_allclose(v, expected, rtol=0, atol=1e-15)
    np.testing.assert_allclose(q, model.r, rtol=0, atol=1e-15)


def test_end_state_value_stays_zero(model, vf):
    assert vf.v[Absorbing.E] == 0.0
    v = np.zeros(model.p.shape[1])
    for _ in range(20):
        v, _ = bellman_backup(v, model)
        assert v[Absorbing.E] == 0.0


def test_two_state_self_loop_geometric():
    p = np.zeros((1, 2, 2))
    p[0, 0, 0] = 1.0
    p[0, 1, 1] = 1.0
    r = np.array([[1.0], [0.0]])
    vf = value_iteration(TabularMDP(p, r), SolverConfig(discount=0.5, bellman_tolerance=1e-12))
    assert vf.v[0] == pytest.approx(2.0, abs=1e-11)
    assert vf.v[1] == 0.0


def test_zero_reward_gives_zero_value_and_noop(model):
    toy = TabularMDP(model.p, np.zeros_like(model.r), LEGAL)
    vf = value_iteration(toy)
    assert np.all(vf.v == 0.0)
    assert np.all(vf.policy == Action.NoOp)


def test_spalled_good_battery_state_lands_practically(vf):
    assert vf.action(state_index("N", "NF", "MM0", "G", "RM0")) == Action.LandPract


@pytest.mark.parametrize("bh, expected", [("G", Action.LandPract), ("M", Action.LandPract), ("P", Action.LandASAP)])
def test_low_reachability_action_by_battery_health(vf, bh, expected):
    for s in range(N_LIVE):
        st = decode(s)
        if st.fs.name == "N" and st.rm.name == "RM0" and st.bh.name == bh:
            assert vf.action(s) == expected, str(st)


def test_nominal_state_keeps_flying(vf):
    for bh in BH:
        assert vf.action(state_index(bh=bh)) == Action.NoOp


def test_policy_legal_everywhere(vf):
    assert np.all(LEGAL[np.arange(len(vf.policy)), vf.policy])


def test_value_is_max_legal_q(vf):
    np.testing.assert_array_equal(vf.v, np.where(LEGAL, vf.q, -np.inf).max(axis=1))
    assert np.all(vf.v >= vf.q[:, Action.NoOp])


def test_residuals_monotone_and_converged(vf):
    res = np.array(vf.residuals)
    assert res[-1] <= 1e-9
    assert np.all(np.diff(res[1:]) <= 0.0)


def test_final_residual_check(model, vf):
    v_new, _ = bellman_backup(vf.v, model)
    assert np.max(np.abs(v_new - vf.v)) <= 1e-9


def test_deterministic_rerun(model, vf):
    again = value_iteration(model)
    np.testing.assert_array_equal(again.v, vf.v)
    np.testing.assert_array_equal(again.policy, vf.policy)


def test_convergence_error_carries_residual(model):
    with pytest.raises(ConvergenceError) as info:
        value_iteration(model, SolverConfig(max_iterations=3))
    assert info.value.residual > 0
    assert info.value.iterations == 3


def test_tie_break_lowest_action():
    q = np.array([[1.0, 1.0, 0.0, 1.0]])
    assert greedy_policy(q, np.ones((1, 4), dtype=bool))[0] == 0
    legal = np.array([[False, True, True, True]])
    assert greedy_policy(q, legal)[0] == 1


def test_discount_monotone_on_rectified_model(model):
    toy = TabularMDP(model.p, model.r - model.r.min(), LEGAL)
    lo = value_iteration(toy, SolverConfig(discount=0.9))
    hi = value_iteration(toy, SolverConfig(discount=0.95))
    assert np.all(hi.v >= lo.v - 1e-9)


def test_value_function_json_roundtrip(tmp_path, vf):
    path = tmp_path / "vf.json"
    vf.save(path)
    again = ValueFunction.load(path)
    np.testing.assert_array_equal(again.v, vf.v)
    np.testing.assert_array_equal(again.q, vf.q)
    np.testing.assert_array_equal(again.policy, vf.policy)
    assert again.discount == vf.discount


def test_backends_agree(model):
    a = value_iteration(model, backend="numpy")
    b = value_iteration(model, backend="numba")
    np.testing.assert_allclose(a.v, b.v, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(a.policy, b.policy)
