import copy
import csv
import json
import math

import numpy as np
import pytest

from cma_planner.mdp import ValueFunction
from cma_planner.kernels import inverse_cdf_table
from cma_planner.model import (
    BH,
    MH,
    N_LIVE,
    N_STATES,
    RM,
    Absorbing,
    Action,
    conditional_feature_marginal,
    decode,
    default_model_document,
    model_from_json,
    state_index,
)
from cma_planner.pomdp import TERMINAL, decode_obs
from cma_planner.sim import (
    EPISODE_COLUMNS,
    PolicyAssets,
    SimConfig,
    SimOutcome,
    SimulationError,
    Terminal,
    episode_rng,
    episode_uniforms,
    estimate,
    per_step_hazard,
    run_batch,
    run_episode,
    sample_observation,
    sample_transition,
    stressed_model,
    summarize,
    write_episode_log,
    write_summary,
)

POLICIES = ("noop", "true_mdp", "obs_mdp", "map_mdp", "pomdp")


def assets_for(policy, vf, pbvi_alphas, p_obs):
    return PolicyAssets(vf, pbvi_alphas(p_obs) if policy == "pomdp" else None)


def forced_completion_model():
    doc = copy.deepcopy(default_model_document())
    for f in doc["factors"]:
        if f["child"] in ("C", "FL"):
            for entry in f["cpt"]:
                entry["dist"] = {"0": 0.0, "1": 1.0} if f["child"] == "C" else {"0": 1.0, "1": 0.0}
    return model_from_json(doc)


def constant_policy_vf(action, vf):
    return ValueFunction(vf.v, vf.q, np.full(N_STATES, int(action), dtype=np.int64), vf.discount)


def binomial_ok(hits, n, p):
    return abs(hits - n * p) <= 3 * math.sqrt(n * p * (1 - p))


# ---------------------------------------------------------------------------
# Configuration


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(p_obs=0.4)
    with pytest.raises(ValueError):
        SimConfig(horizon=0)
    with pytest.raises(ValueError):
        SimConfig(n_episodes=0)
    with pytest.raises(ValueError):
        SimConfig(initial_belief="uniform")
    with pytest.raises(ValueError):
        SimConfig(policy="random")
    assert SimConfig(bh_cohort="P").bh_cohort == BH.P


# ---------------------------------------------------------------------------
# Sampling


def test_deterministic_row_sampling(model, rng):
    s = state_index()
    for _ in range(50):
        assert sample_transition(rng, s, Action.Terminate, model) == Absorbing.T
        assert sample_transition(rng, int(Absorbing.E), Action.NoOp, model) == Absorbing.E


def test_inverse_cdf_never_picks_zero_probability():
    p = np.array([0.0, 0.3, 0.0, 0.7, 0.0])
    cdf = inverse_cdf_table(p)
    assert cdf[-1] == 1.0
    draws = np.searchsorted(cdf, np.array([0.0, 0.2999, 0.3, 0.999999999]), side="right")
    assert set(draws) <= {1, 3}


def test_spalled_margin_recovery_frequency(model):
    s = state_index("N", "SF", "MM0", "G", "RM1")
    row = model.p[Action.NoOp, s]
    mm1 = np.array([st < N_LIVE and decode(st).mm.name == "MM1" for st in range(N_STATES)])
    expected = row[mm1].sum()
    assert conditional_feature_marginal(model.transition, s, Action.NoOp, "MM")[1] == pytest.approx(0.005)
    n = 10**6
    draws = np.searchsorted(inverse_cdf_table(row), np.random.default_rng(0).random(n), side="right")
    assert binomial_ok(int(mm1[draws].sum()), n, expected)


def test_sample_transition_frequency(model):
    rng = np.random.default_rng(1)
    s = state_index("N", "SF", "MM1", "P", "RM1")
    n = 20000
    hits = sum(decode(sample_transition(rng, s, Action.NoOp, model)) == decode(s) for _ in range(n))
    assert binomial_ok(hits, n, model.p[Action.NoOp, s, s])


def test_observation_sampling(obs_models, rng):
    s = state_index("N", "NF", "MM1", "G", "RM1")
    o = sample_observation(rng, s, Action.NoOp, obs_models[1.0])
    assert decode_obs(o) == (0, 1, 1)
    assert sample_observation(rng, int(Absorbing.C), Action.NoOp, obs_models[0.6]) == TERMINAL


def test_observation_flip_rate(obs_models):
    s = state_index("N", "NF", "MM1", "G", "RM1")
    row = obs_models[0.8].z[Action.NoOp, s]
    n = 10**6
    draws = np.searchsorted(inverse_cdf_table(row), np.random.default_rng(2).random(n), side="right")
    flipped = np.array([decode_obs(o).rm == RM.RM0 for o in range(TERMINAL)] + [False])
    assert binomial_ok(int(flipped[draws].sum()), n, 0.2)


def test_episode_streams_independent_of_batch():
    a = episode_uniforms(7, [3], 10)[0]
    b = episode_uniforms(7, [0, 1, 2, 3], 10)[3]
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(episode_rng(7, 1).random(4), episode_rng(7, 2).random(4))
    assert not np.array_equal(episode_rng(7, 1).random(4), episode_rng(8, 1).random(4))


# ---------------------------------------------------------------------------
# Episodes


def test_forced_completion_in_one_step(vf):
    m = forced_completion_model()
    out = run_episode(SimConfig(policy="noop"), m, PolicyAssets(), 0)
    assert out.terminal == Terminal.COMPLETED and out.steps == 1
    assert out.cum_reward == pytest.approx(0.368 + 0.163)
    assert out.true_success


def test_terminate_at_first_step(model, vf):
    out = run_episode(SimConfig(policy="true_mdp"), model, PolicyAssets(constant_policy_vf(Action.Terminate, vf)), 0)
    assert out.terminal == Terminal.TERMINATED and out.steps == 1
    assert out.cum_reward == pytest.approx(0.286)
    assert out.took_contingency and not out.completed and out.safe


def test_illegal_action_raises(model, vf):
    bad = PolicyAssets(constant_policy_vf(Action.LandPract, vf))
    cfg = SimConfig(policy="true_mdp", n_episodes=5)
    with pytest.raises(SimulationError):
        run_batch(cfg, model, bad)
    with pytest.raises(SimulationError):
        run_episode(cfg, model, bad, 0)


def test_missing_assets_rejected(model):
    with pytest.raises(ValueError):
        run_batch(SimConfig(policy="map_mdp"), model, PolicyAssets())


@pytest.mark.parametrize("policy", POLICIES)
@pytest.mark.parametrize("p_obs", [1.0, 0.8])
def test_reference_runner_matches_batch(model, vf, pbvi_alphas, obs_models, policy, p_obs):
    cfg = SimConfig(policy=policy, p_obs=p_obs, bh_cohort="M", n_episodes=60, base_seed=3)
    assets = assets_for(policy, vf, pbvi_alphas, p_obs)
    batch = run_batch(cfg, model, assets, obs_models[p_obs]).outcomes
    for out in batch:
        ref = run_episode(cfg, model, assets, out.episode, obs_models[p_obs])
        assert (ref.terminal, ref.steps, ref.took_contingency) == (out.terminal, out.steps, out.took_contingency)
        assert ref.cum_reward == pytest.approx(out.cum_reward, abs=1e-12)
        assert ref.disc_reward == pytest.approx(out.disc_reward, abs=1e-12)
        if policy in ("map_mdp", "pomdp"):
            assert ref.p_minmax == pytest.approx(out.p_minmax, abs=1e-12)
        else:
            assert ref.p_minmax is None and out.p_minmax is None


@pytest.mark.parametrize("policy", POLICIES)
def test_backends_agree(model, vf, pbvi_alphas, obs_models, policy):
    cfg = SimConfig(policy=policy, p_obs=0.6, bh_cohort="P", n_episodes=300, base_seed=11)
    assets = assets_for(policy, vf, pbvi_alphas, 0.6)
    a = run_batch(cfg, model, assets, obs_models[0.6], backend="numba").outcomes
    b = run_batch(cfg, model, assets, obs_models[0.6], backend="numpy").outcomes
    for x, y in zip(a, b):
        assert (x.terminal, x.steps, x.took_contingency) == (y.terminal, y.steps, y.took_contingency)
        assert x.cum_reward == pytest.approx(y.cum_reward, abs=1e-12)
        assert (x.p_minmax is None) == (y.p_minmax is None)
        if x.p_minmax is not None:
            assert x.p_minmax == pytest.approx(y.p_minmax, abs=1e-12)


def test_same_episode_twice_identical(model, vf, obs_models):
    cfg = SimConfig(policy="map_mdp", p_obs=0.8)
    assert run_episode(cfg, model, PolicyAssets(vf), 17) == run_episode(cfg, model, PolicyAssets(vf), 17)


def test_batch_order_invariance(model, vf, obs_models):
    cfg = SimConfig(policy="map_mdp", p_obs=0.8, n_episodes=200)
    full = run_batch(cfg, model, PolicyAssets(vf), obs_models[0.8])
    order = np.random.default_rng(0).permutation(200)
    shuffled = run_batch(cfg, model, PolicyAssets(vf), obs_models[0.8], episodes=order)
    assert shuffled.outcomes == full.outcomes
    part = run_batch(cfg, model, PolicyAssets(vf), obs_models[0.8], episodes=[150, 3])
    assert part.outcomes == [full.outcomes[3], full.outcomes[150]]
    assert summarize(reversed(full.outcomes)) == full.summary


def test_outcome_invariants(model, vf, obs_models):
    cfg = SimConfig(policy="obs_mdp", p_obs=0.6, bh_cohort="P", n_episodes=500, horizon=40)
    res = run_batch(cfg, model, PolicyAssets(vf), obs_models[0.6])
    for o in res.outcomes:
        assert 1 <= o.steps <= 40
        if o.terminal == Terminal.HORIZON:
            assert o.steps == 40
    s = res.summary
    total = s.completion.mean + s.termination.mean + s.failure.mean + s.horizon.mean
    assert total == pytest.approx(1.0, abs=1e-12)
    assert s.safety.mean == pytest.approx(1.0 - s.failure.mean, abs=1e-12)


def test_true_mdp_beats_noop_on_poor_battery(model, vf):
    cfg = SimConfig(policy="true_mdp", bh_cohort="P", n_episodes=5000)
    mdp = run_batch(cfg, model, PolicyAssets(vf)).summary.disc_reward
    noop = run_batch(SimConfig(policy="noop", bh_cohort="P", n_episodes=5000), model, PolicyAssets()).summary.disc_reward
    assert mdp.mean >= noop.mean - 2 * noop.sem


def test_stressed_model_only_changes_spall_onset(model):
    h = per_step_hazard(0.5, 100)
    assert 1 - (1 - h) ** 100 == pytest.approx(0.5)
    sm = stressed_model(model, 0.5, 100)
    np.testing.assert_allclose(sm.factor("MH").dense()[MH.NF], [1 - h, h, 0.0])
    np.testing.assert_array_equal(sm.factor("MH").dense()[1:], model.factor("MH").dense()[1:])
    cfg = SimConfig(policy="noop", bh_cohort="G", n_episodes=2000, p_spall=0.5)
    stressed = run_batch(cfg, model, PolicyAssets()).summary
    nominal = run_batch(SimConfig(policy="noop", bh_cohort="G", n_episodes=2000), model, PolicyAssets()).summary
    assert stressed.failure.mean > nominal.failure.mean


# ---------------------------------------------------------------------------
# Aggregation and output


def _outcome(i, terminal=Terminal.COMPLETED, took=False):
    return SimOutcome(i, terminal, 10, took, 1.0, 0.9, None)


def test_all_clean_completions():
    s = summarize([_outcome(i) for i in range(20)])
    assert s.true_success.mean == 1.0 and s.failure.mean == 0.0
    assert s.completion.sem == 0.0 and s.p_minmax is None


def test_rate_sem_is_binomial():
    outs = [_outcome(i, Terminal.FAILED if i < 30 else Terminal.COMPLETED) for i in range(100)]
    s = summarize(outs)
    assert s.failure.sem == pytest.approx(math.sqrt(0.3 * 0.7 / 100), abs=1e-15)
    lo, hi = s.failure.ci95
    assert lo == pytest.approx(0.3 - 1.959963984540054 * s.failure.sem)


def test_estimate_order_independent():
    x = np.random.default_rng(0).normal(size=1001)
    assert estimate(x) == estimate(x[::-1])
    assert math.isnan(estimate([]).mean)


def test_summarize_rejects_empty():
    with pytest.raises(ValueError):
        summarize([])


def test_logs_written(tmp_path, model, vf):
    res = run_batch(SimConfig(policy="map_mdp", p_obs=0.9, n_episodes=20), model, PolicyAssets(vf))
    log = tmp_path / "ep.csv"
    write_episode_log(log, [res])
    with open(log, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == EPISODE_COLUMNS and len(rows) == 20
    assert rows[0]["policy"] == "map_mdp" and rows[0]["bh"] == "G"
    summ = tmp_path / "s.json"
    write_summary(summ, [res])
    doc = json.loads(summ.read_text())
    assert doc[0]["metrics"]["n"] == 20
    for key in ("completion", "completion_sem", "safety_ci95_lo", "p_minmax"):
        assert key in doc[0]["metrics"]
