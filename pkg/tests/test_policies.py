import numpy as np
import pytest

from cma_planner.model import BH, FS, LEGAL, N_LIVE, N_STATES, RM, Absorbing, Action, decode, state_index
from cma_planner.pbvi import qmdp_alphas
from cma_planner.policies import (
    Policy,
    PolicyContext,
    PolicyKind,
    map_mdp_action,
    noop_action,
    obs_mdp_action,
    obs_reconstruct,
    pomdp_action,
    true_mdp_action,
)
from cma_planner.pomdp import TERMINAL, MotorObs, encode_obs, initial_belief
from cma_planner.sim import sample_observation, sample_transition


def ctx_for(bh):
    ctx = PolicyContext()
    ctx.reset(initial_belief(bh))
    return ctx


def test_kind_codes_and_flags():
    assert [k.code for k in PolicyKind] == [0, 1, 2, 3, 4]
    assert PolicyKind("map_mdp").tracks_belief and PolicyKind.POMDP.tracks_belief
    assert not PolicyKind.OBS_MDP.tracks_belief
    assert not PolicyKind.TRUE_MDP.uses_observations and PolicyKind.OBS_MDP.uses_observations


@pytest.mark.parametrize("arg", [0, int(Absorbing.E), 100])
def test_noop_always_noop(arg):
    assert noop_action(arg) == Action.NoOp
    assert noop_action() == Action.NoOp


def test_true_mdp_examples(vf):
    s = state_index("N", "NF", "MM0", "G", "RM0")
    assert true_mdp_action(s, vf) == Action.LandPract
    assert true_mdp_action(int(Absorbing.E), vf) == Action.NoOp
    assert all(true_mdp_action(s, vf) == Action.LandPract for _ in range(5))


def test_obs_reconstruction_rules():
    assert obs_reconstruct(encode_obs((FS.N, MotorObs.MM1, RM.RM1)), BH.G) == state_index("N", "NF", "MM1", "G", "RM1")
    assert obs_reconstruct(encode_obs((FS.N, MotorObs.MM0, RM.RM1)), BH.M) == state_index("N", "SF", "MM0", "M", "RM1")
    assert obs_reconstruct(encode_obs((FS.ELPract, MotorObs.JF, RM.RM0)), BH.P) == state_index("ELPract", "JF", "MM0", "P", "RM0")
    with pytest.raises(ValueError):
        obs_reconstruct(TERMINAL, BH.G)


def test_obs_mdp_examples(vf):
    ctx = ctx_for(BH.G)
    o = encode_obs((FS.N, MotorObs.MM1, RM.RM1))
    assert obs_mdp_action(o, ctx, vf) == vf.policy[state_index("N", "NF", "MM1", "G", "RM1")]
    o = encode_obs((FS.N, MotorObs.MM0, RM.RM1))
    assert obs_mdp_action(o, ctx, vf) == vf.policy[state_index("N", "SF", "MM0", "G", "RM1")]
    o = encode_obs((FS.ELASAP, MotorObs.JF, RM.RM0))
    assert obs_mdp_action(o, ctx, vf) in {Action.NoOp, Action.Terminate}


def test_obs_mdp_uses_initial_battery_health(vf):
    ctx = ctx_for(BH.P)
    o = encode_obs((FS.N, MotorObs.MM1, RM.RM0))
    assert obs_mdp_action(o, ctx, vf) == Action.LandASAP
    ctx = ctx_for(BH.G)
    assert obs_mdp_action(o, ctx, vf) == Action.LandPract


def test_obs_mdp_before_first_observation(vf):
    ctx = ctx_for(BH.G)
    assert obs_mdp_action(None, ctx, vf) == vf.policy[state_index(bh="G")]


def test_obs_mdp_fallback_is_legal(vf):
    for o in range(TERMINAL):
        for bh in BH:
            s = obs_reconstruct(o, bh)
            a = obs_mdp_action(o, ctx_for(bh), vf)
            assert LEGAL[s, a]


def test_map_mdp_examples(vf):
    for s in range(N_STATES):
        assert map_mdp_action(np.eye(N_STATES)[s], vf) == true_mdp_action(s, vf)
    b = np.zeros(N_STATES)
    lo, hi = state_index("N", "NF", "MM0", "G", "RM0"), state_index("N", "NF", "MM1", "G", "RM1")
    b[[lo, hi]] = 0.5
    assert map_mdp_action(b, vf) == vf.policy[lo]


def test_pomdp_examples(vf, pbvi_alphas):
    qa = qmdp_alphas(vf)
    for s in range(N_STATES):
        assert pomdp_action(np.eye(N_STATES)[s], qa) == vf.policy[s]
    b = initial_belief(BH.G)
    assert pomdp_action(b, pbvi_alphas(1.0)) == vf.policy[np.argmax(b)]
    b = np.zeros(N_STATES)
    s1, s2 = state_index(bh="G"), state_index(bh="M")
    assert vf.policy[s1] == vf.policy[s2]
    b[[s1, s2]] = 0.5
    assert pomdp_action(b, qa) == vf.policy[s1]


def test_policy_requires_assets(vf, model):
    with pytest.raises(ValueError):
        Policy("true_mdp")
    with pytest.raises(ValueError):
        Policy("pomdp", vf=vf, p=model.p, z=model.p)
    with pytest.raises(ValueError):
        Policy("map_mdp", vf=vf)
    assert Policy("noop").act(0) == Action.NoOp


def test_context_reset_clears_history(model, obs_models, vf):
    pol = Policy("map_mdp", vf, None, model.p, obs_models[0.9].z)
    pol.reset(initial_belief(BH.M))
    a = pol.act(state_index(bh="M"))
    pol.observe(a, encode_obs((FS.N, MotorObs.MM1, RM.RM1)))
    assert len(pol.ctx.history) == 2
    pol.reset(initial_belief(BH.G))
    assert len(pol.ctx.history) == 1 and pol.ctx.inferred_bh == BH.G


def test_full_accuracy_rules_agree_on_shared_traces(model, obs_models, vf):
    om = obs_models[1.0]
    rng = np.random.default_rng(21)
    for ep in range(300):
        b0 = initial_belief(BH(ep % 3))
        pols = [Policy(k, vf, None, model.p, om.z) for k in ("true_mdp", "obs_mdp", "map_mdp")]
        for p in pols:
            p.reset(b0)
        s = int(np.argmax(b0))
        for _ in range(100):
            acts = {int(p.act(s)) for p in pols}
            assert len(acts) == 1, decode(s)
            a = acts.pop()
            s = sample_transition(rng, s, a, model)
            if s >= N_LIVE:
                break
            o = sample_observation(rng, s, a, om)
            for p in pols:
                p.observe(a, o)


def test_noop_never_changes_flight_status(model):
    rng = np.random.default_rng(4)
    for _ in range(300):
        s = state_index(bh=BH(int(rng.integers(3))))
        for _ in range(100):
            s = sample_transition(rng, s, Action.NoOp, model)
            if s >= N_LIVE:
                assert s != Absorbing.T
                break
            assert decode(s).fs == FS.N
