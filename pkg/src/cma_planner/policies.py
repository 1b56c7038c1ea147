"""The five evaluated decision rules.

The jitted simulator re-implements these rules inline; the functions here are
the reference semantics and drive :func:`cma_planner.sim.run_episode`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .model import BH, LEGAL, MH, MM, Action, decode, state_index
from .mdp import ValueFunction
from .pbvi import AlphaSet, alpha_policy_action, belief_legal_row
from .pomdp import MotorObs, decode_obs, map_state, belief_update


class PolicyKind(str, Enum):
    NOOP = "noop"
    TRUE_MDP = "true_mdp"
    OBS_MDP = "obs_mdp"
    MAP_MDP = "map_mdp"
    POMDP = "pomdp"

    @property
    def code(self) -> int:
        return list(PolicyKind).index(self)

    @property
    def tracks_belief(self) -> bool:
        return self in (PolicyKind.MAP_MDP, PolicyKind.POMDP)

    @property
    def uses_observations(self) -> bool:
        return self not in (PolicyKind.NOOP, PolicyKind.TRUE_MDP)


def noop_action(*_args) -> Action:
    return Action.NoOp


def true_mdp_action(s: int, vf: ValueFunction) -> Action:
    return vf.action(s)


def _mdp_action_with_fallback(s: int, vf: ValueFunction) -> Action:
    a = int(vf.policy[s])
    if LEGAL[s, a]:
        return Action(a)
    q = np.where(LEGAL[s], vf.q[s], -np.inf)
    return Action(int(np.argmax(q)))


def obs_reconstruct(o: int, bh: BH) -> int:
    """State presumed by Obs-MDP: the observation taken at face value.

    MM1 is read as no fault, MM0 as a spalling fault and JF as a jam with
    zero margin; battery health comes from the initial belief.
    """
    obs = decode_obs(o)
    if obs is None:
        raise ValueError("the TERMINAL observation has no state reading")
    mh, mm = {
        MotorObs.MM1: (MH.NF, MM.MM1),
        MotorObs.MM0: (MH.SF, MM.MM0),
        MotorObs.JF: (MH.JF, MM.MM0),
    }[obs.motor]
    return state_index(obs.fs, mh, mm, bh, obs.rm)


@dataclass
class PolicyContext:
    """Per-episode state. ``estimate`` is Obs-MDP's presumed state."""

    belief: np.ndarray | None = None
    inferred_bh: BH = BH.G
    estimate: int | None = None
    last_action: Action | None = None
    history: list = field(default_factory=list)

    def reset(self, b0) -> None:
        b0 = np.asarray(b0, dtype=float)
        self.belief = b0.copy()
        start = map_state(b0)
        self.inferred_bh = decode(start).bh
        self.estimate = start
        self.last_action = None
        self.history = [b0.copy()]


def obs_mdp_action(o: int | None, ctx: PolicyContext, vf: ValueFunction) -> Action:
    """Pass ``o=None`` before the first observation to act on the initial estimate."""
    if o is not None:
        ctx.estimate = obs_reconstruct(o, ctx.inferred_bh)
    return _mdp_action_with_fallback(ctx.estimate, vf)


def map_mdp_action(b, vf: ValueFunction) -> Action:
    return _mdp_action_with_fallback(map_state(b), vf)


def pomdp_action(b, alphas: AlphaSet) -> Action:
    return alpha_policy_action(alphas, b, legal_row=belief_legal_row(b))


class Policy:
    """Uniform act/observe interface over the five rules."""

    def __init__(self, kind: PolicyKind | str, vf: ValueFunction | None = None,
                 alphas: AlphaSet | None = None, p=None, z=None):
        self.kind = PolicyKind(kind)
        if self.kind != PolicyKind.NOOP and vf is None:
            raise ValueError(f"{self.kind.value} needs a value function")
        if self.kind == PolicyKind.POMDP and alphas is None:
            raise ValueError("pomdp needs an alpha set")
        if self.kind.tracks_belief and (p is None or z is None):
            raise ValueError(f"{self.kind.value} needs transition and observation tensors")
        self.vf, self.alphas, self.p, self.z = vf, alphas, p, z
        self.ctx = PolicyContext()
        self._pending_obs = None

    def reset(self, b0) -> None:
        self.ctx.reset(b0)
        self._pending_obs = None

    def act(self, s: int) -> Action:
        """``s`` is the true state; only TrueMDP reads it."""
        k = self.kind
        if k == PolicyKind.NOOP:
            a = noop_action()
        elif k == PolicyKind.TRUE_MDP:
            a = true_mdp_action(s, self.vf)
        elif k == PolicyKind.OBS_MDP:
            a = obs_mdp_action(self._pending_obs, self.ctx, self.vf)
        elif k == PolicyKind.MAP_MDP:
            a = map_mdp_action(self.ctx.belief, self.vf)
        else:
            a = pomdp_action(self.ctx.belief, self.alphas)
        self.ctx.last_action = a
        return a

    def observe(self, a: int, o: int) -> None:
        self._pending_obs = o
        if self.kind.tracks_belief:
            self.ctx.belief = belief_update(self.ctx.belief, a, o, self.p, self.z)
            self.ctx.history.append(self.ctx.belief)
