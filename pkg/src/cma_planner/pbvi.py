"""Alpha-vector policies: QMDP and point-based value iteration (PBVI).

PBVI starts from blind-policy lower bounds, so every alpha is the value of an
executable conditional plan and the value at any belief stays below the
fully observable MDP value.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import kernels
from ._accel import resolve_backend
from .kernels import inverse_cdf_table
from .model import BH, FS_OF_STATE, LEGAL, N_LIVE, N_STATES, Action, CMAModel
from .mdp import ValueFunction
from .pomdp import TERMINAL, ObservationModel, initial_belief

# Legal actions for each flight-status value (rows of LEGAL share FS).
LEGAL_BY_FS = np.array([LEGAL[np.flatnonzero(FS_OF_STATE == f)[0]] for f in range(3)])
COVERED_TOL = 1e-9


@dataclass(frozen=True)
class AlphaSet:
    values: np.ndarray  # [k, state]
    actions: np.ndarray  # [k]

    def __post_init__(self):
        if self.values.ndim != 2 or len(self.values) == 0:
            raise ValueError("an alpha set needs at least one vector")
        if len(self.actions) != len(self.values):
            raise ValueError("one action per alpha vector")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("alpha values must be finite")
        self.values.setflags(write=False)
        self.actions.setflags(write=False)

    def __len__(self):
        return len(self.values)

    def value(self, b) -> float | np.ndarray:
        """Upper envelope at a belief (or at each row of a belief matrix)."""
        return np.max(np.asarray(b) @ self.values.T, axis=-1)

    def to_json(self) -> dict:
        return {
            "alphas": [
                {"action": Action(int(a)).name, "values": v.tolist()}
                for v, a in zip(self.values, self.actions)
            ]
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AlphaSet":
        vals = np.array([entry["values"] for entry in doc["alphas"]], dtype=float)
        acts = np.array([Action[entry["action"]] for entry in doc["alphas"]], dtype=np.int64)
        return cls(vals, acts)

    def save(self, path, **meta) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({**meta, **self.to_json()}, fh)

    @classmethod
    def load(cls, path) -> "AlphaSet":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def qmdp_alphas(vf: ValueFunction) -> AlphaSet:
    q = np.array(vf.q, dtype=float)
    illegal = ~LEGAL
    q[illegal] = np.broadcast_to(q[:, [Action.NoOp]], q.shape)[illegal]
    return AlphaSet(np.ascontiguousarray(q.T), np.arange(q.shape[1], dtype=np.int64))


def alpha_policy_action(alphas: AlphaSet, b, legal_row=None) -> Action:
    """Action of the maximising alpha (lowest index on ties).

    With ``legal_row`` the search is restricted to alphas whose action is
    legal; if none is, NoOp is returned.
    """
    vals = alphas.values @ np.asarray(b)
    if legal_row is not None:
        ok = np.asarray(legal_row)[alphas.actions]
        if not ok.any():
            return Action.NoOp
        vals = np.where(ok, vals, -np.inf)
    return Action(int(alphas.actions[int(np.argmax(vals))]))


def belief_legal_row(b) -> np.ndarray:
    return LEGAL_BY_FS[FS_OF_STATE[int(np.argmax(b))]]


# ---------------------------------------------------------------------------
# Belief-set expansion


def _min_l1(b, points) -> float:
    return float(np.abs(np.asarray(points) - b).sum(axis=1).min())


def expand_beliefs(points, model: CMAModel, obs_model: ObservationModel, rng_seed=0,
                   max_points: int | None = None) -> np.ndarray:
    """Stochastic farthest-successor expansion.

    For each point, one successor per legal action is simulated with a
    sampled state, next state and observation; the successor farthest (L1)
    from the growing set is appended unless it is already covered.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    p, z = model.p, obs_model.z
    p_cdf, z_cdf = _cdfs(model, obs_model)
    pts = [np.asarray(b, dtype=float) for b in points]
    for b in list(pts):
        if max_points is not None and len(pts) >= max_points:
            break
        b_cdf = np.cumsum(b)
        best, best_d = None, COVERED_TOL
        for a in np.flatnonzero(belief_legal_row(b)):
            u = rng.random(3)
            s = min(int(np.searchsorted(b_cdf, u[0], side="right")), len(b) - 1)
            s2 = int(np.searchsorted(p_cdf[a, s], u[1], side="right"))
            if s2 >= N_LIVE:
                continue
            o = int(np.searchsorted(z_cdf[a, s2], u[2], side="right"))
            if o == TERMINAL:
                continue
            nb = z[a, :, o] * (b @ p[a])
            nb /= nb.sum()
            d = _min_l1(nb, pts)
            if d > best_d:
                best, best_d = nb, d
        if best is not None:
            pts.append(best)
    return np.array(pts)


# Single-entry caches. The source arrays are held alongside the derived tables
# so an identity match cannot be fooled by a recycled id().
_CDF_CACHE: list = [None, None, None]


def _cached(cache, p, z, build):
    if cache[0] is not p or cache[1] is not z:
        cache[:] = [p, z, build(p, z)]
    return cache[2]


def _cdfs(model, obs_model):
    return _cached(_CDF_CACHE, model.p, obs_model.z,
                   lambda p, z: (inverse_cdf_table(p), inverse_cdf_table(z)))


# ---------------------------------------------------------------------------
# Point-based backups


@dataclass(frozen=True)
class PBVIConfig:
    """``expansion_budget`` caps the points added by expansion on top of the
    seed set (cohort starts, live-state corners, QMDP rollout beliefs)."""

    discount: float = 0.99
    num_expansions: int = 30
    backups_per_expansion: int = 20
    seed: int = 0
    expansion_budget: int = 100
    corner_beliefs: bool = True
    rollout_episodes: int = 40
    rollout_horizon: int = 100
    rollout_min_distance: float = 0.05
    final_tolerance: float = 1e-7
    max_final_sweeps: int = 3000


def blind_alphas(model: CMAModel, discount: float) -> AlphaSet:
    """Values of the four always-the-same-action policies (a lower bound)."""
    n = model.p.shape[1]
    vals = []
    for a in Action:
        vals.append(np.linalg.solve(np.eye(n) - discount * model.p[a], model.r[:, a]))
    return AlphaSet(np.array(vals), np.arange(len(Action), dtype=np.int64))


def prune_alphas(values, actions, beliefs):
    """Drop duplicates, pointwise-dominated vectors and vectors that win at no belief point."""
    values = np.asarray(values)
    actions = np.asarray(actions)
    _, first = np.unique(values, axis=0, return_index=True)
    keep = np.sort(first)
    values, actions = values[keep], actions[keep]
    # rows are distinct, so j >= i everywhere means i is strictly dominated
    ge = np.all(values[:, None, :] >= values[None, :, :], axis=2)
    np.fill_diagonal(ge, False)
    dominated = ge.any(axis=0)
    values, actions = values[~dominated], actions[~dominated]
    winners = np.unique(np.argmax(np.asarray(beliefs) @ values.T, axis=1))
    return values[winners], actions[winners]


def point_backup(alphas: AlphaSet, beliefs, model: CMAModel, obs_model: ObservationModel,
                 discount: float, backend=None):
    """One PBVI backup at every belief point.

    Returns ``(alpha_values, actions, values)`` with one row per point.
    """
    B = np.ascontiguousarray(beliefs, dtype=float)
    legal_rows = LEGAL_BY_FS[FS_OF_STATE[B.argmax(axis=1)]]
    if resolve_backend(backend) == "numba":
        sp = _sparse(model, obs_model)
        return kernels.point_backup_nb(
            B, np.ascontiguousarray(alphas.values), np.ascontiguousarray(model.r), legal_rows,
            discount, *sp, obs_model.z.shape[2],
        )
    return _point_backup_np(alphas.values, B, model, obs_model, discount, legal_rows)


def _point_backup_np(G, B, model, obs_model, discount, legal_rows):
    n, n_s = B.shape
    best_val = np.full(n, -np.inf)
    best_alpha = np.zeros((n, n_s))
    best_act = np.zeros(n, dtype=np.int64)
    for a in Action:
        pa = model.p[a]
        za = obs_model.z[a]  # [s', o]
        pred = B @ pa  # [n, s']
        bao = pred[:, None, :] * za.T[None, :, :]  # [n, o, s']
        nz = bao.sum(axis=2) > 0
        kstar = np.zeros(nz.shape, dtype=np.int64)
        kstar[nz] = np.argmax(bao[nz] @ G.T, axis=1)
        # Observations unreachable from b still need some plan attached so the
        # vector stays a valid lower bound off b's support; alpha 0 will do.
        w = np.einsum("nos,so->ns", G[kstar], za)
        alpha_a = model.r[:, a][None, :] + discount * (w @ pa.T)
        val = np.einsum("ns,ns->n", alpha_a, B)
        better = legal_rows[:, a] & (val > best_val)
        best_val[better] = val[better]
        best_alpha[better] = alpha_a[better]
        best_act[better] = a
    return best_alpha, best_act, best_val


_SPARSE_CACHE: list = [None, None, None]


def _sparse(model, obs_model):
    return _cached(_SPARSE_CACHE, model.p, obs_model.z,
                   lambda p, z: kernels.padded_sparse(p) + kernels.padded_sparse(z))


def _sweep(alphas, B, model, obs_model, discount, backend=None):
    new_vals, new_acts, new_v = point_backup(alphas, B, model, obs_model, discount, backend)
    old = B @ alphas.values.T
    old_k = old.argmax(axis=1)
    old_v = old[np.arange(len(B)), old_k]
    worse = new_v < old_v
    new_vals[worse] = alphas.values[old_k[worse]]
    new_acts[worse] = alphas.actions[old_k[worse]]
    vals, acts = prune_alphas(new_vals, new_acts, B)
    out = AlphaSet(np.ascontiguousarray(vals), acts.astype(np.int64))
    return out, float(np.max(np.abs(out.value(B) - old_v)))


def initial_belief_points(corners: bool = False) -> np.ndarray:
    """Nominal start belief for each battery-health cohort, optionally
    followed by the delta belief of every other live state."""
    pts = [initial_belief(bh) for bh in BH]
    if corners:
        starts = {int(np.argmax(b)) for b in pts}
        pts += [np.eye(N_STATES)[s] for s in range(N_LIVE) if s not in starts]
    return np.array(pts)


def rollout_beliefs(model: CMAModel, obs_model: ObservationModel, alphas: AlphaSet, starts,
                    n_episodes: int, horizon: int, min_distance: float, rng) -> np.ndarray:
    """Beliefs visited while following ``alphas`` from each start belief.

    A visited belief is kept only if it lies more than ``min_distance`` (L1)
    from every belief kept so far.
    """
    p_cdf, z_cdf = _cdfs(model, obs_model)
    kept: list[np.ndarray] = []
    for b0 in np.asarray(starts, dtype=float):
        b0_cdf = np.cumsum(b0)
        for _ in range(n_episodes):
            b = b0
            s = min(int(np.searchsorted(b0_cdf, rng.random(), side="right")), len(b0) - 1)
            for _ in range(horizon):
                a = int(alpha_policy_action(alphas, b, belief_legal_row(b)))
                s = int(np.searchsorted(p_cdf[a, s], rng.random(), side="right"))
                if s >= N_LIVE:
                    break
                o = int(np.searchsorted(z_cdf[a, s], rng.random(), side="right"))
                nb = obs_model.z[a, :, o] * (b @ model.p[a])
                b = nb / nb.sum()
                if not kept or _min_l1(b, kept) > min_distance:
                    kept.append(b)
    return np.array(kept).reshape(-1, model.p.shape[1])


def default_belief_set(model: CMAModel, obs_model: ObservationModel, config: PBVIConfig,
                       rng, vf: ValueFunction | None = None) -> np.ndarray:
    """Cohort starts, optional corners, then beliefs reached by the QMDP policy."""
    pts = initial_belief_points(corners=config.corner_beliefs)
    if config.rollout_episodes > 0:
        if vf is None:
            from .mdp import SolverConfig, value_iteration

            vf = value_iteration(model, SolverConfig(discount=config.discount))
        starts = initial_belief_points(corners=False)
        extra = rollout_beliefs(model, obs_model, qmdp_alphas(vf), starts, config.rollout_episodes,
                                config.rollout_horizon, config.rollout_min_distance, rng)
        pts = np.vstack([pts, extra])
    return pts


def pbvi_solve(model: CMAModel, obs_model: ObservationModel, config: PBVIConfig = PBVIConfig(),
               beliefs=None, return_beliefs: bool = False, backend=None,
               vf: ValueFunction | None = None):
    """Point-based value iteration over a seeded, expanded belief set.

    ``vf`` (the MDP solution) is only used to drive the QMDP rollouts that
    seed the default belief set; it is solved on demand when omitted.
    """
    rng = np.random.default_rng(config.seed)
    if beliefs is None:
        beliefs = default_belief_set(model, obs_model, config, rng, vf)
    B = np.asarray(beliefs, dtype=float)
    if B.ndim != 2 or len(B) == 0:
        raise ValueError("PBVI needs a non-empty belief set")
    if model.p.shape[1] != obs_model.z.shape[1]:
        raise ValueError("model and observation model disagree on the state space")
    max_points = len(B) + config.expansion_budget
    seed_alphas = blind_alphas(model, config.discount)
    alphas = AlphaSet(*prune_alphas(seed_alphas.values, seed_alphas.actions, B))
    for i in range(config.num_expansions + 1):
        for _ in range(config.backups_per_expansion):
            alphas, _ = _sweep(alphas, B, model, obs_model, config.discount, backend)
        if i < config.num_expansions and len(B) < max_points:
            B = expand_beliefs(B, model, obs_model, rng, max_points=max_points)
    for _ in range(config.max_final_sweeps):
        alphas, delta = _sweep(alphas, B, model, obs_model, config.discount, backend)
        if delta <= config.final_tolerance:
            break
    return (alphas, B) if return_beliefs else alphas
