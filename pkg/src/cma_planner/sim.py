"""Monte Carlo evaluation of a policy on the true (sampled) dynamics.

Each episode owns a random stream derived from ``(base_seed, episode)``, so
an episode's outcome never depends on which other episodes run or in what
order, and every cell of a sweep faces the same random numbers.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from enum import IntEnum

import numpy as np

from . import kernels
from .kernels import inverse_cdf_table
from .model import (
    BH,
    FS_OF_STATE,
    MH,
    N_LIVE,
    Absorbing,
    CMAModel,
    FactorTable,
    decode,
)
from .mdp import ValueFunction
from .pbvi import LEGAL_BY_FS, AlphaSet
from .policies import Policy, PolicyKind, obs_reconstruct
from .pomdp import (
    N_FACTORED_OBS,
    ObservationModel,
    build_observation_model,
    diffuse_bh_belief,
    initial_belief,
    p_minmax,
)


class Terminal(IntEnum):
    COMPLETED = kernels.TERM_COMPLETED
    TERMINATED = kernels.TERM_TERMINATED
    FAILED = kernels.TERM_FAILED
    HORIZON = kernels.TERM_HORIZON


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    """One evaluation cell.

    ``initial_belief`` is ``"known"`` (delta on the true start state) or
    ``"diffuse"`` (battery health uniform over G, M, P). ``p_spall`` if set
    replaces the per-flight chance of a spalling fault in the simulated
    dynamics only; planners keep their nominal model.
    """

    policy: PolicyKind = PolicyKind.TRUE_MDP
    p_obs: float = 1.0
    bh_cohort: BH = BH.G
    n_episodes: int = 5000
    horizon: int = 100
    discount: float = 0.99
    base_seed: int = 0
    initial_belief: str = "known"
    p_spall: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "policy", PolicyKind(self.policy))
        bh = self.bh_cohort
        object.__setattr__(self, "bh_cohort", BH[bh] if isinstance(bh, str) else BH(bh))
        if not 0.5 <= self.p_obs <= 1.0:
            raise ValueError(f"p_obs must lie in [0.5, 1], got {self.p_obs}")
        if self.n_episodes < 1 or self.horizon < 1:
            raise ValueError("n_episodes and horizon must be positive")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")
        if self.initial_belief not in ("known", "diffuse"):
            raise ValueError("initial_belief must be 'known' or 'diffuse'")
        if self.p_spall is not None and not 0.0 <= self.p_spall < 1.0:
            raise ValueError("p_spall must lie in [0, 1)")


@dataclass
class PolicyAssets:
    vf: ValueFunction | None = None
    alphas: AlphaSet | None = None


@dataclass(frozen=True)
class SimOutcome:
    episode: int
    terminal: Terminal
    steps: int
    took_contingency: bool
    cum_reward: float
    disc_reward: float
    p_minmax: float | None

    @property
    def completed(self) -> bool:
        return self.terminal == Terminal.COMPLETED

    @property
    def true_success(self) -> bool:
        return self.completed and not self.took_contingency

    @property
    def safe(self) -> bool:
        return self.terminal != Terminal.FAILED


# ---------------------------------------------------------------------------
# Sampling primitives


def episode_rng(base_seed: int, episode: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(base_seed, spawn_key=(episode,)))


def episode_uniforms(base_seed: int, episodes, horizon: int) -> np.ndarray:
    """Uniform draws ``[episode, step, (transition, observation)]``."""
    return np.stack([episode_rng(base_seed, int(e)).random((horizon, 2)) for e in episodes]) \
        if len(episodes) else np.zeros((0, horizon, 2))


def _draw(cdf_row, u: float) -> int:
    return min(int(np.searchsorted(cdf_row, u, side="right")), len(cdf_row) - 1)


def sample_transition(rng, s: int, a: int, model: CMAModel) -> int:
    return _draw(inverse_cdf_table(model.p[a, s]), rng.random())


def sample_observation(rng, s_next: int, a: int, obs_model: ObservationModel) -> int:
    return _draw(inverse_cdf_table(obs_model.z[a, s_next]), rng.random())


# ---------------------------------------------------------------------------
# Model variants


def per_step_hazard(p_flight: float, horizon: int) -> float:
    """Per-step probability giving ``p_flight`` chance of at least one event in ``horizon`` steps."""
    return 1.0 - (1.0 - p_flight) ** (1.0 / horizon)


def stressed_model(model: CMAModel, p_spall: float, horizon: int) -> CMAModel:
    """Copy of ``model`` whose NF->SF motor-health transition fires with
    per-flight probability ``p_spall``."""
    h = per_step_hazard(p_spall, horizon)
    mh = model.factor("MH")
    i = mh.parents.index("MH")
    cpt = {
        key: ({MH.NF.name: 1.0 - h, MH.SF.name: h} if key[i] == MH.NF.name else dist)
        for key, dist in mh.cpt.items()
    }
    factors = [FactorTable(mh.child, mh.parents, cpt) if f.child == "MH" else f for f in model.factors]
    return CMAModel.from_parts(factors, model.weights)


def start_belief(config: SimConfig) -> np.ndarray:
    if config.initial_belief == "diffuse":
        return diffuse_bh_belief()
    return initial_belief(config.bh_cohort)


# ---------------------------------------------------------------------------
# Episode runners


def run_episode(config: SimConfig, model: CMAModel, assets: PolicyAssets,
                episode: int, obs_model: ObservationModel | None = None,
                sim_model: CMAModel | None = None) -> SimOutcome:
    """Plain-python episode with the reference policy objects.

    Consumes the same random stream as :func:`run_batch`, so the two agree
    episode by episode.
    """
    obs_model = obs_model or build_observation_model(config.p_obs)
    sim_model = sim_model or _sim_model(config, model)
    u = episode_uniforms(config.base_seed, [episode], config.horizon)[0]
    p_cdf = inverse_cdf_table(sim_model.p)
    z_cdf = inverse_cdf_table(obs_model.z)
    b0 = start_belief(config)
    policy = Policy(config.policy, assets.vf, assets.alphas, model.p, obs_model.z)
    policy.reset(b0)
    s = _true_start(config)
    terminal, steps, took, cum, disc, g = Terminal.HORIZON, 0, False, 0.0, 0.0, 1.0
    for t in range(config.horizon):
        a = int(policy.act(s))
        if not LEGAL_BY_FS[FS_OF_STATE[s], a]:
            raise SimulationError(f"policy chose illegal action {a} in state {s}")
        took |= a != 0
        rew = model.r[s, a]
        cum += rew
        disc += g * rew
        g *= config.discount
        s_next = _draw(p_cdf[a, s], u[t, 0])
        steps = t + 1
        if s_next >= N_LIVE:
            rew = model.r[s_next, 0]
            cum += rew
            disc += g * rew
            terminal = {
                Absorbing.C: Terminal.COMPLETED,
                Absorbing.T: Terminal.TERMINATED,
            }.get(s_next, Terminal.FAILED)
            break
        o = _draw(z_cdf[a, s_next], u[t, 1])
        policy.observe(a, o)
        s = s_next
    pmm = p_minmax(policy.ctx.history) if policy.kind.tracks_belief else None
    return SimOutcome(episode, terminal, steps, took, cum, disc, pmm)


def _true_start(config: SimConfig) -> int:
    return int(np.argmax(initial_belief(config.bh_cohort)))


def _sim_model(config: SimConfig, model: CMAModel) -> CMAModel:
    if config.p_spall is None:
        return model
    return stressed_model(model, config.p_spall, config.horizon)


def _check_assets(kind: PolicyKind, assets: PolicyAssets):
    if kind != PolicyKind.NOOP and assets.vf is None:
        raise ValueError(f"{kind.value} needs a value function")
    if kind == PolicyKind.POMDP and assets.alphas is None:
        raise ValueError("pomdp needs an alpha set")


@dataclass
class BatchResult:
    config: SimConfig
    outcomes: list[SimOutcome]
    summary: "MetricsSummary" = field(init=False)

    def __post_init__(self):
        self.summary = summarize(self.outcomes)


def run_batch(config: SimConfig, model: CMAModel, assets: PolicyAssets,
              obs_model: ObservationModel | None = None, episodes=None,
              backend=None) -> BatchResult:
    """Run ``episodes`` (default ``range(n_episodes)``) through the jitted or
    vectorised simulator. Outcomes come back sorted by episode index."""
    kind = config.policy
    _check_assets(kind, assets)
    obs_model = obs_model or build_observation_model(config.p_obs)
    sim_model = _sim_model(config, model)
    episodes = np.arange(config.n_episodes) if episodes is None else np.sort(np.asarray(episodes, dtype=np.int64))
    n_s = model.p.shape[1]
    b0 = start_belief(config)
    vf = assets.vf
    mdp_policy = vf.policy if vf is not None else np.zeros(n_s, dtype=np.int64)
    q = vf.q if vf is not None else np.zeros((n_s, model.p.shape[0]))
    if assets.alphas is not None and kind == PolicyKind.POMDP:
        alphas, alpha_actions = assets.alphas.values, assets.alphas.actions
    else:
        alphas, alpha_actions = np.zeros((1, n_s)), np.zeros(1, dtype=np.int64)
    inferred_bh = decode(int(np.argmax(b0))).bh
    obs_recon = np.array([obs_reconstruct(o, inferred_bh) for o in range(N_FACTORED_OBS)] + [0],
                         dtype=np.int64)
    args = (
        kind.code,
        np.full(len(episodes), _true_start(config), dtype=np.int64),
        b0,
        episode_uniforms(config.base_seed, episodes, config.horizon),
        np.ascontiguousarray(model.p),
        inverse_cdf_table(sim_model.p),
        np.ascontiguousarray(obs_model.z),
        inverse_cdf_table(obs_model.z),
        np.ascontiguousarray(model.r),
        LEGAL_BY_FS,
        FS_OF_STATE.astype(np.int64),
        np.ascontiguousarray(mdp_policy, dtype=np.int64),
        np.ascontiguousarray(q),
        np.ascontiguousarray(alphas),
        np.ascontiguousarray(alpha_actions, dtype=np.int64),
        obs_recon,
        float(config.discount),
        int(config.horizon),
    )
    terminal, steps, took, cum, disc, pmm, err = kernels.simulate(*args, backend=backend)
    if np.any(err == kernels.ERR_ILLEGAL_ACTION):
        raise SimulationError("policy chose an illegal action")
    if np.any(err == kernels.ERR_ZERO_NORMALIZER):
        raise SimulationError("belief update hit a zero-probability observation")
    outcomes = [
        SimOutcome(int(e), Terminal(int(terminal[i])), int(steps[i]), bool(took[i]),
                   float(cum[i]), float(disc[i]),
                   None if np.isnan(pmm[i]) else float(pmm[i]))
        for i, e in enumerate(episodes)
    ]
    return BatchResult(config, outcomes)


# ---------------------------------------------------------------------------
# Aggregation

Z95 = 1.959963984540054


@dataclass(frozen=True)
class Estimate:
    """Sample mean with its standard error (population form, ddof=0)."""

    mean: float
    sem: float

    @property
    def ci95(self) -> tuple[float, float]:
        return (self.mean - Z95 * self.sem, self.mean + Z95 * self.sem)


def estimate(values) -> Estimate:
    """Order-independent mean and SEM (values are sorted, sums are exact)."""
    x = sorted(float(v) for v in values)
    n = len(x)
    if n == 0:
        return Estimate(math.nan, math.nan)
    mean = math.fsum(x) / n
    var = math.fsum((v - mean) ** 2 for v in x) / n
    return Estimate(mean, math.sqrt(var / n))


METRICS = (
    "completion",
    "true_success",
    "failure",
    "safety",
    "termination",
    "horizon",
    "contingency",
    "cum_reward",
    "disc_reward",
    "reward_per_step",
    "steps",
)


@dataclass(frozen=True)
class MetricsSummary:
    n: int
    completion: Estimate
    true_success: Estimate
    failure: Estimate
    safety: Estimate
    termination: Estimate
    horizon: Estimate
    contingency: Estimate
    cum_reward: Estimate
    disc_reward: Estimate
    reward_per_step: Estimate
    steps: Estimate
    p_minmax: Estimate | None = None

    def to_dict(self) -> dict:
        out = {"n": self.n}
        for name in METRICS + ("p_minmax",):
            est = getattr(self, name)
            if est is None:
                continue
            lo, hi = est.ci95
            out.update({name: est.mean, f"{name}_sem": est.sem,
                        f"{name}_ci95_lo": lo, f"{name}_ci95_hi": hi})
        return out


def summarize(outcomes) -> MetricsSummary:
    outcomes = list(outcomes)
    if not outcomes:
        raise ValueError("cannot summarise an empty batch")
    col = {
        "completion": [o.completed for o in outcomes],
        "true_success": [o.true_success for o in outcomes],
        "failure": [o.terminal == Terminal.FAILED for o in outcomes],
        "safety": [o.safe for o in outcomes],
        "termination": [o.terminal == Terminal.TERMINATED for o in outcomes],
        "horizon": [o.terminal == Terminal.HORIZON for o in outcomes],
        "contingency": [o.took_contingency for o in outcomes],
        "cum_reward": [o.cum_reward for o in outcomes],
        "disc_reward": [o.disc_reward for o in outcomes],
        "reward_per_step": [o.cum_reward / o.steps for o in outcomes],
        "steps": [o.steps for o in outcomes],
    }
    pmm = [o.p_minmax for o in outcomes if o.p_minmax is not None]
    return MetricsSummary(
        n=len(outcomes),
        **{k: estimate(v) for k, v in col.items()},
        p_minmax=estimate(pmm) if pmm else None,
    )


# ---------------------------------------------------------------------------
# Output

EPISODE_COLUMNS = (
    "episode", "seed", "policy", "p_obs", "bh", "terminal", "steps",
    "took_contingency", "cum_reward", "disc_reward", "p_minmax",
)


def episode_rows(result: BatchResult):
    c = result.config
    for o in result.outcomes:
        yield {
            "episode": o.episode,
            "seed": c.base_seed,
            "policy": c.policy.value,
            "p_obs": repr(c.p_obs),
            "bh": c.bh_cohort.name,
            "terminal": o.terminal.name,
            "steps": o.steps,
            "took_contingency": int(o.took_contingency),
            "cum_reward": repr(o.cum_reward),
            "disc_reward": repr(o.disc_reward),
            "p_minmax": "" if o.p_minmax is None else repr(o.p_minmax),
        }


def write_episode_log(path, results) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=EPISODE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for res in results:
            w.writerows(episode_rows(res))


def config_dict(config: SimConfig) -> dict:
    d = asdict(config)
    d["policy"] = config.policy.value
    d["bh_cohort"] = config.bh_cohort.name
    return d


def write_summary(path_json, results) -> None:
    doc = [{"config": config_dict(r.config), "metrics": r.summary.to_dict()} for r in results]
    with open(path_json, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def with_policy(config: SimConfig, policy) -> SimConfig:
    return replace(config, policy=PolicyKind(policy))
