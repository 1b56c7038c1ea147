"""Factored contingency-management MDP: states, actions, margins, dynamics, reward.

State indices 0..107 enumerate ``(FS, MH, MM, BH, RM)`` in row-major order;
108..111 are the absorbing states C, T, FL and E.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from importlib import resources
from itertools import product
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np


class FS(IntEnum):
    N = 0
    ELASAP = 1
    ELPract = 2


class MH(IntEnum):
    NF = 0
    SF = 1
    JF = 2


class MM(IntEnum):
    MM0 = 0
    MM1 = 1


class BH(IntEnum):
    G = 0
    M = 1
    P = 2


class RM(IntEnum):
    RM0 = 0
    RM1 = 1


class Action(IntEnum):
    NoOp = 0
    Terminate = 1
    LandASAP = 2
    LandPract = 3


class Absorbing(IntEnum):
    C = 108
    T = 109
    FL = 110
    E = 111


FEATURES = ("FS", "MH", "MM", "BH", "RM")
FEATURE_ENUMS = {"FS": FS, "MH": MH, "MM": MM, "BH": BH, "RM": RM}
SHAPE = tuple(len(FEATURE_ENUMS[f]) for f in FEATURES)  # (3, 3, 2, 3, 2)
N_LIVE = int(np.prod(SHAPE))
N_STATES = N_LIVE + len(Absorbing)
N_ACTIONS = len(Action)
CONTINGENCY_ACTIONS = frozenset({Action.Terminate, Action.LandASAP, Action.LandPract})

# Domains of every variable a factor table may mention. C and FL are the
# binary absorbing triggers; "A" is the action taken at time t.
DOMAINS: dict[str, tuple[str, ...]] = {
    **{f: tuple(m.name for m in FEATURE_ENUMS[f]) for f in FEATURES},
    "A": tuple(a.name for a in Action),
    "C": ("0", "1"),
    "FL": ("0", "1"),
}
PARENT_VARIABLES = FEATURES + ("A",)
REQUIRED_CHILDREN = FEATURES + ("C", "FL")
STOCHASTIC_TOL = 1e-12


class ModelError(ValueError):
    """Raised when a factor table or weight document cannot form a model."""


class DomainError(ValueError):
    """Raised for prognosis inputs outside the margin formulas' domain."""


class FactoredState(NamedTuple):
    fs: FS
    mh: MH
    mm: MM
    bh: BH
    rm: RM

    def __str__(self):
        return "{" + ",".join(v.name for v in self) + "}"


def encode(state: FactoredState | Absorbing | Sequence[int]) -> int:
    if isinstance(state, Absorbing):
        return int(state)
    if len(state) != len(FEATURES):
        raise ValueError(f"expected {len(FEATURES)} features, got {state!r}")
    return int(np.ravel_multi_index(tuple(int(v) for v in state), SHAPE))


def decode(index: int) -> FactoredState | Absorbing:
    index = int(index)
    if not 0 <= index < N_STATES:
        raise ValueError(f"state index {index} out of range 0..{N_STATES - 1}")
    if index >= N_LIVE:
        return Absorbing(index)
    raw = np.unravel_index(index, SHAPE)
    return FactoredState(*(FEATURE_ENUMS[f](int(v)) for f, v in zip(FEATURES, raw)))


def state_index(fs="N", mh="NF", mm="MM1", bh="G", rm="RM1") -> int:
    """Index of a live state given feature names or enum members."""
    vals = []
    for feat, v in zip(FEATURES, (fs, mh, mm, bh, rm)):
        enum = FEATURE_ENUMS[feat]
        vals.append(enum[v] if isinstance(v, str) else enum(v))
    return encode(FactoredState(*vals))


def is_absorbing(index: int) -> bool:
    return int(index) >= N_LIVE


# Per-state feature lookup arrays, used by vectorised and jitted code.
_LIVE_FEATURES = np.array(list(np.ndindex(*SHAPE)), dtype=np.int64)
FS_OF_STATE = np.concatenate([_LIVE_FEATURES[:, 0], np.full(len(Absorbing), -1)]).astype(np.int64)


def feature_array(feature: str) -> np.ndarray:
    """Value of ``feature`` for every state (-1 on absorbing states)."""
    col = _LIVE_FEATURES[:, FEATURES.index(feature)]
    return np.concatenate([col, np.full(len(Absorbing), -1)]).astype(np.int64)


# ---------------------------------------------------------------------------
# Prognosis margins


@dataclass(frozen=True)
class MotorPrognosis:
    t_flight_time: float
    t_rul: Sequence[float]
    fault_weights: Sequence[float] = (1.0,)

    def __post_init__(self):
        if not self.t_flight_time > 0:
            raise DomainError(f"flight time must be positive, got {self.t_flight_time}")
        if len(self.t_rul) != len(self.fault_weights) or len(self.t_rul) == 0:
            raise DomainError("t_rul and fault_weights must be non-empty and equally long")
        if any(not t > 0 for t in self.t_rul):
            raise DomainError(f"remaining useful life must be positive, got {list(self.t_rul)}")
        if abs(sum(self.fault_weights) - 1.0) > 1e-12:
            raise DomainError(f"fault weights must sum to 1, got {sum(self.fault_weights)!r}")


@dataclass(frozen=True)
class BatteryPrognosis:
    t_flight_time: float
    t_eod: float

    def __post_init__(self):
        if not (self.t_flight_time > 0 and self.t_eod > 0):
            raise DomainError(
                f"flight time and end-of-discharge time must be positive, "
                f"got {self.t_flight_time}, {self.t_eod}"
            )


def motor_margin(prog: MotorPrognosis) -> float:
    """Weighted fraction of remaining motor life left after the planned flight."""
    return 1.0 - sum(w * prog.t_flight_time / t for w, t in zip(prog.fault_weights, prog.t_rul))


def reachability_margin(prog: BatteryPrognosis) -> float:
    return 1.0 - prog.t_flight_time / prog.t_eod


def discretize_margins(mm: float, rm: float) -> tuple[MM, RM]:
    return (MM.MM0 if mm < 0 else MM.MM1), (RM.RM0 if rm < 0 else RM.RM1)


# ---------------------------------------------------------------------------
# Action legality

_LEGAL_BY_FS = {
    FS.N: frozenset(Action),
    FS.ELPract: frozenset({Action.NoOp, Action.Terminate, Action.LandASAP}),
    FS.ELASAP: frozenset({Action.NoOp, Action.Terminate}),
}


def legal_actions(s: int) -> frozenset[Action]:
    st = decode(s)
    if isinstance(st, Absorbing):
        return frozenset({Action.NoOp})
    return _LEGAL_BY_FS[st.fs]


def legal_mask() -> np.ndarray:
    """Boolean ``[state, action]`` legality table."""
    mask = np.zeros((N_STATES, N_ACTIONS), dtype=bool)
    for s in range(N_STATES):
        for a in legal_actions(s):
            mask[s, a] = True
    return mask


LEGAL = legal_mask()
LEGAL.setflags(write=False)


# ---------------------------------------------------------------------------
# Factor tables


@dataclass(frozen=True)
class FactorTable:
    """Conditional distribution of ``child`` at t+1 given ``parents`` at t."""

    child: str
    parents: tuple[str, ...]
    cpt: Mapping[tuple[str, ...], Mapping[str, float]]

    def __post_init__(self):
        object.__setattr__(self, "parents", tuple(self.parents))
        if self.child not in REQUIRED_CHILDREN:
            raise ModelError(f"factor {self.child!r}: unknown child variable")
        for p in self.parents:
            if p not in PARENT_VARIABLES:
                raise ModelError(f"factor {self.child}: unknown parent {p!r}")
        if len(set(self.parents)) != len(self.parents):
            raise ModelError(f"factor {self.child}: duplicate parents {self.parents}")
        child_dom = DOMAINS[self.child]
        for key in self.cpt:
            if len(key) != len(self.parents) or any(
                v not in DOMAINS[p] for p, v in zip(self.parents, key)
            ):
                raise ModelError(f"factor {self.child}: invalid assignment {self._fmt(key)}")
        for key in product(*(DOMAINS[p] for p in self.parents)):
            if key not in self.cpt:
                raise ModelError(f"factor {self.child}: missing assignment {self._fmt(key)}")
            dist = self.cpt[key]
            extra = set(dist) - set(child_dom)
            if extra:
                raise ModelError(
                    f"factor {self.child}: assignment {self._fmt(key)} has unknown values {sorted(extra)}"
                )
            probs = [float(dist.get(v, 0.0)) for v in child_dom]
            if any(not (p >= 0.0) for p in probs) or abs(sum(probs) - 1.0) > STOCHASTIC_TOL:
                raise ModelError(
                    f"factor {self.child}: assignment {self._fmt(key)} is not a distribution {probs}"
                )

    def _fmt(self, key) -> str:
        return "{" + ", ".join(f"{p}={v}" for p, v in zip(self.parents, key)) + "}"

    def dense(self) -> np.ndarray:
        """Array indexed ``[parent values..., child value]``."""
        shape = tuple(len(DOMAINS[p]) for p in self.parents) + (len(DOMAINS[self.child]),)
        out = np.zeros(shape)
        child_dom = DOMAINS[self.child]
        for key, dist in self.cpt.items():
            idx = tuple(DOMAINS[p].index(v) for p, v in zip(self.parents, key))
            out[idx] = [float(dist.get(v, 0.0)) for v in child_dom]
        return out

    def to_json(self) -> dict:
        return {
            "child": self.child,
            "parents": list(self.parents),
            "cpt": [
                {
                    "given": dict(zip(self.parents, key)),
                    "dist": {v: float(dist.get(v, 0.0)) for v in DOMAINS[self.child]},
                }
                for key, dist in sorted(
                    self.cpt.items(),
                    key=lambda kv: tuple(DOMAINS[p].index(v) for p, v in zip(self.parents, kv[0])),
                )
            ],
        }

    @classmethod
    def from_json(cls, doc: Mapping, where: str = "factors") -> "FactorTable":
        try:
            child = doc["child"]
            parents = tuple(doc["parents"])
            entries = doc["cpt"]
        except (KeyError, TypeError) as exc:
            raise ModelError(f"{where}: missing key {exc}") from None
        cpt: dict[tuple[str, ...], dict[str, float]] = {}
        for i, entry in enumerate(entries):
            try:
                key = tuple(entry["given"][p] for p in parents)
                dist = {str(k): float(v) for k, v in entry["dist"].items()}
            except (KeyError, TypeError, ValueError) as exc:
                raise ModelError(f"{where}.{child}.cpt[{i}]: malformed entry ({exc})") from None
            if key in cpt:
                raise ModelError(f"factor {child}: duplicate assignment at {where}.{child}.cpt[{i}]")
            cpt[key] = dist
        return cls(child, parents, cpt)


# ---------------------------------------------------------------------------
# Transition assembly


@dataclass(frozen=True)
class TransitionModel:
    p: np.ndarray  # [action, state, next_state]

    def __post_init__(self):
        self.p.setflags(write=False)


def _factor_lookup(dense: np.ndarray, parents: Sequence[str], feats: Sequence[int], a: int):
    idx = tuple(a if p == "A" else feats[FEATURES.index(p)] for p in parents)
    return dense[idx]


def build_transition(factors: Iterable[FactorTable]) -> TransitionModel:
    """Assemble the action-indexed transition tensor from per-variable factors.

    Terminate moves every live state to T. Otherwise FL fires first, then C,
    and the remaining mass is spread over the product of the five feature
    factors. Illegal (state, action) rows copy the NoOp row.
    """
    by_child: dict[str, FactorTable] = {}
    for f in factors:
        if f.child in by_child:
            raise ModelError(f"factor {f.child}: defined more than once")
        by_child[f.child] = f
    missing = [c for c in REQUIRED_CHILDREN if c not in by_child]
    if missing:
        raise ModelError(f"missing factor tables for {missing}")
    dense = {c: (by_child[c].parents, by_child[c].dense()) for c in REQUIRED_CHILDREN}

    p = np.zeros((N_ACTIONS, N_STATES, N_STATES))
    for s in range(N_LIVE):
        feats = _LIVE_FEATURES[s]
        for a in Action:
            if a == Action.Terminate:
                p[a, s, Absorbing.T] = 1.0
                continue
            dists = [_factor_lookup(dense[f][1], dense[f][0], feats, a) for f in FEATURES]
            joint = dists[0]
            for d in dists[1:]:
                joint = np.multiply.outer(joint, d)
            p_fl = _factor_lookup(dense["FL"][1], dense["FL"][0], feats, a)[1]
            p_c = _factor_lookup(dense["C"][1], dense["C"][0], feats, a)[1]
            live = (1.0 - p_fl) * (1.0 - p_c)
            p[a, s, :N_LIVE] = live * joint.ravel()
            p[a, s, Absorbing.FL] = p_fl
            p[a, s, Absorbing.C] = (1.0 - p_fl) * p_c
        for a in Action:
            if not LEGAL[s, a]:
                p[a, s] = p[Action.NoOp, s]
    for term in (Absorbing.C, Absorbing.T, Absorbing.FL, Absorbing.E):
        p[:, term, Absorbing.E] = 1.0
    return TransitionModel(p)


def conditional_feature_marginal(tm: TransitionModel, s: int, a: int, feature: str) -> np.ndarray:
    """Distribution of ``feature`` at t+1 given the next state stays live."""
    row = tm.p[a, s, :N_LIVE].reshape(SHAPE)
    axis = FEATURES.index(feature)
    other = tuple(i for i in range(len(FEATURES)) if i != axis)
    marg = row.sum(axis=other)
    return marg / marg.sum()


# ---------------------------------------------------------------------------
# Reward

F_E = {Absorbing.C: 1.0, Absorbing.T: -0.1, Absorbing.FL: -1.0, Absorbing.E: 0.0}
F_A = {Action.NoOp: 1.0, Action.Terminate: -1.0, Action.LandASAP: -0.5, Action.LandPract: 0.5}
F_S = {
    "FS": {FS.N: 1.0, FS.ELASAP: -1.0, FS.ELPract: -1.0},
    "MH": {MH.NF: 1.0, MH.SF: 0.0, MH.JF: -1.0},
    "MM": {MM.MM1: 1.0, MM.MM0: -1.0},
    "BH": {BH.G: 1.0, BH.M: 0.0, BH.P: -1.0},
    "RM": {RM.RM1: 1.0, RM.RM0: -1.0},
}


@dataclass(frozen=True)
class RewardWeights:
    w_e: Mapping[str, float] = field(
        default_factory=lambda: {"C": 0.163, "T": 0.0, "FL": 0.408, "E": 0.0}
    )
    w_s: tuple[float, ...] = (0.0, 0.0, 0.082, 0.041, 0.163)
    w_a: Mapping[str, float] = field(
        default_factory=lambda: {"NoOp": 0.082, "Terminate": 0.0, "LandASAP": 0.02, "LandPract": 0.041}
    )

    def __post_init__(self):
        if set(self.w_e) != {m.name for m in Absorbing}:
            raise ModelError(f"weights.w_e must name exactly {[m.name for m in Absorbing]}")
        if set(self.w_a) != {m.name for m in Action}:
            raise ModelError(f"weights.w_a must name exactly {[m.name for m in Action]}")
        if len(self.w_s) != len(FEATURES):
            raise ModelError(f"weights.w_s must have {len(FEATURES)} entries")
        object.__setattr__(self, "w_s", tuple(float(x) for x in self.w_s))

    def to_json(self) -> dict:
        return {"w_e": dict(self.w_e), "w_s": list(self.w_s), "w_a": dict(self.w_a)}


def state_features_vector(st: FactoredState) -> np.ndarray:
    return np.array([F_S[f][v] for f, v in zip(FEATURES, st)])


def _state_reward(s: int, w: RewardWeights) -> float:
    st = decode(s)
    if isinstance(st, Absorbing):
        return w.w_e[st.name] * F_E[st]
    return float(np.dot(w.w_s, state_features_vector(st)))


@dataclass(frozen=True)
class RewardModel:
    weights: RewardWeights
    r: np.ndarray  # [state, action]

    def __post_init__(self):
        self.r.setflags(write=False)

    @classmethod
    def from_weights(cls, weights: RewardWeights | None = None) -> "RewardModel":
        w = weights or RewardWeights()
        r = np.zeros((N_STATES, N_ACTIONS))
        for s in range(N_STATES):
            base = _state_reward(s, w)
            for a in Action:
                if s >= N_LIVE:
                    r[s, a] = base
                else:
                    act = a if LEGAL[s, a] else Action.NoOp
                    r[s, a] = base + w.w_a[act.name] * F_A[act]
        return cls(w, r)

    def reward(self, s: int, a: int) -> float:
        if not LEGAL[s, a]:
            raise ValueError(f"action {Action(a).name} is illegal in state {decode(s)}")
        return float(self.r[s, a])


# ---------------------------------------------------------------------------
# Model bundle, JSON document, validation


@dataclass(frozen=True)
class CMAModel:
    factors: tuple[FactorTable, ...]
    weights: RewardWeights
    transition: TransitionModel
    reward: RewardModel

    @classmethod
    def from_parts(cls, factors: Iterable[FactorTable], weights: RewardWeights | None = None):
        factors = tuple(factors)
        weights = weights or RewardWeights()
        return cls(factors, weights, build_transition(factors), RewardModel.from_weights(weights))

    @property
    def p(self) -> np.ndarray:
        return self.transition.p

    @property
    def r(self) -> np.ndarray:
        return self.reward.r

    def factor(self, child: str) -> FactorTable:
        for f in self.factors:
            if f.child == child:
                return f
        raise KeyError(child)

    def to_json(self) -> dict:
        return {
            "format": "cma-model",
            "version": MODEL_FORMAT_VERSION,
            "factors": [f.to_json() for f in self.factors],
            "weights": self.weights.to_json(),
        }


MODEL_FORMAT_VERSION = 1


def model_from_json(doc: Mapping) -> CMAModel:
    if not isinstance(doc, Mapping):
        raise ModelError("model document must be a JSON object")
    if doc.get("version") != MODEL_FORMAT_VERSION:
        raise ModelError(f"version: expected {MODEL_FORMAT_VERSION}, got {doc.get('version')!r}")
    if "factors" not in doc or not isinstance(doc["factors"], list):
        raise ModelError("factors: missing or not a list")
    factors = [FactorTable.from_json(f, where=f"factors[{i}]") for i, f in enumerate(doc["factors"])]
    wdoc = doc.get("weights", {})
    try:
        weights = RewardWeights(
            w_e={k: float(v) for k, v in wdoc["w_e"].items()},
            w_s=tuple(float(v) for v in wdoc["w_s"]),
            w_a={k: float(v) for k, v in wdoc["w_a"].items()},
        )
    except (KeyError, TypeError, AttributeError, ValueError) as exc:
        raise ModelError(f"weights: missing or malformed entry {exc}") from None
    return CMAModel.from_parts(factors, weights)


def default_model_document() -> dict:
    text = resources.files("cma_planner.data").joinpath("default_model.json").read_text()
    return json.loads(text)


_DEFAULT: CMAModel | None = None


def default_model() -> CMAModel:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = model_from_json(default_model_document())
    return _DEFAULT


def load_model(path: str | None = None) -> CMAModel:
    if path is None:
        return default_model()
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelError(f"{path}: invalid JSON ({exc})") from None
    return model_from_json(doc)


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)
    unreachable: dict[str, list[int]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_model(t: TransitionModel, r: RewardModel) -> ValidationReport:
    """Check stochasticity, list unreachable states, and check illegal-pair rewards."""
    rep = ValidationReport()
    p = t.p
    if p.shape != (N_ACTIONS, N_STATES, N_STATES):
        rep.violations.append(f"transition tensor has shape {p.shape}")
        return rep
    for a in Action:
        sums = p[a].sum(axis=1)
        for s in np.flatnonzero(np.abs(sums - 1.0) > STOCHASTIC_TOL):
            rep.violations.append(f"row (action={a.name}, state={s}) sums to {sums[s]!r}")
        for s in np.flatnonzero(((p[a] < 0) | (p[a] > 1)).any(axis=1)):
            rep.violations.append(f"row (action={a.name}, state={s}) has entries outside [0, 1]")
        inflow = p[a].sum(axis=0) - np.diag(p[a])
        rep.unreachable[a.name] = [int(s) for s in np.flatnonzero(inflow <= 0.0)]
    for s, a in zip(*np.nonzero(~LEGAL)):
        if r.r[s, a] != r.r[s, Action.NoOp]:
            rep.violations.append(
                f"reward for illegal pair (state={s}, action={Action(a).name}) differs from NoOp"
            )
    return rep


def validate_document(doc: Mapping) -> ValidationReport:
    """Build a model from a JSON document and validate it, folding build errors into the report."""
    try:
        model = model_from_json(doc)
    except ModelError as exc:
        return ValidationReport(violations=[f"construction error: {exc}"])
    return validate_model(model.transition, model.reward)
