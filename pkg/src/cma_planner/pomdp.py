"""Observation model, Bayes belief filtering and belief statistics.

Observations are ``(fs_obs, motor_obs, rm_obs)`` triples enumerated row-major
(18 of them) plus a TERMINAL observation emitted by absorbing states.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .model import (
    BH,
    FS,
    MH,
    MM,
    N_ACTIONS,
    N_LIVE,
    N_STATES,
    RM,
    decode,
    state_index,
)


class MotorObs(IntEnum):
    MM0 = 0
    MM1 = 1
    JF = 2


OBS_SHAPE = (len(FS), len(MotorObs), len(RM))
N_FACTORED_OBS = int(np.prod(OBS_SHAPE))
TERMINAL = N_FACTORED_OBS
N_OBS = N_FACTORED_OBS + 1


class Observation(NamedTuple):
    fs: FS
    motor: MotorObs
    rm: RM

    def __str__(self):
        return f"({self.fs.name},{self.motor.name},{self.rm.name})"


def encode_obs(o: Observation | Sequence) -> int:
    fs, motor, rm = o
    fs = FS[fs] if isinstance(fs, str) else FS(fs)
    motor = MotorObs[motor] if isinstance(motor, str) else MotorObs(motor)
    rm = RM[rm] if isinstance(rm, str) else RM(rm)
    return int(np.ravel_multi_index((int(fs), int(motor), int(rm)), OBS_SHAPE))


def decode_obs(index: int) -> Observation | None:
    """Observation triple, or ``None`` for TERMINAL."""
    index = int(index)
    if index == TERMINAL:
        return None
    if not 0 <= index < N_FACTORED_OBS:
        raise ValueError(f"observation index {index} out of range")
    fs, motor, rm = np.unravel_index(index, OBS_SHAPE)
    return Observation(FS(int(fs)), MotorObs(int(motor)), RM(int(rm)))


class ImpossibleObservationError(RuntimeError):
    """The observation has zero probability under the predicted belief."""


@dataclass(frozen=True)
class ObservationModel:
    p_o: float
    z: np.ndarray  # [action, next_state, observation]

    def __post_init__(self):
        self.z.setflags(write=False)

    def to_json(self) -> dict:
        return {"p_o": self.p_o, "z": self.z.tolist()}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)


def _observation_row(s: int, p_o: float) -> np.ndarray:
    row = np.zeros(N_OBS)
    st = decode(s)
    if s >= N_LIVE:
        row[TERMINAL] = 1.0
        return row
    flip = 1.0 - p_o
    rm_dist = {st.rm: p_o, RM(1 - st.rm): flip}
    if st.mh == MH.JF:
        motor_dist = {MotorObs.JF: 1.0}
    else:
        true_mm = MotorObs(int(st.mm))
        motor_dist = {true_mm: p_o, MotorObs(1 - int(st.mm)): flip}
    for motor, pm in motor_dist.items():
        for rm, pr in rm_dist.items():
            row[encode_obs((st.fs, motor, rm))] += pm * pr
    return row


def build_observation_model(p_o: float) -> ObservationModel:
    """Observation likelihoods for accuracy ``p_o``.

    Flight status is always seen correctly and a jammed motor is always
    reported as JF. RM and (non-jam) MM readings are each correct with
    probability ``p_o`` and flipped otherwise, independently. Battery health
    is never observed.
    """
    if not 0.5 <= p_o <= 1.0:
        raise ValueError(f"p_o must lie in [0.5, 1], got {p_o}")
    rows = np.array([_observation_row(s, p_o) for s in range(N_STATES)])
    z = np.broadcast_to(rows, (N_ACTIONS, N_STATES, N_OBS)).copy()
    return ObservationModel(float(p_o), z)


def belief_update(b, a: int, o: int, p: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Bayes filter step: predict through ``p[a]``, weight by ``z[a, :, o]``.

    ``p`` and ``z`` are the raw tensors so the function also serves toy models.
    """
    b = np.asarray(b, dtype=float)
    unnorm = z[a, :, o] * (b @ p[a])
    norm = unnorm.sum()
    if not norm > 0.0:
        raise ImpossibleObservationError(
            f"observation {o} has zero probability after action {a}; model and trace disagree"
        )
    return unnorm / norm


def map_state(b) -> int:
    """Most probable state, lowest index on ties."""
    return int(np.argmax(b))


def p_minmax(trajectory: Iterable) -> float:
    """Minimum over time of the largest belief probability."""
    maxima = [float(np.max(b)) for b in trajectory]
    if not maxima:
        raise ValueError("belief trajectory is empty")
    return min(maxima)


def initial_belief(bh=BH.G, fs=FS.N, mh=MH.NF, mm=MM.MM1, rm=RM.RM1) -> np.ndarray:
    """Delta belief at the nominal start state for a known battery-health class."""
    b = np.zeros(N_STATES)
    b[state_index(fs, mh, mm, bh, rm)] = 1.0
    return b


def diffuse_bh_belief(fs=FS.N, mh=MH.NF, mm=MM.MM1, rm=RM.RM1) -> np.ndarray:
    """Nominal start state with battery health spread uniformly over G, M, P."""
    return sum(initial_belief(bh, fs, mh, mm, rm) for bh in BH) / len(BH)
