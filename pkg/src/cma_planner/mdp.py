"""Discounted infinite-horizon value iteration for the fully observable model."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .model import LEGAL, Action, CMAModel


class ConvergenceError(RuntimeError):
    def __init__(self, iterations: int, residual: float):
        super().__init__(
            f"value iteration did not converge in {iterations} iterations "
            f"(last residual {residual:.3e})"
        )
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class SolverConfig:
    discount: float = 0.99
    bellman_tolerance: float = 1e-9
    max_iterations: int = 100_000

    def __post_init__(self):
        if not 0.0 < self.discount < 1.0:
            raise ValueError(f"discount must lie in (0, 1), got {self.discount}")
        if not self.bellman_tolerance > 0.0:
            raise ValueError("bellman_tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")


@dataclass(frozen=True)
class ValueFunction:
    v: np.ndarray
    q: np.ndarray
    policy: np.ndarray
    discount: float = 0.99
    residuals: tuple[float, ...] = field(default=(), repr=False, compare=False)

    def action(self, s: int) -> Action:
        return Action(int(self.policy[s]))

    def to_json(self) -> dict:
        return {
            "discount": self.discount,
            "v": self.v.tolist(),
            "q": self.q.tolist(),
            "policy": [int(a) for a in self.policy],
            "policy_names": [Action(int(a)).name for a in self.policy],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ValueFunction":
        return cls(
            v=np.asarray(doc["v"], dtype=float),
            q=np.asarray(doc["q"], dtype=float),
            policy=np.asarray(doc["policy"], dtype=np.int64),
            discount=float(doc["discount"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "ValueFunction":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def greedy_policy(q: np.ndarray, legal: np.ndarray = LEGAL) -> np.ndarray:
    """Legal argmax per state; ties go to the lowest action index."""
    return np.where(legal, q, -np.inf).argmax(axis=1).astype(np.int64)


def bellman_backup(v, model: CMAModel, config: SolverConfig = SolverConfig(), backend=None):
    """One synchronous backup. Returns ``(v_new, q)``."""
    p, r = _arrays(model)
    return kernels.bellman_backup(p, r, _legal(model), np.asarray(v, dtype=float), config.discount, backend)


def _arrays(model):
    # Accepts a CMAModel or any object exposing p [A,S,S] and r [S,A].
    return np.ascontiguousarray(model.p), np.ascontiguousarray(model.r)


def _legal(model):
    legal = getattr(model, "legal", None)
    return LEGAL if legal is None else legal


def value_iteration(model: CMAModel, config: SolverConfig = SolverConfig(), backend=None) -> ValueFunction:
    p, r = _arrays(model)
    legal = _legal(model)
    v = np.zeros(p.shape[1])
    residuals = []
    for _ in range(config.max_iterations):
        v_new, q = kernels.bellman_backup(p, r, legal, v, config.discount, backend)
        res = float(np.max(np.abs(v_new - v)))
        residuals.append(res)
        v = v_new
        if res <= config.bellman_tolerance:
            break
    else:
        raise ConvergenceError(config.max_iterations, residuals[-1])
    # q is one backup behind v; recompute so v == max legal q exactly.
    _, q = kernels.bellman_backup(p, r, legal, v, config.discount, backend)
    v = np.where(legal, q, -np.inf).max(axis=1)
    return ValueFunction(v, q, greedy_policy(q, legal), config.discount, tuple(residuals))


@dataclass(frozen=True)
class TabularMDP:
    """Minimal stand-in model for toy problems in tests and examples."""

    p: np.ndarray
    r: np.ndarray
    legal: np.ndarray | None = None

    def __post_init__(self):
        if self.legal is None:
            object.__setattr__(self, "legal", np.ones(self.r.shape, dtype=bool))

