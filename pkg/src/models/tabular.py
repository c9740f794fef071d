#!/usr/bin/env python3
"""
Tabular data models for the h-PMD library
Finite MDPs, stochastic policies and their JSON schema
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union

import numpy as np

from src.utils.errors import DimensionError, InvalidModelError

# State values V (length S) and state-action values Q (shape S x A) are plain
# float arrays; the aliases name them in signatures.
VTable = np.ndarray
QTable = np.ndarray

PROB_TOL = 1e-12
SCHEMA_VERSION = "hpmd-mdp/1"


def _check_distribution_rows(array: np.ndarray, what: str) -> None:
    if np.any(array < 0):
        raise InvalidModelError(f"{what} has negative entries")
    sums = array.sum(axis=-1)
    worst = float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0
    if worst > PROB_TOL:
        raise InvalidModelError(f"{what} rows must sum to 1 (max deviation {worst:.3e})")


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite discounted MDP with rewards in [0, 1]"""

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    initial_dist: Optional[np.ndarray] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        transition = np.ascontiguousarray(self.transition, dtype=float)
        reward = np.ascontiguousarray(self.reward, dtype=float)
        if transition.ndim != 3 or transition.shape[0] != transition.shape[2]:
            raise DimensionError(f"transition must have shape [S][A][S], got {transition.shape}")
        n_states, n_actions, _ = transition.shape
        if n_states < 1 or n_actions < 1:
            raise InvalidModelError("an MDP needs at least one state and one action")
        if reward.shape != (n_states, n_actions):
            raise DimensionError(f"reward must have shape {(n_states, n_actions)}, got {reward.shape}")
        _check_distribution_rows(transition, "transition")
        if np.any(reward < 0) or np.any(reward > 1):
            raise InvalidModelError("rewards must lie in [0, 1]")
        if not 0.0 < float(self.discount) < 1.0:
            raise InvalidModelError(f"discount must lie in (0, 1), got {self.discount}")
        if self.initial_dist is None:
            initial = np.full(n_states, 1.0 / n_states)
        else:
            initial = np.asarray(self.initial_dist, dtype=float)
        if initial.shape != (n_states,):
            raise DimensionError(f"initial_dist must have length {n_states}")
        _check_distribution_rows(initial, "initial_dist")

        transition.setflags(write=False)
        reward.setflags(write=False)
        initial.setflags(write=False)
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "discount", float(self.discount))
        object.__setattr__(self, "initial_dist", initial)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def value_cap(self) -> float:
        """Upper end 1/(1-gamma) of every value of this MDP"""
        return 1.0 / (1.0 - self.discount)

    def to_dict(self) -> Dict[str, Any]:
        """Serialize to the documented schema (row-major flat arrays)"""
        return {
            "format": SCHEMA_VERSION,
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "discount": self.discount,
            "reward": self.reward.ravel().tolist(),
            "transition": self.transition.ravel().tolist(),
            "initial_dist": self.initial_dist.tolist(),
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TabularMdp":
        """Build an MDP from the documented schema"""
        missing = [key for key in ("n_states", "n_actions", "discount", "reward", "transition")
                   if key not in data]
        if missing:
            raise InvalidModelError(f"MDP document is missing fields: {', '.join(missing)}")
        n_states, n_actions = int(data["n_states"]), int(data["n_actions"])
        reward = np.asarray(data["reward"], dtype=float)
        transition = np.asarray(data["transition"], dtype=float)
        if reward.size != n_states * n_actions:
            raise DimensionError(f"reward has {reward.size} entries, expected {n_states * n_actions}")
        if transition.size != n_states * n_actions * n_states:
            raise DimensionError(
                f"transition has {transition.size} entries, expected {n_states * n_actions * n_states}")
        return cls(
            transition=transition.reshape(n_states, n_actions, n_states),
            reward=reward.reshape(n_states, n_actions),
            discount=float(data["discount"]),
            initial_dist=data.get("initial_dist"),
            metadata=dict(data.get("metadata", {})),
        )

    def save_json(self, path: Union[str, Path]) -> Path:
        """Write the MDP to a JSON file"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f)
        return path

    @classmethod
    def load_json(cls, path: Union[str, Path]) -> "TabularMdp":
        """Read an MDP from a JSON file"""
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True, eq=False)
class Policy:
    """Row-stochastic state-to-action-distribution table"""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.ndim != 2:
            raise DimensionError(f"policy table must be 2-dimensional, got shape {probs.shape}")
        _check_distribution_rows(probs, "policy")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions: Sequence[int], n_actions: int) -> "Policy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    @property
    def interior(self) -> bool:
        """True when every action has positive probability in every state"""
        return bool(np.all(self.probs > 0))

    def row(self, s: int) -> np.ndarray:
        return self.probs[s]

    def rows(self, states: np.ndarray) -> np.ndarray:
        return self.probs[states]
