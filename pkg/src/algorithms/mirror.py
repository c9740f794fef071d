#!/usr/bin/env python3
"""
Mirror maps for policy mirror descent
Bregman divergences, per-state proximal updates and the adaptive stepsize rule
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence, Union

import numpy as np

from src.models.tabular import Policy
from src.utils.errors import DimensionError, InvalidModelError

ROW_TOL = 1e-10


class MirrorMap(Enum):
    NEGATIVE_ENTROPY = "kl"
    SQUARED_EUCLIDEAN = "euclidean"


class StepsizeMode(Enum):
    ADAPTIVE = "adaptive"
    INFINITE = "infinite"


@dataclass(frozen=True)
class StepsizeSchedule:
    """Sequence c_k feeding the adaptive stepsize eta_k >= d_k / c_k

    The default rule is c_k = gamma^(2 h (k + 1)); `h` is the depth used in the
    exponent, so h=1 gives the depth-independent schedule gamma^(2 (k + 1)).
    """

    gamma: float
    h: int = 1
    mode: StepsizeMode = StepsizeMode.ADAPTIVE
    rule: Optional[Callable[[int], float]] = None

    @classmethod
    def per_h(cls, gamma: float, h: int) -> "StepsizeSchedule":
        return cls(gamma=gamma, h=h)

    @classmethod
    def shared(cls, gamma: float) -> "StepsizeSchedule":
        return cls(gamma=gamma, h=1)

    @classmethod
    def infinite(cls, gamma: float, h: int = 1) -> "StepsizeSchedule":
        return cls(gamma=gamma, h=h, mode=StepsizeMode.INFINITE)

    def c(self, k: int) -> float:
        """c_k for iteration k >= 0"""
        value = self.rule(k) if self.rule is not None else self.gamma ** (2 * self.h * (k + 1))
        if not value > 0:
            raise InvalidModelError(f"stepsize sequence must be positive, c_{k} = {value}")
        return float(value)


def _as_row(x: Sequence[float], what: str) -> np.ndarray:
    row = np.asarray(x, dtype=float)
    if row.ndim != 1:
        raise DimensionError(f"{what} must be a vector, got shape {row.shape}")
    return row


def bregman(mirror: MirrorMap, p: Sequence[float], q: Sequence[float]) -> float:
    """D(p, q): KL(p||q) for negative entropy, 0.5 ||p - q||^2 for squared Euclidean

    Under KL a zero of q where p > 0 gives math.inf.
    """
    p, q = _as_row(p, "p"), _as_row(q, "q")
    if p.shape != q.shape:
        raise DimensionError(f"divergence arguments differ in shape: {p.shape} vs {q.shape}")
    if mirror is MirrorMap.SQUARED_EUCLIDEAN:
        return 0.5 * float(np.sum((p - q) ** 2))
    support = p > 0
    if np.any(q[support] <= 0):
        return math.inf
    return max(0.0, float(np.sum(p[support] * np.log(p[support] / q[support]))))


def project_simplex_rows(y: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean projection onto the probability simplex (sort and threshold)"""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    # the projection is invariant to adding a constant to a row
    y = y - y.max(axis=1, keepdims=True)
    u = -np.sort(-y, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    ind = np.arange(1, y.shape[1] + 1)
    # the condition holds on a prefix of the sorted row, its length is rho + 1
    rho = np.count_nonzero(u - css / ind > 0, axis=1) - 1
    theta = css[np.arange(y.shape[0]), rho] / (rho + 1.0)
    out = np.maximum(y - theta[:, None], 0.0)
    return out / out.sum(axis=1, keepdims=True)


def project_simplex(y: Sequence[float]) -> np.ndarray:
    """Euclidean projection of a single vector onto the probability simplex"""
    return project_simplex_rows(_as_row(y, "y")[None, :])[0]


def uniform_greedy_row(q_row: Sequence[float], tol: float = 1e-9) -> np.ndarray:
    """Uniform distribution over the actions within `tol` of the maximum"""
    q_row = _as_row(q_row, "q_row")
    mask = q_row >= q_row.max() - tol
    return mask / mask.sum()


def prox_update_table(mirror: MirrorMap, q: np.ndarray, old: np.ndarray, eta: float) -> np.ndarray:
    """prox_update applied to every row of a policy table with one stepsize"""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    old = np.atleast_2d(np.asarray(old, dtype=float))
    if q.shape != old.shape:
        raise DimensionError(f"Q table and policy differ in shape: {q.shape} vs {old.shape}")
    if math.isnan(eta) or eta < 0:
        raise InvalidModelError(f"stepsize must be non-negative, got {eta}")
    if np.any(old < 0) or np.any(np.abs(old.sum(axis=1) - 1.0) > ROW_TOL):
        raise InvalidModelError("old policy rows are not probability distributions")

    if math.isinf(eta):
        greedy = np.zeros_like(q)
        greedy[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
        return greedy
    if mirror is MirrorMap.SQUARED_EUCLIDEAN:
        return project_simplex_rows(old + eta * q)

    # zeros in old rows (underflowed iterates) stay at zero
    with np.errstate(divide="ignore"):
        logits = np.log(old) + eta * q
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    return weights / weights.sum(axis=1, keepdims=True)


def prox_update(mirror: MirrorMap, q_row: Sequence[float], old_row: Sequence[float],
                eta: float) -> np.ndarray:
    """argmax over the simplex of eta <q_row, pi> - D(pi, old_row)

    Negative entropy gives the multiplicative update computed in log-space,
    squared Euclidean gives the projection of old_row + eta q_row, and an
    infinite eta gives the greedy row (first maximizer).
    """
    q_row, old_row = _as_row(q_row, "q_row"), _as_row(old_row, "old_row")
    if q_row.shape != old_row.shape:
        raise DimensionError(f"q_row and old_row differ in shape: {q_row.shape} vs {old_row.shape}")
    return prox_update_table(mirror, q_row[None, :], old_row[None, :], eta)[0]


def deterministic_divergences(mirror: MirrorMap, row: np.ndarray) -> np.ndarray:
    """D(delta_a, row) for every action a"""
    if mirror is MirrorMap.SQUARED_EUCLIDEAN:
        return 0.5 * (1.0 - 2.0 * row + float(np.sum(row ** 2)))
    with np.errstate(divide="ignore"):
        return -np.log(row)


def adaptive_stepsize(mirror: MirrorMap, greedy: Sequence[np.ndarray],
                      old_policy: Union[Policy, np.ndarray], c_k: float) -> float:
    """(1/c_k) max_s min_{a in greedy(s)} D(delta_a, pi_k(.|s))"""
    if not c_k > 0:
        raise InvalidModelError(f"c_k must be positive, got {c_k}")
    probs = old_policy.probs if isinstance(old_policy, Policy) else np.asarray(old_policy, dtype=float)
    if len(greedy) != probs.shape[0]:
        raise DimensionError(f"greedy sets cover {len(greedy)} states, policy has {probs.shape[0]}")

    worst = 0.0
    for s, actions in enumerate(greedy):
        if len(actions) == 0:
            raise InvalidModelError(f"greedy set of state {s} is empty")
        divergences = deterministic_divergences(mirror, probs[s])
        worst = max(worst, float(np.min(divergences[np.asarray(actions)])))
    return max(worst, 0.0) / c_k
