#!/usr/bin/env python3
"""
Monte Carlo lookahead estimation under a generative model
Builds the layered sampling tree below each queried state-action pair, seeds its
leaves with truncated policy rollouts and backs values up with sampled Bellman
optimality steps. Node values are memoized per (level, state) and reused across
queries; every node draws from its own keyed random stream.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Protocol, Sequence, Set, Tuple, runtime_checkable

import numpy as np

from src.models.tabular import QTable
from src.utils.errors import InvalidModelError
from src.utils.rng import LEAF_LEVEL, stream

logger = logging.getLogger(__name__)

# fixed-point resolution of the branching width stops here
MAX_BRANCH_WIDTH = 10 ** 6

StateAction = Tuple[int, int]


@runtime_checkable
class GenerativeModel(Protocol):
    """Sampler access to an MDP with a known deterministic reward"""

    n_states: int
    n_actions: int
    discount: float

    def reward(self, s: int, a: int) -> float: ...

    def rewards(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray: ...

    def sample_next(self, s: int, a: int, rng: np.random.Generator) -> int: ...

    def sample_next_batch(self, states: np.ndarray, actions: np.ndarray,
                          rng: np.random.Generator) -> np.ndarray: ...


class PolicyLike(Protocol):
    n_states: int
    n_actions: int

    def rows(self, states: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class EstimatorParams:
    """Widths and horizons of the lookahead tree"""

    h: int
    m_leaf: int
    m_branch: Tuple[int, ...]
    horizon: int
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "m_branch", tuple(int(m) for m in self.m_branch))
        if self.h < 1:
            raise InvalidModelError(f"lookahead depth must be >= 1, got {self.h}")
        if len(self.m_branch) != self.h:
            raise InvalidModelError(f"need {self.h} branch widths, got {len(self.m_branch)}")
        if self.m_leaf < 1 or self.horizon < 1 or min(self.m_branch) < 1:
            raise InvalidModelError("rollout count, horizon and branch widths must all be >= 1")

    @classmethod
    def uniform(cls, h: int, m: int, m_leaf: int, horizon: int, rng_seed: int = 0) -> "EstimatorParams":
        return cls(h=h, m_leaf=m_leaf, m_branch=(m,) * h, horizon=horizon, rng_seed=rng_seed)

    def with_seed(self, rng_seed: int) -> "EstimatorParams":
        return EstimatorParams(self.h, self.m_leaf, self.m_branch, self.horizon, rng_seed)

    def width(self, level: int) -> int:
        """M_k for level k in 1..h"""
        return self.m_branch[level - 1]


@dataclass
class LookaheadEstimate:
    """Estimated Q_h values with the sample ledger of the tree that produced them"""

    q_hat: Dict[StateAction, float]
    rollout_samples: int = 0
    branch_samples: int = 0
    # layer_sizes[0] = distinct leaf states, layer_sizes[k] = states expanded at level k
    layer_sizes: List[int] = field(default_factory=list)
    # state-action nodes expanded at level k (index 0 unused)
    nodes_per_level: List[int] = field(default_factory=list)

    @property
    def samples_used(self) -> int:
        return self.rollout_samples + self.branch_samples

    def expected_samples(self, params: EstimatorParams) -> int:
        """M0 H |S_0| + sum_k M_k (nodes expanded at level k)"""
        rollouts = params.m_leaf * params.horizon * (self.layer_sizes[0] if self.layer_sizes else 0)
        branches = sum(params.width(k) * self.nodes_per_level[k]
                       for k in range(1, len(self.nodes_per_level)))
        return rollouts + branches

    def as_table(self, n_states: int, n_actions: int) -> QTable:
        """Dense table with NaN at pairs that were not queried"""
        table = np.full((n_states, n_actions), np.nan)
        for (s, a), value in self.q_hat.items():
            table[s, a] = value
        return table


def sample_actions(policy: PolicyLike, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one action per state by inverse CDF"""
    cdf = np.cumsum(policy.rows(states), axis=1)
    u = rng.random(states.shape[0])
    actions = np.sum(cdf <= u[:, None], axis=1)
    return np.minimum(actions, cdf.shape[1] - 1)


def rollout_value(model: GenerativeModel, policy: PolicyLike, s: int, m0: int, horizon: int,
                  rng: np.random.Generator) -> float:
    """Mean of m0 discounted returns truncated after `horizon` steps from s"""
    if m0 < 1 or horizon < 1:
        raise InvalidModelError("rollout count and horizon must be >= 1")
    states = np.full(m0, int(s), dtype=np.int64)
    returns = np.zeros(m0)
    weight = 1.0
    for _ in range(horizon):
        actions = sample_actions(policy, states, rng)
        returns += weight * model.rewards(states, actions)
        states = model.sample_next_batch(states, actions, rng)
        weight *= model.discount
    return float(returns.mean())


class _LookaheadTree:
    """Memoized recursion V_1 = rollout, Q_k = r + gamma/M_k sum V_k(children), V_{k+1} = max Q_k"""

    def __init__(self, model: GenerativeModel, policy: PolicyLike, params: EstimatorParams,
                 iteration: int):
        self.model = model
        self.policy = policy
        self.params = params
        self.iteration = iteration
        self.cap = 1.0 / (1.0 - model.discount)
        self.v_memo: Dict[Tuple[int, int], float] = {}
        self.q_memo: Dict[Tuple[int, int, int], float] = {}
        self.layers: List[Set[int]] = [set() for _ in range(params.h + 1)]
        self.nodes = [0] * (params.h + 1)
        self.rollout_samples = 0
        self.branch_samples = 0

    def value(self, level: int, s: int) -> float:
        key = (level, s)
        cached = self.v_memo.get(key)
        if cached is not None:
            return cached
        if level == 1:
            rng = stream(self.params.rng_seed, self.iteration, LEAF_LEVEL, s)
            value = rollout_value(self.model, self.policy, s, self.params.m_leaf, self.params.horizon, rng)
            self.rollout_samples += self.params.m_leaf * self.params.horizon
            self.layers[0].add(s)
        else:
            value = max(self.q_value(level - 1, s, a) for a in range(self.model.n_actions))
        self.v_memo[key] = value
        return value

    def q_value(self, level: int, s: int, a: int) -> float:
        key = (level, s, a)
        cached = self.q_memo.get(key)
        if cached is not None:
            return cached
        width = self.params.width(level)
        rng = stream(self.params.rng_seed, self.iteration, level, s, a)
        children = self.model.sample_next_batch(np.full(width, s, dtype=np.int64),
                                                np.full(width, a, dtype=np.int64), rng)
        self.branch_samples += width
        self.nodes[level] += 1
        self.layers[level].add(s)

        distinct, counts = np.unique(children, return_counts=True)
        total = sum(int(count) * self.value(level, int(child)) for child, count in zip(distinct, counts))
        q = self.model.reward(s, a) + self.model.discount * total / width
        q = min(max(q, 0.0), self.cap)
        self.q_memo[key] = q
        return q


def estimate_q_h(model: GenerativeModel, policy: PolicyLike, queries: Iterable[StateAction],
                 params: EstimatorParams, iteration: int = 0) -> LookaheadEstimate:
    """Estimate Q_h^pi at every queried (s, a)

    `iteration` is mixed into the random stream keys so successive outer
    iterations draw fresh samples from the same root seed.
    """
    tree = _LookaheadTree(model, policy, params, iteration)
    q_hat: Dict[StateAction, float] = {}
    for s, a in queries:
        q_hat[(int(s), int(a))] = tree.q_value(params.h, int(s), int(a))

    estimate = LookaheadEstimate(
        q_hat=q_hat,
        rollout_samples=tree.rollout_samples,
        branch_samples=tree.branch_samples,
        layer_sizes=[len(layer) for layer in tree.layers],
        nodes_per_level=list(tree.nodes),
    )
    logger.debug("iteration %d: %d queries, %d rollout + %d branch samples, leaves=%d",
                 iteration, len(q_hat), estimate.rollout_samples, estimate.branch_samples,
                 estimate.layer_sizes[0])
    return estimate


def all_pairs(n_states: int, n_actions: int) -> List[StateAction]:
    return [(s, a) for s in range(n_states) for a in range(n_actions)]


class MonteCarloQEstimator:
    """Q estimator for the inexact engine backed by estimate_q_h"""

    def __init__(self, model: GenerativeModel, params: EstimatorParams):
        self.model = model
        self.params = params

    def estimate(self, policy: PolicyLike, iteration: int,
                 queries: Optional[Sequence[StateAction]] = None) -> LookaheadEstimate:
        if queries is None:
            queries = all_pairs(self.model.n_states, self.model.n_actions)
        return estimate_q_h(self.model, policy, queries, self.params, iteration)


def _strictly_above(x: float) -> int:
    """Smallest positive integer strictly greater than x"""
    if not math.isfinite(x):
        raise OverflowError(f"count bound is not finite: {x}")
    return max(1, int(math.floor(x)) + 1)


def accuracy_target(gamma: float, h: int, epsilon: float) -> float:
    """Per-pair estimation error b at which h-PMD reaches accuracy epsilon"""
    return epsilon * (1.0 - gamma) * (1.0 - gamma ** h) / 4.0


def params_for_accuracy(gamma: float, h: int, epsilon: float, delta: float, n_actions: int,
                        c_size: int, rng_seed: int = 0) -> EstimatorParams:
    """Tree widths and horizon reaching max-error b = eps (1-gamma)(1-gamma^h)/4 on |C| pairs

    The branch width M appears inside its own bound through the leaf-set cap
    |S_0| <= |A|^h M^h; it is resolved by iterating M <- bound(M) from M = 1.
    """
    if not epsilon > 0:
        raise InvalidModelError(f"epsilon must be positive, got {epsilon}")
    if not 0 < delta < 1:
        raise InvalidModelError(f"delta must lie in (0, 1), got {delta}")
    if not 0 < gamma < 1 or h < 1 or n_actions < 1 or c_size < 1:
        raise InvalidModelError("need gamma in (0, 1) and positive h, n_actions, c_size")

    b = accuracy_target(gamma, h, epsilon)
    delta_v = delta_j = delta / 2.0
    one_minus = 1.0 - gamma

    def log_leaf_cap(m: int) -> float:
        return h * math.log(n_actions) + h * math.log(m)

    branch_coef = 9.0 * gamma ** 4 * (1.0 - gamma ** (h - 1)) ** 2 / (one_minus ** 4 * b ** 2)
    branch_log = math.log(2.0 * h * n_actions * c_size / delta_j)

    m = 1
    while True:
        m_next = _strictly_above(branch_coef * (branch_log + log_leaf_cap(m)))
        if m_next >= MAX_BRANCH_WIDTH:
            logger.warning("branch width bound exceeds %d; capping", MAX_BRANCH_WIDTH)
            m = MAX_BRANCH_WIDTH
            break
        if m_next == m:
            break
        m = m_next

    leaf_coef = 9.0 * gamma ** (2 * h) / (one_minus ** 2 * b ** 2)
    m_leaf = _strictly_above(leaf_coef * (math.log(2.0 * c_size / delta_v) + log_leaf_cap(m)))
    horizon = _strictly_above(math.log(3.0 * gamma ** h / (b * one_minus)) / one_minus)
    return EstimatorParams.uniform(h=h, m=m, m_leaf=m_leaf, horizon=horizon, rng_seed=rng_seed)


def iterations_for_accuracy(gamma: float, h: int, epsilon: float) -> int:
    """Smallest K > log(4 / (eps (1-gamma)(1-gamma^h))) / (h (1-gamma))"""
    if not epsilon > 0:
        raise InvalidModelError(f"epsilon must be positive, got {epsilon}")
    ratio = 4.0 / (epsilon * (1.0 - gamma) * (1.0 - gamma ** h))
    return _strictly_above(math.log(ratio) / (h * (1.0 - gamma)))


def estimation_error_bound(gamma: float, h: int, n_actions: int, leaf_set_size: int,
                           params: EstimatorParams, delta: float, c_size: int = 1) -> float:
    """High-probability bound on max_{(s,a) in C} |Q_hat_h - Q_h^pi| (confidence 1 - delta)"""
    delta_v = delta_j = delta / 2.0
    one_minus = 1.0 - gamma
    m = min(params.m_branch)
    truncation = gamma ** (params.horizon + h) / one_minus
    leaf = gamma ** h / one_minus * math.sqrt(
        math.log(2.0 * leaf_set_size * c_size / delta_v) / params.m_leaf)
    branch = gamma ** 2 * (1.0 - gamma ** (h - 1)) / one_minus ** 2 * math.sqrt(
        math.log(2.0 * n_actions * leaf_set_size * h * c_size / delta_j) / m)
    return truncation + leaf + branch


def predicted_samples(params: EstimatorParams, n_states: int, n_actions: int, n_iters: int) -> int:
    """K (M0 H |S| + sum_k M_k |S||A|): total samples with full reuse over S x A queries"""
    per_iteration = params.m_leaf * params.horizon * n_states + sum(params.m_branch) * n_states * n_actions
    return n_iters * per_iteration
