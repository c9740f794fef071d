#!/usr/bin/env python3
"""
h-PMD iteration drivers
Exact h-PMD, inexact h-PMD over a Q estimator, and the PI / h-PI limits obtained
with an infinite stepsize. Each run returns the final policy and a per-iteration
trace of gaps, theoretical bounds, stepsizes and sample counts.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from src.algorithms.mc_estimator import (
    EstimatorParams,
    GenerativeModel,
    LookaheadEstimate,
    MonteCarloQEstimator,
    PolicyLike,
    StateAction,
    all_pairs,
)
from src.algorithms.mdp_core import (
    GREEDY_TOL,
    greedy_set,
    lookahead_from_values,
    lookahead_values,
    optimal_value,
    policy_eval_exact,
    suboptimality_gap,
)
from src.algorithms.mirror import (
    MirrorMap,
    StepsizeMode,
    StepsizeSchedule,
    adaptive_stepsize,
    prox_update_table,
)
from src.models.tabular import Policy, QTable, TabularMdp
from src.utils.errors import DimensionError, InvalidModelError

logger = logging.getLogger(__name__)

# stepsize used when the adaptive lower bound is 0 (policy already greedy)
GREEDY_STEPSIZE = 1e12
V_STAR_TOL = 1e-10

CSequence = Union[StepsizeSchedule, Callable[[int], float], Sequence[float], None]


class EstimationMode(Enum):
    EXACT = "exact"
    INEXACT = "inexact"


@dataclass
class RunConfig:
    h: int
    n_iters: int
    mirror: MirrorMap
    schedule: StepsizeSchedule
    mode: EstimationMode = EstimationMode.EXACT
    estimator: Optional[EstimatorParams] = None
    seed: int = 0
    record_bounds: bool = True
    # exact mode stops once the gap is at most tol
    tol: Optional[float] = None
    # uniform estimation error b used for the inexact bound, when known
    bias_bound: Optional[float] = None
    keep_policies: bool = False
    record_wall_time: bool = False

    def __post_init__(self):
        if self.h < 1:
            raise InvalidModelError(f"lookahead depth must be >= 1, got {self.h}")
        if self.n_iters < 1:
            raise InvalidModelError(f"n_iters must be >= 1, got {self.n_iters}")
        if self.mode is EstimationMode.INEXACT and self.estimator is None:
            raise InvalidModelError("inexact mode needs estimator parameters")
        if self.estimator is not None and self.estimator.h != self.h:
            raise InvalidModelError(f"estimator depth {self.estimator.h} differs from run depth {self.h}")


@dataclass
class IterateRecord:
    iteration: int
    gap: Optional[float]
    bound: Optional[float]
    eta: float
    c_k: float
    samples: int = 0
    samples_cum: int = 0
    wall_ms: float = 0.0
    extrapolation_error: Optional[float] = None
    extrapolation_bound: Optional[float] = None


@dataclass
class IterateTrace:
    """Row k describes pi_k and the update (eta_{k-1}, c_{k-1}) that produced it"""

    gap0: Optional[float] = None
    records: List[IterateRecord] = field(default_factory=list)
    policies: List[Policy] = field(default_factory=list)

    def append(self, record: IterateRecord) -> None:
        self.records.append(record)

    @property
    def gaps(self) -> List[Optional[float]]:
        return [r.gap for r in self.records]

    @property
    def total_samples(self) -> int:
        return self.records[-1].samples_cum if self.records else 0

    def iterations_to(self, threshold: float) -> Optional[int]:
        """First iteration whose gap is at most threshold"""
        if self.gap0 is not None and self.gap0 <= threshold:
            return 0
        for record in self.records:
            if record.gap is not None and record.gap <= threshold:
                return record.iteration
        return None

    def samples_to(self, threshold: float) -> Optional[int]:
        """Cumulative samples at the first iteration whose gap is at most threshold"""
        if self.gap0 is not None and self.gap0 <= threshold:
            return 0
        for record in self.records:
            if record.gap is not None and record.gap <= threshold:
                return record.samples_cum
        return None


class QEstimator(Protocol):
    def estimate(self, policy: PolicyLike, iteration: int,
                 queries: Optional[Sequence[StateAction]] = None) -> LookaheadEstimate: ...


class BiasedOracle:
    """Exact Q_h^pi perturbed by at most `bias` per entry

    mode "constant" adds exactly +bias everywhere, mode "random" adds
    independent uniform [-bias, bias] noise drawn from `seed` and the iteration.
    """

    def __init__(self, mdp: TabularMdp, h: int, bias: float, mode: str = "constant", seed: int = 0):
        if bias < 0:
            raise InvalidModelError("bias must be non-negative")
        if mode not in ("constant", "random"):
            raise ValueError(f"unknown oracle mode {mode!r}")
        self.mdp = mdp
        self.h = h
        self.bias = bias
        self.mode = mode
        self.seed = seed

    def estimate(self, policy: Policy, iteration: int,
                 queries: Optional[Sequence[StateAction]] = None) -> LookaheadEstimate:
        _, q = lookahead_values(self.mdp, policy, self.h)
        if self.mode == "constant":
            q = q + self.bias
        else:
            rng = np.random.default_rng([self.seed, iteration])
            q = q + rng.uniform(-self.bias, self.bias, size=q.shape)
        if queries is None:
            queries = all_pairs(self.mdp.n_states, self.mdp.n_actions)
        return LookaheadEstimate(q_hat={(s, a): float(q[s, a]) for s, a in queries},
                                 layer_sizes=[0], nodes_per_level=[0])


def _c_value(c_seq: CSequence, k: int) -> float:
    if c_seq is None:
        return 0.0
    if isinstance(c_seq, StepsizeSchedule):
        return c_seq.c(k)
    if callable(c_seq):
        return float(c_seq(k))
    return float(c_seq[k])


def theorem1_bound(gap0: float, gamma: float, h: int, c_seq: CSequence, k: int) -> float:
    """gamma^{hk} (gap0 + 1/(1-gamma) sum_{t=1}^k c_{t-1} / gamma^{ht})

    Evaluated as gamma^{hk} gap0 + sum_t c_{t-1} gamma^{h(k-t)} / (1-gamma),
    which avoids dividing by vanishing powers of gamma.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    decay = gamma ** h
    total = sum(_c_value(c_seq, t - 1) * decay ** (k - t) for t in range(1, k + 1))
    return decay ** k * gap0 + total / (1.0 - gamma)


def theorem2_bound(gap0: float, gamma: float, h: int, c_seq: CSequence, b: float, k: int) -> float:
    """theorem1_bound plus the estimation floor 2b / ((1-gamma)(1-gamma^h))"""
    return theorem1_bound(gap0, gamma, h, c_seq, k) + 2.0 * b / ((1.0 - gamma) * (1.0 - gamma ** h))


def pmd_step(mirror: MirrorMap, q: QTable, policy: Policy, schedule: StepsizeSchedule,
             k: int, tol: float = GREEDY_TOL) -> Tuple[Policy, float, float]:
    """One h-PMD update from a (possibly estimated) lookahead table; returns (pi_{k+1}, eta_k, c_k)"""
    if q.shape != policy.probs.shape:
        raise DimensionError(f"Q table {q.shape} does not match policy {policy.probs.shape}")
    c_k = schedule.c(k)
    if schedule.mode is StepsizeMode.INFINITE:
        eta = math.inf
    else:
        eta = adaptive_stepsize(mirror, greedy_set(q, tol), policy, c_k)
        if eta == 0.0:
            eta = GREEDY_STEPSIZE
    return Policy(prox_update_table(mirror, q, policy.probs, eta)), eta, c_k


def _bound_sequence(schedule: StepsizeSchedule) -> CSequence:
    # with infinite stepsizes the bound reduces to the h-PI contraction
    return None if schedule.mode is StepsizeMode.INFINITE else schedule


def _check_start(mdp_shape: Tuple[int, int], config: RunConfig, pi0: Policy) -> None:
    if pi0.probs.shape != mdp_shape:
        raise DimensionError(f"initial policy shape {pi0.probs.shape} does not match {mdp_shape}")
    if config.mirror is MirrorMap.NEGATIVE_ENTROPY and not pi0.interior:
        raise InvalidModelError("KL h-PMD must start from a policy with full support")


def run_exact(mdp: TabularMdp, config: RunConfig, pi0: Policy) -> Tuple[Policy, IterateTrace]:
    """Exact h-PMD with the adaptive (or infinite) stepsize"""
    if config.mode is not EstimationMode.EXACT:
        raise InvalidModelError("run_exact needs a config in exact mode")
    _check_start((mdp.n_states, mdp.n_actions), config, pi0)

    gamma, h = mdp.discount, config.h
    v_star, _ = optimal_value(mdp, tol=V_STAR_TOL)
    v_pi = policy_eval_exact(mdp, pi0)
    trace = IterateTrace(gap0=suboptimality_gap(v_star, v_pi))
    bound_seq = _bound_sequence(config.schedule)
    logger.info("exact h-PMD: h=%d, K=%d, mirror=%s, gap0=%.6g",
                h, config.n_iters, config.mirror.value, trace.gap0)

    policy = pi0
    if config.keep_policies:
        trace.policies.append(policy)
    for k in range(config.n_iters):
        started = time.perf_counter()
        _, q = lookahead_from_values(mdp, v_pi, h)
        policy, eta, c_k = pmd_step(config.mirror, q, policy, config.schedule, k)
        v_pi = policy_eval_exact(mdp, policy)
        gap = suboptimality_gap(v_star, v_pi)
        bound = theorem1_bound(trace.gap0, gamma, h, bound_seq, k + 1) if config.record_bounds else None
        wall_ms = (time.perf_counter() - started) * 1e3 if config.record_wall_time else 0.0
        trace.append(IterateRecord(iteration=k + 1, gap=gap, bound=bound, eta=eta, c_k=c_k, wall_ms=wall_ms))
        if config.keep_policies:
            trace.policies.append(policy)
        logger.debug("k=%d gap=%.3e eta=%.3e", k + 1, gap, eta)
        if config.tol is not None and gap <= config.tol:
            logger.info("gap %.3e reached tolerance after %d iterations", gap, k + 1)
            break
    return policy, trace


def _reference_mdp(model: GenerativeModel, reference: Optional[TabularMdp]) -> Optional[TabularMdp]:
    if reference is not None:
        return reference
    if isinstance(model, TabularMdp):
        return model
    return getattr(model, "mdp", None)


def run_inexact(model: GenerativeModel, config: RunConfig, pi0: Policy,
                estimator: Optional[QEstimator] = None,
                reference: Optional[TabularMdp] = None) -> Tuple[Policy, IterateTrace]:
    """Inexact h-PMD driven by Q_h estimates at every state-action pair

    Gaps are diagnostics only and are computed when a tabular reference MDP is
    available (the model's own table by default).
    """
    if estimator is None:
        if config.mode is not EstimationMode.INEXACT:
            raise InvalidModelError("run_inexact needs inexact mode or an explicit estimator")
        estimator = MonteCarloQEstimator(model, config.estimator.with_seed(config.seed))
    n_states, n_actions = model.n_states, model.n_actions
    _check_start((n_states, n_actions), config, pi0)

    gamma, h = model.discount, config.h
    mdp = _reference_mdp(model, reference)
    v_star = optimal_value(mdp, tol=V_STAR_TOL)[0] if mdp is not None else None
    trace = IterateTrace(gap0=suboptimality_gap(v_star, policy_eval_exact(mdp, pi0)) if mdp is not None else None)
    bound_seq = _bound_sequence(config.schedule)
    queries = all_pairs(n_states, n_actions)
    logger.info("inexact h-PMD: h=%d, K=%d, mirror=%s", h, config.n_iters, config.mirror.value)

    policy = pi0
    if config.keep_policies:
        trace.policies.append(policy)
    samples_cum = 0
    for k in range(config.n_iters):
        started = time.perf_counter()
        estimate = estimator.estimate(policy, k, queries)
        q_hat = estimate.as_table(n_states, n_actions)
        policy, eta, c_k = pmd_step(config.mirror, q_hat, policy, config.schedule, k)
        samples_cum += estimate.samples_used

        gap = bound = None
        if mdp is not None:
            gap = suboptimality_gap(v_star, policy_eval_exact(mdp, policy))
            if config.record_bounds and config.bias_bound is not None:
                bound = theorem2_bound(trace.gap0, gamma, h, bound_seq, config.bias_bound, k + 1)
        wall_ms = (time.perf_counter() - started) * 1e3 if config.record_wall_time else 0.0
        trace.append(IterateRecord(iteration=k + 1, gap=gap, bound=bound, eta=eta, c_k=c_k,
                                   samples=estimate.samples_used, samples_cum=samples_cum,
                                   wall_ms=wall_ms))
        if config.keep_policies:
            trace.policies.append(policy)
        logger.debug("k=%d gap=%s eta=%.3e samples=%d", k + 1, gap, eta, estimate.samples_used)
    return policy, trace
