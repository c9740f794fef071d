#!/usr/bin/env python3
"""
h-PMD with linear function approximation
Feature maps, a Kiefer-Wolfowitz (D-optimal) design over state-action pairs,
weighted least-squares fits of estimated lookahead values, and policies that
are either stored as tables or rebuilt state by state from the fitted parameters.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linprog

from src.algorithms.mc_estimator import (
    EstimatorParams,
    GenerativeModel,
    MonteCarloQEstimator,
    StateAction,
    all_pairs,
)
from src.algorithms.mdp_core import (
    GREEDY_TOL,
    lookahead_values,
    optimal_value,
    policy_eval_exact,
    suboptimality_gap,
)
from src.algorithms.mirror import (
    MirrorMap,
    StepsizeMode,
    StepsizeSchedule,
    bregman,
    prox_update,
    uniform_greedy_row,
)
from src.algorithms.pmd_engine import (
    V_STAR_TOL,
    CSequence,
    EstimationMode,
    IterateRecord,
    IterateTrace,
    QEstimator,
    RunConfig,
    pmd_step,
    theorem2_bound,
)
from src.models.tabular import Policy, TabularMdp
from src.utils.errors import (
    ConvergenceError,
    DesignError,
    DimensionError,
    InvalidModelError,
    MissingParameterError,
)

logger = logging.getLogger(__name__)

DEFAULT_EPS_KW = 0.01
MAX_EPS_KW = 0.1
PRUNE_WEIGHT = 1e-8
# Frank-Wolfe stops once every design norm^2 is within this factor of d
FW_TOL = 1e-7
FW_MAX_ITERS = 50_000
# gaps are only computed for reference MDPs up to this size
DIAGNOSTIC_STATE_LIMIT = 5000
# the max-norm fit oracle is only run up to this many state-action pairs
FIT_ORACLE_LIMIT = 2000

STORAGE_TABULAR = "tabular"
STORAGE_ON_DEMAND = "on_demand"

# DeepSea tile layout: row blocks x column blocks
TILE_ROWS = 8
TILE_COLS = 4

# on-demand rows take a stepsize per state, or the tabular engine's single stepsize
SCOPE_PER_STATE = "per_state"
SCOPE_GLOBAL = "global"


class FeatureMap:
    """Feature matrix Psi with rows psi(s, a) at index z = s * n_actions + a"""

    def __init__(self, matrix: np.ndarray, n_states: int, n_actions: int, name: str = "custom"):
        matrix = np.array(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != n_states * n_actions:
            raise DimensionError(
                f"feature matrix must have {n_states * n_actions} rows, got shape {matrix.shape}")
        rank = np.linalg.matrix_rank(matrix)
        if rank < matrix.shape[1]:
            raise InvalidModelError(f"feature matrix has rank {rank} < d = {matrix.shape[1]}")
        matrix.setflags(write=False)
        self.matrix = matrix
        self.n_states = n_states
        self.n_actions = n_actions
        self.name = name
        # number of q_row calls, used to observe memo hits
        self.evaluations = 0

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def index(self, s: int, a: int) -> int:
        return s * self.n_actions + a

    def eval(self, s: int, a: int) -> np.ndarray:
        """psi(s, a)"""
        return self.matrix[self.index(s, a)]

    def rows_for(self, pairs: Sequence[StateAction]) -> np.ndarray:
        return self.matrix[[self.index(s, a) for s, a in pairs]]

    def q_row(self, theta: np.ndarray, s: int) -> np.ndarray:
        """(Psi theta)(s, .)"""
        self.evaluations += 1
        start = s * self.n_actions
        return self.matrix[start:start + self.n_actions] @ theta

    def q_table(self, theta: np.ndarray) -> np.ndarray:
        return (self.matrix @ theta).reshape(self.n_states, self.n_actions)

    @classmethod
    def one_hot(cls, n_states: int, n_actions: int) -> "FeatureMap":
        return cls(np.eye(n_states * n_actions), n_states, n_actions, name="one_hot")

    @classmethod
    def random_gaussian(cls, n_states: int, n_actions: int, dim: int, seed: int = 0) -> "FeatureMap":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((n_states * n_actions, dim)), n_states, n_actions, name="random")

    @classmethod
    def tiles(cls, grid_size: int, n_actions: int = 2, row_tiles: int = TILE_ROWS,
              col_tiles: int = TILE_COLS) -> "FeatureMap":
        """Indicator of (row block, column block, action) on a DeepSea grid

        The absorbing terminal state shares the bottom-right tile.
        """
        if grid_size % row_tiles or grid_size % col_tiles:
            raise InvalidModelError(
                f"grid size {grid_size} is not divisible into {row_tiles} x {col_tiles} tiles")
        row_block, col_block = grid_size // row_tiles, grid_size // col_tiles
        n_states = grid_size ** 2 + 1
        dim = row_tiles * col_tiles * n_actions
        matrix = np.zeros((n_states * n_actions, dim))
        for s in range(n_states):
            row, column = divmod(s, grid_size) if s < grid_size ** 2 else (grid_size - 1, grid_size - 1)
            tile = (row // row_block) * col_tiles + column // col_block
            for a in range(n_actions):
                matrix[s * n_actions + a, tile * n_actions + a] = 1.0
        return cls(matrix, n_states, n_actions, name="tiles")

    @classmethod
    def load_txt(cls, path: Union[str, Path]) -> "FeatureMap":
        """Read a whitespace text file: header "S A d", then S*A rows of d floats"""
        path = Path(path)
        with open(path, "r") as f:
            header = f.readline().split()
        if len(header) != 3:
            raise InvalidModelError(f"{path}: header must be 'S A d', got {header}")
        try:
            n_states, n_actions, dim = (int(x) for x in header)
            matrix = np.loadtxt(path, skiprows=1, ndmin=2)
        except ValueError as e:
            raise InvalidModelError(f"{path}: {e}") from e
        if matrix.shape != (n_states * n_actions, dim):
            raise DimensionError(
                f"{path}: expected {n_states * n_actions} x {dim} values, got {matrix.shape}")
        return cls(matrix, n_states, n_actions, name=path.stem)

    def save_txt(self, path: Union[str, Path]) -> None:
        np.savetxt(path, self.matrix, header=f"{self.n_states} {self.n_actions} {self.dim}", comments="")


@dataclass(frozen=True)
class DesignSet:
    core: Tuple[StateAction, ...]
    weights: np.ndarray
    core_features: np.ndarray
    gram: np.ndarray
    gram_inv: np.ndarray
    # max over candidates of ||psi(z)||_{G^-1}
    max_norm: float
    eps_kw: float

    @property
    def dim(self) -> int:
        return self.gram.shape[0]

    def norms(self, vectors: np.ndarray) -> np.ndarray:
        """||psi||_{G^-1} for each row"""
        return np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", vectors, self.gram_inv, vectors), 0.0))


def _leverages(x: np.ndarray, weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    gram = (x * weights[:, None]).T @ x
    gram_inv = np.linalg.inv(gram)
    return np.einsum("ij,jk,ik->i", x, gram_inv, x), gram, gram_inv


def _frank_wolfe(x: np.ndarray, max_iters: int) -> np.ndarray:
    """D-optimal weights on the rows of x by Frank-Wolfe ascent with away steps"""
    n, d = x.shape
    weights = np.full(n, 1.0 / n)
    for it in range(max_iters):
        g, _, _ = _leverages(x, weights)
        j = int(np.argmax(g))
        if g[j] <= d * (1.0 + FW_TOL):
            logger.debug("design converged after %d Frank-Wolfe steps", it)
            return weights
        support = np.flatnonzero(weights > 0)
        i = int(support[np.argmin(g[support])])

        if g[j] - d >= d - g[i] or weights[i] >= 1.0:
            step = (g[j] - d) / (d * (g[j] - 1.0))
            weights *= 1.0 - step
            weights[j] += step
        else:
            # away step, the weight of i may drop to exactly zero
            drop = weights[i] / (1.0 - weights[i])
            step = drop if g[i] <= 1.0 else min((d - g[i]) / (d * (g[i] - 1.0)), drop)
            weights *= 1.0 + step
            weights[i] -= step
            if step == drop:
                weights[i] = 0.0
        weights = np.maximum(weights, 0.0)
        weights /= weights.sum()
    raise ConvergenceError(f"Frank-Wolfe design did not converge within {max_iters} steps")


def compute_design(features: FeatureMap, candidates: Optional[Sequence[StateAction]] = None,
                   eps_kw: float = DEFAULT_EPS_KW, max_iters: int = FW_MAX_ITERS) -> DesignSet:
    """Core set of at most d(d+1)/2 pairs with sup_z ||psi(z)||_{G^-1} <= sqrt(d)(1 + eps_kw)

    Weights below 1e-8 are pruned and the support is cut to the d(d+1)/2
    largest weights. If the cut design misses the slack it is doubled, with the
    last step clamped to 0.1, before giving up.
    """
    if not eps_kw > 0:
        raise InvalidModelError(f"eps_kw must be positive, got {eps_kw}")
    if candidates is None:
        candidates = all_pairs(features.n_states, features.n_actions)
    candidates = [(int(s), int(a)) for s, a in candidates]
    x = features.rows_for(candidates)
    d = features.dim
    if np.linalg.matrix_rank(x) < d:
        raise DesignError(f"candidate features do not span dimension {d}")

    weights = _frank_wolfe(x, max_iters)
    weights[weights < PRUNE_WEIGHT] = 0.0
    cap = d * (d + 1) // 2
    order = np.argsort(-weights, kind="stable")
    keep = np.sort(order[:min(cap, int(np.count_nonzero(weights)))])
    core_weights = weights[keep] / weights[keep].sum()
    core_x = x[keep]

    try:
        g, gram, gram_inv = _leverages(x, _scatter(keep, core_weights, len(candidates)))
    except np.linalg.LinAlgError as e:
        raise DesignError(f"truncated design has a singular Gram matrix: {e}") from e
    max_norm = math.sqrt(max(float(g.max()), 0.0))

    slack = eps_kw
    while max_norm > math.sqrt(d) * (1.0 + slack):
        if slack >= MAX_EPS_KW:
            raise DesignError(
                f"design norm {max_norm:.6g} exceeds sqrt(d)(1 + {MAX_EPS_KW}) = {math.sqrt(d) * (1 + MAX_EPS_KW):.6g}")
        slack = min(2.0 * slack, MAX_EPS_KW)
        logger.warning("design slack relaxed to %g (max norm %.6g, sqrt(d) = %.6g)", slack, max_norm, math.sqrt(d))

    logger.debug("design: %d core points out of %d candidates, max norm %.6g", len(keep), len(candidates), max_norm)
    core_x = np.array(core_x)
    core_x.setflags(write=False)
    return DesignSet(
        core=tuple(candidates[i] for i in keep),
        weights=core_weights,
        core_features=core_x,
        gram=gram,
        gram_inv=gram_inv,
        max_norm=max_norm,
        eps_kw=slack,
    )


def _scatter(index: np.ndarray, values: np.ndarray, size: int) -> np.ndarray:
    full = np.zeros(size)
    full[index] = values
    return full


def fit_theta(design: DesignSet, targets: Mapping[StateAction, float]) -> np.ndarray:
    """theta = G_rho^-1 sum_z rho(z) R(z) psi(z) over the core set"""
    missing = [z for z in design.core if z not in targets]
    if missing:
        raise InvalidModelError(f"no regression target for core points {missing[:5]}")
    r = np.array([targets[z] for z in design.core], dtype=float)
    moment = design.core_features.T @ (design.weights * r)
    try:
        return np.linalg.solve(design.gram, moment)
    except np.linalg.LinAlgError as e:
        raise DesignError(f"singular design Gram matrix: {e}") from e


@dataclass
class FaRunState:
    """Fitted parameters theta_0.. and the rows rebuilt from them

    With the "global" stepsize scope `etas[j]` holds the single stepsize of
    step j -> j+1, computed on the whole rebuilt table.
    """

    pi0: Policy
    theta_list: List[np.ndarray] = field(default_factory=list)
    memo: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)
    stepsizes: Dict[Tuple[int, int], float] = field(default_factory=dict)
    peak_memo: int = 0
    stepsize_scope: str = SCOPE_PER_STATE
    etas: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.stepsize_scope not in (SCOPE_PER_STATE, SCOPE_GLOBAL):
            raise ValueError(f"unknown stepsize scope {self.stepsize_scope!r}")

    @property
    def iterations(self) -> int:
        return len(self.theta_list)


def policy_row_on_demand(state: FaRunState, k: int, s: int, features: FeatureMap, mirror: MirrorMap,
                         h: int, gamma: float, schedule: Optional[StepsizeSchedule] = None) -> np.ndarray:
    """pi_k(.|s) rebuilt from theta_0..theta_{k-1}

    Step j -> j+1 takes the uniform greedy row pi~ of (Psi theta_j)(s, .), the
    stepsize eta_j = D(pi~, pi_j(.|s)) / c_j and the proximal update. In the
    global scope eta_j is read from `state.etas` instead. Rows are memoized
    per (k, s), so a second call does no feature evaluations.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k > state.iterations:
        raise MissingParameterError(f"pi_{k} needs theta_0..theta_{k - 1}, only {state.iterations} stored")
    global_scope = state.stepsize_scope == SCOPE_GLOBAL
    if global_scope and k > len(state.etas):
        raise MissingParameterError(f"pi_{k} needs eta_0..eta_{k - 1}, only {len(state.etas)} stored")
    if schedule is None:
        schedule = StepsizeSchedule.per_h(gamma, h)

    start, row = 0, state.pi0.row(s)
    for j in range(k, 0, -1):
        cached = state.memo.get((j, s))
        if cached is not None:
            start, row = j, cached
            break

    for j in range(start, k):
        q_row = features.q_row(state.theta_list[j], s)
        if global_scope:
            eta = state.etas[j]
            row = prox_update(mirror, q_row, row, eta)
        elif schedule.mode is StepsizeMode.INFINITE:
            eta, row = math.inf, uniform_greedy_row(q_row, GREEDY_TOL)
        else:
            target = uniform_greedy_row(q_row, GREEDY_TOL)
            eta = bregman(mirror, target, row) / schedule.c(j)
            row = target if math.isinf(eta) else prox_update(mirror, q_row, row, eta)
        row.setflags(write=False)
        state.memo[(j + 1, s)] = row
        state.stepsizes[(j + 1, s)] = eta
    state.peak_memo = max(state.peak_memo, len(state.memo))
    return row


class OnDemandPolicy:
    """PolicyLike view of pi_k whose rows are rebuilt on request"""

    def __init__(self, state: FaRunState, k: int, features: FeatureMap, mirror: MirrorMap,
                 h: int, gamma: float, schedule: Optional[StepsizeSchedule] = None):
        self.state = state
        self.k = k
        self.features = features
        self.mirror = mirror
        self.h = h
        self.gamma = gamma
        self.schedule = schedule
        self.n_states = features.n_states
        self.n_actions = features.n_actions

    def row(self, s: int) -> np.ndarray:
        return policy_row_on_demand(self.state, self.k, int(s), self.features, self.mirror,
                                    self.h, self.gamma, self.schedule)

    def rows(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=np.int64)
        distinct, inverse = np.unique(states, return_inverse=True)
        table = np.stack([self.row(s) for s in distinct])
        return table[inverse]

    def to_policy(self) -> Policy:
        return Policy(np.stack([self.row(s) for s in range(self.n_states)]))


def best_linear_fit_error(features: FeatureMap, q: np.ndarray) -> Tuple[float, np.ndarray]:
    """min_theta ||q - Psi theta||_inf and a minimizer, by linear programming"""
    q = np.asarray(q, dtype=float).reshape(-1)
    psi = features.matrix
    n, d = psi.shape
    if q.shape[0] != n:
        raise DimensionError(f"target has {q.shape[0]} entries, features have {n} rows")
    # variables [theta, t]: minimize t subject to |Psi theta - q| <= t
    c = np.zeros(d + 1)
    c[-1] = 1.0
    ones = np.ones((n, 1))
    a_ub = np.vstack([np.hstack([psi, -ones]), np.hstack([-psi, -ones])])
    b_ub = np.concatenate([q, -q])
    bounds = [(None, None)] * d + [(0.0, None)]
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if not res.success:
        raise ConvergenceError(f"max-norm linear fit failed: {res.message}")
    theta = res.x[:d]
    return float(np.max(np.abs(psi @ theta - q))), theta


def extrapolation_bound(eps_pi: float, eps_q: float, dim: int, norm: Optional[float] = None) -> float:
    """eps_pi (1 + sqrt(d)) + eps_q sqrt(d); `norm` replaces sqrt(d) by a measured design norm"""
    norm = math.sqrt(dim) if norm is None else norm
    return eps_pi * (1.0 + norm) + eps_q * norm


def epsilon_q(gamma: float, h: int, dim: int, n_actions: int, params: EstimatorParams, delta: float) -> float:
    """Target-error constant of the least-squares extrapolation with Z = |A|^h M_h M^(h-1)"""
    one_minus = 1.0 - gamma
    m = min(params.m_branch)
    log_z = h * math.log(n_actions) + math.log(params.width(h)) + (h - 1) * math.log(m)
    log_zd = log_z + 2.0 * math.log(dim)
    truncation = gamma ** (params.horizon + h) / one_minus
    leaf = gamma ** h / one_minus * math.sqrt((math.log(4.0 / delta) + log_zd) / params.m_leaf)
    branch = gamma ** 2 * (1.0 - gamma ** (h - 1)) / one_minus ** 2 * math.sqrt(
        (math.log(4.0 * h / delta) + log_zd) / m)
    return truncation + leaf + branch


def fa_bound(gap0: float, gamma: float, h: int, c_seq: CSequence, eps_pi: float, eps_q: float,
             dim: int, k: int) -> float:
    """theorem2_bound with the uniform error b = eps_pi (1 + sqrt(d)) + eps_q sqrt(d)"""
    return theorem2_bound(gap0, gamma, h, c_seq, extrapolation_bound(eps_pi, eps_q, dim), k)


def _reference(model: GenerativeModel, reference: Optional[TabularMdp]) -> Optional[TabularMdp]:
    mdp = reference if reference is not None else getattr(model, "mdp", None)
    if mdp is None and isinstance(model, TabularMdp):
        mdp = model
    if mdp is not None and mdp.n_states > DIAGNOSTIC_STATE_LIMIT:
        return None
    return mdp


def run_fa(model: GenerativeModel, features: FeatureMap, design: DesignSet, config: RunConfig,
           pi0: Policy, storage: str = STORAGE_TABULAR, estimator: Optional[QEstimator] = None,
           reference: Optional[TabularMdp] = None,
           stepsize_scope: str = SCOPE_PER_STATE) -> Tuple[FaRunState, IterateTrace]:
    """h-PMD where Q_h is estimated on the core set only and extrapolated by Psi theta

    With storage "tabular" the policy table is updated with the engine's
    uniform stepsize. With "on_demand" only theta is stored and rows are rebuilt
    when the estimator or the diagnostics ask for them, with per-state
    stepsizes or, in the "global" scope, with the tabular engine's stepsize
    computed on the whole rebuilt table. The eta column of an on-demand run
    with per-state stepsizes is the largest stepsize over the core states.
    """
    if storage not in (STORAGE_TABULAR, STORAGE_ON_DEMAND):
        raise ValueError(f"unknown policy storage {storage!r}")
    if (features.n_states, features.n_actions) != (model.n_states, model.n_actions):
        raise DimensionError("feature map does not match the model's state-action space")
    if design.dim != features.dim:
        raise DimensionError(f"design dimension {design.dim} differs from feature dimension {features.dim}")
    if pi0.probs.shape != (model.n_states, model.n_actions):
        raise DimensionError(f"initial policy shape {pi0.probs.shape} does not match the model")
    if config.mirror is MirrorMap.NEGATIVE_ENTROPY and not pi0.interior:
        raise InvalidModelError("KL h-PMD must start from a policy with full support")
    if estimator is None:
        if config.mode is not EstimationMode.INEXACT:
            raise InvalidModelError("run_fa needs estimator parameters or an explicit estimator")
        estimator = MonteCarloQEstimator(model, config.estimator.with_seed(config.seed))

    gamma, h, d = model.discount, config.h, features.dim
    mdp = _reference(model, reference)
    v_star = optimal_value(mdp, tol=V_STAR_TOL)[0] if mdp is not None else None
    measure_fit = mdp is not None and mdp.n_states * mdp.n_actions <= FIT_ORACLE_LIMIT

    state = FaRunState(pi0=pi0, stepsize_scope=stepsize_scope)
    global_scope = storage == STORAGE_ON_DEMAND and stepsize_scope == SCOPE_GLOBAL
    core_states = np.unique([s for s, _ in design.core])
    trace = IterateTrace(gap0=suboptimality_gap(v_star, policy_eval_exact(mdp, pi0)) if mdp is not None else None)
    if config.keep_policies:
        trace.policies.append(pi0)
    bound_seq = None if config.schedule.mode is StepsizeMode.INFINITE else config.schedule
    b_max = 0.0
    logger.info("FA h-PMD: h=%d, K=%d, d=%d, |C|=%d, storage=%s", h, config.n_iters, d, len(design.core), storage)

    def on_demand(k: int) -> OnDemandPolicy:
        return OnDemandPolicy(state, k, features, config.mirror, h, gamma, config.schedule)

    policy = pi0
    samples_cum = 0
    for k in range(config.n_iters):
        started = time.perf_counter()
        current = policy if storage == STORAGE_TABULAR else on_demand(k)
        estimate = estimator.estimate(current, k, design.core)
        theta = fit_theta(design, estimate.q_hat)
        state.theta_list.append(theta)
        samples_cum += estimate.samples_used

        c_k = config.schedule.c(k)
        if storage == STORAGE_TABULAR:
            policy, eta, c_k = pmd_step(config.mirror, features.q_table(theta), policy, config.schedule, k)
        elif global_scope:
            _, eta, c_k = pmd_step(config.mirror, features.q_table(theta), current.to_policy(),
                                   config.schedule, k)
            state.etas.append(eta)
        else:
            on_demand(k + 1).rows(core_states)
            eta = max(state.stepsizes[(k + 1, int(s))] for s in core_states)

        extrapolation_error = extrapolation_value = None
        if measure_fit:
            q_exact = lookahead_values(mdp, current if isinstance(current, Policy) else current.to_policy(), h)[1]
            eps_pi, _ = best_linear_fit_error(features, q_exact)
            eps_q = max(abs(estimate.q_hat[(s, a)] - q_exact[s, a]) for s, a in design.core)
            extrapolation_error = float(np.max(np.abs(features.q_table(theta) - q_exact)))
            extrapolation_value = extrapolation_bound(eps_pi, eps_q, d, max(design.max_norm, math.sqrt(d)))
            b_max = max(b_max, extrapolation_value)

        gap = bound = None
        if mdp is not None:
            if storage == STORAGE_ON_DEMAND:
                policy = on_demand(k + 1).to_policy()
            gap = suboptimality_gap(v_star, policy_eval_exact(mdp, policy))
            if config.record_bounds and measure_fit:
                bound = theorem2_bound(trace.gap0, gamma, h, bound_seq, b_max, k + 1)

        wall_ms = (time.perf_counter() - started) * 1e3 if config.record_wall_time else 0.0
        trace.append(IterateRecord(iteration=k + 1, gap=gap, bound=bound, eta=eta, c_k=c_k,
                                   samples=estimate.samples_used, samples_cum=samples_cum, wall_ms=wall_ms,
                                   extrapolation_error=extrapolation_error,
                                   extrapolation_bound=extrapolation_value))
        if config.keep_policies and (storage == STORAGE_TABULAR or mdp is not None):
            trace.policies.append(policy)
        logger.debug("k=%d gap=%s eta=%.3e samples=%d", k + 1, gap, eta, estimate.samples_used)
    return state, trace
