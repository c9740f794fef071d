#!/usr/bin/env python3
"""
Bellman operators, exact policy evaluation and optimal values
All functions are pure and operate on TabularMdp / Policy / numpy value arrays
"""

import logging
import math
from typing import List, Tuple

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from src.models.tabular import Policy, QTable, TabularMdp, VTable
from src.utils.errors import ConvergenceError, DimensionError, InvalidModelError

logger = logging.getLogger(__name__)

GREEDY_TOL = 1e-9
# above this many states policy evaluation switches to a sparse direct solve
DENSE_SOLVE_LIMIT = 1500
EVAL_RESIDUAL_TOL = 1e-10


def _check_policy(mdp: TabularMdp, policy: Policy) -> None:
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionError(
            f"policy shape {policy.probs.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})")


def _check_values(mdp: TabularMdp, v: VTable) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (mdp.n_states,):
        raise DimensionError(f"value vector has shape {v.shape}, expected ({mdp.n_states},)")
    return v


def apply_P(mdp: TabularMdp, v: VTable) -> QTable:
    """(Pv)(s, a) = sum_s' P(s'|s, a) v(s')"""
    v = _check_values(mdp, v)
    return mdp.transition @ v


def policy_reward(mdp: TabularMdp, policy: Policy) -> np.ndarray:
    """r^pi(s) = sum_a pi(a|s) r(s, a)"""
    _check_policy(mdp, policy)
    return np.einsum("sa,sa->s", policy.probs, mdp.reward)


def policy_transition(mdp: TabularMdp, policy: Policy) -> np.ndarray:
    """P^pi(s'|s) = sum_a pi(a|s) P(s'|s, a)"""
    _check_policy(mdp, policy)
    return np.einsum("sa,sat->st", policy.probs, mdp.transition)


def q_from_values(mdp: TabularMdp, v: VTable) -> QTable:
    """r + gamma P v"""
    return mdp.reward + mdp.discount * apply_P(mdp, v)


def bellman_expected(mdp: TabularMdp, policy: Policy, v: VTable) -> VTable:
    """Expected Bellman operator: r^pi + gamma P^pi v"""
    _check_policy(mdp, policy)
    q = q_from_values(mdp, v)
    return np.einsum("sa,sa->s", policy.probs, q)


def bellman_optimal(mdp: TabularMdp, v: VTable) -> VTable:
    """Bellman optimality operator: max_a [r + gamma P v]"""
    return q_from_values(mdp, v).max(axis=1)


def greedy_actions(q: QTable) -> np.ndarray:
    """Per-state argmax with ties broken towards the lowest action index"""
    return np.argmax(np.asarray(q), axis=1)


def greedy_set(q: QTable, tol: float = GREEDY_TOL) -> List[np.ndarray]:
    """For each state, the actions within `tol` of the row maximum"""
    q = np.asarray(q, dtype=float)
    if q.ndim != 2:
        raise DimensionError(f"Q table must be 2-dimensional, got shape {q.shape}")
    best = q.max(axis=1, keepdims=True)
    mask = q >= best - tol
    return [np.flatnonzero(row) for row in mask]


def policy_eval_exact(mdp: TabularMdp, policy: Policy, solver: str = "direct") -> VTable:
    """Solve (I - gamma P^pi) V = r^pi

    `solver="direct"` uses a dense LU factorization for small MDPs and a sparse
    direct solve above DENSE_SOLVE_LIMIT states; `solver="iterative"` applies the
    expected Bellman operator until the residual drops below 1e-12.
    """
    r_pi = policy_reward(mdp, policy)
    p_pi = policy_transition(mdp, policy)
    gamma = mdp.discount

    if solver == "iterative":
        return _policy_eval_iterative(mdp, r_pi, p_pi)
    if solver != "direct":
        raise ValueError(f"unknown solver {solver!r}")

    if mdp.n_states <= DENSE_SOLVE_LIMIT:
        dense_system = np.eye(mdp.n_states) - gamma * p_pi

        def solve(rhs):
            return np.linalg.solve(dense_system, rhs)
    else:
        sparse_system = (scipy.sparse.identity(mdp.n_states, format="csc")
                         - gamma * scipy.sparse.csc_matrix(p_pi))

        def solve(rhs):
            return scipy.sparse.linalg.spsolve(sparse_system, rhs)

    try:
        v = solve(r_pi)
        residual = r_pi + gamma * (p_pi @ v) - v
        if float(np.max(np.abs(residual))) > EVAL_RESIDUAL_TOL:
            # one round of iterative refinement
            v = v + solve(residual)
    except (np.linalg.LinAlgError, RuntimeError) as e:
        raise ConvergenceError(f"policy evaluation solve failed: {e}") from e

    if not np.all(np.isfinite(v)):
        raise ConvergenceError("policy evaluation produced non-finite values")
    return v


def _policy_eval_iterative(mdp: TabularMdp, r_pi: np.ndarray, p_pi: np.ndarray) -> VTable:
    gamma = mdp.discount
    tol = 1e-12
    cap = int(math.ceil(math.log(tol * (1 - gamma)) / math.log(gamma))) + 100
    v = np.zeros(mdp.n_states)
    for _ in range(cap):
        v_next = r_pi + gamma * (p_pi @ v)
        if np.max(np.abs(v_next - v)) <= tol:
            return v_next
        v = v_next
    raise ConvergenceError(f"iterative policy evaluation did not converge within {cap} sweeps")


def optimal_value(mdp: TabularMdp, tol: float = 1e-10, check_every: int = 10) -> Tuple[VTable, Policy]:
    """Value iteration to ||V - V*|| <= tol, plus the 1-step greedy deterministic policy

    Every `check_every` sweeps the greedy policy of the current iterate is
    evaluated exactly; its value is accepted as soon as it meets the same
    residual test, which shortcuts long runs at discounts close to 1.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    gamma = mdp.discount
    stop = tol * (1 - gamma) / gamma
    margin = 10
    cap = int(math.ceil(math.log(tol * (1 - gamma)) / math.log(gamma))) + margin
    cap = max(cap, margin)

    v = np.zeros(mdp.n_states)
    for sweep in range(1, cap + 1):
        v_next = bellman_optimal(mdp, v)
        residual = float(np.max(np.abs(v_next - v)))
        v = v_next
        if residual <= stop:
            actions = greedy_actions(q_from_values(mdp, v))
            logger.debug("value iteration converged after %d sweeps", sweep)
            return v, Policy.deterministic(actions, mdp.n_actions)
        if sweep % check_every == 0:
            actions = greedy_actions(q_from_values(mdp, v))
            candidate = Policy.deterministic(actions, mdp.n_actions)
            v_pi = policy_eval_exact(mdp, candidate)
            if float(np.max(np.abs(bellman_optimal(mdp, v_pi) - v_pi))) <= stop:
                logger.debug("greedy policy is optimal after %d sweeps", sweep)
                return v_pi, candidate
    raise ConvergenceError(f"value iteration did not reach tol={tol} within {cap} sweeps")


def lookahead_values(mdp: TabularMdp, policy: Policy, h: int) -> Tuple[VTable, QTable]:
    """V_h^pi = T^{h-1} V^pi and Q_h^pi = r + gamma P V_h^pi"""
    return lookahead_from_values(mdp, policy_eval_exact(mdp, policy), h)


def lookahead_from_values(mdp: TabularMdp, v_pi: VTable, h: int) -> Tuple[VTable, QTable]:
    """Same as lookahead_values for an already evaluated V^pi"""
    if int(h) != h or h < 1:
        raise InvalidModelError(f"lookahead depth must be a positive integer, got {h}")
    v = _check_values(mdp, v_pi)
    for _ in range(int(h) - 1):
        v = bellman_optimal(mdp, v)
    return v, q_from_values(mdp, v)


def suboptimality_gap(v_star: VTable, v: VTable) -> float:
    """||V* - V||_inf"""
    return float(np.max(np.abs(np.asarray(v_star) - np.asarray(v))))
