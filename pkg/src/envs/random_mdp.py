#!/usr/bin/env python3
"""
Random dense MDPs and chain MDPs
"""

import numpy as np

from src.models.tabular import TabularMdp
from src.utils.errors import InvalidModelError


def build_random_mdp(n_states: int, n_actions: int, seed: int, sparsity: float = 0.0,
                     discount: float = 0.9) -> TabularMdp:
    """Dirichlet(1) transition rows and uniform [0, 1] rewards

    With sparsity > 0 each next-state entry is dropped with that probability;
    the largest entry of every row is always kept.
    """
    if n_states < 1 or n_actions < 1:
        raise InvalidModelError("n_states and n_actions must be positive")
    if not 0.0 <= sparsity < 1.0:
        raise InvalidModelError(f"sparsity must lie in [0, 1), got {sparsity}")
    rng = np.random.default_rng(seed)
    transition = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    reward = rng.random((n_states, n_actions))
    if sparsity > 0:
        keep = rng.random(transition.shape) >= sparsity
        top = np.argmax(transition, axis=2)
        keep[np.arange(n_states)[:, None], np.arange(n_actions)[None, :], top] = True
        transition = np.where(keep, transition, 0.0)
    transition = transition / transition.sum(axis=2, keepdims=True)
    return TabularMdp(transition=transition, reward=reward, discount=discount,
                      metadata={"env": "random", "seed": int(seed), "sparsity": sparsity})


def build_chain_mdp(n_states: int, slip_prob: float = 0.0, discount: float = 0.9,
                    left_reward: float = 0.05, right_reward: float = 1.0) -> TabularMdp:
    """Chain of states with a small reward at the left end and a large one at the right end

    Action 0 moves left, action 1 moves right; with slip_prob the move is reversed.
    """
    if n_states < 2:
        raise InvalidModelError("a chain needs at least two states")
    if not 0.0 <= slip_prob <= 0.5:
        raise InvalidModelError(f"slip_prob must lie in [0, 0.5], got {slip_prob}")
    transition = np.zeros((n_states, 2, n_states))
    reward = np.zeros((n_states, 2))
    for s in range(n_states):
        left, right = max(s - 1, 0), min(s + 1, n_states - 1)
        transition[s, 0, left] += 1.0 - slip_prob
        transition[s, 0, right] += slip_prob
        transition[s, 1, right] += 1.0 - slip_prob
        transition[s, 1, left] += slip_prob
    reward[0, 0] = left_reward
    reward[n_states - 1, 1] = right_reward
    initial = np.zeros(n_states)
    initial[0] = 1.0
    return TabularMdp(transition=transition, reward=reward, discount=discount, initial_dist=initial,
                      metadata={"env": "chain", "slip_prob": slip_prob})
