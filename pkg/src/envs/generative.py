#!/usr/bin/env python3
"""
Generative-model view of a tabular MDP
Next states are drawn by inverse CDF over the padded support of each
transition row, so batch sampling costs O(batch x max support).
"""

import numpy as np

from src.models.tabular import TabularMdp


class TabularGenerativeModel:
    """Sampler over a TabularMdp with deterministic rewards"""

    def __init__(self, mdp: TabularMdp):
        self.mdp = mdp
        self.n_states = mdp.n_states
        self.n_actions = mdp.n_actions
        self.discount = mdp.discount
        self._reward = mdp.reward
        self._support, self._cdf = self._build_support(mdp.transition)

    @staticmethod
    def _build_support(transition: np.ndarray):
        n_states, n_actions, _ = transition.shape
        width = int(np.max(np.count_nonzero(transition > 0, axis=2)))
        support = np.zeros((n_states, n_actions, width), dtype=np.int64)
        cdf = np.ones((n_states, n_actions, width))
        for s in range(n_states):
            for a in range(n_actions):
                nonzero = np.flatnonzero(transition[s, a] > 0)
                k = nonzero.size
                support[s, a, :k] = nonzero
                support[s, a, k:] = nonzero[-1]
                cdf[s, a, :k] = np.cumsum(transition[s, a, nonzero])
                # rounding must not leave a gap below 1
                cdf[s, a, k - 1:] = 1.0
        return support, cdf

    def reward(self, s: int, a: int) -> float:
        return float(self._reward[s, a])

    def rewards(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self._reward[states, actions]

    def sample_next(self, s: int, a: int, rng: np.random.Generator) -> int:
        return int(self.sample_next_batch(np.array([s]), np.array([a]), rng)[0])

    def sample_next_batch(self, states: np.ndarray, actions: np.ndarray,
                          rng: np.random.Generator) -> np.ndarray:
        states = np.asarray(states, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        u = rng.random(states.shape[0])
        cdf = self._cdf[states, actions]
        slot = np.minimum(np.sum(cdf <= u[:, None], axis=1), cdf.shape[1] - 1)
        return self._support[states, actions, slot]
