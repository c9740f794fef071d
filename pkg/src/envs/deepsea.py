#!/usr/bin/env python3
"""
DeepSea benchmark MDP
An N x N grid: the diver starts top-left, descends one row per step and moves
one column left or right. Moving right costs move_cost / N, taking "right" in the
bottom-right cell pays the treasure. After the bottom row the episode ends in an
absorbing terminal state. With slip_prob > 0 the horizontal move is flipped.

Raw rewards lie in [-move_cost/N, treasure - move_cost/N]; they are mapped to
[0, 1] by r' = (r + move_cost/N) / treasure_reward, constants stored in the MDP
metadata. The map adds the same constant to every step, so policy values shift
uniformly and policy rankings are unchanged.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from src.models.tabular import TabularMdp
from src.utils.errors import InvalidModelError

LEFT, RIGHT = 0, 1
DEFAULT_SLIP_PROB = 0.05


@dataclass(frozen=True)
class DeepSeaSpec:
    grid_size: int
    slip_prob: float = DEFAULT_SLIP_PROB
    move_cost: float = 0.01
    treasure_reward: float = 1.0
    discount: float = 0.99

    def __post_init__(self):
        if self.grid_size < 1:
            raise InvalidModelError(f"grid_size must be >= 1, got {self.grid_size}")
        if not 0.0 <= self.slip_prob <= 0.5:
            raise InvalidModelError(f"slip_prob must lie in [0, 0.5], got {self.slip_prob}")
        if self.move_cost < 0 or self.treasure_reward <= 0:
            raise InvalidModelError("move_cost must be >= 0 and treasure_reward > 0")
        if self.move_cost / self.grid_size >= self.treasure_reward:
            raise InvalidModelError("the per-move cost must stay below the treasure")
        if not 0.0 < self.discount < 1.0:
            raise InvalidModelError(f"discount must lie in (0, 1), got {self.discount}")

    @property
    def n_states(self) -> int:
        return self.grid_size ** 2 + 1

    @property
    def terminal(self) -> int:
        return self.grid_size ** 2

    def cell(self, row: int, column: int) -> int:
        return row * self.grid_size + column

    def position(self, state: int) -> Tuple[int, int]:
        return divmod(state, self.grid_size)


def build_deepsea(spec: DeepSeaSpec) -> TabularMdp:
    """Tabular DeepSea MDP with rewards rescaled into [0, 1]"""
    n = spec.grid_size
    n_states = spec.n_states
    transition = np.zeros((n_states, 2, n_states))
    raw_reward = np.zeros((n_states, 2))
    step_cost = spec.move_cost / n

    for row in range(n):
        for column in range(n):
            s = spec.cell(row, column)
            raw_reward[s, RIGHT] -= step_cost
            if row == n - 1 and column == n - 1:
                raw_reward[s, RIGHT] += spec.treasure_reward
            if row == n - 1:
                transition[s, :, spec.terminal] = 1.0
                continue
            left = spec.cell(row + 1, max(column - 1, 0))
            right = spec.cell(row + 1, min(column + 1, n - 1))
            transition[s, RIGHT, right] += 1.0 - spec.slip_prob
            transition[s, RIGHT, left] += spec.slip_prob
            transition[s, LEFT, left] += 1.0 - spec.slip_prob
            transition[s, LEFT, right] += spec.slip_prob
    transition[spec.terminal, :, spec.terminal] = 1.0

    reward = (raw_reward + step_cost) / spec.treasure_reward
    initial = np.zeros(n_states)
    initial[spec.cell(0, 0)] = 1.0
    return TabularMdp(
        transition=transition,
        reward=np.clip(reward, 0.0, 1.0),
        discount=spec.discount,
        initial_dist=initial,
        metadata={
            "env": "deepsea",
            "grid_size": n,
            "slip_prob": spec.slip_prob,
            "reward_shift": step_cost,
            "reward_scale": 1.0 / spec.treasure_reward,
        },
    )
