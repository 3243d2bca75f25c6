"""Tabular Q-learning and SARSA.

Each (state, action) cell is its own parameter, so every update touches one
cell only.
"""

from __future__ import annotations

import numpy as np

Q_LEARNING = "q-learning"
SARSA = "sarsa"


def tabular_td_update(table: np.ndarray, s: int, a: int, r: float, s_next: int, a_next: int | None,
                      terminal: bool, kind: str = Q_LEARNING, alpha: float = 0.1, gamma: float = 0.99) -> float:
    """Apply one TD(0) update in place and return the TD error.

    Raises ``IndexError`` for a state or action outside the table.
    """
    n_s, n_a = table.shape
    for name, v, hi in (("state", s, n_s), ("action", a, n_a)):
        if not 0 <= v < hi:
            raise IndexError(f"{name} {v} outside table of shape {table.shape}")
    if terminal:
        target = r
    else:
        if not 0 <= s_next < n_s:
            raise IndexError(f"state {s_next} outside table of shape {table.shape}")
        if kind == Q_LEARNING:
            target = r + gamma * table[s_next].max()
        elif kind == SARSA:
            if a_next is None or not 0 <= a_next < n_a:
                raise IndexError(f"next action {a_next} outside table of shape {table.shape}")
            target = r + gamma * table[s_next, a_next]
        else:
            raise ValueError(f"unknown tabular rule {kind!r}")
    err = target - table[s, a]
    table[s, a] += alpha * err
    return float(err)


class TabularAgent:
    """Epsilon-greedy tabular learner over the environment's discrete state ids."""

    def __init__(self, n_states: int, n_actions: int, kind: str = Q_LEARNING,
                 alpha: float = 0.1, gamma: float = 0.99, epsilon: float = 0.1, seed: int = 0) -> None:
        self.table = np.zeros((n_states, n_actions))
        self.kind, self.alpha, self.gamma, self.epsilon = kind, alpha, gamma, epsilon
        self.name = kind
        self.rng = np.random.default_rng(seed)

    def act_ids(self, states: np.ndarray) -> np.ndarray:
        q = self.table[states]
        greedy = (q == q.max(axis=1, keepdims=True)).argmax(axis=1)
        explore = self.rng.random(len(states)) < self.epsilon
        return np.where(explore, self.rng.integers(0, q.shape[1], len(states)), greedy)
