"""Generalized advantage estimation."""

from __future__ import annotations

import numpy as np

from .. import kernels
from .nn import ShapeError


def gae(rewards, values, value_next: float, gamma: float, lam: float) -> np.ndarray:
    """Advantages of one trajectory; ``value_next`` bootstraps past the last step (0 if terminal)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape or rewards.ndim != 1:
        raise ShapeError("rewards and values must be 1-d and aligned")
    next_values = np.append(values[1:], value_next)
    dones = np.zeros(len(rewards))
    return np.asarray(kernels.gae(rewards, values, next_values, dones, gamma, lam))


def gae_segments(rewards, values, next_values, cuts, gamma: float, lam: float) -> np.ndarray:
    """GAE over concatenated segments; ``cuts[t] = 1`` ends a segment after step ``t``.

    ``next_values[t]`` must already be 0 after terminal steps.
    """
    arrs = [np.ascontiguousarray(a, dtype=np.float64) for a in (rewards, values, next_values, cuts)]
    if len({a.shape for a in arrs}) != 1:
        raise ShapeError("gae inputs must be aligned")
    return np.asarray(kernels.gae(*arrs, gamma, lam))
