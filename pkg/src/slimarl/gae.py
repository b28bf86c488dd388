"""Generalized advantage estimation.

The TD residual zeroes the successor value across done boundaries and the
backward recursion stops accumulating there, so advantages never flow between
episodes. Both the teacher trainer and the distillation engine call the same
kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GaeOutput:
    advantages: np.ndarray
    returns: np.ndarray


def gae_batch(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
              gamma: float, lam: float) -> np.ndarray:
    """Advantages for a (B, T) batch; ``values`` is (B, T+1) with bootstrap."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if rewards.ndim != 2 or dones.shape != rewards.shape:
        raise ValueError(f"rewards/dones must be (B,T), got {rewards.shape}/{dones.shape}")
    b, t = rewards.shape
    if values.shape != (b, t + 1):
        raise ValueError(f"values must be (B,T+1)=({b},{t + 1}), got {values.shape}")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must be in (0,1), got {gamma}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0,1], got {lam}")
    live = 1.0 - dones
    delta = rewards + gamma * values[:, 1:] * live - values[:, :-1]
    adv = np.empty_like(delta)
    carry = np.zeros(b)
    for step in range(t - 1, -1, -1):
        carry = delta[:, step] + gamma * lam * live[:, step] * carry
        adv[:, step] = carry
    return adv


def compute_gae(rewards, values, dones, gamma: float, lam: float) -> GaeOutput:
    """Single-trajectory advantages and returns-to-go (returns = A + V)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 1:
        raise ValueError(f"rewards must be a vector, got shape {rewards.shape}")
    adv = gae_batch(rewards[None], np.asarray(values, dtype=np.float64)[None],
                    np.asarray(dones, dtype=np.float64)[None], gamma, lam)[0]
    returns = adv + np.asarray(values, dtype=np.float64)[:-1]
    return GaeOutput(advantages=adv, returns=returns)
