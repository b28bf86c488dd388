"""Per-agent observation masking.

Two modes per agent: a list of visible feature blocks (own/ally/enemy/
landmark, resolved against the environment's block layout), or a random
feature subset of size min_keep..max_keep resampled once per episode and
fixed within it. Masked entries are exactly zero and the observation length
is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import MaskError

BLOCK_LETTERS = {"O": "own", "A": "ally", "E": "enemy", "L": "landmark"}


def _block_name(token: str) -> str:
    name = BLOCK_LETTERS.get(token.upper(), token.lower())
    if name not in BLOCK_LETTERS.values():
        raise MaskError(f"unknown block {token!r}; known blocks: O/A/E/L")
    return name


@dataclass(frozen=True)
class MaskSpec:
    """Visibility for one agent: block mode or random-subset mode."""

    blocks: Optional[tuple] = None          # block names or letters
    subset_range: Optional[tuple] = None    # (min_keep, max_keep)

    def __post_init__(self):
        if (self.blocks is None) == (self.subset_range is None):
            raise MaskError("mask needs exactly one of blocks / subset_range")
        if self.blocks is not None:
            if len(self.blocks) == 0:
                raise MaskError("an agent must see at least one block")
            object.__setattr__(self, "blocks", tuple(_block_name(b) for b in self.blocks))
        else:
            lo, hi = self.subset_range
            if not (1 <= lo <= hi):
                raise MaskError(f"bad subset range {self.subset_range}")

    def to_dict(self) -> dict:
        if self.blocks is not None:
            return {"blocks": list(self.blocks)}
        return {"subset": list(self.subset_range)}

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSpec":
        if "blocks" in d:
            return cls(blocks=tuple(d["blocks"]))
        if "subset" in d:
            lo, hi = d["subset"]
            return cls(subset_range=(int(lo), int(hi)))
        raise MaskError(f"mask entry must have 'blocks' or 'subset', got {sorted(d)}")


def resolve_keep(mask: MaskSpec, layout: dict, obs_dim: int,
                 rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Boolean keep vector for one agent.

    Subset mode draws from ``rng`` (required); block mode is deterministic.
    """
    keep = np.zeros(obs_dim, dtype=bool)
    if mask.blocks is not None:
        for block in mask.blocks:
            if block not in layout:
                raise MaskError(
                    f"block {block!r} not in this environment "
                    f"(has {sorted(layout)})"
                )
            keep[layout[block]] = True
        return keep
    if rng is None:
        raise MaskError("subset-mode masks need an episode rng")
    lo, hi = mask.subset_range
    if hi > obs_dim:
        raise MaskError(f"subset range {mask.subset_range} exceeds obs_dim {obs_dim}")
    k = int(rng.integers(lo, hi + 1))
    keep[rng.choice(obs_dim, size=k, replace=False)] = True
    return keep


def resolve_mask_table(mask_table, layout: dict, obs_dim: int, n_agents: int,
                       rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Per-episode (n_agents, obs_dim) keep matrix; None means no masking."""
    if mask_table is None:
        return np.ones((n_agents, obs_dim), dtype=bool)
    if len(mask_table) != n_agents:
        raise MaskError(f"mask table covers {len(mask_table)} agents, env has {n_agents}")
    return np.stack([resolve_keep(m, layout, obs_dim, rng) for m in mask_table])


def apply_keep(obs: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Zero everything outside the keep set; shape-preserving."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] != keep.shape[-1]:
        raise MaskError(f"obs dim {obs.shape[-1]} != keep dim {keep.shape[-1]}")
    return obs * keep


def apply_mask(obs: np.ndarray, mask: MaskSpec, layout: dict,
               episode_rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """One-shot convenience: resolve the mask and apply it to one observation."""
    keep = resolve_keep(mask, layout, obs.shape[-1], episode_rng)
    return apply_keep(obs, keep)
