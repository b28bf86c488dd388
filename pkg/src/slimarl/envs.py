"""Two seeded cooperative multi-agent environments with block-structured
observations.

``SpreadEnv``: point agents spread out to cover an equal number of landmarks;
shared reward is the negated sum over landmarks of the distance to the
closest agent.

``SkirmishEnv``: a team of melee units fights a scripted enemy team of equal
unit stats; shared reward is scaled damage/kills plus a win bonus, normalized
so a flawless win totals 20.

Both expose a documented per-agent observation block layout ("own", "ally",
"enemy", "landmark") that the masking layer indexes into.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

SPREAD_ACTIONS = 5  # noop, +x, -x, +y, -y
_MOVES = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])


@dataclass
class StepOutcome:
    """One step's outputs: full observations, joint state, shared reward."""

    obs: np.ndarray          # (n_agents, obs_dim)
    state: np.ndarray        # (state_dim,)
    reward: float
    done: bool
    win: Optional[bool] = None
    info: dict = field(default_factory=dict)


class SpreadEnv:
    """Cooperative navigation: n agents cover n landmarks in [-1, 1]^2.

    Per-agent observation layout (obs_dim = 4 + 2n + 2(n-1)):
      own      [0:4)                 own position, own velocity
      landmark [4:4+2n)              landmark offsets from the agent
      ally     [4+2n:obs_dim)        ally offsets, by agent index, self skipped

    Joint state: agent positions+velocities then landmark positions
    (state_dim = 4n + 2n).
    """

    name = "spread"

    def __init__(self, n_agents: int = 3, horizon: int = 25, accel: float = 0.5,
                 damping: float = 0.85, seed: int = 0):
        if n_agents < 2:
            raise ValueError(f"spread needs >= 2 agents, got {n_agents}")
        self.n_agents = n_agents
        self.horizon = horizon
        self.accel = accel
        self.damping = damping
        self.n_actions = SPREAD_ACTIONS
        self.obs_dim = 4 + 2 * n_agents + 2 * (n_agents - 1)
        self.state_dim = 4 * n_agents + 2 * n_agents
        self._rng = np.random.default_rng(seed)
        self.pos = np.zeros((n_agents, 2))
        self.vel = np.zeros((n_agents, 2))
        self.landmarks = np.zeros((n_agents, 2))
        self.t = 0

    def block_layout(self) -> dict:
        n = self.n_agents
        return {
            "own": slice(0, 4),
            "landmark": slice(4, 4 + 2 * n),
            "ally": slice(4 + 2 * n, self.obs_dim),
        }

    def reset(self, seed: Optional[int] = None) -> StepOutcome:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.pos = self._rng.uniform(-1.0, 1.0, size=(self.n_agents, 2))
        self.vel = np.zeros((self.n_agents, 2))
        self.landmarks = self._rng.uniform(-1.0, 1.0, size=(self.n_agents, 2))
        self.t = 0
        return StepOutcome(self._obs(), self._state(), 0.0, False)

    def step(self, actions) -> StepOutcome:
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (self.n_agents,):
            raise ValueError(f"need one action per agent, got shape {actions.shape}")
        if actions.min() < 0 or actions.max() >= self.n_actions:
            raise ValueError(f"action index out of range 0..{self.n_actions - 1}")
        self.vel = (self.vel + self.accel * _MOVES[actions]) * self.damping
        self.pos = np.clip(self.pos + self.vel, -1.0, 1.0)
        self.t += 1
        dists = np.linalg.norm(self.pos[None, :, :] - self.landmarks[:, None, :], axis=2)
        reward = -float(dists.min(axis=1).sum())
        done = self.t >= self.horizon
        return StepOutcome(self._obs(), self._state(), reward, done)

    def _obs(self) -> np.ndarray:
        n = self.n_agents
        obs = np.zeros((n, self.obs_dim))
        for i in range(n):
            obs[i, 0:2] = self.pos[i]
            obs[i, 2:4] = self.vel[i]
            obs[i, 4 : 4 + 2 * n] = (self.landmarks - self.pos[i]).ravel()
            others = [j for j in range(n) if j != i]
            obs[i, 4 + 2 * n :] = (self.pos[others] - self.pos[i]).ravel()
        return obs

    def _state(self) -> np.ndarray:
        return np.concatenate(
            [np.concatenate([self.pos, self.vel], axis=1).ravel(), self.landmarks.ravel()]
        )


class SkirmishEnv:
    """Team skirmish against a scripted opponent.

    Allied actions: 0 noop, 1..4 axis moves, 5+j attack enemy j (valid only
    when enemy j is alive and within attack range; invalid attacks act as
    noop and are counted in info["invalid_attacks"]).

    Scripted enemies target their nearest living ally: attack when in range,
    step toward it when inside the aggro radius, hold otherwise. Damage is
    simultaneous, evaluated on positions at the start of the step; units die
    only after all damage is applied.

    Per-agent observation layout (obs_dim = 3 + 3(n_allies-1) + 4 n_enemies):
      own   [0:3)    own position, own hp (normalized)
      ally  [3:...)  per other ally: relative position, hp
      enemy [...:d)  per enemy: relative position, hp, in-range flag
    Dead units contribute zeros; a dead agent's whole observation is zero.

    Joint state: (x, y, hp) for every ally then every enemy.
    Reward: (damage + 2 * kills) * scale per step plus 10 on elimination of
    the enemy team, with scale = 10 / (n_enemies * max_hp + 2 * n_enemies) so
    a flawless win accumulates exactly 20. Win = all enemies eliminated
    before the horizon (regardless of surviving ally count).
    """

    name = "skirmish"

    def __init__(self, n_allies: int = 3, n_enemies: int = 3, horizon: int = 60,
                 max_hp: float = 10.0, attack_range: float = 0.4, damage: float = 1.0,
                 move_step: float = 0.15, aggro_radius: float = 1.2, seed: int = 0):
        if n_allies < 1 or n_enemies < 1:
            raise ValueError("team sizes must be positive")
        self.n_allies = n_allies
        self.n_enemies = n_enemies
        self.n_agents = n_allies
        self.horizon = horizon
        self.max_hp = max_hp
        self.attack_range = attack_range
        self.damage = damage
        self.move_step = move_step
        self.aggro_radius = aggro_radius
        self.n_actions = 5 + n_enemies
        self.obs_dim = 3 + 3 * (n_allies - 1) + 4 * n_enemies
        self.state_dim = 3 * (n_allies + n_enemies)
        self.reward_scale = 10.0 / (n_enemies * max_hp + 2.0 * n_enemies)
        self._rng = np.random.default_rng(seed)
        self.ally_pos = np.zeros((n_allies, 2))
        self.enemy_pos = np.zeros((n_enemies, 2))
        self.ally_hp = np.zeros(n_allies)
        self.enemy_hp = np.zeros(n_enemies)
        self.t = 0

    def block_layout(self) -> dict:
        na = self.n_allies
        return {
            "own": slice(0, 3),
            "ally": slice(3, 3 + 3 * (na - 1)),
            "enemy": slice(3 + 3 * (na - 1), self.obs_dim),
        }

    def reset(self, seed: Optional[int] = None) -> StepOutcome:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.ally_pos = np.column_stack([
            self._rng.uniform(-0.8, -0.4, self.n_allies),
            self._rng.uniform(-0.5, 0.5, self.n_allies),
        ])
        self.enemy_pos = np.column_stack([
            self._rng.uniform(0.4, 0.8, self.n_enemies),
            self._rng.uniform(-0.5, 0.5, self.n_enemies),
        ])
        self.ally_hp = np.full(self.n_allies, self.max_hp)
        self.enemy_hp = np.full(self.n_enemies, self.max_hp)
        self.t = 0
        return StepOutcome(self._obs(), self._state(), 0.0, False, win=None)

    def step(self, actions) -> StepOutcome:
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (self.n_allies,):
            raise ValueError(f"need one action per ally, got shape {actions.shape}")
        if actions.min() < 0 or actions.max() >= self.n_actions:
            raise ValueError(f"action index out of range 0..{self.n_actions - 1}")
        ally_alive = self.ally_hp > 0
        enemy_alive = self.enemy_hp > 0
        enemy_dmg = np.zeros(self.n_enemies)
        ally_dmg = np.zeros(self.n_allies)
        invalid = 0

        # Allied intents, judged on positions at the start of the step.
        ally_moves = np.zeros((self.n_allies, 2))
        for i in range(self.n_allies):
            if not ally_alive[i]:
                continue
            a = actions[i]
            if 1 <= a <= 4:
                ally_moves[i] = self.move_step * _MOVES[a]
            elif a >= 5:
                j = a - 5
                if enemy_alive[j] and self._dist(self.ally_pos[i], self.enemy_pos[j]) <= self.attack_range:
                    enemy_dmg[j] += self.damage
                else:
                    invalid += 1

        # Scripted enemy intents.
        enemy_moves = np.zeros((self.n_enemies, 2))
        for j in range(self.n_enemies):
            if not enemy_alive[j]:
                continue
            target = self._nearest_ally(j)
            if target is None:
                continue
            d = self._dist(self.enemy_pos[j], self.ally_pos[target])
            if d <= self.attack_range:
                ally_dmg[target] += self.damage
            elif d <= self.aggro_radius:
                gap = self.ally_pos[target] - self.enemy_pos[j]
                axis = 0 if abs(gap[0]) >= abs(gap[1]) else 1
                step_vec = np.zeros(2)
                step_vec[axis] = np.sign(gap[axis]) * self.move_step
                enemy_moves[j] = step_vec

        self.ally_pos = np.clip(self.ally_pos + ally_moves, -1.0, 1.0)
        self.enemy_pos = np.clip(self.enemy_pos + enemy_moves, -1.0, 1.0)

        # Simultaneous damage; count only damage actually absorbed.
        dealt = float(np.minimum(enemy_dmg, self.enemy_hp).sum())
        before_alive = enemy_alive.copy()
        self.enemy_hp = np.maximum(self.enemy_hp - enemy_dmg, 0.0)
        self.ally_hp = np.maximum(self.ally_hp - ally_dmg, 0.0)
        kills = int(np.sum(before_alive & (self.enemy_hp <= 0)))

        self.t += 1
        enemies_left = bool(np.any(self.enemy_hp > 0))
        allies_left = bool(np.any(self.ally_hp > 0))
        reward = (dealt + 2.0 * kills) * self.reward_scale
        win = None
        done = self.t >= self.horizon or not enemies_left or not allies_left
        if done:
            win = not enemies_left
            if win:
                reward += 10.0
        return StepOutcome(self._obs(), self._state(), reward, done, win=win,
                           info={"invalid_attacks": invalid})

    def _dist(self, a, b) -> float:
        return float(np.linalg.norm(a - b))

    def _nearest_ally(self, j: int) -> Optional[int]:
        alive = np.flatnonzero(self.ally_hp > 0)
        if alive.size == 0:
            return None
        d = np.linalg.norm(self.ally_pos[alive] - self.enemy_pos[j], axis=1)
        return int(alive[np.argmin(d)])

    def _obs(self) -> np.ndarray:
        na, ne = self.n_allies, self.n_enemies
        obs = np.zeros((na, self.obs_dim))
        for i in range(na):
            if self.ally_hp[i] <= 0:
                continue
            obs[i, 0:2] = self.ally_pos[i]
            obs[i, 2] = self.ally_hp[i] / self.max_hp
            k = 3
            for j in range(na):
                if j == i:
                    continue
                if self.ally_hp[j] > 0:
                    obs[i, k : k + 2] = self.ally_pos[j] - self.ally_pos[i]
                    obs[i, k + 2] = self.ally_hp[j] / self.max_hp
                k += 3
            for j in range(ne):
                if self.enemy_hp[j] > 0:
                    obs[i, k : k + 2] = self.enemy_pos[j] - self.ally_pos[i]
                    obs[i, k + 2] = self.enemy_hp[j] / self.max_hp
                    obs[i, k + 3] = float(
                        self._dist(self.ally_pos[i], self.enemy_pos[j]) <= self.attack_range
                    )
                k += 4
        return obs

    def _state(self) -> np.ndarray:
        ally = np.column_stack([self.ally_pos, self.ally_hp / self.max_hp])
        enemy = np.column_stack([self.enemy_pos, self.enemy_hp / self.max_hp])
        return np.concatenate([ally.ravel(), enemy.ravel()])


def make_env(name: str, seed: int = 0, **kwargs):
    if name == "spread":
        return SpreadEnv(seed=seed, **kwargs)
    if name == "skirmish":
        return SkirmishEnv(seed=seed, **kwargs)
    raise ValueError(f"unknown environment {name!r}")
