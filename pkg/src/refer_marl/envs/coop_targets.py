"""Continuous-thrust target collection in the square arena [-1, 1]^2.

A target is consumed when at least two agents are within ``radius`` of it at
the same step; each of those agents receives +10 and the target respawns.
A lone agent touching a target receives +0.01.  Every agent pays
0.01 * |thrust|_1 per step.  Episodes always run ``max_steps`` steps.

Observation per agent (14 values): own position, own velocity, positions of
the three targets relative to the agent, positions of the two other agents
relative to the agent.
"""

from __future__ import annotations

import logging

import numpy as np

from .base import Env

logger = logging.getLogger(__name__)

CONSUME_REWARD = 10.0
TOUCH_REWARD = 0.01
THRUST_COST = 0.01


class CoopTargets(Env):
    name = "coop_targets"
    continuous = True
    action_dim = 2
    bounds = (-1.0, 1.0)

    def __init__(self, n_agents: int = 3, n_targets: int = 3, radius: float = 0.2, drag: float = 0.2,
                 dt: float = 0.1, max_steps: int = 100):
        super().__init__()
        self.n_agents = n_agents
        self.n_targets = n_targets
        self.radius = radius
        self.drag = drag
        self.dt = dt
        self.max_steps = max_steps
        self.obs_dim = 4 + 2 * n_targets + 2 * (n_agents - 1)
        self.pos = np.zeros((n_agents, 2))
        self.vel = np.zeros((n_agents, 2))
        self.targets = np.zeros((n_targets, 2))
        self.consumed_total = 0
        self.clamped_actions = 0
        self.rng = np.random.default_rng(0)

    def reset(self, seed: int | None = None) -> np.ndarray:
        self.rng = np.random.default_rng(seed)
        self.pos = self.rng.uniform(-0.9, 0.9, size=(self.n_agents, 2))
        self.vel = np.zeros((self.n_agents, 2))
        self.targets = self._place_targets(self.n_targets)
        self.consumed_total = 0
        self.t = 0
        self.done = False
        self.absorbing = False
        return self.observe()

    def _place_targets(self, n: int) -> np.ndarray:
        # keep new targets out of reach of every agent so a respawn is never consumed instantly
        out = np.empty((n, 2))
        for k in range(n):
            while True:
                cand = self.rng.uniform(-0.9, 0.9, size=2)
                if np.all(np.linalg.norm(self.pos - cand, axis=1) > self.radius):
                    out[k] = cand
                    break
        return out

    def set_layout(self, pos, targets, vel=None) -> np.ndarray:
        self.pos = np.array(pos, dtype=float).reshape(self.n_agents, 2)
        self.targets = np.array(targets, dtype=float).reshape(self.n_targets, 2)
        self.vel = np.zeros((self.n_agents, 2)) if vel is None else np.array(vel, dtype=float).reshape(self.n_agents, 2)
        self.t = 0
        self.done = False
        self.absorbing = False
        return self.observe()

    def step(self, actions):
        self._begin_step()
        a = np.asarray(actions, dtype=float).reshape(self.n_agents, 2)
        clipped = np.clip(a, -1.0, 1.0)
        if np.any(clipped != a):
            self.clamped_actions += 1
            logger.debug("coop_targets: out-of-bound thrust clamped")
        a = clipped

        self.vel = (1.0 - self.drag) * self.vel + self.drag * a
        self.pos = self.pos + self.dt * self.vel
        hit = np.abs(self.pos) > 1.0
        self.pos = np.clip(self.pos, -1.0, 1.0)
        self.vel[hit] = 0.0

        rewards = -THRUST_COST * np.abs(a).sum(axis=1)
        dist = np.linalg.norm(self.pos[:, None, :] - self.targets[None, :, :], axis=2)  # (agents, targets)
        for k in range(self.n_targets):
            near = dist[:, k] <= self.radius
            if near.sum() >= 2:
                rewards[near] += CONSUME_REWARD
                self.consumed_total += 1
                self.targets[k] = self._place_targets(1)[0]
            elif near.any():
                rewards[near] += TOUCH_REWARD

        self.t += 1
        self.done = self.t >= self.max_steps
        return rewards, self.observe(), self.done

    def observe(self) -> np.ndarray:
        obs = np.empty((self.n_agents, self.obs_dim))
        for i in range(self.n_agents):
            others = np.delete(self.pos, i, axis=0) - self.pos[i]
            obs[i] = np.concatenate([self.pos[i], self.vel[i], (self.targets - self.pos[i]).ravel(), others.ravel()])
        return obs
