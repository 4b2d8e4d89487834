"""Small grid pursuit: pursuers must trap randomly walking evaders.

An evader is caught when each of its four neighbours is either off the grid
or holds a pursuer; every pursuer then receives +5.  Pursuers adjacent to a
live evader get a +0.01 touch bonus.  Observations are three 5x5 planes
centred on the agent (off-grid cells, pursuer counts, evader counts),
flattened plane-major.
"""

from __future__ import annotations

import numpy as np

from .base import Env

# up, down, left, right, stay
MOVES = np.array([(-1, 0), (1, 0), (0, -1), (0, 1), (0, 0)], dtype=np.int64)
MOVE_LIST = [tuple(m) for m in MOVES.tolist()]
STAY = 4
CATCH_REWARD = 5.0
TOUCH_REWARD = 0.01


class PursuitLite(Env):
    name = "pursuit"
    continuous = False
    n_actions = 5

    def __init__(self, grid: int = 8, n_pursuers: int = 4, n_evaders: int = 4, window: int = 5,
                 max_steps: int = 100):
        super().__init__()
        if window % 2 != 1:
            raise ValueError("observation window must be odd")
        if n_pursuers + n_evaders > grid * grid:
            raise ValueError("too many entities for the grid")
        self.grid = grid
        self.n_agents = n_pursuers
        self.n_evaders = n_evaders
        self.window = window
        self.max_steps = max_steps
        self.obs_dim = 3 * window * window
        self.pursuers = np.zeros((n_pursuers, 2), dtype=np.int64)
        self.evaders = np.zeros((n_evaders, 2), dtype=np.int64)
        self.alive = np.zeros(n_evaders, dtype=bool)
        self.caught_total = 0
        self.rng = np.random.default_rng(0)

    def reset(self, seed: int | None = None) -> np.ndarray:
        self.rng = np.random.default_rng(seed)
        G = self.grid
        cells = self.rng.choice(G * G, size=self.n_agents + self.n_evaders, replace=False)
        rc = np.stack([cells // G, cells % G], axis=1)
        self.pursuers = rc[:self.n_agents].copy()
        self.evaders = rc[self.n_agents:].copy()
        self.alive = np.ones(self.n_evaders, dtype=bool)
        self.caught_total = 0
        self.t = 0
        self.done = False
        self.absorbing = False
        return self.observe()

    def set_layout(self, pursuers, evaders, alive=None) -> np.ndarray:
        """Place entities explicitly (scripted scenarios and tests)."""
        self.pursuers = np.array(pursuers, dtype=np.int64).reshape(self.n_agents, 2)
        self.evaders = np.array(evaders, dtype=np.int64).reshape(self.n_evaders, 2)
        self.alive = np.ones(self.n_evaders, dtype=bool) if alive is None else np.array(alive, dtype=bool)
        cells = {tuple(p) for p in self.pursuers} | {tuple(e) for e, a in zip(self.evaders, self.alive) if a}
        if len(cells) != self.n_agents + int(self.alive.sum()):
            raise ValueError("entities overlap")
        self.t = 0
        self.done = False
        self.absorbing = False
        return self.observe()

    def _inside(self, rc) -> np.ndarray:
        rc = np.asarray(rc)
        return (rc[..., 0] >= 0) & (rc[..., 0] < self.grid) & (rc[..., 1] >= 0) & (rc[..., 1] < self.grid)

    def _in(self, r: int, c: int) -> bool:
        return 0 <= r < self.grid and 0 <= c < self.grid

    def step(self, actions):
        self._begin_step()
        actions = np.asarray(actions, dtype=np.int64).reshape(self.n_agents)
        if np.any(actions < 0) or np.any(actions >= self.n_actions):
            raise ValueError(f"actions must lie in [0, {self.n_actions})")
        # small entity counts: plain python tuples beat numpy here
        pursuers = [tuple(p) for p in self.pursuers.tolist()]
        evaders = [tuple(e) for e in self.evaders.tolist()]
        alive = self.alive.tolist()
        live_ev = {e for e, a in zip(evaders, alive) if a}
        occupied = set(pursuers) | live_ev

        # pursuers: blocked by walls, currently occupied cells, and contested targets
        targets = []
        for (r, c), a in zip(pursuers, actions.tolist()):
            dr, dc = MOVE_LIST[a]
            t = (r + dr, c + dc)
            ok = a != STAY and self._in(*t) and t not in occupied
            targets.append(t if ok else None)
        claims: dict = {}
        for t in targets:
            if t is not None:
                claims[t] = claims.get(t, 0) + 1
        pursuers = [t if t is not None and claims[t] == 1 else p for p, t in zip(pursuers, targets)]

        # evaders: uniform over moves that stay on the grid, executed in index order
        occupied = set(pursuers) | live_ev
        for j in range(self.n_evaders):
            if not alive[j]:
                continue
            r, c = evaders[j]
            valid = [m for m, (dr, dc) in enumerate(MOVE_LIST) if self._in(r + dr, c + dc)]
            move = valid[self.rng.integers(len(valid))]
            if move == STAY:
                continue
            dest = (r + MOVE_LIST[move][0], c + MOVE_LIST[move][1])
            if dest not in occupied:
                occupied.discard(evaders[j])
                occupied.add(dest)
                evaders[j] = dest

        rewards = np.zeros(self.n_agents)
        pursuer_cells = set(pursuers)
        for j in range(self.n_evaders):
            if not alive[j]:
                continue
            r, c = evaders[j]
            for i, (pr, pc) in enumerate(pursuers):
                if abs(pr - r) + abs(pc - c) == 1:
                    rewards[i] += TOUCH_REWARD
            if all((not self._in(r + dr, c + dc)) or (r + dr, c + dc) in pursuer_cells for dr, dc in MOVE_LIST[:4]):
                alive[j] = False
                self.caught_total += 1
                rewards += CATCH_REWARD

        self.pursuers = np.array(pursuers, dtype=np.int64).reshape(self.n_agents, 2)
        self.evaders = np.array(evaders, dtype=np.int64).reshape(self.n_evaders, 2)
        self.alive = np.array(alive, dtype=bool)
        self.t += 1
        if not self.alive.any():
            self.done = True
            self.absorbing = True
        elif self.t >= self.max_steps:
            self.done = True
        return rewards, self.observe(), self.done

    def observe(self) -> np.ndarray:
        w, h = self.window, self.window // 2
        G = self.grid
        pad = G + 2 * h
        planes = np.zeros((3, pad, pad))
        planes[0] = 1.0
        planes[0, h:h + G, h:h + G] = 0.0
        np.add.at(planes[1], (self.pursuers[:, 0] + h, self.pursuers[:, 1] + h), 1.0)
        ev = self.evaders[self.alive]
        np.add.at(planes[2], (ev[:, 0] + h, ev[:, 1] + h), 1.0)
        # windows[:, r, c] is the w x w patch whose top-left corner is (r, c) of the padded grid,
        # i.e. the patch centred on grid cell (r, c)
        windows = np.lib.stride_tricks.sliding_window_view(planes, (w, w), axis=(1, 2))
        patches = windows[:, self.pursuers[:, 0], self.pursuers[:, 1]]  # (3, N, w, w)
        return np.ascontiguousarray(patches.transpose(1, 0, 2, 3)).reshape(self.n_agents, self.obs_dim)
