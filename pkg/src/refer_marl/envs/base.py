from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class StepAfterTerminal(RuntimeError):
    pass


class Env:
    """Homogeneous multi-agent environment: r, s' = D(s, a).

    Subclasses set ``n_agents``, ``obs_dim``, ``max_steps`` and either
    ``n_actions`` (discrete) or ``action_dim``/``bounds`` (continuous).
    """

    name = "env"
    n_agents: int
    obs_dim: int
    max_steps: int
    continuous: bool
    n_actions: int = 0
    action_dim: int = 0
    bounds: tuple[float, float] = (-1.0, 1.0)

    def __init__(self):
        self.t = 0
        self.done = True
        self.absorbing = False

    def reset(self, seed: int | None = None) -> np.ndarray:
        raise NotImplementedError

    def step(self, actions) -> tuple[np.ndarray, np.ndarray, bool]:
        raise NotImplementedError

    def _begin_step(self):
        if self.done:
            raise StepAfterTerminal("step() called on a terminated episode; call reset()")

    def describe(self) -> dict:
        return {
            "name": self.name,
            "n_agents": self.n_agents,
            "obs_dim": self.obs_dim,
            "max_steps": self.max_steps,
            "continuous": self.continuous,
            "n_actions": self.n_actions,
            "action_dim": self.action_dim,
            "bounds": list(self.bounds),
        }


class TraceRecorder:
    """Writes one JSON object per environment step to a JSONL file."""

    def __init__(self, path: str | Path):
        self._fh = open(path, "w")

    def record(self, t: int, states, actions, rewards) -> None:
        self._fh.write(json.dumps({
            "t": int(t),
            "states": np.asarray(states).tolist(),
            "actions": np.asarray(actions).tolist(),
            "rewards": np.asarray(rewards).tolist(),
        }) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trace(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
