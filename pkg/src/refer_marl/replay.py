"""Episodic replay memory with V-trace targets and near/far-policy bookkeeping.

Timesteps of all stored episodes live in flat arrays, oldest episode first,
so a minibatch is gathered with one fancy-index per field and the target
refresh for a whole minibatch runs in a single compiled loop.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .core import Scalarization, classify, scalarize_agents

DUMP_VERSION = 1


class EmptyEpisode(ValueError):
    pass


class NotReady(RuntimeError):
    """Not enough stored experiences for the requested operation."""


@dataclass
class Episode:
    """One episode of T joint timesteps for N agents.

    ``behavior`` holds the policy parameters the actions were drawn from,
    ``values``/``rho``/``on_policy`` are refreshed whenever a timestep is
    replayed and ``targets`` holds the V-trace targets.  ``absorbing`` marks a
    true terminal state, whose bootstrap value is zero.
    """

    states: np.ndarray  # (T, N, d)
    actions: np.ndarray  # (T, N) or (T, N, k)
    rewards: np.ndarray  # (T, N)
    behavior: np.ndarray  # (T, N, P)
    values: np.ndarray  # (T, N)
    terminal_states: np.ndarray  # (N, d)
    terminal_values: np.ndarray  # (N,)
    absorbing: bool = False
    targets: np.ndarray | None = None
    rho: np.ndarray | None = None
    on_policy: np.ndarray | None = None

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=float)
        if self.rewards.ndim != 2 or len(self.rewards) < 1:
            raise EmptyEpisode("episode has no timesteps")
        T, N = self.rewards.shape
        self.rho = np.ones((T, N)) if self.rho is None else self._per_step(self.rho, float)
        self.on_policy = np.ones((T, N), dtype=bool) if self.on_policy is None else self._per_step(self.on_policy, bool)
        self.targets = np.zeros((T, N)) if self.targets is None else self._per_step(self.targets, float)

    def _per_step(self, x, dtype) -> np.ndarray:
        try:
            return np.broadcast_to(np.asarray(x, dtype=dtype), self.rewards.shape).copy()
        except ValueError:
            raise ValueError(f"per-step field of shape {np.shape(x)} does not match {self.rewards.shape}") from None

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def n_agents(self) -> int:
        return self.rewards.shape[1]

    def bootstrap_values(self) -> np.ndarray:
        if self.terminal_values is None:
            raise ValueError("terminal values missing")
        return np.zeros(self.n_agents) if self.absorbing else np.asarray(self.terminal_values, dtype=float)


@numba.njit(cache=True)
def _vtrace_kernel(v_f, r_f, rho_bar, v_end, gamma, out, t_stop):
    T, N = v_f.shape
    for i in range(N):
        nxt = v_end[i]
        for t in range(T - 1, t_stop - 1, -1):
            cur = v_f[t, i] + rho_bar[t, i] * (r_f[t, i] + gamma * nxt - v_f[t, i])
            out[t, i] = cur
            nxt = cur


@numba.njit(cache=True)
def _refresh_kernel(values, rewards, rho, targets, starts, ends, stops, boot, gamma, coop):
    # same recursion as _vtrace_kernel over the flat store; rho_bar = min(1, rho),
    # cooperative mode averages values, rewards and bootstrap over agents
    N = values.shape[1]
    for e in range(starts.shape[0]):
        nb = 0.0
        if coop:
            for i in range(N):
                nb += boot[e, i]
            nb /= N
        for i in range(N):
            nxt = nb if coop else boot[e, i]
            for t in range(ends[e] - 1, stops[e] - 1, -1):
                if coop:
                    v = 0.0
                    r = 0.0
                    for j in range(N):
                        v += values[t, j]
                        r += rewards[t, j]
                    v /= N
                    r /= N
                else:
                    v = values[t, i]
                    r = rewards[t, i]
                rb = rho[t, i] if rho[t, i] < 1.0 else 1.0
                cur = v + rb * (r + gamma * nxt - v)
                targets[t, i] = cur
                nxt = cur


def vtrace(v_f, r_f, rho_bar, v_end, gamma: float, t_stop: int = 0, out=None) -> np.ndarray:
    """Backward V-trace recursion V_t + rho_bar_t (r_t + gamma V^_{t+1} - V_t), seeded with v_end.

    Only rows ``t >= t_stop`` of ``out`` are written.
    """
    v_f = np.ascontiguousarray(v_f, dtype=np.float64)
    if out is None:
        out = np.zeros_like(v_f)
    _vtrace_kernel(v_f, np.ascontiguousarray(r_f, dtype=np.float64),
                   np.ascontiguousarray(rho_bar, dtype=np.float64),
                   np.ascontiguousarray(v_end, dtype=np.float64), float(gamma), out, int(t_stop))
    return out


def compute_vtbc(ep: Episode, values, rho_bar, gamma: float, f: Scalarization) -> np.ndarray:
    """V-trace targets for every (t, agent) of an episode under scalarization ``f``."""
    v_end = scalarize_agents(ep.bootstrap_values(), f)
    return vtrace(scalarize_agents(values, f), scalarize_agents(ep.rewards, f), rho_bar, v_end, gamma)


def anneal_cmax(step: int, c_max: float = 4.0, schedule: str = "constant", tau: float = 1e5) -> float:
    """Near-policy cut-off after ``step`` updates.

    ``"anneal"`` decays from ``c_max`` towards 1 as 1 + (c_max - 1) / (1 + step / tau).
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    if schedule == "constant":
        return float(c_max)
    if schedule == "anneal":
        return 1.0 + (c_max - 1.0) / (1.0 + step / tau)
    raise ValueError(f"unknown schedule {schedule!r}")


_FIELDS = ("states", "actions", "rewards", "behavior", "values", "targets", "rho", "on_policy")


class ReplayMemory:
    """Whole-episode FIFO store of joint timesteps.

    ``total`` counts joint timesteps (the capacity unit); the far-policy count
    is kept per agent-experience.  Episode ids grow monotonically, so an id
    stays valid until that episode is evicted.
    """

    def __init__(self, capacity: int = 2 ** 18):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.total = 0
        self.far_count = 0
        self.stored_episodes = 0
        self._buf: dict[str, np.ndarray] | None = None
        self._head = 0  # physical index of the oldest live timestep
        self._starts: deque[int] = deque()
        self._lengths: deque[int] = deque()
        self._term_states: deque[np.ndarray] = deque()
        self._term_values: deque[np.ndarray] = deque()
        self._absorbing: deque[bool] = deque()
        self._index()

    def __len__(self) -> int:
        return self.total

    @property
    def n_episodes(self) -> int:
        return len(self._starts)

    @property
    def first_id(self) -> int:
        return self.stored_episodes - len(self._starts)

    @property
    def n_agents(self) -> int:
        return 0 if self._buf is None else self._buf["rewards"].shape[1]

    # -- storage -------------------------------------------------------------

    def _allocate(self, ep: Episode, need: int) -> None:
        size = self.capacity + max(need, self.capacity // 4, 1)
        self._buf = {name: np.zeros((size,) + np.shape(getattr(ep, name))[1:], dtype=np.asarray(getattr(ep, name)).dtype)
                     for name in _FIELDS}

    def _make_room(self, T: int) -> None:
        end = self._head + self.total
        size = len(self._buf["rewards"])
        if end + T <= size:
            return
        live = slice(self._head, end)
        if self.total + T > size:
            new_size = self.total + T + max(self.capacity // 4, 1)
            for name, arr in self._buf.items():
                grown = np.zeros((new_size,) + arr.shape[1:], dtype=arr.dtype)
                grown[:self.total] = arr[live]
                self._buf[name] = grown
        else:
            for arr in self._buf.values():
                arr[:self.total] = arr[live].copy()
        shift = self._head
        self._starts = deque(s - shift for s in self._starts)
        self._head = 0

    def _index(self) -> None:
        self._cum = np.cumsum(np.fromiter(self._lengths, dtype=np.int64, count=len(self._lengths)))
        self._starts_arr = np.fromiter(self._starts, dtype=np.int64, count=len(self._starts))
        self._len_arr = np.fromiter(self._lengths, dtype=np.int64, count=len(self._lengths))
        if self._term_values:
            boot = [np.zeros_like(v) if a else v for v, a in zip(self._term_values, self._absorbing)]
            self._boot = np.ascontiguousarray(np.stack(boot), dtype=np.float64)
        else:
            self._boot = np.zeros((0, 0))

    def store_episode(self, ep: Episode) -> None:
        """Append an episode and evict the oldest whole episodes while over capacity.

        The newest episode is never evicted, so a single episode longer than the
        capacity is kept on its own.
        """
        T = len(ep)
        if T < 1:
            raise EmptyEpisode("cannot store an empty episode")
        if ep.terminal_values is None:
            raise ValueError("episode needs terminal values before storage")
        if self._buf is None:
            self._allocate(ep, T)
        elif ep.n_agents != self.n_agents:
            raise ValueError("agent count differs from stored episodes")

        # evict first so compaction moves as little as possible
        while self._starts and self.total + T > self.capacity:
            self._evict_oldest()
        self._make_room(T)
        w = self._head + self.total
        for name in _FIELDS:
            self._buf[name][w:w + T] = getattr(ep, name)
        self._starts.append(w)
        self._lengths.append(T)
        self._term_states.append(np.array(ep.terminal_states, dtype=float))
        self._term_values.append(np.array(ep.terminal_values, dtype=float))
        self._absorbing.append(bool(ep.absorbing))
        self.total += T
        self.far_count += int((~np.asarray(ep.on_policy)).sum())
        self.stored_episodes += 1
        self._index()

    def _evict_oldest(self) -> None:
        s = self._starts.popleft()
        T = self._lengths.popleft()
        self._term_states.popleft()
        self._term_values.popleft()
        self._absorbing.popleft()
        self.far_count -= int((~self._buf["on_policy"][s:s + T]).sum())
        self.total -= T
        self._head = s + T

    def episode(self, ep_id: int) -> Episode:
        """Copy of a stored episode."""
        k = ep_id - self.first_id
        if not 0 <= k < len(self._starts):
            raise KeyError(f"episode {ep_id} is not in memory")
        s, T = self._starts[k], self._lengths[k]
        fields = {name: self._buf[name][s:s + T].copy() for name in _FIELDS}
        return Episode(terminal_states=self._term_states[k].copy(), terminal_values=self._term_values[k].copy(),
                       absorbing=self._absorbing[k], **fields)

    def episodes(self):
        for k in range(len(self._starts)):
            yield self.episode(self.first_id + k)

    # -- statistics ----------------------------------------------------------

    def n_agent_experiences(self) -> int:
        return self.total * self.n_agents

    def far_policy_fraction(self) -> float:
        n = self.n_agent_experiences()
        if n == 0:
            raise NotReady("far-policy fraction of an empty memory is undefined")
        return self.far_count / n

    def recount_far(self) -> int:
        if self._buf is None:
            return 0
        return int((~self._buf["on_policy"][self._head:self._head + self.total]).sum())

    # -- minibatches ---------------------------------------------------------

    def sample_minibatch(self, batch: int, rng: np.random.Generator):
        """Uniform draws with replacement: arrays (episode ids, timesteps)."""
        if self.total == 0:
            raise NotReady("cannot sample from an empty memory")
        flat = rng.integers(0, self.total, size=batch)
        pos = np.searchsorted(self._cum, flat, side="right")
        return pos + self.first_id, flat - (self._cum[pos] - self._len_arr[pos])

    def _phys(self, ep_ids, ts):
        pos = np.asarray(ep_ids, dtype=np.int64) - self.first_id
        ts = np.asarray(ts, dtype=np.int64)
        if np.any(pos < 0) or np.any(pos >= len(self._starts)) or np.any(ts < 0) or np.any(ts >= self._len_arr[pos]):
            raise KeyError("minibatch refers to experiences not in memory")
        return pos, self._starts_arr[pos] + ts

    def gather(self, ep_ids, ts) -> dict:
        """The joint tuples of a minibatch, fields stacked along a leading axis."""
        _, phys = self._phys(ep_ids, ts)
        return {name: self._buf[name][phys] for name in ("states", "actions", "rewards", "behavior")}

    def update_sampled(self, ep_ids, ts, values, rho, c_max: float) -> None:
        """Store the current network's values and importance weights for replayed timesteps."""
        _, phys = self._phys(ep_ids, ts)
        on = np.asarray(classify(rho, c_max))
        # with repeated draws the last one wins, as a sequential update would
        rev_unique, rev_first = np.unique(phys[::-1], return_index=True)
        last = len(phys) - 1 - rev_first
        old_far = int((~self._buf["on_policy"][rev_unique]).sum())
        self.far_count += int((~on[last]).sum()) - old_far
        self._buf["on_policy"][rev_unique] = on[last]
        self._buf["rho"][rev_unique] = np.asarray(rho)[last]
        self._buf["values"][rev_unique] = np.asarray(values)[last]

    def targets_for(self, ep_ids, ts, gamma: float, f: Scalarization):
        """Refresh the touched episodes and return (target at t, target at t+1).

        Each touched episode is recomputed backwards from its end down to the
        earliest sampled timestep, from the stored values and weights.
        """
        pos, phys = self._phys(ep_ids, ts)
        uniq, inv = np.unique(pos, return_inverse=True)
        stops = np.full(len(uniq), np.iinfo(np.int64).max)
        np.minimum.at(stops, inv, phys)
        starts = self._starts_arr[uniq]
        ends = starts + self._len_arr[uniq]
        coop = f is Scalarization.COOPERATIVE
        b = self._buf
        _refresh_kernel(b["values"], b["rewards"], b["rho"], b["targets"], starts, ends, stops,
                        self._boot[uniq], float(gamma), coop)
        cur = b["targets"][phys]
        boot = scalarize_agents(self._boot[pos], f)
        last = np.asarray(ts) + 1 >= self._len_arr[pos]
        nxt = np.where(last[:, None], boot, b["targets"][np.minimum(phys + 1, len(b["targets"]) - 1)])
        return cur, nxt

    # -- serialization -------------------------------------------------------

    def state_dict(self, prefix: str = "rm_") -> dict:
        d = {
            f"{prefix}meta": np.array([self.capacity, self.total, self.far_count, self.stored_episodes], dtype=np.int64),
            f"{prefix}lengths": self._len_arr.copy(),
            f"{prefix}absorbing": np.array(list(self._absorbing), dtype=bool),
        }
        if self._starts:
            live = slice(self._head, self._head + self.total)
            for name in _FIELDS:
                d[prefix + name] = self._buf[name][live]
            d[prefix + "terminal_states"] = np.stack(list(self._term_states))
            d[prefix + "terminal_values"] = np.stack(list(self._term_values))
        return d

    @classmethod
    def from_state_dict(cls, d, prefix: str = "rm_") -> "ReplayMemory":
        capacity, total, far, stored = (int(x) for x in d[f"{prefix}meta"])
        rm = cls(capacity=capacity)
        off = 0
        for k, T in enumerate(d[f"{prefix}lengths"]):
            sl = slice(off, off + int(T))
            rm.store_episode(Episode(
                terminal_states=np.array(d[prefix + "terminal_states"][k]),
                terminal_values=np.array(d[prefix + "terminal_values"][k]),
                absorbing=bool(d[f"{prefix}absorbing"][k]),
                **{name: np.array(d[prefix + name][sl]) for name in _FIELDS},
            ))
            off += int(T)
        if rm.total != total or rm.far_count != far:
            raise ValueError("replay state is inconsistent")
        rm.stored_episodes = stored
        return rm

    def dump_json(self, path: str | Path) -> None:
        """Human-readable dump: episodes -> timesteps -> per-agent records."""
        out = {"version": DUMP_VERSION, "capacity": self.capacity, "stored_episodes": self.stored_episodes,
               "episodes": []}
        for ep in self.episodes():
            steps = [
                [
                    {
                        "state": ep.states[t, i].tolist(),
                        "action": np.asarray(ep.actions[t, i]).tolist(),
                        "reward": float(ep.rewards[t, i]),
                        "behavior": ep.behavior[t, i].tolist(),
                        "value": float(ep.values[t, i]),
                        "target": float(ep.targets[t, i]),
                        "rho": float(ep.rho[t, i]),
                        "on_policy": bool(ep.on_policy[t, i]),
                    }
                    for i in range(ep.n_agents)
                ]
                for t in range(len(ep))
            ]
            out["episodes"].append({
                "timesteps": steps,
                "terminal_states": ep.terminal_states.tolist(),
                "terminal_values": np.asarray(ep.terminal_values).tolist(),
                "absorbing": ep.absorbing,
            })
        Path(path).write_text(json.dumps(out))

    @classmethod
    def load_json(cls, path: str | Path) -> "ReplayMemory":
        raw = json.loads(Path(path).read_text())
        if raw.get("version") != DUMP_VERSION:
            raise ValueError(f"unsupported replay dump version {raw.get('version')}")
        rm = cls(capacity=int(raw["capacity"]))
        for e in raw["episodes"]:
            steps = e["timesteps"]

            def col(key, dtype=float):
                return np.array([[rec[key] for rec in step] for step in steps], dtype=dtype)

            rm.store_episode(Episode(
                states=col("state"), actions=col("action", None), rewards=col("reward"),
                behavior=col("behavior"), values=col("value"),
                terminal_states=np.array(e["terminal_states"], dtype=float),
                terminal_values=np.array(e["terminal_values"], dtype=float), absorbing=bool(e["absorbing"]),
                targets=col("target"), rho=col("rho"), on_policy=col("on_policy", bool),
            ))
        rm.stored_episodes = int(raw.get("stored_episodes", rm.stored_episodes))
        return rm
