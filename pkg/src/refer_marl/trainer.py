"""Synchronous collect/train loop with checkpointing and per-episode metrics."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import net as nn
from .config import Config
from .core import (
    ContinuousHead,
    DiscreteHead,
    ReFERState,
    head_gradients,
    joint_iw_agents,
    parse_variant,
    update_beta,
)
from .envs import make_env
from .replay import Episode, ReplayMemory, anneal_cmax, compute_vtbc

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


class CheckpointError(RuntimeError):
    pass


def make_head(env):
    if env.continuous:
        from .clipped_normal import Bounds
        return ContinuousHead(env.action_dim, Bounds(*env.bounds))
    return DiscreteHead(env.n_actions)


def episode_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, episode]).generate_state(1)[0])


@dataclass
class StepStats:
    kl: float
    grad_norm: float
    f_near: float
    skipped: bool


class Trainer:
    """Owns the network, optimizer, replay memory and ReF-ER state of one run."""

    def __init__(self, cfg: Config):
        self.cfg = cfg
        self.dynamics, self.scalar = parse_variant(cfg.variant)
        env_kwargs = {"n_pursuers" if cfg.env == "pursuit" else "n_agents": cfg.n_agents} if cfg.n_agents else {}
        self.env = make_env(cfg.env, **env_kwargs)
        self.head = make_head(self.env)
        layout = nn.NetLayout(self.env.obs_dim, cfg.hidden_widths, 1, self.head.raw_dim)
        self.params = nn.init(layout, cfg.seed)
        self.opt = nn.AdamState.zeros(layout.n_params, lr=cfg.lr)
        self.rm = ReplayMemory(cfg.capacity)
        self.refer = ReFERState(cfg.beta0, cfg.c_max, cfg.f_star, cfg.eta_beta)
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        self.episodes_done = 0
        self.train_steps = 0
        self.skipped_steps = 0
        self.metrics: list[dict] = []

    # -- collection ----------------------------------------------------------

    def policy_step(self, obs: np.ndarray, greedy: bool = False):
        v, raw = nn.forward_batch(self.params, obs)
        par = self.head.params(raw)
        act = self.head.greedy(par) if greedy else self.head.sample(par, self.rng)
        return v, par, act

    def collect_episode(self, env_seed: int | None = None, greedy: bool = False, recorder=None) -> Episode:
        """Roll one episode with the current network (random-init network during warmup)."""
        env = self.env
        if env_seed is None:
            env_seed = episode_seed(self.cfg.seed, self.episodes_done)
        obs = env.reset(env_seed)
        states, actions, rewards, behavior, values = [], [], [], [], []
        done = False
        while not done:
            v, par, act = self.policy_step(obs, greedy)
            r, nxt, done = env.step(act)
            if recorder is not None:
                recorder.record(env.t - 1, obs, act, r)
            states.append(obs)
            actions.append(act)
            rewards.append(r)
            behavior.append(par)
            values.append(v)
            obs = nxt
        v_term, _ = nn.forward_batch(self.params, obs)
        return Episode(
            states=np.array(states), actions=np.array(actions), rewards=np.array(rewards),
            behavior=np.array(behavior), values=np.array(values), terminal_states=np.array(obs),
            terminal_values=np.array(v_term), absorbing=env.absorbing,
        )

    def postprocess_episode(self, ep: Episode) -> Episode:
        """Targets at insertion time: behavior equals the current policy, so rho_bar = 1."""
        ep.targets = compute_vtbc(ep, ep.values, np.ones_like(ep.values), self.cfg.gamma, self.scalar)
        return ep

    # -- training ------------------------------------------------------------

    @property
    def warm(self) -> bool:
        return self.rm.total >= max(self.cfg.min_experiences_before_training, self.cfg.batch, 1)

    def c_max(self) -> float:
        return anneal_cmax(self.train_steps, self.cfg.c_max, self.cfg.cmax_schedule, self.cfg.cmax_tau)

    def compute_minibatch(self, ep_ids, ts, update_memory: bool = True):
        """Forward the current network on a minibatch and build output-level gradients."""
        B = len(ts)
        N = self.env.n_agents
        batch = self.rm.gather(ep_ids, ts)
        flat_states = batch["states"].reshape(B * N, -1)
        v, raw, cache = nn.forward_batch(self.params, flat_states, keep_cache=True)
        v = v.reshape(B, N)
        raw = raw.reshape(B, N, -1)
        c_max = self.c_max()
        if update_memory:
            cur = self.head.params(raw)
            local = self.head.iw(batch["actions"], cur, batch["behavior"])
            rho = joint_iw_agents(local, self.dynamics)
            self.rm.update_sampled(ep_ids, ts, v, rho, c_max)
        vtbc, vtbc_next = self.rm.targets_for(ep_ids, ts, self.cfg.gamma, self.scalar)
        hg = head_gradients(
            self.head, v, raw, batch["actions"], batch["behavior"], batch["rewards"], vtbc, vtbc_next,
            self.cfg.gamma, c_max, self.dynamics, self.scalar,
        )
        return hg, flat_states, cache

    def train_step(self) -> StepStats:
        ids, ts = self.rm.sample_minibatch(self.cfg.batch, self.rng)
        hg, flat_states, cache = self.compute_minibatch(ids, ts)
        d_pol = hg.policy_out(self.refer.beta)
        B, N = hg.d_value.shape
        grad = nn.backward_batch(self.params, flat_states, hg.d_value.reshape(B * N),
                                 d_pol.reshape(B * N, -1), cache)
        accepted = nn.adam_step(self.params, self.opt, grad)
        if not accepted:
            self.skipped_steps += 1
        self.train_steps += 1
        self.refer = update_beta(self.refer, self.rm.far_policy_fraction())
        return StepStats(float(np.mean(hg.kl)), float(np.linalg.norm(grad)) if accepted else float("nan"),
                         float(np.mean(hg.on_policy)), not accepted)

    # -- outer loop ----------------------------------------------------------

    def run_episode(self) -> dict:
        t0 = time.perf_counter()
        ep = self.postprocess_episode(self.collect_episode())
        self.rm.store_episode(ep)
        n_steps = len(ep) if self.cfg.grad_steps_per_episode == "auto" else int(self.cfg.grad_steps_per_episode)
        stats = []
        if self.warm:
            stats = [self.train_step() for _ in range(n_steps)]
        returns = ep.rewards.sum(axis=0)
        rec = {
            "episode": self.episodes_done,
            "length": len(ep),
            "returns": [float(x) for x in returns],
            "mean_return": float(returns.mean()),
            "f_off": float(self.rm.far_policy_fraction()),
            "beta": float(self.refer.beta),
            "c_max": float(self.c_max()),
            "mean_kl": float(np.mean([s.kl for s in stats])) if stats else 0.0,
            "grad_norm": float(np.nanmean([s.grad_norm for s in stats])) if stats and not all(s.skipped for s in stats) else 0.0,
            "train_steps": self.train_steps,
            "experiences": self.rm.total,
            "wall_time": time.perf_counter() - t0,
        }
        self.episodes_done += 1
        self.metrics.append(rec)
        return rec

    def run(self, metrics_path: str | Path | None = None, checkpoint_path: str | Path | None = None,
            max_episodes: int | None = None, progress=None) -> list[dict]:
        """Alternate collection and training until ``max_episodes`` episodes are done."""
        stop = self.cfg.max_episodes if max_episodes is None else max_episodes
        fh = open(metrics_path, "a") if metrics_path else None
        try:
            while self.episodes_done < stop:
                rec = self.run_episode()
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                    fh.flush()
                if progress:
                    progress(rec)
                if checkpoint_path and self.episodes_done % self.cfg.checkpoint_every == 0:
                    self.save(checkpoint_path)
        finally:
            if fh:
                fh.close()
        if checkpoint_path and self.episodes_done % self.cfg.checkpoint_every != 0:
            self.save(checkpoint_path)
        return self.metrics

    # -- checkpoint ----------------------------------------------------------

    def state_dict(self) -> dict:
        d = nn.net_state_dict(self.params, self.opt)
        d.update(self.rm.state_dict())
        d["format"] = np.array(CHECKPOINT_FORMAT)
        d["config"] = np.array(self.cfg.to_json())
        d["refer"] = np.array([self.refer.beta, self.refer.c_max, self.refer.f_star, self.refer.eta_beta])
        d["counters"] = np.array([self.episodes_done, self.train_steps, self.skipped_steps], dtype=np.int64)
        d["rng_state"] = np.array(json.dumps(self.rng.bit_generator.state))
        d["env_rng_state"] = np.array(json.dumps(self.env.rng.bit_generator.state))
        return d

    def save(self, path: str | Path) -> None:
        """Atomic write: a failed save leaves the previous checkpoint intact."""
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        try:
            with open(tmp, "wb") as fh:
                np.savez(fh, **self.state_dict())
            os.replace(tmp, path)
        except OSError as exc:
            raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "Trainer":
        try:
            with np.load(path) as d:
                d = dict(d)
        except (OSError, ValueError) as exc:
            raise CheckpointError(f"could not read checkpoint {path}: {exc}") from exc
        if int(d["format"]) != CHECKPOINT_FORMAT:
            raise CheckpointError(f"unsupported checkpoint format {int(d['format'])}")
        cfg = Config.from_dict({**json.loads(str(d["config"])), **overrides})
        tr = cls(cfg)
        tr.params, tr.opt = nn.net_from_state_dict(d)
        tr.rm = ReplayMemory.from_state_dict(d)
        beta, c_max, f_star, eta = (float(x) for x in d["refer"])
        tr.refer = ReFERState(beta, c_max, f_star, eta)
        tr.episodes_done, tr.train_steps, tr.skipped_steps = (int(x) for x in d["counters"])
        tr.rng.bit_generator.state = json.loads(str(d["rng_state"]))
        tr.env.rng.bit_generator.state = json.loads(str(d["env_rng_state"]))
        return tr


def read_metrics(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def truncate_metrics(path: str | Path, n_records: int) -> None:
    """Drop records past ``n_records`` (those written after the checkpoint being resumed)."""
    path = Path(path)
    if not path.exists():
        return
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    path.write_text("".join(ln + "\n" for ln in lines[:n_records]))


def run_training(cfg: Config, out_dir: str | Path, resume: bool = False, progress=None) -> Trainer:
    """Train into ``out_dir`` (metrics.jsonl + checkpoint.npz), optionally resuming."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.npz"
    metrics = out / "metrics.jsonl"
    if resume and ckpt.exists():
        tr = Trainer.load(ckpt, max_episodes=cfg.max_episodes)
        truncate_metrics(metrics, tr.episodes_done)
    else:
        tr = Trainer(cfg)
        if metrics.exists():
            metrics.unlink()
    tr.run(metrics, ckpt, progress=progress)
    return tr


def evaluate(tr: Trainer, episodes: int, greedy: bool = False, seed_offset: int = 10 ** 6) -> dict:
    """Roll out the frozen policy; nothing is stored or trained."""
    returns = []
    for k in range(episodes):
        ep = tr.collect_episode(env_seed=episode_seed(tr.cfg.seed, seed_offset + k), greedy=greedy)
        returns.append(float(ep.rewards.sum(axis=0).mean()))
    arr = np.array(returns)
    return {
        "episodes": episodes,
        "mean_return": float(arr.mean()) if episodes else 0.0,
        "median_return": float(np.median(arr)) if episodes else 0.0,
        "std_return": float(arr.std()) if episodes else 0.0,
        "returns": returns,
    }


