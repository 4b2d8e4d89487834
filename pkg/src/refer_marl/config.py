"""Run configuration and its flat ``key: value`` file format (YAML subset)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .core import VARIANTS
from .envs import ENVIRONMENTS


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    gamma: float = 0.995
    capacity: int = 2 ** 18
    min_experiences_before_training: int = 2 ** 17
    lr: float = 1e-4
    batch: int = 256
    hidden_widths: tuple[int, ...] = (128, 128)
    beta0: float = 0.3
    f_star: float = 0.1
    c_max: float = 4.0
    eta_beta: float = 1e-4
    env: str = "pursuit"
    variant: str = "LDI"
    seed: int = 0
    max_episodes: int = 20000
    # "auto": one gradient step per collected timestep
    grad_steps_per_episode: int | str = "auto"
    # "constant" keeps c_max fixed; "anneal" uses 1 + (c_max - 1) / (1 + step / cmax_tau)
    cmax_schedule: str = "constant"
    cmax_tau: float = 1e5
    checkpoint_every: int = 100
    # 0 keeps the environment's default agent count
    n_agents: int = 0

    def __post_init__(self):
        self.hidden_widths = tuple(int(h) for h in self.hidden_widths)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.capacity < 1 or self.batch < 1:
            raise ConfigError("capacity and batch must be positive")
        if self.batch > self.capacity:
            raise ConfigError(f"batch {self.batch} exceeds capacity {self.capacity}")
        if self.min_experiences_before_training < 0:
            raise ConfigError("min_experiences_before_training must be >= 0")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ConfigError("hidden_widths must be a non-empty list of positive ints")
        if not 0.0 <= self.beta0 <= 1.0:
            raise ConfigError("beta0 must lie in [0, 1]")
        if not 0.0 < self.f_star < 1.0:
            raise ConfigError("f_star must lie in (0, 1)")
        if self.c_max <= 1.0:
            raise ConfigError("c_max must exceed 1")
        if self.eta_beta <= 0.0 or self.lr < 0.0:
            raise ConfigError("eta_beta must be positive and lr non-negative")
        if self.env not in ENVIRONMENTS:
            raise ConfigError(f"unknown env {self.env!r}; expected one of {sorted(ENVIRONMENTS)}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        if self.max_episodes < 0:
            raise ConfigError("max_episodes must be >= 0")
        g = self.grad_steps_per_episode
        if not (g == "auto" or (isinstance(g, int) and not isinstance(g, bool) and g >= 0)):
            raise ConfigError("grad_steps_per_episode must be 'auto' or an int >= 0")
        if self.cmax_schedule not in ("constant", "anneal"):
            raise ConfigError("cmax_schedule must be 'constant' or 'anneal'")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.n_agents < 0:
            raise ConfigError("n_agents must be >= 0")

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> Config:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict) or any(isinstance(v, dict) for v in raw.values()):
        raise ConfigError("config must be a flat key: value mapping")
    return Config.from_dict(raw)


def dump_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
