"""Multi-agent V-RACER with Remember-and-Forget Experience Replay."""

from .config import Config, ConfigError, load_config
from .core import VARIANTS, DynamicsModel, ReFERState, Scalarization, parse_variant, update_beta
from .replay import Episode, ReplayMemory, compute_vtbc
from .trainer import Trainer, evaluate, run_training

__version__ = "0.1.0"

__all__ = [
    "Config", "ConfigError", "load_config", "VARIANTS", "DynamicsModel", "Scalarization", "ReFERState",
    "parse_variant", "update_beta", "Episode", "ReplayMemory", "compute_vtbc", "Trainer", "evaluate",
    "run_training",
]
