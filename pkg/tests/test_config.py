from pathlib import Path

import pytest

from refer_marl.config import Config, ConfigError, dump_config, load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_defaults():
    c = Config()
    assert (c.gamma, c.capacity, c.min_experiences_before_training, c.lr, c.batch) == (0.995, 2 ** 18, 2 ** 17, 1e-4, 256)
    assert (c.hidden_widths, c.beta0, c.f_star, c.c_max, c.eta_beta) == ((128, 128), 0.3, 0.1, 4.0, 1e-4)


@pytest.mark.parametrize("bad", [
    {"gamma": 1.0}, {"gamma": -0.1}, {"batch": 512, "capacity": 256}, {"variant": "XYZ"}, {"env": "mujoco"},
    {"hidden_widths": []}, {"c_max": 1.0}, {"f_star": 0.0}, {"beta0": 1.5}, {"grad_steps_per_episode": "many"},
    {"grad_steps_per_episode": -1}, {"max_episodes": -1}, {"cmax_schedule": "cosine"},
])
def test_invalid_values(bad):
    with pytest.raises(ConfigError):
        Config.from_dict(bad)


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("gamma: 0.9\nlearning_rate: 0.1\n")
    with pytest.raises(ConfigError, match="learning_rate"):
        load_config(p)


def test_nested_and_unreadable(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("net:\n  hidden: 3\n")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    p.write_text("gamma: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_round_trip(tmp_path):
    c = Config(env="coop_targets", variant="FDCo", hidden_widths=(16, 8), grad_steps_per_episode=7, seed=3)
    dump_config(c, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == c
    assert Config.from_dict(c.to_dict()) == c


@pytest.mark.parametrize("name", ["pursuit_desk", "coop_targets_desk", "paper_defaults"])
def test_shipped_configs_load(name):
    load_config(CONFIGS / f"{name}.yaml")
