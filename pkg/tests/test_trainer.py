import dataclasses

import numpy as np
import pytest

from refer_marl import net as nn
from refer_marl.config import Config
from refer_marl.core import VARIANTS
from refer_marl.replay import Episode, vtrace
from refer_marl.trainer import CheckpointError, Trainer, evaluate, read_metrics, run_training


def small(**kw):
    base = dict(hidden_widths=(8,), capacity=3000, min_experiences_before_training=150, batch=16, lr=1e-3,
                grad_steps_per_episode=3, max_episodes=6, checkpoint_every=2)
    return Config(**{**base, **kw})


def strip(records):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in records]


def test_collect_episode_records_consistent_values():
    tr = Trainer(small())
    ep = tr.collect_episode(env_seed=4)
    T, N = ep.rewards.shape
    assert ep.states.shape == (T, N, tr.env.obs_dim) and ep.behavior.shape == (T, N, tr.head.param_dim)
    v, raw = nn.forward_batch(tr.params, ep.states.reshape(T * N, -1))
    assert np.array_equal(v.reshape(T, N), ep.values)
    assert np.array_equal(tr.head.params(raw).reshape(ep.behavior.shape), ep.behavior)


def test_collect_episode_deterministic_and_in_bounds():
    cfg = small(env="coop_targets")
    a, b = Trainer(cfg).collect_episode(env_seed=1), Trainer(cfg).collect_episode(env_seed=1)
    assert np.array_equal(a.actions, b.actions) and np.array_equal(a.rewards, b.rewards)
    assert np.all(np.abs(a.actions) <= 1.0) and a.actions.shape[-1] == 2


def test_postprocess_uses_unit_weights():
    tr = Trainer(small(gamma=0.9))
    ep = tr.postprocess_episode(tr.collect_episode(env_seed=0))
    ref = vtrace(ep.values, ep.rewards, np.ones_like(ep.values), ep.bootstrap_values(), 0.9)
    assert np.array_equal(ep.targets, ref)


def test_postprocess_zero_episode():
    tr = Trainer(small())
    z = np.zeros((5, 4))
    ep = Episode(states=np.zeros((5, 4, 75)), actions=np.zeros((5, 4), dtype=int), rewards=z, behavior=np.zeros((5, 4, 6)),
                 values=z, terminal_states=np.zeros((4, 75)), terminal_values=np.zeros(4))
    assert np.all(tr.postprocess_episode(ep).targets == 0.0)


def test_warmup_trains_nothing():
    tr = Trainer(small(min_experiences_before_training=10 ** 6, max_episodes=3))
    before = tr.params.flat.copy()
    tr.run()
    assert tr.train_steps == 0 and np.array_equal(tr.params.flat, before)
    assert all(r["train_steps"] == 0 for r in tr.metrics)


def test_zero_episodes(tmp_path):
    tr = run_training(small(max_episodes=0), tmp_path)
    assert tr.metrics == [] and read_metrics(tmp_path / "metrics.jsonl") == []


def test_training_moves_parameters_and_logs():
    tr = Trainer(small())
    before = tr.params.flat.copy()
    tr.run()
    assert tr.train_steps > 0 and not np.array_equal(tr.params.flat, before)
    for r in tr.metrics:
        assert 0.0 <= r["f_off"] <= 1.0 and 0.0 <= r["beta"] <= 1.0 and r["c_max"] == 4.0
        assert len(r["returns"]) == 4 and np.isfinite(r["mean_kl"])


@pytest.mark.parametrize("env", ["pursuit", "coop_targets"])
def test_run_is_deterministic(env):
    cfg = small(env=env, variant="FDCo")
    a, b = Trainer(cfg), Trainer(cfg)
    a.run()
    b.run()
    assert strip(a.metrics) == strip(b.metrics)
    assert np.array_equal(a.params.flat, b.params.flat)


def test_checkpoint_resume_matches_uninterrupted(tmp_path):
    cfg = small(max_episodes=8)
    full = Trainer(cfg)
    full.run()
    part = Trainer(cfg)
    part.run(max_episodes=5)
    part.save(tmp_path / "ck.npz")
    resumed = Trainer.load(tmp_path / "ck.npz")
    resumed.run()
    assert strip(part.metrics[:5] + resumed.metrics) == strip(full.metrics)
    assert np.array_equal(resumed.params.flat, full.params.flat)
    assert np.array_equal(resumed.opt.v, full.opt.v)


def test_run_training_resume_truncates_stale_records(tmp_path):
    cfg = small(max_episodes=7, checkpoint_every=3)
    ref_dir, dir_ = tmp_path / "ref", tmp_path / "run"
    run_training(cfg, ref_dir)
    # crash after episode 5: the last checkpoint is at episode 3, records 4-5 are stale
    tr = Trainer(cfg)
    dir_.mkdir()
    tr.run(dir_ / "metrics.jsonl", dir_ / "checkpoint.npz", max_episodes=5)
    run_training(cfg, dir_, resume=True)
    assert strip(read_metrics(dir_ / "metrics.jsonl")) == strip(read_metrics(ref_dir / "metrics.jsonl"))


def test_single_agent_variants_share_trajectory():
    flats = []
    for v in VARIANTS:
        tr = Trainer(small(variant=v, n_agents=1, max_episodes=5, min_experiences_before_training=100))
        tr.run()
        assert tr.train_steps > 0
        flats.append(tr.params.flat)
    assert all(np.array_equal(f, flats[0]) for f in flats[1:])


def test_evaluate_leaves_state_alone():
    tr = Trainer(small())
    tr.run(max_episodes=3)
    flat, total = tr.params.flat.copy(), tr.rm.total
    res = evaluate(tr, 4)
    assert res["episodes"] == 4 and len(res["returns"]) == 4
    assert np.array_equal(tr.params.flat, flat) and tr.rm.total == total
    assert evaluate(tr, 2, greedy=True)["episodes"] == 2


def test_non_finite_gradient_skipped(monkeypatch):
    tr = Trainer(small(max_episodes=3))
    tr.run(max_episodes=2)
    before = tr.params.flat.copy()
    monkeypatch.setattr(nn, "backward_batch", lambda *a, **k: np.full(before.size, np.nan))
    stats = tr.train_step()
    assert stats.skipped and tr.skipped_steps == 1 and np.array_equal(tr.params.flat, before)


def test_bad_checkpoint(tmp_path):
    (tmp_path / "junk.npz").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        Trainer.load(tmp_path / "junk.npz")


def test_checkpoint_keeps_config(tmp_path):
    cfg = small(variant="LDCo", seed=5)
    tr = Trainer(cfg)
    tr.run(max_episodes=1)
    tr.save(tmp_path / "ck.npz")
    assert Trainer.load(tmp_path / "ck.npz").cfg == cfg
    assert dataclasses.replace(cfg, max_episodes=9) == Trainer.load(tmp_path / "ck.npz", max_episodes=9).cfg
