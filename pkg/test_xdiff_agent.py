#!/usr/bin/env python3
"""
Test xDiff agent - replay, critics, targets, EMA and the online learning loop
"""

import json

import numpy as np
import pytest

from xdiff_agent import (METRIC_COLUMNS, Critic, CriticPair, ReplayDataset, Transition, XDiffAgent, bellman_target,
                         critic_loss, ema_update, target_q)
from xdiff_core import PreferencePolicy, ShapeError, load_config
from xdiff_diffusion import EpsilonNet, make_schedule
from xdiff_env import RanEnvironment

SMALL = {
    "network": {"slot_ms": 10},
    "agent": {"hidden": 16, "layers": 3, "batch_size": 8, "replay_capacity": 100},
    "run": {"slots": 100},
}


class ConstantCritic:
    def __init__(self, value):
        self.value = value

    def evaluate(self, s, a):
        return np.full(np.atleast_2d(s).shape[0], self.value, dtype=np.float64)


def _small_cfg():
    return load_config(preset="fig2", overrides=SMALL)


def _agent(seed=0, hard=False):
    cfg = _small_cfg()
    env = RanEnvironment(cfg, seed=seed, scheduler_mode="hard" if hard else "soft")
    return XDiffAgent(cfg, env.observation_dim, seed=seed, hard=hard), env


def test_transition_rejects_positive_reward():
    with pytest.raises(ValueError):
        Transition(np.zeros(2), np.zeros(1), 0.5, np.zeros(2))
    assert Transition(np.zeros(2), np.zeros(1), 0.0, np.zeros(2)).reward == 0.0


def test_replay_ring_and_sampling():
    replay = ReplayDataset(3, state_dim=2, action_dim=1)
    for i in range(5):
        replay.add(Transition(np.full(2, i), np.full(1, i / 10), -float(i), np.full(2, i + 1)))
    assert len(replay) == 3
    assert replay.inserted == 5
    assert [t.reward for t in replay.transitions()] == [-2.0, -3.0, -4.0]
    batch = replay.sample(3, np.random.default_rng(0))
    assert sorted(batch["rewards"]) == [-4.0, -3.0, -2.0]
    assert batch["states"].shape == (3, 2)
    with pytest.raises(ValueError):
        replay.sample(4, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        replay.add(Transition(np.zeros(3), np.zeros(1), 0.0, np.zeros(2)))


def test_replay_digest_tracks_contents():
    a, b = ReplayDataset(4, 2, 1), ReplayDataset(4, 2, 1)
    for replay in (a, b):
        replay.add(Transition(np.ones(2), np.zeros(1), -1.0, np.ones(2)))
    assert a.digest() == b.digest()
    b.add(Transition(np.ones(2), np.zeros(1), -0.5, np.ones(2)))
    assert a.digest() != b.digest()


def test_bellman_target_arithmetic():
    rewards = np.full(4, -0.2)
    s, a = np.zeros((4, 3)), np.zeros((4, 2))
    y = bellman_target(rewards, s, a, (ConstantCritic(-1.0), ConstantCritic(-1.0)), 0.95)
    assert np.allclose(y, -1.15)
    y = bellman_target(rewards, s, a, (ConstantCritic(-1.0), ConstantCritic(-2.0)), 1.0)
    assert np.allclose(y, -2.2)
    y = bellman_target(rewards, s, a, (ConstantCritic(-1.0), ConstantCritic(-2.0)), 0.0)
    assert np.allclose(y, rewards)


def test_target_q_samples_from_target_policy():
    schedule = make_schedule()
    policy = EpsilonNet(2, 3, np.random.default_rng(0), hidden=8, layers=3, emb_dim=4)
    critics = (ConstantCritic(-1.0), ConstantCritic(-1.0))
    y = target_q(np.full(5, -0.2), np.zeros((5, 3)), critics, policy, 0.95, schedule, np.random.default_rng(1))
    assert y.shape == (5,)
    assert np.allclose(y, -1.15)


def test_critic_loss_zero_at_target():
    rng = np.random.default_rng(0)
    critic = Critic(3, 2, rng, hidden=8, layers=3, dtype=np.float64)
    critic.mlp.weights[-1][...] = 0.0
    critic.mlp.biases[-1][...] = -0.3
    loss, grads = critic_loss(rng.standard_normal((6, 3)), rng.uniform(-1, 1, (6, 2)), [critic, critic],
                              np.full(6, -0.3))
    assert loss == pytest.approx(0.0, abs=1e-20)
    assert len(grads) == 2


def test_critic_pair_fits_a_frozen_batch():
    rng = np.random.default_rng(1)
    pair = CriticPair(4, 2, rng, hidden=16, layers=3, lr=1e-2)
    s, a = rng.standard_normal((32, 4)).astype(np.float32), rng.uniform(-1, 1, (32, 2)).astype(np.float32)
    y = np.full(32, -0.5)
    first = critic_loss(s, a, pair.online, y)[0]
    for _ in range(200):
        last = pair.train_step(s, a, y)
    assert last >= 0.0
    assert last <= 0.1 * first


def test_ema_update():
    target, online = [np.zeros(3)], [np.ones(3)]
    ema_update(target, online, 0.0)
    assert np.all(target[0] == 0.0)
    ema_update(target, online, 1.0)
    assert np.all(target[0] == 1.0)

    target = [np.zeros(1)]
    for n in range(1, 21):
        ema_update(target, [np.ones(1)], 0.05)
        assert 1.0 - target[0][0] == pytest.approx(0.95 ** n)


def test_warmup_fills_replay():
    agent, env = _agent()
    replay = agent.warmup(env)
    assert len(replay) == agent.batch_size
    stored = replay.transitions()
    assert all(np.all(np.abs(t.action) <= 1.0) for t in stored)
    assert all(t.reward <= 0.0 for t in stored)
    assert agent.iteration == 0


def test_train_iterations_stay_finite():
    agent, env = _agent()
    agent.warmup(env)
    for _ in range(30):
        record = agent.train_iteration(env)
    frame = agent.metrics_frame()
    assert list(frame.columns) == list(METRIC_COLUMNS)
    trained = frame[frame["trained"] == 1]
    assert len(trained) == 30
    assert np.isfinite(trained[["critic_loss", "policy_loss", "diffusion_loss", "q1_mean"]].to_numpy()).all()
    assert record["iteration"] == agent.iteration == 30
    assert agent.latency_summary()["count"] == agent.batch_size + 30


def test_act_shape_and_determinism():
    first, env = _agent(seed=3)
    second, _ = _agent(seed=3)
    state = np.random.default_rng(0).uniform(0, 1, env.observation_dim)
    a, b = first.act(state), second.act(state)
    assert isinstance(a, PreferencePolicy)
    assert a.values.shape == (2, 1, 10)
    assert np.array_equal(a.values, b.values)
    assert first.last_latency_ms > 0.0
    with pytest.raises(ShapeError):
        first.state_vector(type("Obs", (), {"vector": np.zeros(3)})())


def test_hard_agent_quantizes():
    agent, env = _agent(hard=True)
    assert agent.name == "xdiff-hard"
    assert agent.scheduler_mode == "hard"
    policy = agent.act(np.zeros(env.observation_dim))
    assert policy.is_valid("hard")


def test_checkpoint_round_trip(tmp_path):
    agent, env = _agent(seed=0)
    agent.warmup(env)
    for _ in range(5):
        agent.train_iteration(env)
    agent.save_checkpoint(tmp_path)
    sidecar = json.loads((tmp_path / "checkpoint.json").read_text())
    assert sidecar["provider"] == "xdiff"
    assert sidecar["iteration"] == 5
    assert sidecar["replay_size"] == agent.batch_size + 5
    assert sidecar["optimizer_steps"]["policy_opt"] == 5

    restored, _ = _agent(seed=1)
    restored.load_checkpoint(tmp_path)
    assert restored.iteration == 5
    assert restored.policy_opt.t == 5
    for p, q in zip(agent.policy_target.params(), restored.policy_target.params()):
        assert np.array_equal(p, q)
    for p, q in zip(agent.critics.q2.params(), restored.critics.q2.params()):
        assert np.array_equal(p, q)
