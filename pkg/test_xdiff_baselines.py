#!/usr/bin/env python3
"""
Test xDiff baselines - CIRA, OTFR, CSRS rules and the DDQN / DDPG learners
"""

import itertools

import numpy as np
import pytest

from xdiff_agent import XDiffAgent
from xdiff_bandit import ToyBandit, bandit_config, train_on_bandit
from xdiff_baselines import (LATTICE, PROVIDERS, CiraProvider, CsrsProvider, DdpgProvider, DdqnProvider,
                             OtfrProvider, actor_loss, cira_propose, csrs_partition, csrs_propose, make_provider,
                             otfr_groups, otfr_propose)
from xdiff_core import NetworkConfig, PolicyProvider, ShapeError, load_config
from xdiff_env import NUM_FEATURES, RanEnvironment, SlotObservation

SMALL = {
    "network": {"slot_ms": 10},
    "agent": {"hidden": 16, "layers": 3, "batch_size": 8, "replay_capacity": 100},
    "run": {"slots": 100},
}


def _observation(sinr, demand, net):
    return SlotObservation(features=np.zeros((net.num_cells, net.max_ues, NUM_FEATURES)),
                           raw={"sinr_db": np.asarray(sinr, dtype=float), "demand_bps": np.asarray(demand, dtype=float)})


def test_cira_is_neutral():
    net = NetworkConfig()
    assert np.all(cira_propose(net).values == 0.0)
    assert np.all(CiraProvider(net).propose().values == 0.0)


def test_otfr_static_split():
    net = NetworkConfig()
    sizes = sorted(len(otfr_groups(k, 3, 10)) for k in range(3))
    assert sizes == [3, 3, 4]
    policy = otfr_propose(net)
    assert policy.is_valid("hard")
    for g in range(10):
        owners = {k for k, i in net.ue_slots() if policy.values[k, i, g] == 1.0}
        assert len(owners) == 1
    assert OtfrProvider(net).scheduler_mode == "hard"


def test_csrs_partition():
    assert list(csrs_partition([60, 40], 10)) == [6, 4]
    assert list(csrs_partition([1, 1, 1], 10)) == [4, 3, 3]
    assert csrs_partition([5, 3, 2], 7).sum() == 7
    with pytest.raises(ValueError):
        csrs_partition([0, 0], 4)


def test_csrs_edge_and_center_ues():
    net = NetworkConfig()
    sinr = [20, 2, 25, 30, 1, 18, 22, 0.5, 26, 27]
    policy = csrs_propose(_observation(sinr, np.full(10, 10e6), net), net)
    assert policy.is_valid("hard")
    # edge UEs (1, 4, 7) -> (0, 1), (1, 0), (2, 0), one group each at the front of the band
    for g, (k, i) in enumerate([(0, 1), (1, 0), (2, 0)]):
        assert policy.values[k, i, g] == 1.0
        assert np.sum(policy.values[k, i] == 1.0) == 1
    center = policy.values[0, 0]
    assert np.all(center[:3] == -1.0) and np.all(center[3:] == 0.0)
    for g in range(10):
        owners = {k for k, i in net.ue_slots() if policy.values[k, i, g] == 1.0}
        assert len(owners) <= 1


def test_csrs_falls_back_to_cira():
    net = NetworkConfig()
    assert np.all(csrs_propose(None, net).values == 0.0)
    flat = _observation(np.full(10, 15.0), np.full(10, 10e6), net)
    assert np.all(csrs_propose(flat, net).values == 0.0)
    provider = CsrsProvider(net)
    assert np.all(provider.propose().values == 0.0)
    provider.observe(_observation([20, 2, 25, 30, 1, 18, 22, 0.5, 26, 27], np.full(10, 10e6), net), None)
    assert np.any(provider.propose().values == 1.0)


def _learner(cls):
    cfg = load_config(preset="fig2", overrides=SMALL)
    env = RanEnvironment(cfg, seed=0, scheduler_mode=cls.scheduler_mode)
    return cls(cfg, env.observation_dim, seed=0), env


def test_ddqn_exploration_schedule():
    agent, env = _learner(DdqnProvider)
    assert agent.epsilon == pytest.approx(1.0)
    agent.slot = 500
    assert agent.epsilon == pytest.approx(0.525)
    agent.slot = 5000
    assert agent.epsilon == pytest.approx(0.05)
    policy = agent.act(np.zeros(env.observation_dim))
    assert policy.is_valid("hard")
    assert set(np.unique(policy.values)) <= set(LATTICE)


def test_ddqn_trains():
    agent, env = _learner(DdqnProvider)
    agent.warmup(env)
    for _ in range(10):
        record = agent.train_iteration(env)
    assert record["trained"] == 1
    assert np.isfinite(record["critic_loss"])
    assert [name for name, _ in agent.checkpoint_groups()] == ["q", "q_target", "q_opt"]


def test_ddqn_greedy_ties_go_to_the_lowest_index():
    cfg = load_config(preset="fig2", overrides={**SMALL, "baselines": {"ddqn": {"epsilon_start": 0.0,
                                                                                "epsilon_end": 0.0}}})
    agent = DdqnProvider(cfg, NUM_FEATURES * 2, seed=0)
    agent.q.weights[-1][...] = 0
    agent.q.biases[-1][...] = 0.25
    state = np.random.default_rng(0).uniform(0, 1, NUM_FEATURES * 2)
    first = agent.act(state)
    assert agent.epsilon == 0.0
    assert np.all(first.values == LATTICE[0])
    assert np.array_equal(agent.act(state).values, first.values)


class LatticeTask(ToyBandit):
    """Separable reward over the {-1, 0, +1} lattice, best at (+1, -1)"""

    def reward(self, actions) -> np.ndarray:
        a = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        return -((a[:, 0] - 1.0) ** 2 + (a[:, 1] + 1.0) ** 2) / 8.0


def test_ddqn_converges_to_the_lattice_optimum():
    task = LatticeTask()
    best = max(itertools.product(LATTICE, repeat=2), key=lambda a: task.reward(a)[0])
    cfg = bandit_config(load_config(preset="fig2", overrides={
        "agent": {"hidden": 16, "layers": 3, "batch_size": 16, "replay_capacity": 1000, "lr": 1e-2},
        "baselines": {"ddqn": {"epsilon_decay_slots": 300}},
    }))
    agent = train_on_bandit(DdqnProvider(cfg, task.observation_dim, seed=0), task, iterations=800)
    greedy = LATTICE[agent.greedy_indices(task.observation().vector)[0]]
    assert tuple(greedy) == best == (1.0, -1.0)


def test_ddpg_trains_and_explores_within_range():
    agent, env = _learner(DdpgProvider)
    policy = agent.act(np.zeros(env.observation_dim))
    assert policy.is_valid("soft")
    agent.warmup(env)
    for _ in range(10):
        record = agent.train_iteration(env)
    assert np.isfinite(record["policy_loss"])
    assert agent.iteration == 10


def test_actor_loss_sign():
    agent, env = _learner(DdpgProvider)
    states = np.random.default_rng(0).uniform(0, 1, (4, env.observation_dim)).astype(np.float32)
    loss, grads = actor_loss(agent.actor, agent.critics.q1, states)
    q = agent.critics.q1.evaluate(states, agent.actor.predict(states))
    assert loss == pytest.approx(-float(np.mean(q)), rel=1e-5)
    assert len(grads) == len(agent.actor.params())


def test_checkpoint_layout_must_match(tmp_path):
    ddpg, _ = _learner(DdpgProvider)
    ddpg.save_checkpoint(tmp_path)
    xdiff, _ = _learner(XDiffAgent)
    with pytest.raises(ShapeError):
        xdiff.load_checkpoint(tmp_path)


def test_make_provider():
    cfg = load_config(preset="fig2", overrides=SMALL)
    state_dim = 2 * 1 * NUM_FEATURES
    for name in PROVIDERS:
        provider = make_provider(name, cfg, state_dim, seed=0)
        assert isinstance(provider, PolicyProvider)
        assert provider.name == name
    assert make_provider("xdiff-hard", cfg, state_dim).scheduler_mode == "hard"
    with pytest.raises(ValueError):
        make_provider("random", cfg, state_dim)
