#!/usr/bin/env python3
"""
Test xDiff core - regrets, rewards, policies, RB grouping and config loading
"""

import json

import numpy as np
import pytest

from xdiff_core import (ConfigParseError, ConfigValidationError, IncompleteObservationError,
                        InvalidDemandError, NetworkConfig, PreferencePolicy, QoSSample, ShapeError,
                        UEProfile, build_profiles, compute_rewards, load_config, rb_groups,
                        ue_delay_regret, ue_throughput_regret)
from xdiff_env import TrafficSource


def test_throughput_regret():
    assert ue_throughput_regret(50e6, 50e6) == 0.0
    assert ue_throughput_regret(25e6, 50e6) == pytest.approx(0.5)
    assert ue_throughput_regret(80e6, 50e6) == 0.0


def test_delay_regret():
    assert ue_delay_regret(1, 5) == 0.0
    assert ue_delay_regret(10, 5) == pytest.approx(1.0)
    assert ue_delay_regret(5, 5) == 0.0


def test_regret_rejects_non_positive_demand():
    with pytest.raises(InvalidDemandError):
        ue_throughput_regret(1.0, 0.0)
    with pytest.raises(InvalidDemandError):
        ue_delay_regret(1.0, -5.0)
    with pytest.raises(InvalidDemandError):
        UEProfile(cell_id=0, ue_id=0, tp_demand_bps=0.0, delay_demand_ms=50.0)


def test_throughput_regret_is_scale_invariant():
    for scale in (1e-3, 1.0, 7.5, 1e4):
        assert ue_throughput_regret(30e6 * scale, 50e6 * scale) == pytest.approx(0.4)


def _profiles(demands, delay=50.0):
    return [UEProfile(cell_id=k, ue_id=0, tp_demand_bps=p, delay_demand_ms=delay)
            for k, p in enumerate(demands)]


def test_rewards_all_demands_met():
    profiles = _profiles([50e6, 60e6])
    samples = {(0, 0): QoSSample(50e6, 10.0), (1, 0): QoSSample(70e6, 50.0)}
    reward = compute_rewards(samples, profiles, [1.0, 1.0], [1.0, 1.0])
    assert reward.total == 0.0


def test_rewards_single_term():
    profiles = _profiles([50e6])
    reward = compute_rewards({(0, 0): QoSSample(25e6, 50.0)}, profiles, [1.0], [1.0])
    assert reward.total == pytest.approx(-0.5)
    assert reward.r_tp[0] == pytest.approx(-0.5)
    assert reward.r_delay[0] == 0.0


def test_rewards_weighted_over_cells():
    profiles = _profiles([50e6, 50e6])
    samples = {(0, 0): QoSSample(25e6, 50.0), (1, 0): QoSSample(40e6, 50.0)}
    reward = compute_rewards(samples, profiles, [2.0, 1.0], [1.0, 1.0])
    assert reward.total == pytest.approx(-1.2)
    assert 2.0 * reward.r_tp[0] + reward.r_delay[0] == pytest.approx(-1.0)


def test_rewards_missing_sample():
    profiles = _profiles([50e6, 50e6])
    with pytest.raises(IncompleteObservationError):
        compute_rewards({(0, 0): QoSSample(25e6, 50.0)}, profiles, [1.0, 1.0], [1.0, 1.0])


def test_rewards_are_monotone():
    profiles = _profiles([50e6])
    previous = -np.inf
    for rho in np.linspace(0, 60e6, 13):
        total = compute_rewards({(0, 0): QoSSample(rho, 80.0)}, profiles, [1.0], [1.0]).total
        assert total >= previous
        assert total <= 0.0
        previous = total
    previous = np.inf
    for tau in np.linspace(0, 500, 11):
        total = compute_rewards({(0, 0): QoSSample(10e6, tau)}, profiles, [1.0], [1.0]).total
        assert total <= previous
        previous = total


def test_rb_groups_near_equal():
    groups = rb_groups(106, 10)
    sizes = [len(g) for g in groups]
    assert sizes == [11] * 6 + [10] * 4
    assert np.array_equal(np.concatenate(groups), np.arange(106))


def test_rb_groups_rejects_too_many_groups():
    with pytest.raises(ConfigValidationError):
        rb_groups(10, 11)


@pytest.mark.parametrize("overrides", [
    {"num_rb_groups": 200},
    {"slot_ms": 5},
    {"slot_ms": 2000},
    {"gamma": 1.0},
    {"lambda_p": (1.0, -1.0, 1.0)},
    {"ues_per_cell": (4, 3)},
])
def test_network_config_validation(overrides):
    with pytest.raises(ConfigValidationError):
        NetworkConfig(**overrides)


def test_network_config_dimensions():
    net = NetworkConfig()
    assert net.max_ues == 4
    assert net.total_ues == 10
    assert net.subframes_per_slot == 100
    assert net.action_dim == 3 * 4 * 10
    assert net.ue_index(2, 1) == 8
    assert net.ue_slots()[4] == (1, 0)


def test_policy_from_vector_zeroes_padding():
    net = NetworkConfig()
    policy = PreferencePolicy.from_vector(np.ones(net.action_dim), net)
    assert np.all(policy.values[0] == 1.0)
    assert np.all(policy.values[1, 3] == 0.0)
    assert np.all(policy.values[2, 3] == 0.0)
    assert policy.for_cell(1).shape == (3, 10)
    assert policy.to_vector().dtype == np.float32


def test_policy_shape_mismatch():
    net = NetworkConfig()
    with pytest.raises(ShapeError):
        PreferencePolicy.from_vector(np.zeros(net.action_dim + 1), net)
    with pytest.raises(ShapeError):
        PreferencePolicy(np.zeros((3, 3, 10)), net)


def test_policy_modes():
    net = NetworkConfig()
    rng = np.random.default_rng(3)
    soft = PreferencePolicy.from_vector(rng.uniform(-1, 1, net.action_dim), net)
    assert soft.is_valid("soft")
    assert not soft.is_valid("hard")
    hard = soft.quantized()
    assert hard.is_valid("hard")
    assert hard.is_valid("soft")
    out_of_range = PreferencePolicy(np.full((3, 4, 10), 1.5), net)
    assert not out_of_range.is_valid("soft")
    with pytest.raises(ShapeError):
        out_of_range.validate("soft")


def test_load_config_presets():
    building = load_config(preset="building")
    assert building["env"]["e2_latency_ms"] == 200
    assert building["radio"]["wall_loss_db"] == 20.0
    fig2 = load_config(preset="fig2")
    assert fig2["network"]["ues_per_cell"] == [1, 1]
    assert fig2["traffic"]["rate_mbps"] == [50.0, 60.0]
    with pytest.raises(ConfigValidationError):
        load_config(preset="stadium")


def test_load_config_rejects_unknown_keys():
    with pytest.raises(ConfigValidationError):
        load_config(overrides={"network": {"num_antennas": 4}})
    with pytest.raises(ConfigValidationError):
        load_config(overrides={"traffic": {"rate_mbps": [1.0, 2.0]}})


@pytest.mark.parametrize("overrides, key", [
    ({"network": {"ues_per_cell": 3}}, "network.ues_per_cell"),
    ({"network": {"num_cells": "3"}}, "network.num_cells"),
    ({"network": {"slot_ms": 12.5}}, "network.slot_ms"),
    ({"run": {"latency_coupling": "yes"}}, "run.latency_coupling"),
    ({"traffic": {"pattern": 2}}, "traffic.pattern"),
    ({"agent": {"hidden": None}}, "agent.hidden"),
])
def test_load_config_rejects_wrong_types(overrides, key):
    with pytest.raises(ConfigValidationError, match=key):
        load_config(overrides=overrides)


def test_network_config_from_dict_types():
    with pytest.raises(ConfigValidationError, match="network.lambda_p"):
        NetworkConfig.from_dict({"lambda_p": ["a", 1.0, 1.0]})
    net = NetworkConfig.from_dict({"num_cells": 2.0, "ues_per_cell": [1, 2], "lambda_p": [1, 1], "lambda_d": [1, 1]})
    assert net.num_cells == 2 and net.ues_per_cell == (1, 2)


def test_load_config_file(tmp_path):
    path = tmp_path / "xdiff.json"
    path.write_text(json.dumps({"network": {"slot_ms": 50}, "agent": {"eta": 2.0}}))
    cfg = load_config(path, preset="lab")
    assert cfg["network"]["slot_ms"] == 50
    assert cfg["agent"]["eta"] == 2.0
    assert cfg["agent"]["hidden"] == 256


def test_parse_error_reports_position(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "network": ,\n}\n')
    with pytest.raises(ConfigParseError) as info:
        load_config(path)
    assert "line 2" in str(info.value)


def _rate(profile, t_ms):
    return TrafficSource.from_profile(profile).rate_at(t_ms)


def test_build_profiles_step_pattern():
    cfg = load_config(overrides={"traffic": {"pattern": "step", "step_at_s": 10.0}})
    profiles = build_profiles(cfg)
    assert len(profiles) == 10
    assert _rate(profiles[0], 0.0) == pytest.approx(14e6)
    assert _rate(profiles[0], 9999.0) == pytest.approx(14e6)
    assert _rate(profiles[0], 10000.0) == pytest.approx(21e6)


def test_build_profiles_ramp_pattern():
    cfg = load_config(overrides={"traffic": {"pattern": "ramp"}})
    profile = build_profiles(cfg)[0]
    assert _rate(profile, 0.0) == pytest.approx(3.5e6)
    assert _rate(profile, 299999.0) == pytest.approx(16.5e6)


def test_build_profiles_activation():
    activation = [5.0] + [None] * 9
    cfg = load_config(overrides={"traffic": {"activation_s": activation}})
    late, steady = build_profiles(cfg)[:2]
    assert _rate(late, 0.0) == 0.0
    assert _rate(late, 5000.0) == pytest.approx(14e6)
    assert _rate(steady, 0.0) == pytest.approx(14e6)
