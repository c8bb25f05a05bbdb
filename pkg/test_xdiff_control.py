#!/usr/bin/env python3
"""
Test xDiff control panel - seeded runs, summaries, comparisons, sweeps and the CLI
"""

import json

import numpy as np
import pandas as pd
import pytest

from xdiff_control import XDiffController, main, recovery_slots, slot_rewards, summarize_trace
from xdiff_core import ConfigValidationError, RunNotFoundError

TINY = {
    "network": {"slot_ms": 10},
    "agent": {"hidden": 16, "layers": 3, "batch_size": 4, "replay_capacity": 50},
    "run": {"slots": 20},
}


def _controller(tmp_path, overrides=None):
    return XDiffController(preset="fig2", overrides=overrides or TINY, out_dir=tmp_path)


def test_recovery_slots():
    rewards = [-1.0] * 20 + [-5.0] * 5 + [-1.0] * 30
    assert recovery_slots(rewards, 20) == 24
    assert recovery_slots(rewards, 0) is None
    assert recovery_slots([-1.0] * 20 + [-5.0] * 10, 20) is None
    assert recovery_slots([-1.0] * 40, 20) == 0


def test_slot_rewards_and_summary():
    trace = pd.DataFrame({
        "slot": [0, 0, 1, 1, 2, 2],
        "cell": [0, 1, 0, 1, 0, 1],
        "active": [1, 1, 1, 0, 1, 1],
        "tp_bps": [10e6, 20e6, 30e6, 0.0, 40e6, 50e6],
        "delay_ms": [1.0, 2.0, 3.0, 0.0, 4.0, 5.0],
        "bler": [0.0, 0.1, 0.2, 0.0, 0.0, 0.1],
        "reward": [-0.3, -0.3, -0.6, -0.6, 0.0, 0.0],
    })
    assert list(slot_rewards(trace)) == [-0.3, -0.6, 0.0]
    stacked = pd.concat([trace.assign(seed=0), trace.assign(seed=1, reward=trace["reward"] * 3)])
    assert np.allclose(slot_rewards(stacked).to_numpy(), [-0.6, -1.2, 0.0])

    summary = summarize_trace(trace)
    assert summary["tp_bps"]["mean"] == pytest.approx(30e6)
    assert summary["reward"]["mean"] == pytest.approx(-0.3)
    assert summary["final_third_reward"] == pytest.approx(0.0)
    assert set(summary["per_cell"]) == {"0", "1"}
    assert summary["per_cell"]["1"]["tp_bps"] == pytest.approx(35e6)


def test_run_writes_artifacts(tmp_path):
    controller = _controller(tmp_path)
    run_dir = controller.run("cira", seeds=2, slots=5)
    assert run_dir == tmp_path / "fig2_cira"
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["seeds"] == [0, 1]
    assert summary["slots"] == 5
    assert summary["byte_conservation"] is True
    assert len(summary["per_seed"]) == 2
    trace = pd.read_csv(run_dir / "seed_1" / "trace.csv")
    assert len(trace) == 5 * 2
    assert (trace["reward"] <= 0).all()
    assert json.loads((run_dir / "config.json").read_text())["network"]["slot_ms"] == 10


def test_identical_seeds_give_identical_summaries(tmp_path):
    first = _controller(tmp_path / "a").run("otfr", seeds=1, slots=6)
    second = _controller(tmp_path / "b").run("otfr", seeds=1, slots=6)
    assert (first / "summary.json").read_bytes() == (second / "summary.json").read_bytes()
    assert (first / "seed_0" / "trace.csv").read_bytes() == (second / "seed_0" / "trace.csv").read_bytes()


def test_learning_run_saves_checkpoint(tmp_path):
    overrides = {**TINY, "run": {"slots": 20, "latency_coupling": True}}
    run_dir = _controller(tmp_path, overrides).run("xdiff", seeds=1, slots=10)
    seed_dir = run_dir / "seed_0"
    for name in ("trace.csv", "metrics.csv", "checkpoint.bin", "checkpoint.json", "latency.json"):
        assert (seed_dir / name).exists(), name
    metrics = pd.read_csv(seed_dir / "metrics.csv")
    assert len(metrics) == 10
    assert metrics["trained"].sum() == 10 - 4 + 1
    assert json.loads((seed_dir / "latency.json").read_text())["count"] == 10


def test_compare_ranks_and_plots(tmp_path):
    controller = _controller(tmp_path)
    runs = [controller.run(p, seeds=1, slots=8) for p in ("cira", "otfr")]
    comparison = controller.compare(runs, out_dir=tmp_path / "cmp")
    assert sorted(comparison["ranking"]) == ["fig2_cira", "fig2_otfr"]
    rewards = {r["label"]: r["mean_reward"] for r in comparison["runs"]}
    assert rewards[comparison["ranking"][0]] >= rewards[comparison["ranking"][1]]
    for name in ("comparison.json", "cdf_tp.svg", "cdf_delay.svg", "reward_timeseries.svg", "bler_timeseries.svg"):
        assert (tmp_path / "cmp" / name).exists(), name


def test_compare_keeps_runs_with_the_same_label(tmp_path):
    first = _controller(tmp_path / "a").run("cira", seeds=1, slots=6)
    heavier = {**TINY, "traffic": {"rate_mbps": [80.0, 90.0]}}
    second = _controller(tmp_path / "b", heavier).run("cira", seeds=1, slots=6)
    forward = _controller(tmp_path).compare([first, second], out_dir=tmp_path / "ab")
    backward = _controller(tmp_path).compare([second, first], out_dir=tmp_path / "ba")
    assert len(forward["runs"]) == 2
    assert {r["run_dir"] for r in forward["runs"]} == {str(first.resolve()), str(second.resolve())}
    assert forward["ranking"] == backward["ranking"]
    assert forward["runs"] == backward["runs"]


def test_compare_reports_recovery_after_step(tmp_path):
    overrides = {**TINY, "traffic": {"pattern": "step", "step_at_s": 0.1}}
    controller = _controller(tmp_path, overrides)
    run_dir = controller.run("otfr", seeds=1, slots=30)
    comparison = controller.compare([run_dir], out_dir=tmp_path / "cmp")
    row = comparison["runs"][0]
    assert "recovery_slots" in row
    assert row["recovery_slots"] is None or row["recovery_slots"] >= 0


def test_compare_missing_run(tmp_path):
    with pytest.raises(RunNotFoundError):
        _controller(tmp_path).compare([tmp_path / "nowhere"])


def test_run_rejects_bad_arguments(tmp_path):
    controller = _controller(tmp_path)
    with pytest.raises(ConfigValidationError):
        controller.run("oracle", seeds=1, slots=1)
    with pytest.raises(ConfigValidationError):
        controller.with_overrides({"agent": {"rho": 2.0}})


def test_sweep(tmp_path):
    controller = _controller(tmp_path)
    with pytest.raises(ConfigValidationError):
        controller.sweep("eta", [])
    with pytest.raises(ConfigValidationError):
        controller.sweep("gamma", [0.9])
    report = controller.sweep("eta", [0.5, 1.0], provider="cira", seeds=1, slots=3)
    assert [r["value"] for r in report["results"]] == [0.5, 1.0]
    assert (tmp_path / "sweep_eta" / "sweep.json").exists()
    assert (tmp_path / "sweep_eta" / "sweep_eta.svg").exists()


def test_cli(tmp_path):
    assert main(["compare", str(tmp_path / "missing"), "--out", str(tmp_path / "cmp")]) == 2
    assert main(["run", "--preset", "fig2", "--provider", "cira", "--seeds", "1", "--slots", "2",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "fig2_cira" / "summary.json").exists()
    with pytest.raises(SystemExit):
        main(["sweep", "--param", "gamma"])


def test_bandit_writes_report(tmp_path):
    report = _controller(tmp_path).bandit(seeds=1, iterations=2)
    assert [r["seed"] for r in report["per_seed"]] == [0]
    saved = json.loads((tmp_path / "bandit" / "bandit.json").read_text())
    assert saved["iterations"] == 2
    with pytest.raises(ConfigValidationError):
        _controller(tmp_path).bandit(seeds=1, iterations=0)


def test_cli_reports_wrong_config_types(tmp_path):
    for bad in ({"network": {"ues_per_cell": 3}}, {"network": {"num_cells": "3"}}):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(bad))
        assert main(["run", "--preset", "lab", "--config", str(path), "--provider", "cira", "--seeds", "1",
                     "--slots", "1", "--out", str(tmp_path)]) == 2
