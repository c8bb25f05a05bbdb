#!/usr/bin/env python3
"""
xDiff Control Panel - seeded experiment runs, comparisons and parameter sweeps
"""

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd

import xdiff_plots
from xdiff_bandit import run_bandit
from xdiff_baselines import PROVIDERS, make_provider
from xdiff_core import (PRESETS, ConfigValidationError, NetworkConfig, RunNotFoundError, XDiffError,
                        __version__, deep_merge, load_config, save_config, validate_config)
from xdiff_env import NUM_FEATURES, RanEnvironment

SUMMARY_SCHEMA_VERSION = 1
FLOAT_FORMAT = "%.6f"
SWEEP_GRIDS = {"K": [2, 5, 10, 20], "eta": [0.5, 1.0, 2.0]}
RECOVERY_WINDOW = 20

logger = logging.getLogger("xdiff")


def setup_logging(log_dir: Optional[Path] = None) -> logging.Logger:
    """File + console logging; level from XDIFF_LOG_LEVEL"""
    log_dir = Path(log_dir or Path(__file__).parent / "logs")
    log_dir.mkdir(exist_ok=True)
    level = getattr(logging, os.environ.get("XDIFF_LOG_LEVEL", "INFO").upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format='%(asctime)s - XDIFF - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_dir / "xdiff.log"),
            logging.StreamHandler()
        ]
    )
    return logger


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

def _stats(values: pd.Series) -> dict:
    if values.empty:
        return {"mean": None, "p5": None, "p50": None, "p95": None}
    q = values.quantile([0.05, 0.5, 0.95])
    return {"mean": float(values.mean()), "p5": float(q.loc[0.05]), "p50": float(q.loc[0.5]),
            "p95": float(q.loc[0.95])}


def slot_rewards(trace: pd.DataFrame) -> pd.Series:
    """Network reward per slot (one value per slot, averaged over seeds when several are stacked)"""
    if "seed" not in trace:
        return trace.groupby("slot")["reward"].first()
    return trace.groupby(["seed", "slot"])["reward"].first().groupby(level="slot").mean()


def summarize_trace(trace: pd.DataFrame) -> dict:
    active = trace[trace["active"] == 1]
    rewards = slot_rewards(trace)
    n = len(rewards)
    per_cell = active.groupby("cell")[["tp_bps", "delay_ms", "bler"]].mean()
    return {
        "tp_bps": _stats(active["tp_bps"]),
        "delay_ms": _stats(active["delay_ms"]),
        "bler": _stats(active["bler"]),
        "reward": _stats(rewards),
        "final_third_reward": float(rewards.iloc[2 * n // 3:].mean()) if n else None,
        "per_cell": {str(cell): {k: float(v) for k, v in row.items()} for cell, row in per_cell.iterrows()},
    }


def recovery_slots(rewards: Sequence[float], step_slot: int, window: int = RECOVERY_WINDOW,
                   fraction: float = 0.9) -> Optional[int]:
    """Slots after a demand step until the trailing mean reward is back within 90% of the pre-step level"""
    rewards = pd.Series(np.asarray(rewards, dtype=float))
    if step_slot <= 0 or step_slot >= len(rewards):
        return None
    pre = rewards.iloc[max(step_slot - window, 0):step_slot].mean()
    threshold = pre - (1.0 - fraction) * abs(pre)
    post = rewards.iloc[step_slot:].reset_index(drop=True).rolling(window, min_periods=1).mean()
    reached = np.flatnonzero(post.to_numpy() >= threshold)
    return int(reached[0]) if reached.size else None


# ---------------------------------------------------------------------------
# One seed
# ---------------------------------------------------------------------------

def run_seed(cfg: Mapping, provider_name: str, seed: int, slots: int, seed_dir) -> dict:
    """Play `slots` slots of one provider on one seed and write its artifacts"""
    seed_dir = Path(seed_dir)
    seed_dir.mkdir(parents=True, exist_ok=True)
    net = NetworkConfig.from_dict(cfg["network"])
    provider = make_provider(provider_name, cfg, net.num_cells * net.max_ues * NUM_FEATURES, seed, net)
    env = RanEnvironment(cfg, seed=seed, scheduler_mode=provider.scheduler_mode)
    coupling = bool(cfg["run"]["latency_coupling"])
    checkpoint_every = int(cfg["agent"]["checkpoint_every"])

    provider.reset(env.reset())
    conserved = True
    for slot in range(slots):
        policy = provider.propose()
        extra_ms = 0.0
        if coupling and provider.last_latency_ms > 0:
            # policy generation time, rounded up to whole subframes of staleness
            extra_ms = math.ceil(provider.last_latency_ms / net.subframe_ms) * net.subframe_ms
        obs, reward = env.step_slot(policy, extra_ms)
        provider.observe(obs, reward)
        conserved = conserved and env.conservation_ok()
        if provider.learning and checkpoint_every and (slot + 1) % checkpoint_every == 0:
            provider.save_checkpoint(seed_dir)

    trace = pd.DataFrame(env.trace_rows)
    trace.to_csv(seed_dir / "trace.csv", index=False, float_format=FLOAT_FORMAT)
    if provider.learning:
        provider.metrics_frame().to_csv(seed_dir / "metrics.csv", index=False, float_format=FLOAT_FORMAT)
        provider.save_checkpoint(seed_dir)
        with open(seed_dir / "latency.json", "w") as f:
            json.dump(provider.latency_summary(), f, indent=2)
    summary = summarize_trace(trace)
    summary["seed"] = seed
    summary["byte_conservation"] = conserved
    if not conserved:
        logger.error(f"❌ byte conservation violated ({provider_name}, seed {seed})")
    logger.info(f"✅ {provider_name} seed {seed}: mean reward {summary['reward']['mean']:.4f}")
    return summary


def _run_seed_job(job: tuple) -> dict:
    return run_seed(*job)


# ---------------------------------------------------------------------------
# Controller
# ---------------------------------------------------------------------------

class XDiffController:
    def __init__(self, config_path=None, preset: str = "lab", overrides: Optional[Mapping] = None,
                 out_dir="runs"):
        self.base_dir = Path(__file__).parent
        self.config_path = config_path
        self.preset = preset
        self.out_dir = Path(out_dir)
        self.cfg = load_config(config_path, preset, overrides)

    def with_overrides(self, overrides: Mapping) -> dict:
        return validate_config(deep_merge(self.cfg, overrides))

    def run(self, provider: str = "xdiff", seeds: Optional[int] = None, slots: Optional[int] = None,
            workers: Optional[int] = None, out_dir=None, cfg: Optional[Mapping] = None) -> Path:
        """Seeded batch run of one provider; returns the run directory"""
        if provider not in PROVIDERS:
            raise ConfigValidationError(f"unknown provider '{provider}'")
        cfg = cfg or self.cfg
        seeds = int(seeds or cfg["run"]["seeds"])
        slots = int(slots or cfg["run"]["slots"])
        workers = int(workers or cfg["run"]["workers"])
        if seeds < 1 or slots < 1:
            raise ConfigValidationError("seeds and slots must be >= 1")
        base_seed = int(cfg["network"]["rng_seed"])
        seed_list = list(range(base_seed, base_seed + seeds))

        run_dir = Path(out_dir or self.out_dir) / f"{self.preset}_{provider}"
        run_dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg, run_dir / "config.json")
        logger.info(f"🚀 {provider} on {self.preset}: {seeds} seed(s) x {slots} slots -> {run_dir}")

        jobs = [(cfg, provider, seed, slots, run_dir / f"seed_{seed}") for seed in seed_list]
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                per_seed = list(pool.map(_run_seed_job, jobs))
        else:
            per_seed = [_run_seed_job(job) for job in jobs]

        pooled = summarize_trace(self.load_traces(run_dir, seed_list))
        summary = {
            "schema_version": SUMMARY_SCHEMA_VERSION,
            "code_version": __version__,
            "preset": self.preset,
            "provider": provider,
            "seeds": seed_list,
            "slots": slots,
            "per_seed": per_seed,
            "pooled": pooled,
            "byte_conservation": all(s["byte_conservation"] for s in per_seed),
        }
        with open(run_dir / "summary.json", "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
        logger.info(f"✅ summary written: {run_dir / 'summary.json'}")
        return run_dir

    @staticmethod
    def load_traces(run_dir, seeds: Optional[Sequence[int]] = None) -> pd.DataFrame:
        run_dir = Path(run_dir)
        if seeds is None:
            seeds = sorted(int(p.name.split("_", 1)[1]) for p in run_dir.glob("seed_*") if p.is_dir())
        frames = []
        for seed in seeds:
            frame = pd.read_csv(run_dir / f"seed_{seed}" / "trace.csv")
            frame.insert(0, "seed", seed)
            frames.append(frame)
        return pd.concat(frames, ignore_index=True)

    def compare(self, run_dirs: Sequence, out_dir=None) -> dict:
        """Rank runs by mean slot reward and draw CDF / time-series SVGs"""
        loaded = {}
        for d in run_dirs:
            d = Path(d).resolve()
            if not (d / "summary.json").exists():
                raise RunNotFoundError(f"run directory not found or incomplete: {d}")
            with open(d / "summary.json") as f:
                loaded[d] = json.load(f)
        bases = {d: f"{s['preset']}_{s['provider']}" for d, s in loaded.items()}
        counts = pd.Series(list(bases.values())).value_counts()
        runs = {}
        # labels stay preset_provider unless two runs share one; then the path tells them apart
        for d in sorted(loaded):
            label = bases[d] if counts[bases[d]] == 1 else f"{bases[d]} ({d})"
            runs[label] = (d, loaded[d])

        out = Path(out_dir or self.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tp, delay, reward_series, bler_series, rows = {}, {}, {}, {}, []
        step_marker = None
        for label in sorted(runs):
            d, summary = runs[label]
            trace = self.load_traces(d, summary["seeds"])
            active = trace[trace["active"] == 1]
            tp[label] = active["tp_bps"].to_numpy() / 1e6
            delay[label] = active["delay_ms"].to_numpy()
            rewards = slot_rewards(trace)
            reward_series[label] = rewards.to_numpy()
            bler_series[label] = active.groupby("slot")["bler"].mean().to_numpy()

            row = {
                "label": label,
                "run_dir": str(d),
                "mean_reward": summary["pooled"]["reward"]["mean"],
                "final_third_reward": summary["pooled"]["final_third_reward"],
                "mean_tp_bps": summary["pooled"]["tp_bps"]["mean"],
                "mean_delay_ms": summary["pooled"]["delay_ms"]["mean"],
                "mean_bler": summary["pooled"]["bler"]["mean"],
                "recovery_slots": None,
            }
            with open(d / "config.json") as f:
                run_cfg = json.load(f)
            slot_ms = run_cfg["network"]["slot_ms"]
            traffic = run_cfg["traffic"]
            if traffic["pattern"] == "step" and traffic["step_at_s"] is not None:
                step_slot = int(round(float(traffic["step_at_s"]) * 1000.0 / slot_ms))
                step_marker = step_slot
                per_seed = [recovery_slots(slot_rewards(trace[trace["seed"] == s]).to_numpy(), step_slot)
                            for s in summary["seeds"]]
                reached = [r for r in per_seed if r is not None]
                row["recovery_slots"] = float(np.median(reached)) if reached else None
            rows.append(row)

        def rank_key(r):
            reward = r["mean_reward"] if r["mean_reward"] is not None else -np.inf
            return -reward, r["label"]
        ranking = [r["label"] for r in sorted(rows, key=rank_key)]
        xdiff_plots.cdf_plot(tp, "throughput (Mbps)", out / "cdf_tp.svg")
        xdiff_plots.cdf_plot(delay, "delay (ms)", out / "cdf_delay.svg", log_x=True)
        xdiff_plots.timeseries_plot(reward_series, "slot reward", out / "reward_timeseries.svg",
                                    marker_at=step_marker)
        xdiff_plots.timeseries_plot(bler_series, "BLER", out / "bler_timeseries.svg", marker_at=step_marker)
        comparison = {"schema_version": SUMMARY_SCHEMA_VERSION, "code_version": __version__,
                      "runs": rows, "ranking": ranking}
        with open(out / "comparison.json", "w") as f:
            json.dump(comparison, f, indent=2, sort_keys=True)
        self.show_ranking(rows, ranking)
        return comparison

    def sweep(self, param: str, values: Optional[Sequence[float]] = None, provider: str = "xdiff",
              seeds: Optional[int] = None, slots: Optional[int] = None, workers: Optional[int] = None) -> dict:
        """Final-third reward against denoising steps (K) or the loss balance (eta)"""
        if param not in SWEEP_GRIDS:
            raise ConfigValidationError(f"sweep parameter must be one of {', '.join(SWEEP_GRIDS)}")
        values = SWEEP_GRIDS[param] if values is None else list(values)
        if not values:
            raise ConfigValidationError("sweep needs at least one value")
        out = self.out_dir / f"sweep_{param}"
        table = []
        for value in values:
            if param == "K":
                overrides = {"diffusion": {"steps": int(value)}}
            else:
                overrides = {"agent": {"eta": float(value)}}
            cfg = self.with_overrides(overrides)
            run_dir = self.run(provider, seeds, slots, workers, out_dir=out / f"{param}_{value:g}", cfg=cfg)
            with open(run_dir / "summary.json") as f:
                summary = json.load(f)
            finals = [s["final_third_reward"] for s in summary["per_seed"]]
            table.append({"value": value, "mean": float(np.mean(finals)), "median": float(np.median(finals)),
                          "std": float(np.std(finals)), "per_seed": finals})
        report = {"schema_version": SUMMARY_SCHEMA_VERSION, "param": param, "provider": provider,
                  "preset": self.preset, "results": table}
        with open(out / "sweep.json", "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
        xdiff_plots.sweep_plot(param, values, [r["mean"] for r in table], [r["std"] for r in table],
                               out / f"sweep_{param}.svg")
        logger.info(f"✅ sweep over {param} written to {out}")
        return report

    def bandit(self, seeds: Optional[int] = None, iterations: int = 2000) -> dict:
        """Two-optima toy bandit: xDiff against DDPG, scored by an exhaustive grid"""
        seeds = int(seeds or self.cfg["run"]["seeds"])
        if seeds < 1 or iterations < 1:
            raise ConfigValidationError("seeds and iterations must be >= 1")
        base_seed = int(self.cfg["network"]["rng_seed"])
        report = run_bandit(self.cfg, range(base_seed, base_seed + seeds), iterations)
        out = self.out_dir / "bandit"
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bandit.json", "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
        if report["passed"]:
            logger.info(f"✅ bandit: xDiff on a peak in {report['xdiff_multimodal_seeds']}/{seeds} seeds, "
                        f"DDPG between peaks in {report['ddpg_collapsed_seeds']}/{seeds}")
        else:
            logger.warning(f"⚠️ bandit criterion not met: xDiff on a peak in {report['xdiff_multimodal_seeds']}/{seeds} "
                           f"seeds, DDPG between peaks in {report['ddpg_collapsed_seeds']}/{seeds}")
        return report

    def verify(self) -> bool:
        import verify_setup
        return verify_setup.run_checks(self.config_path)

    @staticmethod
    def show_ranking(rows: Sequence[dict], ranking: Sequence[str]):
        by_label = {r["label"]: r for r in rows}
        print("\n📊 xDiff Comparison")
        print("=" * 60)
        for place, label in enumerate(ranking, 1):
            r = by_label[label]
            reward = "n/a" if r["mean_reward"] is None else f"{r['mean_reward']:.4f}"
            delay = "n/a" if r["mean_delay_ms"] is None else f"{r['mean_delay_ms']:.1f}"
            print(f"  {place}. {label:<24} reward {reward}  delay {delay} ms")


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="xDiff interference-management experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--preset", choices=sorted(PRESETS), default="lab")
        p.add_argument("--config", default=None, help="JSON config merged over the preset")
        p.add_argument("--seeds", type=int, default=None, help="number of seeds")
        p.add_argument("--slots", type=int, default=None)
        p.add_argument("--out", default="runs")
        p.add_argument("--latency-coupling", choices=("on", "off"), default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--provider", choices=PROVIDERS, default="xdiff")

    common(sub.add_parser("run", help="seeded batch run of one provider"))

    p = sub.add_parser("compare", help="rank runs and plot them together")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", default="runs/comparison")

    p = sub.add_parser("sweep", help="reward against K or eta")
    common(p)
    p.add_argument("--param", choices=sorted(SWEEP_GRIDS), required=True)
    p.add_argument("--values", type=float, nargs="*", default=None)

    p = sub.add_parser("bandit", help="two-optima toy bandit, xdiff against ddpg")
    p.add_argument("--config", default=None)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--out", default="runs")

    p = sub.add_parser("verify", help="imports, config and gradient checks")
    p.add_argument("--config", default=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()
    try:
        if args.command == "verify":
            return 0 if XDiffController(args.config).verify() else 1
        if args.command == "bandit":
            XDiffController(args.config, "fig2", out_dir=args.out).bandit(args.seeds, args.iterations)
            return 0
        if args.command == "compare":
            XDiffController(out_dir=args.out).compare(args.run_dirs)
            return 0

        overrides = {}
        if args.latency_coupling is not None:
            overrides = {"run": {"latency_coupling": args.latency_coupling == "on"}}
        controller = XDiffController(args.config, args.preset, overrides, args.out)
        if args.command == "run":
            controller.run(args.provider, args.seeds, args.slots, args.workers)
        else:
            controller.sweep(args.param, args.values, args.provider, args.seeds, args.slots, args.workers)
        return 0
    except XDiffError as e:
        logger.error(f"❌ {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
