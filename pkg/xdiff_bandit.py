"""
xDiff Toy Bandit
Two-dimensional one-step problem with two symmetric optimal actions: the diffusion actor should
place its samples on one of the peaks while a deterministic tanh actor settles between them
"""

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from xdiff_agent import XDiffAgent
from xdiff_baselines import DdpgProvider
from xdiff_core import PreferencePolicy, RewardBreakdown, deep_merge, validate_config
from xdiff_diffusion import sample_actions

logger = logging.getLogger(__name__)

STATE_DIM = 2
HIT_RADIUS = 0.2
SAMPLE_DRAWS = 500
MULTIMODAL_HIT_RATE = 0.8
COLLAPSE_GAP = 0.2


@dataclass
class BanditObservation:
    vector: np.ndarray


class ToyBandit:
    """Reward -(1 - max_j exp(-|a - o_j|^2 / (2 w^2))); 0 on a peak, close to -1 far from both"""

    def __init__(self, optima: Sequence[Sequence[float]] = ((0.6, 0.6), (-0.6, -0.6)), width: float = 0.25):
        self.optima = np.asarray(optima, dtype=np.float64)
        if self.optima.ndim != 2 or self.optima.shape[1] != 2:
            raise ValueError("optima must be a list of 2-dim points")
        if width <= 0:
            raise ValueError("width must be > 0")
        self.width = width

    @property
    def observation_dim(self) -> int:
        return STATE_DIM

    def observation(self) -> BanditObservation:
        return BanditObservation(vector=np.ones(STATE_DIM, dtype=np.float32))

    def reset(self) -> BanditObservation:
        return self.observation()

    def reward(self, actions) -> np.ndarray:
        a = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        d2 = np.sum((a[:, None, :] - self.optima[None, :, :]) ** 2, axis=2)
        return np.exp(-d2 / (2.0 * self.width ** 2)).max(axis=1) - 1.0

    def step_slot(self, policy: PreferencePolicy):
        r = float(self.reward(policy.to_vector())[0])
        return self.observation(), RewardBreakdown(r_tp=np.array([r]), r_delay=np.zeros(1), total=r)

    def hits(self, actions, radius: float = HIT_RADIUS) -> np.ndarray:
        a = np.atleast_2d(actions)
        d = np.linalg.norm(a[:, None, :] - self.optima[None, :, :], axis=2)
        return d.min(axis=1) <= radius


def grid_oracle(bandit: ToyBandit, points: int = 201) -> dict:
    """Exhaustive search over [-1, 1]^2"""
    axis = np.linspace(-1.0, 1.0, points)
    grid = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
    rewards = bandit.reward(grid)
    best = float(rewards.max())
    argmax = grid[rewards >= best - 1e-9]
    return {"best_reward": best, "argmax": argmax.tolist()}


def bandit_config(cfg: Mapping, gamma: float = 0.01) -> dict:
    """Two coordinates = 2 cells x 1 UE x 1 RB group; gamma close to 0 makes it a one-step problem"""
    overrides = {
        "network": {"num_cells": 2, "ues_per_cell": [1, 1], "num_rb_groups": 1, "gamma": gamma,
                    "lambda_p": [1.0, 1.0], "lambda_d": [1.0, 1.0]},
        "radio": {"tx_power_dbm": 23.0},
        "traffic": {"pattern": "constant", "rate_mbps": 14.0, "delay_demand_ms": 50.0, "activation_s": None},
    }
    return validate_config(deep_merge(cfg, overrides))


def train_on_bandit(provider, bandit: ToyBandit, iterations: int):
    provider.warmup(bandit)
    for _ in range(iterations):
        provider.train_iteration(bandit)
    return provider


def evaluate_provider(provider, bandit: ToyBandit, draws: int = SAMPLE_DRAWS, seed: int = 0) -> dict:
    """Hit rate and reward of the learned action distribution (no exploration noise)"""
    states = np.ones((draws, STATE_DIM), dtype=np.float32)
    if hasattr(provider, "policy_target"):
        actions = sample_actions(states, provider.policy_target, provider.schedule, np.random.default_rng(seed))
    else:
        actions = provider.actor.predict(states)
    rewards = bandit.reward(actions)
    return {
        "hit_rate": float(np.mean(bandit.hits(actions))),
        "mean_reward": float(np.mean(rewards)),
        "mean_action": np.mean(actions, axis=0).tolist(),
    }


def bandit_verdict(rows: Sequence[dict]) -> dict:
    """xDiff must sit on a peak in every seed and DDPG must miss by 0.2 or more in a majority of them"""
    multimodal = sum(r["xdiff"]["hit_rate"] >= MULTIMODAL_HIT_RATE for r in rows)
    collapsed = sum(r["ddpg"]["gap"] >= COLLAPSE_GAP for r in rows)
    return {
        "xdiff_multimodal_seeds": multimodal,
        "ddpg_collapsed_seeds": collapsed,
        "passed": bool(rows) and multimodal == len(rows) and 2 * collapsed > len(rows),
    }


def run_bandit(cfg: Mapping, seeds: Sequence[int], iterations: int = 2000,
               bandit: Optional[ToyBandit] = None) -> dict:
    """Train xDiff and DDPG on the same bandit per seed and score them against the grid oracle"""
    bandit = bandit or ToyBandit()
    cfg = bandit_config(cfg)
    oracle = grid_oracle(bandit)
    rows = []
    for seed in seeds:
        row = {"seed": int(seed)}
        for name, cls in (("xdiff", XDiffAgent), ("ddpg", DdpgProvider)):
            provider = train_on_bandit(cls(cfg, bandit.observation_dim, seed=seed), bandit, iterations)
            scores = evaluate_provider(provider, bandit, seed=seed)
            scores["gap"] = oracle["best_reward"] - scores["mean_reward"]
            row[name] = scores
            logger.info(f"🎯 bandit seed {seed} {name}: hit rate {scores['hit_rate']:.2f}, "
                        f"reward {scores['mean_reward']:.4f}")
        rows.append(row)
    return {
        **bandit_verdict(rows),
        "optima": bandit.optima.tolist(),
        "width": bandit.width,
        "iterations": iterations,
        "oracle": {"best_reward": oracle["best_reward"], "argmax_count": len(oracle["argmax"])},
        "per_seed": rows,
    }
