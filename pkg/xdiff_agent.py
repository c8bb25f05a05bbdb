"""
xDiff Agent
Replay dataset, double critics with EMA targets, online diffusion-policy learning and the RIC-side act() path
"""

import hashlib
import json
import logging
import time
from abc import abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from xdiff_core import (NetworkConfig, NumericFailureError, PolicyProvider, PreferencePolicy, RewardBreakdown,
                        ShapeError, __version__)
from xdiff_diffusion import EpsilonNet, combined_loss, sample_action, sample_actions, schedule_from_config
from xdiff_nn import Adam, load_arrays, mlp, save_arrays

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("iteration", "slot", "reward", "critic_loss", "policy_loss", "diffusion_loss",
                  "q_guidance", "q1_mean", "target_mean", "trained")


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray

    def __post_init__(self):
        if self.reward > 1e-9:
            raise ValueError(f"rewards are regrets and cannot be positive, got {self.reward}")


class ReplayDataset:
    """Bounded ring of transitions; the oldest entry is evicted first"""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        self.capacity = capacity
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.states = np.zeros((capacity, state_dim), dtype=np.float32)
        self.actions = np.zeros((capacity, action_dim), dtype=np.float32)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.next_states = np.zeros((capacity, state_dim), dtype=np.float32)
        self.inserted = 0

    def __len__(self):
        return min(self.inserted, self.capacity)

    def add(self, transition: Transition):
        if np.size(transition.state) != self.state_dim or np.size(transition.next_state) != self.state_dim:
            raise ShapeError(f"state must have {self.state_dim} entries")
        if np.size(transition.action) != self.action_dim:
            raise ShapeError(f"action must have {self.action_dim} entries")
        i = self.inserted % self.capacity
        self.states[i] = np.ravel(transition.state)
        self.actions[i] = np.ravel(transition.action)
        self.rewards[i] = transition.reward
        self.next_states[i] = np.ravel(transition.next_state)
        self.inserted += 1

    def _order(self) -> np.ndarray:
        if self.inserted <= self.capacity:
            return np.arange(self.inserted)
        return (np.arange(self.capacity) + self.inserted) % self.capacity

    def transitions(self) -> list:
        """Stored transitions, oldest first"""
        return [Transition(self.states[i].copy(), self.actions[i].copy(), float(self.rewards[i]),
                           self.next_states[i].copy()) for i in self._order()]

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        if len(self) < batch_size:
            raise ValueError(f"replay holds {len(self)} transitions, need {batch_size}")
        idx = rng.choice(len(self), size=batch_size, replace=False)
        return {
            "states": self.states[idx],
            "actions": self.actions[idx],
            "rewards": self.rewards[idx].astype(np.float64),
            "next_states": self.next_states[idx],
        }

    def digest(self) -> str:
        h = hashlib.sha256()
        order = self._order()
        for arr in (self.states, self.actions, self.rewards, self.next_states):
            h.update(np.ascontiguousarray(arr[order]).tobytes())
        return h.hexdigest()


class Critic:
    """Q(s, a) -> scalar"""

    def __init__(self, state_dim: int, action_dim: int, rng: np.random.Generator, hidden: int = 256,
                 layers: int = 4, dtype=np.float32):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.mlp = mlp(state_dim + action_dim, 1, hidden, layers, rng, dtype=dtype)

    def params(self) -> list:
        return self.mlp.params()

    def astype(self, dtype) -> "Critic":
        clone = object.__new__(Critic)
        clone.state_dim, clone.action_dim = self.state_dim, self.action_dim
        clone.mlp = self.mlp.astype(dtype)
        return clone

    def copy(self) -> "Critic":
        return self.astype(self.mlp.dtype)

    def forward(self, s, a):
        y, cache = self.mlp.forward(np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=1))
        return y[:, 0], cache

    def backward(self, cache, grad_q):
        grads, grad_in = self.mlp.backward(cache, np.asarray(grad_q).reshape(-1, 1))
        return grads, grad_in[:, :self.state_dim], grad_in[:, self.state_dim:]

    def evaluate(self, s, a) -> np.ndarray:
        return self.forward(s, a)[0]

    def action_grad(self, s, a):
        """Q values and dQ/da per sample"""
        q, cache = self.forward(s, a)
        _, _, grad_a = self.backward(cache, np.ones_like(q))
        return q, grad_a


def critic_loss(states: np.ndarray, actions: np.ndarray, critics: Sequence[Critic], y: np.ndarray):
    """Sum over critics of the mean squared error to the shared target"""
    total = 0.0
    grads = []
    for critic in critics:
        q, cache = critic.forward(states, actions)
        diff = q - y
        total += float(np.mean(diff * diff))
        grads.append(critic.backward(cache, 2.0 * diff / diff.size)[0])
    return total, grads


def ema_update(target_params: Sequence[np.ndarray], online_params: Sequence[np.ndarray], rho: float):
    for t, o in zip(target_params, online_params):
        t *= 1.0 - rho
        t += rho * o
    return target_params


def bellman_target(rewards: np.ndarray, next_states: np.ndarray, next_actions: np.ndarray,
                   target_critics: Sequence[Critic], gamma: float) -> np.ndarray:
    q = np.minimum(target_critics[0].evaluate(next_states, next_actions),
                   target_critics[1].evaluate(next_states, next_actions))
    return rewards + gamma * q


def target_q(rewards: np.ndarray, next_states: np.ndarray, target_critics: Sequence[Critic], target_policy,
             gamma: float, schedule, rng: np.random.Generator) -> np.ndarray:
    """y = r + gamma * min_i Q_i'(s', a'), a' sampled from the target diffusion policy"""
    next_actions = sample_actions(next_states, target_policy, schedule, rng)
    return bellman_target(rewards, next_states, next_actions, target_critics, gamma)


class CriticPair:
    """Two online critics, their EMA targets and optimizers"""

    def __init__(self, state_dim: int, action_dim: int, rng: np.random.Generator, hidden: int = 256,
                 layers: int = 4, lr: float = 3e-4):
        self.q1 = Critic(state_dim, action_dim, rng, hidden, layers)
        self.q2 = Critic(state_dim, action_dim, rng, hidden, layers)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.opt1 = Adam(self.q1.params(), lr)
        self.opt2 = Adam(self.q2.params(), lr)

    @property
    def online(self) -> tuple:
        return self.q1, self.q2

    @property
    def targets(self) -> tuple:
        return self.q1_target, self.q2_target

    def train_step(self, states, actions, y) -> float:
        loss, (g1, g2) = critic_loss(states, actions, self.online, y)
        self.opt1.step(self.q1.params(), g1)
        self.opt2.step(self.q2.params(), g2)
        return loss

    def soft_update(self, rho: float):
        ema_update(self.q1_target.params(), self.q1.params(), rho)
        ema_update(self.q2_target.params(), self.q2.params(), rho)

    def checkpoint_groups(self) -> list:
        return [("q1", self.q1.params()), ("q2", self.q2.params()),
                ("q1_target", self.q1_target.params()), ("q2_target", self.q2_target.params()),
                ("q1_opt", self.opt1.state_arrays()), ("q2_opt", self.opt2.state_arrays())]

    def optimizers(self) -> dict:
        return {"q1_opt": self.opt1, "q2_opt": self.opt2}


class LearningProvider(PolicyProvider):
    """Shared plumbing of the learners: pending transition, replay, metrics, latency record, checkpoints"""

    learning = True

    def __init__(self, cfg: Mapping, state_dim: int, seed: int = 0):
        super().__init__(NetworkConfig.from_dict(cfg["network"]))
        agent = cfg["agent"]
        init_seq, act_seq, train_seq = np.random.SeedSequence(seed).spawn(3)
        self.init_rng = np.random.default_rng(init_seq)
        self.act_rng = np.random.default_rng(act_seq)
        self.train_rng = np.random.default_rng(train_seq)
        self.seed = seed
        self.state_dim = state_dim
        self.action_dim = self.config.action_dim
        self.hidden = int(agent["hidden"])
        self.layers = int(agent["layers"])
        self.lr = float(agent["lr"])
        self.batch_size = int(agent["batch_size"])
        self.gamma = float(self.config.gamma)
        self.rho = float(agent["rho"])
        self.updates_per_slot = int(agent["updates_per_slot"])
        self.reward_scale = float(agent["reward_scale"])
        self.checkpoint_every = int(agent["checkpoint_every"])
        self.replay = ReplayDataset(int(agent["replay_capacity"]), state_dim, self.action_dim)
        self.iteration = 0
        self.slot = 0
        self.metrics = []
        self.latencies_ms = []
        self._pending = None

    @abstractmethod
    def select_action(self, state: np.ndarray) -> PreferencePolicy:
        ...

    @abstractmethod
    def train_step(self) -> dict:
        ...

    @abstractmethod
    def checkpoint_groups(self) -> list:
        ...

    def optimizers(self) -> dict:
        return {}

    def state_vector(self, observation) -> np.ndarray:
        if observation is None:
            return np.zeros(self.state_dim, dtype=np.float32)
        vector = observation.vector
        if vector.size != self.state_dim:
            raise ShapeError(f"observation has {vector.size} entries, expected {self.state_dim}")
        return vector

    def act(self, state: np.ndarray) -> PreferencePolicy:
        start = time.perf_counter()
        policy = self.select_action(np.asarray(state, dtype=np.float32))
        self.last_latency_ms = (time.perf_counter() - start) * 1000.0
        self.latencies_ms.append(self.last_latency_ms)
        return policy

    def propose(self) -> PreferencePolicy:
        state = self.state_vector(self.last_observation)
        policy = self.act(state)
        self._pending = (state, policy.to_vector())
        return policy

    def observe(self, observation, reward: RewardBreakdown, train: bool = True):
        if self._pending is not None:
            state, action = self._pending
            r = float(reward.total) * self.reward_scale
            self.replay.add(Transition(state, action, r, self.state_vector(observation)))
            self._pending = None
            record = None
            if train and len(self.replay) >= self.batch_size:
                for _ in range(self.updates_per_slot):
                    record = self.train_step()
            self._record(r, record)
        self.last_observation = observation
        self.slot += 1

    def _record(self, reward: float, record):
        row = {"iteration": self.iteration, "slot": self.slot, "reward": reward, "trained": int(record is not None)}
        for key in METRIC_COLUMNS[3:-1]:
            row[key] = float(record.get(key, np.nan)) if record else np.nan
        self.metrics.append(row)
        if record and self.iteration % 100 == 0:
            logger.info(f"📈 {self.name} iteration {self.iteration}: reward {reward:.4f}, "
                        f"critic loss {row['critic_loss']:.4f}, policy loss {row['policy_loss']:.4f}")

    def _check_finite(self, values: Mapping):
        bad = [k for k, v in values.items() if not np.isfinite(v)]
        if bad:
            raise NumericFailureError(f"{self.name}: non-finite {', '.join(bad)} at iteration {self.iteration}")

    # -- scripted loops ----------------------------------------------------

    def warmup(self, env, batch_size: int = None) -> ReplayDataset:
        """Fill the replay with target-policy transitions, no training"""
        self.reset(env.reset())
        for _ in range(batch_size or self.batch_size):
            obs, reward = env.step_slot(self.propose())
            self.observe(obs, reward, train=False)
        logger.info(f"✅ {self.name} warm-up done: {len(self.replay)} transitions")
        return self.replay

    def train_iteration(self, env) -> dict:
        """Play one slot with the target policy, store it and train once the replay holds a batch"""
        if self.last_observation is None:
            self.reset(env.reset())
        obs, reward = env.step_slot(self.propose())
        self.observe(obs, reward)
        return self.metrics[-1]

    # -- artifacts ---------------------------------------------------------

    def metrics_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.metrics, columns=list(METRIC_COLUMNS))

    def latency_summary(self) -> dict:
        if not self.latencies_ms:
            return {"count": 0}
        lat = np.asarray(self.latencies_ms)
        return {"count": int(lat.size), "mean_ms": float(lat.mean()), "p50_ms": float(np.percentile(lat, 50)),
                "p95_ms": float(np.percentile(lat, 95)), "max_ms": float(lat.max())}

    def save_checkpoint(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        groups = self.checkpoint_groups()
        flat = [arr for _, arrays in groups for arr in arrays]
        save_arrays(directory / "checkpoint.bin", flat)
        sidecar = {
            "version": __version__,
            "provider": self.name,
            "seed": self.seed,
            "iteration": self.iteration,
            "slot": self.slot,
            "groups": [{"name": name, "count": len(arrays)} for name, arrays in groups],
            "optimizer_steps": {name: opt.t for name, opt in self.optimizers().items()},
            "replay_size": len(self.replay),
            "replay_digest": self.replay.digest(),
        }
        with open(directory / "checkpoint.json", "w") as f:
            json.dump(sidecar, f, indent=2)
        return directory / "checkpoint.bin"

    def load_checkpoint(self, directory):
        directory = Path(directory)
        with open(directory / "checkpoint.json") as f:
            sidecar = json.load(f)
        arrays = load_arrays(directory / "checkpoint.bin")
        groups = self.checkpoint_groups()
        layout = [{"name": name, "count": len(group)} for name, group in groups]
        if sidecar["groups"] != layout:
            raise ShapeError(f"{directory}: checkpoint layout does not match this {self.name} learner")
        offset = 0
        for _, group in groups:
            for dst in group:
                src = arrays[offset]
                if dst.shape != src.shape:
                    raise ShapeError(f"{directory}: array {offset} has shape {src.shape}, expected {dst.shape}")
                dst[...] = src
                offset += 1
        for name, opt in self.optimizers().items():
            opt.t = int(sidecar["optimizer_steps"][name])
        self.iteration = int(sidecar["iteration"])
        self.slot = int(sidecar["slot"])
        logger.info(f"✅ {self.name} checkpoint loaded from {directory} (iteration {self.iteration})")


class XDiffAgent(LearningProvider):
    """Diffusion actor trained online against double critics; acts with the target policy"""

    name = "xdiff"

    def __init__(self, cfg: Mapping, state_dim: int, seed: int = 0, hard: bool = False):
        super().__init__(cfg, state_dim, seed)
        self.hard = hard
        if hard:
            self.name = "xdiff-hard"
            self.scheduler_mode = "hard"
        self.eta = float(cfg["agent"]["eta"])
        self.schedule = schedule_from_config(cfg["diffusion"])
        self.policy = EpsilonNet(self.action_dim, state_dim, self.init_rng, self.hidden, self.layers,
                                 int(cfg["diffusion"]["emb_dim"]))
        self.policy_target = self.policy.copy()
        self.policy_opt = Adam(self.policy.params(), self.lr)
        self.critics = CriticPair(state_dim, self.action_dim, self.init_rng, self.hidden, self.layers, self.lr)

    def select_action(self, state: np.ndarray) -> PreferencePolicy:
        policy = sample_action(state, self.policy_target, self.schedule, self.act_rng, self.config)
        return policy.quantized() if self.hard else policy

    def train_step(self) -> dict:
        batch = self.replay.sample(self.batch_size, self.train_rng)
        s, a = batch["states"], batch["actions"]
        y = target_q(batch["rewards"], batch["next_states"], self.critics.targets, self.policy_target,
                     self.gamma, self.schedule, self.train_rng)
        q1_mean = float(np.mean(self.critics.q1.evaluate(s, a)))
        loss_c = self.critics.train_step(s, a, y)

        loss_p, grads, parts = combined_loss(self.policy, self.critics.q1, s, a, self.schedule, self.eta,
                                             self.train_rng)
        self.policy_opt.step(self.policy.params(), grads)

        ema_update(self.policy_target.params(), self.policy.params(), self.rho)
        self.critics.soft_update(self.rho)
        self.iteration += 1
        values = {"critic_loss": loss_c, "policy_loss": loss_p, "diffusion_loss": parts["diffusion_loss"],
                  "q_guidance": parts["q_guidance"], "q1_mean": q1_mean, "target_mean": float(np.mean(y))}
        self._check_finite(values)
        return values

    def checkpoint_groups(self) -> list:
        return [("policy", self.policy.params()), ("policy_target", self.policy_target.params()),
                ("policy_opt", self.policy_opt.state_arrays())] + self.critics.checkpoint_groups()

    def optimizers(self) -> dict:
        return {"policy_opt": self.policy_opt, **self.critics.optimizers()}
