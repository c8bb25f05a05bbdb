"""
xDiff Diffusion Policy
Conditional denoising actor: noise schedule, forward noising, reverse sampling, denoising loss and Q guidance
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from xdiff_core import NetworkConfig, NumericFailureError, PreferencePolicy, ShapeError
from xdiff_nn import mlp, timestep_embedding

logger = logging.getLogger(__name__)

Q_SCALE_FLOOR = 1e-6


@dataclass(frozen=True)
class DenoiseSchedule:
    """Per-step noise levels; index 0 holds step k=1"""
    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0 or np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("every beta must lie strictly between 0 and 1")
        object.__setattr__(self, "betas", betas)

    @property
    def steps(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def beta(self, k: int) -> float:
        return float(self.betas[k - 1])

    def alpha(self, k: int) -> float:
        return float(self.alphas[k - 1])

    def alpha_bar(self, k: int) -> float:
        return float(self.alpha_bars[k - 1])


def make_schedule(steps: int = 5, beta_min: float = 0.1, beta_max: float = 10.0) -> DenoiseSchedule:
    """Variance-preserving exponential schedule, alpha_bar[K] = exp(-beta_min - (beta_max - beta_min) / 2)"""
    if steps < 1:
        raise ValueError("the schedule needs at least one step")
    k = np.arange(1, steps + 1, dtype=np.float64)
    betas = 1.0 - np.exp(-beta_min / steps - (beta_max - beta_min) * (2 * k - 1) / (2.0 * steps ** 2))
    return DenoiseSchedule(betas)


def schedule_from_config(diffusion_cfg) -> DenoiseSchedule:
    return make_schedule(int(diffusion_cfg["steps"]), float(diffusion_cfg["beta_min"]),
                         float(diffusion_cfg["beta_max"]))


class EpsilonNet:
    """Noise predictor eps(a^k, s, k): an Mlp over [noisy action, state, timestep embedding]"""

    def __init__(self, action_dim: int, state_dim: int, rng: np.random.Generator, hidden: int = 256,
                 layers: int = 4, emb_dim: int = 16, dtype=np.float32):
        self.action_dim = action_dim
        self.state_dim = state_dim
        self.emb_dim = emb_dim
        # zero last layer: the untrained policy predicts no noise
        self.mlp = mlp(action_dim + state_dim + emb_dim, action_dim, hidden, layers, rng,
                       zero_last=True, dtype=dtype)

    def params(self) -> list:
        return self.mlp.params()

    def astype(self, dtype) -> "EpsilonNet":
        clone = object.__new__(EpsilonNet)
        clone.action_dim, clone.state_dim, clone.emb_dim = self.action_dim, self.state_dim, self.emb_dim
        clone.mlp = self.mlp.astype(dtype)
        return clone

    def copy(self) -> "EpsilonNet":
        return self.astype(self.mlp.dtype)

    def _inputs(self, a, s, k):
        a = np.atleast_2d(a)
        s = np.atleast_2d(s)
        if a.shape[1] != self.action_dim or s.shape[1] != self.state_dim:
            raise ShapeError(f"expected action dim {self.action_dim} and state dim {self.state_dim}, "
                             f"got {a.shape[1]} and {s.shape[1]}")
        if s.shape[0] != a.shape[0]:
            s = np.broadcast_to(s, (a.shape[0], self.state_dim))
        k = np.broadcast_to(np.asarray(k), (a.shape[0],))
        return np.concatenate([a, s, timestep_embedding(k, self.emb_dim)], axis=1)

    def forward(self, a, s, k):
        return self.mlp.forward(self._inputs(a, s, k))

    def predict(self, a, s, k) -> np.ndarray:
        return self.forward(a, s, k)[0]

    def backward(self, cache, grad_out):
        """(param grads, grad w.r.t. the noisy action, grad w.r.t. the state)"""
        grads, grad_in = self.mlp.backward(cache, grad_out)
        return grads, grad_in[:, :self.action_dim], grad_in[:, self.action_dim:self.action_dim + self.state_dim]


def q_sample(a0: np.ndarray, k, noise: np.ndarray, schedule: DenoiseSchedule) -> np.ndarray:
    ab = schedule.alpha_bars[np.asarray(k) - 1]
    if np.ndim(ab):
        ab = ab[:, None]
    return np.sqrt(ab) * a0 + np.sqrt(1.0 - ab) * noise


def _step_coefficients(schedule: DenoiseSchedule, k: int):
    beta, alpha, ab = schedule.beta(k), schedule.alpha(k), schedule.alpha_bar(k)
    c_in = 1.0 / np.sqrt(alpha)
    c_eps = beta / np.sqrt(1.0 - ab)
    sigma = np.sqrt(beta) if k > 1 else 0.0
    return c_in, c_eps, sigma


def p_sample_step(a_k: np.ndarray, s: np.ndarray, k: int, net, schedule: DenoiseSchedule,
                  rng: np.random.Generator) -> np.ndarray:
    """One reverse step a^k -> a^(k-1); the last step (k=1) is deterministic"""
    c_in, c_eps, sigma = _step_coefficients(schedule, k)
    eps = net.forward(a_k, s, k)[0]
    mean = c_in * (np.atleast_2d(a_k) - c_eps * eps)
    if k > 1:
        mean = mean + sigma * rng.standard_normal(mean.shape)
    return mean.reshape(np.shape(a_k))


def sample_actions(states: np.ndarray, net, schedule: DenoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Full reverse chain from standard normal noise, clamped to [-1, 1]; states (B, state_dim)"""
    states = np.atleast_2d(states)
    a = rng.standard_normal((states.shape[0], net.action_dim))
    for k in range(schedule.steps, 0, -1):
        a = p_sample_step(a, states, k, net, schedule, rng)
        if not np.all(np.isfinite(a)):
            raise NumericFailureError(f"non-finite action at denoising step {k} (batch of {states.shape[0]} states)")
    return np.clip(a, -1.0, 1.0)


def sample_action(s: np.ndarray, net, schedule: DenoiseSchedule, rng: np.random.Generator,
                  config: Optional[NetworkConfig] = None):
    """Sample for one state (returns a vector, or a PreferencePolicy when config is given) or a batch"""
    s = np.asarray(s)
    actions = sample_actions(s, net, schedule, rng)
    if s.ndim > 1:
        return actions
    if config is not None:
        return PreferencePolicy.from_vector(actions[0], config)
    return actions[0]


def diffusion_loss(net, states: np.ndarray, actions: np.ndarray, schedule: DenoiseSchedule,
                   rng: np.random.Generator):
    """Noise-prediction error over the batch: mean over samples of ||eps - eps_theta||^2"""
    batch = actions.shape[0]
    k = rng.integers(1, schedule.steps + 1, size=batch)
    noise = rng.standard_normal(actions.shape)
    pred, cache = net.forward(q_sample(actions, k, noise, schedule), states, k)
    diff = pred - noise
    loss = float(np.sum(diff * diff) / batch)
    grads, _, _ = net.backward(cache, 2.0 * diff / batch)
    return loss, grads


def q_guidance(net, critic, states: np.ndarray, stored_actions: np.ndarray, schedule: DenoiseSchedule,
               rng: np.random.Generator, clip: bool = True):
    """Mean critic value of freshly sampled actions over the mean |Q| of the stored ones.

    The chain is reparameterized (noise drawn once per sample) and differentiated through every
    predicted mean. Coordinates held at the clamp get no gradient. The scale in the
    denominator is treated as a constant.
    """
    states = np.atleast_2d(states)
    batch = states.shape[0]
    a = rng.standard_normal((batch, net.action_dim))
    chain = []
    for k in range(schedule.steps, 0, -1):
        c_in, c_eps, sigma = _step_coefficients(schedule, k)
        eps, cache = net.forward(a, states, k)
        a = c_in * (a - c_eps * eps)
        if k > 1:
            a = a + sigma * rng.standard_normal(a.shape)
        chain.append((c_in, c_eps, cache))
    if not np.all(np.isfinite(a)):
        raise NumericFailureError("non-finite action in the guidance chain")
    a0 = np.clip(a, -1.0, 1.0) if clip else a

    q, grad_a0 = critic.action_grad(states, a0)
    if clip:
        grad_a0 = np.where(np.abs(a) <= 1.0, grad_a0, 0.0)
    scale = max(float(np.mean(np.abs(critic.evaluate(states, stored_actions)))), Q_SCALE_FLOOR)
    value = float(np.mean(q) / scale)

    g = grad_a0 / (batch * scale)
    grads = None
    for c_in, c_eps, cache in reversed(chain):
        pg, ga, _ = net.backward(cache, -c_in * c_eps * g)
        grads = pg if grads is None else [acc + p for acc, p in zip(grads, pg)]
        g = c_in * g + ga
    return value, grads


def combined_loss(net, critic, states: np.ndarray, actions: np.ndarray, schedule: DenoiseSchedule,
                  eta: float, rng: np.random.Generator):
    """Denoising loss minus eta times the Q guidance; returns (loss, grads, parts)"""
    ld, gd = diffusion_loss(net, states, actions, schedule, rng)
    if eta == 0:
        return ld, gd, {"diffusion_loss": ld, "q_guidance": 0.0}
    qg, gq = q_guidance(net, critic, states, actions, schedule, rng)
    grads = [a - eta * b for a, b in zip(gd, gq)]
    return ld - eta * qg, grads, {"diffusion_loss": ld, "q_guidance": qg}
