"""
xDiff Baselines
Rule-based interference management (CIRA, OTFR, CSRS) and the DDQN / DDPG ablations, all as policy providers
"""

import logging
from typing import Mapping, Optional

import numpy as np

from xdiff_agent import CriticPair, LearningProvider, XDiffAgent, bellman_target, ema_update
from xdiff_core import NetworkConfig, PolicyProvider, PreferencePolicy
from xdiff_nn import Adam, mlp

logger = logging.getLogger(__name__)

PROVIDERS = ("xdiff", "xdiff-hard", "ddqn", "ddpg", "cira", "otfr", "csrs")
LATTICE = np.array([-1.0, 0.0, 1.0])


# ---------------------------------------------------------------------------
# Rule-based
# ---------------------------------------------------------------------------

def cira_propose(config: NetworkConfig) -> PreferencePolicy:
    """Every cell uses the whole band with plain PF"""
    return PreferencePolicy.neutral(config)


def otfr_groups(cell: int, num_cells: int, num_groups: int) -> range:
    return range(cell * num_groups // num_cells, (cell + 1) * num_groups // num_cells)


def otfr_propose(config: NetworkConfig) -> PreferencePolicy:
    """Static split: each cell owns an equal share of the groups, +1 there and -1 elsewhere"""
    values = np.zeros((config.num_cells, config.max_ues, config.num_rb_groups))
    for k, n in enumerate(config.ues_per_cell):
        values[k, :n, :] = -1.0
        values[k, :n, list(otfr_groups(k, config.num_cells, config.num_rb_groups))] = 1.0
    return PreferencePolicy(values, config)


def csrs_partition(demands, groups: int) -> np.ndarray:
    """Split `groups` proportionally to demands, largest remainder, ties to the lower index"""
    demands = np.asarray(demands, dtype=np.float64)
    total = demands.sum()
    if total <= 0:
        raise ValueError("cannot partition groups over zero total demand")
    quotas = demands / total * groups
    counts = np.floor(quotas).astype(int)
    leftover = groups - int(counts.sum())
    order = sorted(range(demands.size), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def csrs_propose(observation, config: NetworkConfig, edge_percentile: float = 33.3) -> PreferencePolicy:
    """Center UEs share the band, edge UEs get disjoint group sets sized by their demand.

    Edge UEs are the active UEs whose slot SINR lies below the given percentile. Their pool
    takes the leading groups; centre UEs get 0 (plain PF access) on the rest and -1 on the pool.
    """
    if observation is None or "sinr_db" not in observation.raw:
        return cira_propose(config)
    sinr = np.asarray(observation.raw["sinr_db"], dtype=np.float64)
    demand = np.asarray(observation.raw["demand_bps"], dtype=np.float64)
    active = demand > 0
    if not np.any(active):
        return cira_propose(config)
    threshold = np.percentile(sinr[active], edge_percentile)
    edge = active & (sinr < threshold)
    edge_demand = demand[edge].sum()
    if not np.any(edge) or edge_demand <= 0:
        return cira_propose(config)

    G = config.num_rb_groups
    n_edge = int(np.count_nonzero(edge))
    has_center = bool(np.any(active & ~edge))
    pool = int(round(G * edge_demand / demand[active].sum()))
    pool = min(max(pool, n_edge), G - 1 if has_center else G)
    counts = csrs_partition(demand[edge], pool)

    values = np.zeros((config.num_cells, config.max_ues, G))
    slots = list(config.ue_slots())
    for u, (k, i) in enumerate(slots):
        values[k, i, :pool] = -1.0
    start = 0
    for u, count in zip(np.flatnonzero(edge), counts):
        k, i = slots[u]
        values[k, i, :] = -1.0
        values[k, i, start:start + count] = 1.0
        start += count
    return PreferencePolicy(values, config)


class CiraProvider(PolicyProvider):
    name = "cira"

    def propose(self) -> PreferencePolicy:
        return cira_propose(self.config)


class OtfrProvider(PolicyProvider):
    name = "otfr"
    scheduler_mode = "hard"

    def propose(self) -> PreferencePolicy:
        return otfr_propose(self.config)


class CsrsProvider(PolicyProvider):
    name = "csrs"
    scheduler_mode = "hard"

    def __init__(self, config: NetworkConfig, edge_percentile: float = 33.3):
        super().__init__(config)
        self.edge_percentile = edge_percentile

    def propose(self) -> PreferencePolicy:
        return csrs_propose(self.last_observation, self.config, self.edge_percentile)


# ---------------------------------------------------------------------------
# Learning ablations
# ---------------------------------------------------------------------------

class DdqnProvider(LearningProvider):
    """Factored double DQN over the {-1, 0, +1} lattice: one 3-way head per (ue, group) coordinate.

    Q(s, a) is the mean of the chosen head values. Greedy ties go to the lowest lattice index.
    """

    name = "ddqn"
    scheduler_mode = "hard"

    def __init__(self, cfg: Mapping, state_dim: int, seed: int = 0):
        super().__init__(cfg, state_dim, seed)
        ddqn = cfg["baselines"]["ddqn"]
        self.epsilon_start = float(ddqn["epsilon_start"])
        self.epsilon_end = float(ddqn["epsilon_end"])
        self.epsilon_decay_slots = max(int(ddqn["epsilon_decay_slots"]), 1)
        self.q = mlp(state_dim, self.action_dim * LATTICE.size, self.hidden, self.layers, self.init_rng)
        self.q_target = self.q.copy()
        self.q_opt = Adam(self.q.params(), self.lr)

    @property
    def epsilon(self) -> float:
        frac = min(self.slot / self.epsilon_decay_slots, 1.0)
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac

    def heads(self, states: np.ndarray, target: bool = False):
        net = self.q_target if target else self.q
        out, cache = net.forward(np.atleast_2d(states))
        return out.reshape(-1, self.action_dim, LATTICE.size), cache

    def greedy_indices(self, states: np.ndarray, target: bool = False) -> np.ndarray:
        return np.argmax(self.heads(states, target)[0], axis=2)

    def select_action(self, state: np.ndarray) -> PreferencePolicy:
        if self.act_rng.random() < self.epsilon:
            idx = self.act_rng.integers(0, LATTICE.size, size=self.action_dim)
        else:
            idx = self.greedy_indices(state)[0]
        return PreferencePolicy.from_vector(LATTICE[idx], self.config)

    def train_step(self) -> dict:
        batch = self.replay.sample(self.batch_size, self.train_rng)
        s, s2 = batch["states"], batch["next_states"]
        chosen = np.rint(batch["actions"]).astype(int) + 1
        rows = np.arange(s.shape[0])[:, None]
        cols = np.arange(self.action_dim)[None, :]

        # double DQN: online argmax, target evaluation
        best_next = self.greedy_indices(s2)
        next_heads, _ = self.heads(s2, target=True)
        y = batch["rewards"] + self.gamma * next_heads[rows, cols, best_next].mean(axis=1)

        heads, cache = self.heads(s)
        q = heads[rows, cols, chosen].mean(axis=1)
        diff = q - y
        loss = float(np.mean(diff * diff))
        grad = np.zeros_like(heads)
        grad[rows, cols, chosen] = (2.0 * diff / diff.size / self.action_dim)[:, None]
        grads, _ = self.q.backward(cache, grad.reshape(s.shape[0], -1))
        self.q_opt.step(self.q.params(), grads)
        ema_update(self.q_target.params(), self.q.params(), self.rho)
        self.iteration += 1
        values = {"critic_loss": loss, "policy_loss": loss, "q1_mean": float(np.mean(q)),
                  "target_mean": float(np.mean(y))}
        self._check_finite(values)
        return values

    def checkpoint_groups(self) -> list:
        return [("q", self.q.params()), ("q_target", self.q_target.params()), ("q_opt", self.q_opt.state_arrays())]

    def optimizers(self) -> dict:
        return {"q_opt": self.q_opt}


def actor_loss(actor, critic, states: np.ndarray):
    """-mean Q(s, actor(s)) and its gradient w.r.t. the actor parameters"""
    actions, cache = actor.forward(np.atleast_2d(states))
    q, grad_a = critic.action_grad(states, actions)
    grads, _ = actor.backward(cache, -grad_a / q.size)
    return -float(np.mean(q)), grads


class DdpgProvider(LearningProvider):
    """Deterministic tanh actor with Gaussian exploration, trained against the shared double critics"""

    name = "ddpg"

    def __init__(self, cfg: Mapping, state_dim: int, seed: int = 0):
        super().__init__(cfg, state_dim, seed)
        self.noise_sigma = float(cfg["baselines"]["ddpg"]["noise_sigma"])
        self.actor = mlp(state_dim, self.action_dim, self.hidden, self.layers, self.init_rng,
                         output_activation="tanh", zero_last=True)
        self.actor_target = self.actor.copy()
        self.actor_opt = Adam(self.actor.params(), self.lr)
        self.critics = CriticPair(state_dim, self.action_dim, self.init_rng, self.hidden, self.layers, self.lr)

    def select_action(self, state: np.ndarray) -> PreferencePolicy:
        a = self.actor.predict(state)
        a = np.clip(a + self.noise_sigma * self.act_rng.standard_normal(a.shape), -1.0, 1.0)
        return PreferencePolicy.from_vector(a, self.config)

    def train_step(self) -> dict:
        batch = self.replay.sample(self.batch_size, self.train_rng)
        s, a = batch["states"], batch["actions"]
        next_actions = self.actor_target.predict(batch["next_states"])
        y = bellman_target(batch["rewards"], batch["next_states"], next_actions, self.critics.targets, self.gamma)
        q1_mean = float(np.mean(self.critics.q1.evaluate(s, a)))
        loss_c = self.critics.train_step(s, a, y)

        loss_a, grads = actor_loss(self.actor, self.critics.q1, s)
        self.actor_opt.step(self.actor.params(), grads)
        ema_update(self.actor_target.params(), self.actor.params(), self.rho)
        self.critics.soft_update(self.rho)
        self.iteration += 1
        values = {"critic_loss": loss_c, "policy_loss": loss_a, "q1_mean": q1_mean, "target_mean": float(np.mean(y))}
        self._check_finite(values)
        return values

    def checkpoint_groups(self) -> list:
        return [("actor", self.actor.params()), ("actor_target", self.actor_target.params()),
                ("actor_opt", self.actor_opt.state_arrays())] + self.critics.checkpoint_groups()

    def optimizers(self) -> dict:
        return {"actor_opt": self.actor_opt, **self.critics.optimizers()}


def make_provider(name: str, cfg: Mapping, state_dim: int, seed: int = 0,
                  config: Optional[NetworkConfig] = None) -> PolicyProvider:
    config = config or NetworkConfig.from_dict(cfg["network"])
    if name == "xdiff":
        return XDiffAgent(cfg, state_dim, seed)
    if name == "xdiff-hard":
        return XDiffAgent(cfg, state_dim, seed, hard=True)
    if name == "ddqn":
        return DdqnProvider(cfg, state_dim, seed)
    if name == "ddpg":
        return DdpgProvider(cfg, state_dim, seed)
    if name == "cira":
        return CiraProvider(config)
    if name == "otfr":
        return OtfrProvider(config)
    if name == "csrs":
        return CsrsProvider(config, float(cfg["baselines"]["csrs"]["edge_percentile"]))
    raise ValueError(f"unknown provider '{name}', expected one of {', '.join(PROVIDERS)}")
