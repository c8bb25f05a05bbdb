"""
xDiff Core
Domain types, reward/regret arithmetic and configuration shared by every module
"""

import copy
import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

__version__ = "1.0.0"

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class XDiffError(Exception):
    """Base class for every error raised by the simulator and the learners"""


class InvalidDemandError(XDiffError, ValueError):
    pass


class IncompleteObservationError(XDiffError, KeyError):
    pass


class ShapeError(XDiffError, ValueError):
    pass


class ConfigParseError(XDiffError):
    pass


class ConfigValidationError(XDiffError, ValueError):
    pass


class NumericFailureError(XDiffError, FloatingPointError):
    pass


class RunNotFoundError(XDiffError, FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

NETWORK_FIELD_TYPES = {
    "num_cells": "int", "ues_per_cell": "ints", "num_rbs": "int", "num_rb_groups": "int", "subframe_ms": "int",
    "slot_ms": "int", "gamma": "float", "lambda_p": "floats", "lambda_d": "floats", "rng_seed": "int",
}


def _is_number(value) -> bool:
    return isinstance(value, (int, float, np.integer, np.floating)) and not isinstance(value, bool)


@dataclass(frozen=True)
class NetworkConfig:
    num_cells: int = 3
    ues_per_cell: tuple = (4, 3, 3)
    num_rbs: int = 106
    num_rb_groups: int = 10
    subframe_ms: int = 1
    slot_ms: int = 100
    gamma: float = 0.95
    lambda_p: tuple = (1.0, 1.0, 1.0)
    lambda_d: tuple = (1.0, 1.0, 1.0)
    rng_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.num_cells < 1:
            raise ConfigValidationError("network.num_cells must be >= 1")
        for key in ("ues_per_cell", "lambda_p", "lambda_d"):
            if len(getattr(self, key)) != self.num_cells:
                raise ConfigValidationError(
                    f"network.{key} has {len(getattr(self, key))} entries, expected num_cells={self.num_cells}")
        if any(n < 1 for n in self.ues_per_cell):
            raise ConfigValidationError("network.ues_per_cell entries must be >= 1")
        if not 1 <= self.num_rb_groups <= self.num_rbs:
            raise ConfigValidationError("network.num_rb_groups must be in [1, num_rbs]")
        if self.subframe_ms <= 0 or self.slot_ms % self.subframe_ms != 0:
            raise ConfigValidationError("network.slot_ms must be a multiple of network.subframe_ms")
        if not 10 <= self.slot_ms <= 1000:
            raise ConfigValidationError("network.slot_ms must be within 10..1000 ms")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigValidationError("network.gamma must be in (0, 1)")
        if any(w < 0 for w in (*self.lambda_p, *self.lambda_d)):
            raise ConfigValidationError("network.lambda_p / lambda_d must be non-negative")

    @classmethod
    def from_dict(cls, section: Mapping) -> "NetworkConfig":
        values = dict(section)
        for key, value in values.items():
            kind = NETWORK_FIELD_TYPES.get(key)
            if kind is None:
                raise ConfigValidationError(f"unknown config key 'network.{key}'")
            if kind in ("ints", "floats"):
                if not isinstance(value, (list, tuple)) or not all(_is_number(v) for v in value):
                    raise ConfigValidationError(f"network.{key} must be a list of numbers, got {value!r}")
                if kind == "ints" and not all(float(v).is_integer() for v in value):
                    raise ConfigValidationError(f"network.{key} must hold whole numbers, got {value!r}")
                values[key] = tuple(int(v) if kind == "ints" else float(v) for v in value)
            elif not _is_number(value) or (kind == "int" and not float(value).is_integer()):
                raise ConfigValidationError(f"network.{key} must be {'an integer' if kind == 'int' else 'a number'}, "
                                            f"got {value!r}")
            else:
                values[key] = int(value) if kind == "int" else float(value)
        return cls(**values)

    @property
    def max_ues(self) -> int:
        return max(self.ues_per_cell)

    @property
    def total_ues(self) -> int:
        return sum(self.ues_per_cell)

    @property
    def subframes_per_slot(self) -> int:
        return self.slot_ms // self.subframe_ms

    @property
    def action_dim(self) -> int:
        return self.num_cells * self.max_ues * self.num_rb_groups

    def ue_slots(self):
        """(cell, ue) pairs of real UEs, cell-major"""
        return [(k, i) for k in range(self.num_cells) for i in range(self.ues_per_cell[k])]

    def ue_index(self, cell: int, ue: int) -> int:
        """Global index of a real UE, cell-major"""
        return sum(self.ues_per_cell[:cell]) + ue


@dataclass(frozen=True)
class UEProfile:
    cell_id: int
    ue_id: int
    tp_demand_bps: float
    delay_demand_ms: float
    position: tuple = (0.0, 0.0)
    # (start_ms, rate_bps) segments; empty means constant at tp_demand_bps
    traffic_pattern: tuple = ()

    def __post_init__(self):
        if self.tp_demand_bps <= 0:
            raise InvalidDemandError(f"UE {self.cell_id}/{self.ue_id}: throughput demand must be > 0")
        if self.delay_demand_ms <= 0:
            raise InvalidDemandError(f"UE {self.cell_id}/{self.ue_id}: delay demand must be > 0")


class PreferencePolicy:
    """Preference values indexed (cell, ue, rb-group); padded UE slots are ignored"""

    def __init__(self, values: np.ndarray, config: NetworkConfig):
        values = np.asarray(values, dtype=np.float64)
        expected = (config.num_cells, config.max_ues, config.num_rb_groups)
        if values.shape != expected:
            raise ShapeError(f"policy shape {values.shape} does not match {expected}")
        self.values = values
        self.config = config

    @classmethod
    def neutral(cls, config: NetworkConfig) -> "PreferencePolicy":
        return cls(np.zeros((config.num_cells, config.max_ues, config.num_rb_groups)), config)

    @classmethod
    def from_vector(cls, vector: np.ndarray, config: NetworkConfig) -> "PreferencePolicy":
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vector.size != config.action_dim:
            raise ShapeError(f"action vector has {vector.size} entries, expected {config.action_dim}")
        values = vector.reshape(config.num_cells, config.max_ues, config.num_rb_groups).copy()
        for k, n in enumerate(config.ues_per_cell):
            values[k, n:, :] = 0.0
        return cls(values, config)

    def to_vector(self) -> np.ndarray:
        return self.values.reshape(-1).astype(np.float32)

    def for_cell(self, cell: int) -> np.ndarray:
        return self.values[cell, :self.config.ues_per_cell[cell], :]

    def is_valid(self, mode: str = "soft") -> bool:
        if not np.all(np.isfinite(self.values)):
            return False
        if mode == "hard":
            return bool(np.all(np.isin(self.values, (-1.0, 0.0, 1.0))))
        return bool(np.all(np.abs(self.values) <= 1.0))

    def validate(self, mode: str = "soft"):
        if not self.is_valid(mode):
            raise ShapeError(f"policy values violate the {mode} range")

    def quantized(self) -> "PreferencePolicy":
        return PreferencePolicy(np.clip(np.rint(self.values), -1.0, 1.0), self.config)


@dataclass(frozen=True)
class QoSSample:
    achieved_tp_bps: float
    achieved_delay_ms: float

    def __post_init__(self):
        if self.achieved_tp_bps < 0 or self.achieved_delay_ms < 0:
            raise ValueError("QoS samples must be non-negative")


@dataclass(frozen=True)
class RewardBreakdown:
    r_tp: np.ndarray
    r_delay: np.ndarray
    total: float


# ---------------------------------------------------------------------------
# Regret and reward
# ---------------------------------------------------------------------------

def ue_throughput_regret(rho: float, P: float) -> float:
    if P <= 0:
        raise InvalidDemandError(f"throughput demand must be > 0, got {P}")
    return max((P - rho) / P, 0.0)


def ue_delay_regret(tau: float, D: float) -> float:
    if D <= 0:
        raise InvalidDemandError(f"delay demand must be > 0, got {D}")
    return max((tau - D) / D, 0.0)


def compute_rewards(samples: Mapping[tuple, QoSSample], profiles: Sequence[UEProfile],
                    lambda_p: Sequence[float], lambda_d: Sequence[float],
                    num_cells: Optional[int] = None) -> RewardBreakdown:
    """Per-cell throughput/delay rewards and the weighted network reward.

    samples is keyed by (cell_id, ue_id); every profile needs a sample.
    """
    num_cells = num_cells if num_cells is not None else len(lambda_p)
    r_tp = np.zeros(num_cells)
    r_delay = np.zeros(num_cells)
    for profile in profiles:
        key = (profile.cell_id, profile.ue_id)
        if key not in samples:
            raise IncompleteObservationError(f"no QoS sample for UE {key}")
        sample = samples[key]
        r_tp[profile.cell_id] -= ue_throughput_regret(sample.achieved_tp_bps, profile.tp_demand_bps)
        r_delay[profile.cell_id] -= ue_delay_regret(sample.achieved_delay_ms, profile.delay_demand_ms)
    total = float(np.dot(lambda_p, r_tp) + np.dot(lambda_d, r_delay))
    return RewardBreakdown(r_tp=r_tp, r_delay=r_delay, total=total)


# ---------------------------------------------------------------------------
# Policy providers
# ---------------------------------------------------------------------------

class PolicyProvider(ABC):
    """Anything the RIC can run: it sees each slot's observation and reward, and proposes the next policy"""

    name = "provider"
    scheduler_mode = "soft"
    learning = False

    def __init__(self, config: NetworkConfig):
        self.config = config
        self.last_observation = None
        self.last_latency_ms = 0.0

    def reset(self, observation):
        self.last_observation = observation

    def observe(self, observation, reward: RewardBreakdown):
        self.last_observation = observation

    @abstractmethod
    def propose(self) -> PreferencePolicy:
        ...


# ---------------------------------------------------------------------------
# RB grouping
# ---------------------------------------------------------------------------

def rb_groups(num_rbs: int, num_groups: int) -> list:
    """RB indices per group; the first num_rbs % num_groups groups get one extra RB"""
    if not 1 <= num_groups <= num_rbs:
        raise ConfigValidationError("num_rb_groups must be in [1, num_rbs]")
    return np.array_split(np.arange(num_rbs), num_groups)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

DEFAULT_CONFIG = {
    "network": {
        "num_cells": 3,
        "ues_per_cell": [4, 3, 3],
        "num_rbs": 106,
        "num_rb_groups": 10,
        "subframe_ms": 1,
        "slot_ms": 100,
        "gamma": 0.95,
        "lambda_p": [1.0, 1.0, 1.0],
        "lambda_d": [1.0, 1.0, 1.0],
        "rng_seed": 0
    },
    "radio": {
        "cell_spacing_m": 8.0,
        "ue_radius_m": 3.5,
        "ue_spread_deg": 40.0,
        "wall_loss_db": 0.0,
        "tx_power_dbm": 23.0,
        "noise_figure_db": 9.0,
        "shadow_sigma_db": 1.0,
        "shadow_corr": 0.9,
        "fast_fade_sigma_db": 1.0,
        "bler_slope": 1.5,
        "sinr_clip_db": 60.0,
        "ue_pcmax_dbm": 23.0,
        "p0_dbm": -80.0,
        "mcs_table": None
    },
    "scheduler": {
        "ema_horizon": 100,
        "avg_tp_floor_bps": 1000.0,
        "weight_mode": "favorable"
    },
    "traffic": {
        "pattern": "constant",
        "rate_mbps": 14.0,
        "delay_demand_ms": 50.0,
        "packet_size_bytes": 1500,
        "light_mbps": 3.5,
        "heavy_mbps": 16.5,
        "step_at_s": None,
        "step_factor": 1.5,
        "activation_s": None
    },
    "env": {
        "e2_latency_ms": 0,
        "kpm_samples_per_s": 1000,
        "disconnect_bler": 0.9,
        "disconnect_tp_fraction": 0.01,
        "disconnect_slots": 3,
        "reconnect_slots": 10
    },
    "diffusion": {
        "steps": 5,
        "beta_min": 0.1,
        "beta_max": 10.0,
        "emb_dim": 16
    },
    "agent": {
        "hidden": 256,
        "layers": 4,
        "lr": 3e-4,
        "batch_size": 64,
        "replay_capacity": 10000,
        "rho": 0.05,
        "eta": 1.0,
        "updates_per_slot": 1,
        "reward_scale": 1.0,
        "checkpoint_every": 500
    },
    "baselines": {
        "ddqn": {"epsilon_start": 1.0, "epsilon_end": 0.05, "epsilon_decay_slots": 1000},
        "ddpg": {"noise_sigma": 0.1},
        "csrs": {"edge_percentile": 33.3}
    },
    "run": {
        "slots": 3000,
        "seeds": 1,
        "latency_coupling": False,
        "workers": 1
    }
}

PRESETS = {
    "lab": {
        "radio": {"cell_spacing_m": 8.0, "ue_radius_m": 3.5, "wall_loss_db": 0.0},
        "env": {"e2_latency_ms": 0}
    },
    "building": {
        "radio": {"cell_spacing_m": 18.0, "ue_radius_m": 4.0, "wall_loss_db": 20.0},
        "env": {"e2_latency_ms": 200}
    },
    # two cells, one UE each, lab coupling (interference case study)
    "fig2": {
        "network": {"num_cells": 2, "ues_per_cell": [1, 1], "lambda_p": [1.0, 1.0], "lambda_d": [1.0, 1.0]},
        "radio": {"cell_spacing_m": 8.0, "ue_radius_m": 3.5, "wall_loss_db": 0.0},
        "traffic": {"rate_mbps": [50.0, 60.0]},
        "env": {"e2_latency_ms": 0}
    }
}


NULLABLE_KEYS = {"radio.mcs_table", "traffic.step_at_s", "traffic.activation_s"}


def _check_type(dotted: str, current, value):
    """Per-cell / per-UE numbers may be given as one number or a list"""
    if value is None:
        if dotted not in NULLABLE_KEYS:
            raise ConfigValidationError(f"config key '{dotted}' cannot be null")
        return
    if current is None:
        return
    if isinstance(current, bool) or isinstance(current, str):
        if type(value) is not type(current):
            raise ConfigValidationError(f"config key '{dotted}' must be a {type(current).__name__}, got {value!r}")
        return
    numeric = _is_number(value) or (isinstance(value, (list, tuple))
                                     and all(v is None or _is_number(v) for v in value))
    if not numeric:
        raise ConfigValidationError(f"config key '{dotted}' must be a number or a list of numbers, got {value!r}")


def deep_merge(base: dict, override: Mapping, path: str = "") -> dict:
    """Merge override into a copy of base; unknown keys and wrong types are rejected"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{path}{key}"
        if key not in merged:
            raise ConfigValidationError(f"unknown config key '{dotted}'")
        if isinstance(merged[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigValidationError(f"config key '{dotted}' must be a section")
            merged[key] = deep_merge(merged[key], value, dotted + ".")
        else:
            _check_type(dotted, merged[key], value)
            merged[key] = copy.deepcopy(value)
    return merged


def parse_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigParseError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigParseError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigParseError(f"{path}: top level must be an object")
    return data


def _per_cell(cfg: dict, section: str, key: str, num_cells: int):
    value = cfg[section][key]
    if isinstance(value, list) and len(value) != num_cells:
        raise ConfigValidationError(f"{section}.{key} has {len(value)} entries, expected {num_cells}")


def validate_config(cfg: dict) -> dict:
    net = NetworkConfig.from_dict(cfg["network"])
    _per_cell(cfg, "radio", "tx_power_dbm", net.num_cells)
    for key in ("rate_mbps", "delay_demand_ms", "activation_s"):
        value = cfg["traffic"][key]
        if isinstance(value, list) and len(value) != net.total_ues:
            raise ConfigValidationError(f"traffic.{key} has {len(value)} entries, expected {net.total_ues} UEs")
    if cfg["traffic"]["pattern"] not in ("constant", "step", "ramp"):
        raise ConfigValidationError(f"traffic.pattern '{cfg['traffic']['pattern']}' is not one of constant/step/ramp")
    if cfg["traffic"]["pattern"] == "step" and cfg["traffic"]["step_at_s"] is None:
        raise ConfigValidationError("traffic.step_at_s is required for the step pattern")
    if cfg["scheduler"]["weight_mode"] not in ("favorable", "literal"):
        raise ConfigValidationError("scheduler.weight_mode must be 'favorable' or 'literal'")
    if cfg["scheduler"]["ema_horizon"] < 1:
        raise ConfigValidationError("scheduler.ema_horizon must be >= 1")
    if cfg["env"]["e2_latency_ms"] < 0:
        raise ConfigValidationError("env.e2_latency_ms must be >= 0")
    samples = cfg["env"]["kpm_samples_per_s"]
    if not 1 <= samples <= 1000 or 1000 % samples != 0:
        raise ConfigValidationError("env.kpm_samples_per_s must divide 1000")
    if cfg["diffusion"]["steps"] < 1:
        raise ConfigValidationError("diffusion.steps must be >= 1")
    if not 0.0 <= cfg["agent"]["rho"] <= 1.0:
        raise ConfigValidationError("agent.rho must be within [0, 1]")
    if cfg["agent"]["batch_size"] > cfg["agent"]["replay_capacity"]:
        raise ConfigValidationError("agent.batch_size cannot exceed agent.replay_capacity")
    return cfg


def load_config(path=None, preset: Optional[str] = None, overrides: Optional[Mapping] = None) -> dict:
    """Defaults, then preset, then file, then overrides; validated before returning"""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigValidationError(f"unknown preset '{preset}'")
        cfg = deep_merge(cfg, PRESETS[preset])
    if path is not None:
        cfg = deep_merge(cfg, parse_config_file(path))
    if overrides:
        cfg = deep_merge(cfg, overrides)
    validate_config(cfg)
    logger.debug(f"config resolved (preset={preset}, file={path})")
    return cfg


def save_config(cfg: Mapping, path):
    with open(path, "w") as f:
        json.dump(cfg, f, indent=2)


def _per_ue(value, index: int, default):
    if value is None:
        return default
    if isinstance(value, list):
        return value[index]
    return value


def build_profiles(cfg: Mapping, positions: Optional[Sequence] = None, duration_s: Optional[float] = None) -> list:
    """UE profiles (demands + traffic schedules) for every real UE, cell-major"""
    net = NetworkConfig.from_dict(cfg["network"])
    traffic = cfg["traffic"]
    profiles = []
    for idx, (k, i) in enumerate(net.ue_slots()):
        rate = float(_per_ue(traffic["rate_mbps"], idx, 0.0)) * 1e6
        delay = float(_per_ue(traffic["delay_demand_ms"], idx, 50.0))
        segments = []
        pattern = traffic["pattern"]
        if pattern == "step":
            step_ms = float(traffic["step_at_s"]) * 1000.0
            segments = [(0.0, rate), (step_ms, rate * float(traffic["step_factor"]))]
        elif pattern == "ramp":
            light = float(traffic["light_mbps"]) * 1e6
            heavy = float(traffic["heavy_mbps"]) * 1e6
            span_ms = (duration_s or cfg["run"]["slots"] * net.slot_ms / 1000.0) * 1000.0
            # ten equal steps from light to heavy
            segments = [(span_ms * n / 10.0, light + (heavy - light) * n / 9.0) for n in range(10)]
            rate = light
        activation = _per_ue(traffic["activation_s"], idx, None)
        if activation:
            # silent until activation, then whatever segment is in force
            start_ms = float(activation) * 1000.0
            segments = segments or [(0.0, rate)]
            in_force = [r for s, r in segments if s <= start_ms][-1]
            segments = [(0.0, 0.0), (start_ms, in_force)] + [(s, r) for s, r in segments if s > start_ms]
        position = tuple(positions[idx]) if positions is not None else (0.0, 0.0)
        profiles.append(UEProfile(cell_id=k, ue_id=i, tp_demand_bps=max(rate, 1.0),
                                  delay_demand_ms=delay, position=position,
                                  traffic_pattern=tuple(segments)))
    return profiles
