"""
xDiff Radio Model
Parametric pathloss/shadowing/fading channel, SINR, CQI/MCS mapping, transport block size and BLER
"""

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np
import pandas as pd

from xdiff_core import ConfigValidationError, NetworkConfig

logger = logging.getLogger(__name__)

# two 30 kHz slots per 1 ms subframe, 12 subcarriers x 12 data symbols each
RE_PER_RB = 288
RB_BANDWIDTH_HZ = 12 * 30e3
THERMAL_NOISE_DBM_HZ = -174.0


class McsTable:
    """CQI rows (cqi 1..15) with MCS index, spectral efficiency and SINR threshold"""

    def __init__(self, cqi, mcs, spectral_efficiency, sinr_threshold_db):
        self.cqi = np.asarray(cqi, dtype=int)
        self.mcs = np.asarray(mcs, dtype=int)
        self.spectral_efficiency = np.asarray(spectral_efficiency, dtype=float)
        self.sinr_threshold_db = np.asarray(sinr_threshold_db, dtype=float)
        if not np.array_equal(self.cqi, np.arange(1, len(self.cqi) + 1)):
            raise ConfigValidationError("mcs table: cqi column must be 1..N in order")
        if np.any(np.diff(self.spectral_efficiency) <= 0) or np.any(np.diff(self.sinr_threshold_db) <= 0):
            raise ConfigValidationError("mcs table: efficiency and threshold must increase strictly with cqi")
        if np.any(np.diff(self.mcs) < 0):
            raise ConfigValidationError("mcs table: mcs index must be non-decreasing")

    @classmethod
    def from_csv(cls, path) -> "McsTable":
        df = pd.read_csv(Path(path))
        missing = {"cqi", "mcs", "spectral_efficiency", "sinr_threshold_db"} - set(df.columns)
        if missing:
            raise ConfigValidationError(f"mcs table {path}: missing columns {sorted(missing)}")
        df = df.sort_values("cqi")
        return cls(df["cqi"], df["mcs"], df["spectral_efficiency"], df["sinr_threshold_db"])

    @property
    def max_cqi(self) -> int:
        return int(self.cqi[-1])

    def cqi_from_sinr(self, sinr_db):
        """Largest cqi whose threshold <= sinr; 0 below the table. Works on arrays."""
        result = np.searchsorted(self.sinr_threshold_db, sinr_db, side="right")
        return int(result) if np.ndim(result) == 0 else result

    def efficiency(self, cqi: int) -> float:
        return 0.0 if cqi <= 0 else float(self.spectral_efficiency[min(cqi, self.max_cqi) - 1])

    def mcs_of(self, cqi: int) -> int:
        return int(self.mcs[max(min(cqi, self.max_cqi), 1) - 1])

    def threshold_of_mcs(self, mcs: int) -> float:
        row = np.searchsorted(self.mcs, mcs, side="right") - 1
        return float(self.sinr_threshold_db[max(row, 0)])


# 3GPP CQI table 1 efficiencies; thresholds from the usual AWGN 10% BLER link curves
DEFAULT_MCS_TABLE = McsTable(
    cqi=range(1, 16),
    mcs=[2 * (c - 1) for c in range(1, 16)],
    spectral_efficiency=[0.1523, 0.2344, 0.3770, 0.6016, 0.8770, 1.1758, 1.4766, 1.9141,
                         2.4063, 2.7305, 3.3223, 3.9023, 4.5234, 5.1152, 5.5547],
    sinr_threshold_db=[-6.7, -4.7, -2.3, 0.2, 2.4, 4.3, 5.9, 8.1,
                       10.3, 11.7, 14.1, 16.3, 18.7, 21.0, 22.7],
)


def cqi_from_sinr(sinr_db, table: McsTable = DEFAULT_MCS_TABLE):
    return table.cqi_from_sinr(sinr_db)


def rb_bits(cqi: int, rbs: int, table: McsTable = DEFAULT_MCS_TABLE) -> int:
    """Bits one subframe carries on rbs RBs at the given cqi"""
    if cqi <= 0 or rbs <= 0:
        return 0
    return int(math.floor(rbs * RE_PER_RB * table.efficiency(cqi)))


def bler(sinr_db, mcs: int, slope: float = 1.5, table: McsTable = DEFAULT_MCS_TABLE):
    """Logistic block error curve around the MCS threshold"""
    delta = np.asarray(sinr_db, dtype=float) - table.threshold_of_mcs(mcs)
    # 1/(1+exp(x)) written through tanh so large |x| cannot overflow
    p = 0.5 * (1.0 - np.tanh(0.5 * slope * delta))
    return float(p) if np.ndim(p) == 0 else p


def db_to_linear(db):
    return np.power(10.0, np.asarray(db, dtype=float) / 10.0)


def linear_to_db(lin):
    return 10.0 * np.log10(lin)


@dataclass(frozen=True)
class ChannelState:
    pathloss_db: np.ndarray        # (cells, ues)
    shadowing_db: np.ndarray       # (cells, ues)
    fast_fade_db: np.ndarray       # (cells, ues, groups)
    tx_power_dbm: np.ndarray       # (cells,) total over the carrier
    noise_dbm_per_rb: float
    serving_cell: np.ndarray       # (ues,)
    num_rbs: int = 106
    shadow_sigma_db: float = 1.0
    shadow_corr: float = 0.9
    fast_fade_sigma_db: float = 1.0
    sinr_clip_db: float = 60.0

    def __post_init__(self):
        for name in ("pathloss_db", "shadowing_db", "fast_fade_db", "tx_power_dbm"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"channel {name} has non-finite entries")
        if np.any(self.pathloss_db < 0):
            raise ValueError("pathloss must be >= 0 dB")

    @property
    def num_cells(self) -> int:
        return self.pathloss_db.shape[0]

    @property
    def num_ues(self) -> int:
        return self.pathloss_db.shape[1]

    @property
    def num_groups(self) -> int:
        return self.fast_fade_db.shape[2]

    def tx_power_per_rb_dbm(self) -> np.ndarray:
        return self.tx_power_dbm - 10.0 * np.log10(self.num_rbs)

    def rx_power_dbm(self) -> np.ndarray:
        """Per-RB received power of every cell at every UE on every group, (cells, ues, groups)"""
        link = self.tx_power_per_rb_dbm()[:, None] - self.pathloss_db - self.shadowing_db
        return link[:, :, None] + self.fast_fade_db


def sinr_db(state: ChannelState, serving: int, ue: int, rb_group: int, interferers: Iterable[int]) -> float:
    interferers = set(interferers)
    if serving in interferers:
        raise ValueError("serving cell cannot interfere with itself")
    rx = db_to_linear(state.rx_power_dbm()[:, ue, rb_group])
    signal = rx[serving]
    noise = float(db_to_linear(state.noise_dbm_per_rb))
    interference = sum(rx[c] for c in interferers)
    value = float(linear_to_db(signal / (noise + interference)))
    return float(np.clip(value, -state.sinr_clip_db, state.sinr_clip_db))


def sinr_matrix_db(state: ChannelState, transmitting: np.ndarray):
    """SINR (ues, groups) seen by every UE from its serving cell given which cells transmit on
    which group, plus the interference rise over noise in dB"""
    rx = db_to_linear(state.rx_power_dbm())
    ues = np.arange(state.num_ues)
    signal = rx[state.serving_cell, ues, :]
    mask = transmitting.astype(float)[:, None, :].repeat(state.num_ues, axis=1)
    mask[state.serving_cell, ues, :] = 0.0
    interference = np.sum(rx * mask, axis=0)
    noise = float(db_to_linear(state.noise_dbm_per_rb))
    sinr = np.clip(linear_to_db(signal / (noise + interference)), -state.sinr_clip_db, state.sinr_clip_db)
    rise = linear_to_db((noise + interference) / noise)
    return sinr, rise


def evolve_channel(state: ChannelState, rng: np.random.Generator, shadow_step: bool = True) -> ChannelState:
    """AR(1) shadowing step (per slot) and a fresh i.i.d. fast-fading draw (per subframe)"""
    shadowing = state.shadowing_db
    if shadow_step:
        rho = state.shadow_corr
        innovation = rng.standard_normal(shadowing.shape) * state.shadow_sigma_db
        shadowing = rho * shadowing + math.sqrt(max(1.0 - rho * rho, 0.0)) * innovation
    fast = rng.standard_normal(state.fast_fade_db.shape) * state.fast_fade_sigma_db
    return replace(state, shadowing_db=shadowing, fast_fade_db=fast)


def pathloss_db(distance_m, wall_loss_db: float = 0.0):
    """Indoor log-distance model, exponent 3 with 40 dB at 1 m"""
    d = np.maximum(np.asarray(distance_m, dtype=float), 1.0)
    return 40.0 + 30.0 * np.log10(d) + wall_loss_db


def noise_per_rb_dbm(noise_figure_db: float) -> float:
    return THERMAL_NOISE_DBM_HZ + 10.0 * math.log10(RB_BANDWIDTH_HZ) + noise_figure_db


def cell_positions(num_cells: int, spacing_m: float) -> np.ndarray:
    if num_cells == 1:
        return np.zeros((1, 2))
    if num_cells == 2:
        return np.array([[-spacing_m / 2.0, 0.0], [spacing_m / 2.0, 0.0]])
    radius = spacing_m / (2.0 * math.sin(math.pi / num_cells))
    angles = 2.0 * math.pi * np.arange(num_cells) / num_cells
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def ue_positions(cells: np.ndarray, ues_per_cell, radius_m: float, spread_deg: float) -> np.ndarray:
    """UEs sit radius_m from their cell, fanned around the direction of the network centre"""
    positions = []
    for k, n in enumerate(ues_per_cell):
        toward = -cells[k]
        norm = np.linalg.norm(toward)
        base = math.atan2(toward[1], toward[0]) if norm > 0 else 0.0
        for i in range(n):
            offset = 0.0 if n == 1 else spread_deg * (2.0 * i / (n - 1) - 1.0)
            angle = base + math.radians(offset)
            positions.append(cells[k] + radius_m * np.array([math.cos(angle), math.sin(angle)]))
    return np.array(positions)


def load_mcs_table(radio_cfg: Mapping) -> McsTable:
    path = radio_cfg.get("mcs_table")
    if path:
        logger.info(f"📡 loading MCS table from {path}")
        return McsTable.from_csv(path)
    return DEFAULT_MCS_TABLE


def make_scenario(cfg: Mapping, rng: np.random.Generator, net: Optional[NetworkConfig] = None):
    """Channel state and geometry for the configured preset.

    Returns (ChannelState, ue_positions, cell_positions). Shadowing starts from its stationary
    distribution so no burn-in is needed.
    """
    net = net or NetworkConfig.from_dict(cfg["network"])
    radio = cfg["radio"]
    cells = cell_positions(net.num_cells, float(radio["cell_spacing_m"]))
    ues = ue_positions(cells, net.ues_per_cell, float(radio["ue_radius_m"]), float(radio["ue_spread_deg"]))
    serving = np.repeat(np.arange(net.num_cells), net.ues_per_cell)

    distance = np.linalg.norm(cells[:, None, :] - ues[None, :, :], axis=2)
    cross = np.ones_like(distance, dtype=bool)
    cross[serving, np.arange(len(serving))] = False
    pl = pathloss_db(distance) + float(radio["wall_loss_db"]) * cross

    tx = radio["tx_power_dbm"]
    tx = np.asarray(tx if isinstance(tx, list) else [tx] * net.num_cells, dtype=float)
    sigma = float(radio["shadow_sigma_db"])
    ff_sigma = float(radio["fast_fade_sigma_db"])
    state = ChannelState(
        pathloss_db=pl,
        shadowing_db=rng.standard_normal(pl.shape) * sigma,
        fast_fade_db=rng.standard_normal((net.num_cells, len(serving), net.num_rb_groups)) * ff_sigma,
        tx_power_dbm=tx,
        noise_dbm_per_rb=noise_per_rb_dbm(float(radio["noise_figure_db"])),
        serving_cell=serving,
        num_rbs=net.num_rbs,
        shadow_sigma_db=sigma,
        shadow_corr=float(radio["shadow_corr"]),
        fast_fade_sigma_db=ff_sigma,
        sinr_clip_db=float(radio["sinr_clip_db"]),
    )
    logger.debug(f"scenario: {net.num_cells} cells, {len(serving)} UEs, spacing {radio['cell_spacing_m']} m")
    return state, ues, cells
