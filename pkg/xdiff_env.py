"""
xDiff RAN Environment
Two-time-scale loop: 1 ms subframes at the DUs, slot-periodic policy/observation exchange with the RIC
"""

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from xdiff_core import (NetworkConfig, PreferencePolicy, QoSSample, ShapeError, build_profiles,
                        compute_rewards)
from xdiff_radio import bler, evolve_channel, load_mcs_table, make_scenario, sinr_matrix_db
from xdiff_scheduler import MacScheduler, UEView

logger = logging.getLogger(__name__)

NUM_FEATURES = 9
FEATURE_NAMES = ("tp", "delay", "prbs_granted", "ul_snr", "phr", "mcs", "bler", "tbs", "scheduled_rbs")

# normalisation bounds
TP_CAP_BPS = 200e6
DELAY_CAP_MS = 5000.0
SNR_CAP_DB = 60.0
PHR_CAP_DB = 63.0
PHR_MIN_DB = -32.0
MCS_CAP = 28.0


class TrafficSource:
    """Piecewise constant-bit-rate packet source"""

    def __init__(self, segments: Sequence, packet_size_bytes: int = 1500):
        segments = [(float(s), float(r)) for s, r in segments]
        if any(r < 0 for _, r in segments):
            raise ValueError("traffic rates must be >= 0")
        if any(b[0] < a[0] for a, b in zip(segments, segments[1:])):
            raise ValueError("traffic segments must be time-ordered")
        self.segments = segments
        self.packet_size_bytes = packet_size_bytes
        self.credit_bytes = 0.0

    @classmethod
    def from_profile(cls, profile, packet_size_bytes: int = 1500) -> "TrafficSource":
        segments = profile.traffic_pattern or ((0.0, profile.tp_demand_bps),)
        return cls(segments, packet_size_bytes)

    def rate_at(self, t_ms: float) -> float:
        rate = 0.0
        for start_ms, seg_rate in self.segments:
            if start_ms > t_ms:
                break
            rate = seg_rate
        return rate

    def arrivals(self, t_ms: float, dt_ms: float) -> int:
        """Whole packets generated during [t_ms, t_ms + dt_ms)"""
        self.credit_bytes += self.rate_at(t_ms) * dt_ms / 8000.0
        packets = int(self.credit_bytes // self.packet_size_bytes)
        self.credit_bytes -= packets * self.packet_size_bytes
        return packets


class UEQueue:
    """FIFO of [arrival_ms, bytes, retx_count, is_tail]; a packet's last piece is its tail"""

    def __init__(self):
        self.entries = deque()
        self.bytes_queued = 0

    def __len__(self):
        return len(self.entries)

    def push_packets(self, count: int, t_ms: float, size: int):
        for _ in range(count):
            self.entries.append([t_ms, size, 0, True])
        self.bytes_queued += count * size

    def take(self, nbytes: int) -> list:
        pieces = []
        while nbytes > 0 and self.entries:
            entry = self.entries[0]
            if entry[1] <= nbytes:
                self.entries.popleft()
                pieces.append(tuple(entry))
                nbytes -= entry[1]
                self.bytes_queued -= entry[1]
            else:
                pieces.append((entry[0], nbytes, entry[2], False))
                entry[1] -= nbytes
                self.bytes_queued -= nbytes
                nbytes = 0
        return pieces

    def push_front(self, pieces: Sequence):
        for arrival, size, retx, tail in reversed(pieces):
            self.entries.appendleft([arrival, size, retx, tail])
            self.bytes_queued += size

    def retx_pending(self) -> bool:
        return bool(self.entries) and self.entries[0][2] > 0

    def head_age(self, now_ms: float) -> float:
        return now_ms - self.entries[0][0] if self.entries else 0.0


class E2Link:
    """In-order RIC to DU policy channel with a fixed latency"""

    def __init__(self, latency_ms: float = 0.0):
        self.latency_ms = latency_ms
        self.in_flight = deque()
        self._last_delivery_ms = float("-inf")

    def submit(self, policy: PreferencePolicy, now_ms: float, extra_delay_ms: float = 0.0) -> float:
        deliver_ms = max(now_ms + self.latency_ms + extra_delay_ms, self._last_delivery_ms)
        self._last_delivery_ms = deliver_ms
        self.in_flight.append((deliver_ms, policy))
        return deliver_ms

    def deliver(self, now_ms: float) -> Optional[PreferencePolicy]:
        latest = None
        while self.in_flight and self.in_flight[0][0] <= now_ms:
            latest = self.in_flight.popleft()[1]
        return latest


@dataclass
class KpmSample:
    """One reporting instant, arrays over all real UEs (global order)"""
    prbs: np.ndarray
    mcs: np.ndarray            # nan where the UE was not scheduled
    tbs: np.ndarray
    ul_snr_db: np.ndarray
    phr_db: np.ndarray
    bler: np.ndarray           # nan where the UE had no transport block


@dataclass
class SubframeRecord:
    time_ms: int
    allocations: list
    sinr_db: np.ndarray
    delivered_bits: np.ndarray
    segments: np.ndarray
    failed_segments: np.ndarray
    sample: Optional[KpmSample] = None


@dataclass
class SlotObservation:
    features: np.ndarray       # (cells, max_ues, 9)
    raw: dict = field(default_factory=dict)

    @property
    def vector(self) -> np.ndarray:
        return self.features.reshape(-1).astype(np.float32)

    def feature(self, name: str) -> np.ndarray:
        return self.features[:, :, FEATURE_NAMES.index(name)]


def bwp_span(row: np.ndarray) -> tuple:
    """Longest contiguous run of non-negative preference groups as (start_group, groups); (-1, 0) if none"""
    best = (-1, 0)
    start = None
    for g, value in enumerate(list(row) + [-1.0]):
        if value >= 0 and start is None:
            start = g
        elif value < 0 and start is not None:
            if g - start > best[1]:
                best = (start, g - start)
            start = None
    return best


def _nanmean(values: np.ndarray) -> float:
    finite = values[np.isfinite(values)]
    return float(finite.mean()) if finite.size else 0.0


def build_observation(samples: Sequence[KpmSample], tp_bps: np.ndarray, delay_ms: np.ndarray,
                      net: NetworkConfig) -> SlotObservation:
    """Slot means of the KPM/MAC samples, normalised, laid out (cell, ue, feature)"""
    features = np.zeros((net.num_cells, net.max_ues, NUM_FEATURES))
    if samples:
        prbs = np.stack([s.prbs for s in samples]).astype(float)
        mcs = np.stack([s.mcs for s in samples])
        tbs = np.stack([s.tbs for s in samples]).astype(float)
        ul = np.stack([s.ul_snr_db for s in samples])
        phr = np.stack([s.phr_db for s in samples])
        err = np.stack([s.bler for s in samples])
    for u, (k, i) in enumerate(net.ue_slots()):
        row = features[k, i]
        row[0] = np.clip(tp_bps[u] / TP_CAP_BPS, 0.0, 1.0)
        row[1] = np.clip(delay_ms[u] / DELAY_CAP_MS, 0.0, 1.0)
        if not samples:
            continue
        granted = prbs[:, u]
        row[2] = granted.mean() / net.num_rbs
        row[3] = np.clip(ul[:, u].mean() / SNR_CAP_DB, -1.0, 1.0)
        row[4] = np.clip(phr[:, u].mean() / PHR_CAP_DB, -1.0, 1.0)
        row[5] = np.clip(_nanmean(mcs[:, u]) / MCS_CAP, 0.0, 1.0)
        row[6] = np.clip(_nanmean(err[:, u]), 0.0, 1.0)
        row[7] = np.clip(tbs[:, u].mean() / net.num_rb_groups, 0.0, 1.0)
        row[8] = granted[granted > 0].mean() / net.num_rbs if np.any(granted > 0) else 0.0
    return SlotObservation(features=features)


class RanEnvironment:
    """Multi-cell DU simulator driven slot by slot by a RIC-side policy provider"""

    def __init__(self, cfg: Mapping, seed: Optional[int] = None, scheduler_mode: str = "soft"):
        self.cfg = cfg
        self.net = NetworkConfig.from_dict(cfg["network"])
        self.seed = self.net.rng_seed if seed is None else seed
        self.scheduler_mode = scheduler_mode
        self.reset()

    # -- setup -------------------------------------------------------------

    def reset(self) -> SlotObservation:
        cfg, net = self.cfg, self.net
        channel_seq, bler_seq = np.random.SeedSequence(self.seed).spawn(2)
        self.channel_rng = np.random.default_rng(channel_seq)
        self.bler_rng = np.random.default_rng(bler_seq)

        self.table = load_mcs_table(cfg["radio"])
        self.bler_slope = float(cfg["radio"]["bler_slope"])
        self.channel, self.ue_positions, self.cell_positions = make_scenario(cfg, self.channel_rng, net)
        duration_s = cfg["run"]["slots"] * net.slot_ms / 1000.0
        self.profiles = build_profiles(cfg, self.ue_positions, duration_s)
        packet = int(cfg["traffic"]["packet_size_bytes"])
        self.packet_size = packet
        self.traffic = [TrafficSource.from_profile(p, packet) for p in self.profiles]
        self.queues = [UEQueue() for _ in self.profiles]
        sched = cfg["scheduler"]
        self.schedulers = [
            MacScheduler(k, n, net.num_rbs, net.num_rb_groups, int(sched["ema_horizon"]),
                         float(sched["avg_tp_floor_bps"]), net.subframe_ms / 1000.0,
                         sched["weight_mode"], self.table)
            for k, n in enumerate(net.ues_per_cell)
        ]
        self.link = E2Link(float(cfg["env"]["e2_latency_ms"]))
        self.policy = PreferencePolicy.neutral(net)

        env_cfg = cfg["env"]
        self.kpm_period = max(1000 // int(env_cfg["kpm_samples_per_s"]) // net.subframe_ms, 1)
        self.disconnect_bler = float(env_cfg["disconnect_bler"])
        self.disconnect_tp_fraction = float(env_cfg["disconnect_tp_fraction"])
        self.disconnect_slots = int(env_cfg["disconnect_slots"])
        self.reconnect_slots = int(env_cfg["reconnect_slots"])
        self.ue_pcmax_dbm = float(cfg["radio"]["ue_pcmax_dbm"])
        self.p0_dbm = float(cfg["radio"]["p0_dbm"])

        n = len(self.profiles)
        self.ue_cell = np.repeat(np.arange(net.num_cells), net.ues_per_cell)
        self.cell_offset = np.concatenate([[0], np.cumsum(net.ues_per_cell)[:-1]]).astype(int)
        no_interference = np.zeros((net.num_cells, net.num_rb_groups), dtype=bool)
        self.reported_sinr, _ = sinr_matrix_db(self.channel, no_interference)
        self.reported_cqi = self.table.cqi_from_sinr(self.reported_sinr)

        self.bytes_in = np.zeros(n, dtype=np.int64)
        self.bytes_delivered = np.zeros(n, dtype=np.int64)
        self.bytes_dropped = np.zeros(n, dtype=np.int64)
        self.bad_streak = np.zeros(n, dtype=int)
        self.disconnected_until = np.full(n, -1, dtype=int)
        self.now_ms = 0
        self.slot = 0
        self.trace_rows = []
        self._start_slot_buffers()
        return SlotObservation(features=np.zeros((net.num_cells, net.max_ues, NUM_FEATURES)))

    def _start_slot_buffers(self):
        n = len(self.profiles)
        self._samples = []
        self._slot_bits = np.zeros(n, dtype=np.int64)
        self._slot_delays = [[] for _ in range(n)]
        self._slot_segments = np.zeros(n, dtype=int)
        self._slot_failed = np.zeros(n, dtype=int)
        self._slot_prbs = np.zeros(n, dtype=np.int64)
        self._slot_sinr = np.zeros(n)

    # -- properties --------------------------------------------------------

    @property
    def observation_dim(self) -> int:
        return self.net.num_cells * self.net.max_ues * NUM_FEATURES

    @property
    def action_dim(self) -> int:
        return self.net.action_dim

    def is_disconnected(self, u: int) -> bool:
        return self.disconnected_until[u] > self.slot

    def conservation_ok(self) -> bool:
        queued = np.array([q.bytes_queued for q in self.queues])
        return bool(np.array_equal(self.bytes_in, self.bytes_delivered + queued + self.bytes_dropped))

    # -- subframe ----------------------------------------------------------

    def step_subframe(self) -> SubframeRecord:
        net, t = self.net, self.now_ms
        n = len(self.profiles)

        for u, src in enumerate(self.traffic):
            count = src.arrivals(t, net.subframe_ms)
            if count:
                self.queues[u].push_packets(count, t, self.packet_size)
                self.bytes_in[u] += count * self.packet_size

        delivered = self.link.deliver(t)
        if delivered is not None:
            self.policy = delivered

        transmitting = np.zeros((net.num_cells, net.num_rb_groups), dtype=bool)
        allocations = []
        for k, scheduler in enumerate(self.schedulers):
            views = []
            for i in range(net.ues_per_cell[k]):
                u = self.cell_offset[k] + i
                backlog = 0 if self.is_disconnected(u) else self.queues[u].bytes_queued * 8
                views.append(UEView(i, self.reported_cqi[u], backlog, self.queues[u].retx_pending()))
            alloc = scheduler.allocate(views, self.policy, self.scheduler_mode)
            transmitting[k] = alloc.groups_in_use(net.num_rb_groups)
            allocations.append(alloc)

        sinr, rise = sinr_matrix_db(self.channel, transmitting)
        delivered_bits = np.zeros(n, dtype=np.int64)
        segments = np.zeros(n, dtype=int)
        failed_segments = np.zeros(n, dtype=int)
        mcs_sum = np.zeros(n)
        done_ms = t + net.subframe_ms
        for k, alloc in enumerate(allocations):
            failed = {}
            for seg in alloc.segments:
                u = self.cell_offset[k] + seg.ue_id
                mcs = self.table.mcs_of(seg.cqi)
                p_err = bler(sinr[u, seg.group], mcs, self.bler_slope, self.table)
                ok = self.bler_rng.random() >= p_err
                pieces = self.queues[u].take(seg.bits // 8)
                segments[u] += 1
                mcs_sum[u] += mcs
                if ok:
                    for arrival, size, _, tail in pieces:
                        delivered_bits[u] += size * 8
                        self.bytes_delivered[u] += size
                        if tail:
                            self._slot_delays[u].append(done_ms - arrival)
                else:
                    failed_segments[u] += 1
                    failed.setdefault(u, []).extend(pieces)
            for u, pieces in failed.items():
                retry = [(a, s, r + 1, tl) for a, s, r, tl in pieces if r == 0]
                self.bytes_dropped[u] += sum(s for _, s, r, _ in pieces if r > 0)
                self.queues[u].push_front(retry)

        self.reported_sinr = sinr
        self.reported_cqi = self.table.cqi_from_sinr(sinr)

        prbs = np.zeros(n, dtype=int)
        for k, alloc in enumerate(allocations):
            prbs[self.cell_offset[k]:self.cell_offset[k] + len(alloc.scheduled_rbs)] = alloc.scheduled_rbs

        sample = None
        if t % self.kpm_period == 0:
            ues = np.arange(n)
            wideband = sinr.mean(axis=1)
            serving_loss = self.channel.pathloss_db[self.ue_cell, ues] + self.channel.shadowing_db[self.ue_cell, ues]
            ul_snr = wideband + (self.ue_pcmax_dbm - self.channel.tx_power_dbm[self.ue_cell])
            phr = np.clip(self.ue_pcmax_dbm - (self.p0_dbm + serving_loss + rise.mean(axis=1)), PHR_MIN_DB, PHR_CAP_DB)
            with np.errstate(invalid="ignore", divide="ignore"):
                sample = KpmSample(
                    prbs=prbs,
                    mcs=np.where(segments > 0, mcs_sum / np.maximum(segments, 1), np.nan),
                    tbs=segments.copy(),
                    ul_snr_db=ul_snr,
                    phr_db=phr,
                    bler=np.where(segments > 0, failed_segments / np.maximum(segments, 1), np.nan),
                )
            self._samples.append(sample)

        self._slot_bits += delivered_bits
        self._slot_segments += segments
        self._slot_failed += failed_segments
        self._slot_prbs += prbs
        self._slot_sinr += sinr.mean(axis=1)

        self.now_ms = done_ms
        slot_end = self.now_ms % net.slot_ms == 0
        self.channel = evolve_channel(self.channel, self.channel_rng, shadow_step=slot_end)
        return SubframeRecord(t, allocations, sinr, delivered_bits, segments, failed_segments, sample)

    # -- slot --------------------------------------------------------------

    def _as_policy(self, action: Union[PreferencePolicy, np.ndarray]) -> PreferencePolicy:
        if isinstance(action, PreferencePolicy):
            expected = (self.net.num_cells, self.net.max_ues, self.net.num_rb_groups)
            if action.values.shape != expected:
                raise ShapeError(f"policy shape {action.values.shape} does not match {expected}")
            return action
        return PreferencePolicy.from_vector(action, self.net)

    def step_slot(self, action: Union[PreferencePolicy, np.ndarray], extra_delay_ms: float = 0.0):
        """Submit the action over E2, run one slot of subframes and report (observation, reward)"""
        net = self.net
        policy = self._as_policy(action)
        slot_start_ms = self.now_ms
        self.link.submit(policy, slot_start_ms, extra_delay_ms)
        self._start_slot_buffers()
        for _ in range(net.subframes_per_slot):
            self.step_subframe()

        slot_s = net.slot_ms / 1000.0
        n = len(self.profiles)
        tp = self._slot_bits / slot_s
        delay = np.zeros(n)
        for u in range(n):
            if self._slot_delays[u]:
                delay[u] = float(np.mean(self._slot_delays[u]))
            else:
                delay[u] = self.queues[u].head_age(self.now_ms)
        slot_bler = np.where(self._slot_segments > 0, self._slot_failed / np.maximum(self._slot_segments, 1), 0.0)
        demands = np.array([src.rate_at(slot_start_ms) for src in self.traffic])
        self._update_disconnections(tp, slot_bler, demands)
        down = np.array([self.is_disconnected(u) for u in range(n)])
        tp = np.where(down, 0.0, tp)

        samples, active = {}, []
        for u, profile in enumerate(self.profiles):
            if demands[u] <= 0:
                continue
            active.append(replace(profile, tp_demand_bps=float(demands[u])))
            samples[(profile.cell_id, profile.ue_id)] = QoSSample(float(tp[u]), float(delay[u]))
        reward = compute_rewards(samples, active, net.lambda_p, net.lambda_d, net.num_cells)

        obs = build_observation(self._samples, tp, delay, net)
        obs.raw = {
            "tp_bps": tp, "delay_ms": delay, "bler": slot_bler,
            "prbs": self._slot_prbs / net.subframes_per_slot,
            "sinr_db": self._slot_sinr / net.subframes_per_slot,
            "disconnected": down, "active": demands > 0, "demand_bps": demands,
        }
        self._record_trace(obs, reward)
        if not self.conservation_ok():
            logger.error(f"❌ byte conservation broken at slot {self.slot}")
        self.slot += 1
        logger.debug(f"slot {self.slot} reward {reward.total:.4f}")
        return obs, reward

    def _update_disconnections(self, tp: np.ndarray, slot_bler: np.ndarray, demands: np.ndarray):
        for u in range(len(self.profiles)):
            if self.is_disconnected(u) or demands[u] <= 0:
                continue
            bad = slot_bler[u] > self.disconnect_bler and tp[u] < self.disconnect_tp_fraction * demands[u]
            self.bad_streak[u] = self.bad_streak[u] + 1 if bad else 0
            if self.bad_streak[u] >= self.disconnect_slots:
                self.disconnected_until[u] = self.slot + 1 + self.reconnect_slots
                self.bad_streak[u] = 0
                logger.warning(f"⚠️ UE {u} disconnected at slot {self.slot}")

    def _record_trace(self, obs: SlotObservation, reward):
        net, raw = self.net, obs.raw
        mcs = obs.features[:, :, 5] * MCS_CAP
        phr = obs.features[:, :, 4] * PHR_CAP_DB
        for u, profile in enumerate(self.profiles):
            k, i = profile.cell_id, profile.ue_id
            start, size = bwp_span(self.policy.values[k, i])
            self.trace_rows.append({
                "slot": self.slot,
                "time_ms": self.now_ms,
                "cell": k,
                "ue": i,
                "active": int(raw["active"][u]),
                "tp_bps": float(raw["tp_bps"][u]),
                "delay_ms": float(raw["delay_ms"][u]),
                "bler": float(raw["bler"][u]),
                "prbs": float(raw["prbs"][u]),
                "mcs": float(mcs[k, i]),
                "sinr_db": float(raw["sinr_db"][u]),
                "phr_db": float(phr[k, i]),
                "disconnected": int(raw["disconnected"][u]),
                "r_tp_cell": float(reward.r_tp[k]),
                "r_delay_cell": float(reward.r_delay[k]),
                "reward": float(reward.total),
                "bwp_start_group": start,
                "bwp_groups": size,
            })
