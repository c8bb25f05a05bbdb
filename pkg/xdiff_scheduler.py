"""
xDiff MAC Scheduler
Per-DU subframe RB allocation: plain PF, preference-weighted PF and the hard-policy allocator
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from xdiff_core import PreferencePolicy, rb_groups
from xdiff_radio import DEFAULT_MCS_TABLE, RE_PER_RB, McsTable, rb_bits

logger = logging.getLogger(__name__)


@dataclass
class SchedulerState:
    avg_tp: np.ndarray
    ema_horizon: int = 100
    floor_bps: float = 1000.0
    subframe_s: float = 1e-3

    @classmethod
    def fresh(cls, num_ues: int, ema_horizon: int = 100, floor_bps: float = 1000.0,
              subframe_s: float = 1e-3) -> "SchedulerState":
        # new UEs start at the floor, i.e. highest priority
        return cls(np.full(num_ues, floor_bps), ema_horizon, floor_bps, subframe_s)

    def update(self, tb_bits: np.ndarray):
        a = 1.0 / self.ema_horizon
        self.avg_tp = np.maximum((1.0 - a) * self.avg_tp + a * np.asarray(tb_bits) / self.subframe_s,
                                 self.floor_bps)


@dataclass
class UEView:
    """What the DU knows about a UE when it schedules: reported CQI per group and its backlog"""
    ue_id: int
    cqi: np.ndarray
    backlog_bits: int
    retx_pending: bool = False


@dataclass
class Segment:
    """One transport block: a UE's RBs inside one group"""
    ue_id: int
    group: int
    rbs: int
    cqi: int
    bits: int


@dataclass
class Allocation:
    rb_owner: np.ndarray
    scheduled_rbs: np.ndarray
    tb_bits: np.ndarray
    segments: list = field(default_factory=list)

    def groups_in_use(self, num_groups: int) -> np.ndarray:
        used = np.zeros(num_groups, dtype=bool)
        for seg in self.segments:
            used[seg.group] = True
        return used


def pf_metric(inst_rate: float, avg_tp: float) -> float:
    return inst_rate / avg_tp


def _weight(row: np.ndarray, mode: str = "favorable") -> float:
    if mode == "literal":
        return float(np.count_nonzero(row < 0)) / row.size
    return float(np.count_nonzero(row >= 0)) / row.size


def preference_weight(policy: Union[PreferencePolicy, np.ndarray], cell: int, ue: int,
                      mode: str = "favorable") -> float:
    """Fraction of RB groups the policy marks as favorable for this UE"""
    values = policy.for_cell(cell) if isinstance(policy, PreferencePolicy) else np.asarray(policy)
    return _weight(values[ue], mode)


def weighted_pf_metric(inst_rate: float, avg_tp: float, w: float) -> float:
    return pf_metric(inst_rate, avg_tp) * w


def inst_rate(view: UEView, group_size: int, subframe_s: float = 1e-3,
              table: McsTable = DEFAULT_MCS_TABLE) -> float:
    """Rate predicted from the wideband CQI over one nominal RB group"""
    wideband = int(np.floor(np.mean(np.maximum(view.cqi, 1))))
    return rb_bits(wideband, group_size, table) / subframe_s


class _Grant:
    """Running grant of one UE while a subframe is being allocated"""

    def __init__(self, view: UEView, table: McsTable):
        self.view = view
        self.table = table
        self.rbs = {}       # group -> count
        self.bits = 0

    def covered(self) -> bool:
        return self.bits >= self.view.backlog_bits

    def cqi(self, group: int) -> int:
        # CQI 0 still gets the lowest MCS, the BLER draw decides the outcome
        return max(int(self.view.cqi[group]), 1)

    def rbs_needed(self, group: int) -> int:
        """RBs to add in group so that the backlog is covered"""
        cqi = self.cqi(group)
        have = self.rbs.get(group, 0)
        other = self.bits - rb_bits(cqi, have, self.table)
        missing = self.view.backlog_bits - other
        total = max(int(math.ceil(missing / (RE_PER_RB * self.table.efficiency(cqi)))), 0)
        while rb_bits(cqi, total, self.table) < missing:
            total += 1
        return max(total - have, 0)

    def add(self, group: int, count: int):
        cqi = self.cqi(group)
        have = self.rbs.get(group, 0)
        self.bits += rb_bits(cqi, have + count, self.table) - rb_bits(cqi, have, self.table)
        self.rbs[group] = have + count


class _RbPool:
    def __init__(self, num_rbs: int, num_groups: int):
        self.groups = rb_groups(num_rbs, num_groups)
        self.next_free = [0] * num_groups
        self.owner = np.full(num_rbs, -1, dtype=int)

    def free(self, group: int) -> int:
        return len(self.groups[group]) - self.next_free[group]

    def take(self, group: int, count: int, ue_id: int):
        start = self.next_free[group]
        self.owner[self.groups[group][start:start + count]] = ue_id
        self.next_free[group] = start + count


def _fill(grant: _Grant, group_order: Sequence[int], pool: _RbPool):
    for g in group_order:
        if grant.covered():
            return
        free = pool.free(g)
        if free == 0:
            continue
        count = min(free, grant.rbs_needed(g))
        if count > 0:
            pool.take(g, count, grant.view.ue_id)
            grant.add(g, count)


def _finish(views: Sequence[UEView], grants: dict, pool: _RbPool, state: SchedulerState,
            table: McsTable) -> Allocation:
    n = len(views)
    scheduled = np.zeros(n, dtype=int)
    tb = np.zeros(n, dtype=np.int64)
    segments = []
    for idx, view in enumerate(views):
        grant = grants.get(view.ue_id)
        if grant is None:
            continue
        for g in sorted(grant.rbs):
            count = grant.rbs[g]
            cqi = grant.cqi(g)
            segments.append(Segment(view.ue_id, g, count, cqi, rb_bits(cqi, count, table)))
        scheduled[idx] = sum(grant.rbs.values())
        tb[idx] = grant.bits
    state.update(tb)
    return Allocation(rb_owner=pool.owner, scheduled_rbs=scheduled, tb_bits=tb, segments=segments)


def _pf_order(views, state, group_size, table):
    metric = {v.ue_id: pf_metric(inst_rate(v, group_size, state.subframe_s, table), state.avg_tp[idx])
              for idx, v in enumerate(views)}
    return sorted((v for v in views if v.backlog_bits > 0),
                  key=lambda v: (not v.retx_pending, -metric[v.ue_id], v.ue_id))


def pf_allocate(ues: Sequence[UEView], state: SchedulerState, num_rbs: int = 106, num_groups: int = 10,
                table: McsTable = DEFAULT_MCS_TABLE) -> Allocation:
    """Plain PF: UEs by descending metric, RBs in index order until each backlog is covered"""
    pool = _RbPool(num_rbs, num_groups)
    grants = {}
    for view in _pf_order(ues, state, num_rbs // num_groups, table):
        grants[view.ue_id] = _Grant(view, table)
        _fill(grants[view.ue_id], range(num_groups), pool)
    return _finish(ues, grants, pool, state, table)


def allocate_subframe(cell: int, ues: Sequence[UEView], policy: Union[PreferencePolicy, np.ndarray],
                      state: SchedulerState, num_rbs: int = 106, table: McsTable = DEFAULT_MCS_TABLE,
                      weight_mode: str = "favorable") -> Allocation:
    """Preference-weighted PF allocation for one cell and one subframe.

    Priority: zero-weight UEs last, then retransmissions, then descending weighted metric, then
    ue_id. Pass 1 gives each UE its non-negative groups (best preference first); pass 2 hands
    out whatever is left, negative groups included, in the same UE order.
    """
    values = policy.for_cell(cell) if isinstance(policy, PreferencePolicy) else np.asarray(policy)
    num_groups = values.shape[1]
    group_size = num_rbs // num_groups
    pool = _RbPool(num_rbs, num_groups)

    ranked = []
    for idx, view in enumerate(ues):
        if view.backlog_bits <= 0:
            continue
        row = values[view.ue_id]
        w = _weight(row, weight_mode)
        metric = weighted_pf_metric(inst_rate(view, group_size, state.subframe_s, table), state.avg_tp[idx], w)
        ranked.append(((w == 0.0, not view.retx_pending, -metric, view.ue_id), view, row))
    ranked.sort(key=lambda item: item[0])

    grants = {}
    for _, view, row in ranked:
        grant = grants[view.ue_id] = _Grant(view, table)
        order = sorted(range(num_groups), key=lambda g: (-row[g], g))
        _fill(grant, [g for g in order if row[g] >= 0], pool)
    for _, view, row in ranked:
        grant = grants[view.ue_id]
        if not grant.covered():
            _fill(grant, sorted(range(num_groups), key=lambda g: (-row[g], g)), pool)
    return _finish(ues, grants, pool, state, table)


def hard_policy_allocate(cell: int, ues: Sequence[UEView], policy: Union[PreferencePolicy, np.ndarray],
                         state: SchedulerState, num_rbs: int = 106,
                         table: McsTable = DEFAULT_MCS_TABLE) -> Allocation:
    """Hard {-1,0,+1} policy: +1 groups first (conflicts go to the higher PF metric), 0 groups by
    plain PF, -1 groups never"""
    values = policy.for_cell(cell) if isinstance(policy, PreferencePolicy) else np.asarray(policy)
    values = np.clip(np.rint(values), -1, 1)
    num_groups = values.shape[1]
    pool = _RbPool(num_rbs, num_groups)
    order = _pf_order(ues, state, num_rbs // num_groups, table)

    grants = {}
    for view in order:
        grant = grants[view.ue_id] = _Grant(view, table)
        _fill(grant, [g for g in range(num_groups) if values[view.ue_id, g] == 1], pool)
    for view in order:
        grant = grants[view.ue_id]
        if not grant.covered():
            _fill(grant, [g for g in range(num_groups) if values[view.ue_id, g] == 0], pool)
    return _finish(ues, grants, pool, state, table)


class MacScheduler:
    """One DU's scheduler: keeps the PF history and dispatches on the policy mode"""

    def __init__(self, cell: int, num_ues: int, num_rbs: int = 106, num_groups: int = 10,
                 ema_horizon: int = 100, floor_bps: float = 1000.0, subframe_s: float = 1e-3,
                 weight_mode: str = "favorable", table: McsTable = DEFAULT_MCS_TABLE):
        self.cell = cell
        self.num_rbs = num_rbs
        self.num_groups = num_groups
        self.weight_mode = weight_mode
        self.table = table
        self.state = SchedulerState.fresh(num_ues, ema_horizon, floor_bps, subframe_s)

    def allocate(self, ues: Sequence[UEView], policy: PreferencePolicy, mode: str = "soft") -> Allocation:
        if mode == "hard":
            return hard_policy_allocate(self.cell, ues, policy, self.state, self.num_rbs, self.table)
        return allocate_subframe(self.cell, ues, policy, self.state, self.num_rbs, self.table, self.weight_mode)
