"""Gatekeeper certification: candidate validity and the switch-time search."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from r3r.dynamics import DubinsParams
from r3r.geometry import Ball, Point2, R3RParams, arc_bulge, dist_ball_ball, first_unbounded_index, orbit_extent
from r3r.planner import NominalResult, PlannerConfig, plan_nominal
from r3r.trajectory import (
    SPLICE_TOL,
    CandidateTrajectory,
    CommittedTrajectory,
    ValidityCertificate,
    as_sampled,
    common_period,
    joint_period,
    compose_candidate,
)


class Condition(str, Enum):
    SAFE_SET = "SafeSet"
    BACKUP_REACH = "BackupReach"
    PLAN_BOUND = "PlanBound"
    NEIGHBOR_COLLISION = "NeighborCollision"


@dataclass(frozen=True)
class Witness:
    time: float
    position: Point2
    neighbor: Optional[int] = None


@dataclass(frozen=True)
class ValidityReport:
    valid: bool
    failed_condition: Optional[Condition] = None
    witness: Optional[Witness] = None

    def __post_init__(self):
        if self.valid != (self.failed_condition is None):
            raise ValueError("a report is valid exactly when no condition failed")


VALID = ValidityReport(True)


@dataclass(frozen=True)
class GatekeeperConfig:
    horizon: float = 4.0
    switch_grid: int = 21
    check_dt: float = 0.05
    margin: Optional[float] = None  # None -> v * check_dt

    def __post_init__(self):
        if self.switch_grid < 2:
            raise ValueError("switch_grid must include both T_S = T_H and T_S = 0")
        if not (self.horizon > 0 and self.check_dt > 0):
            raise ValueError("horizon and check_dt must be positive")

    def safe_margin(self, v: float) -> float:
        return v * self.check_dt if self.margin is None else self.margin

    def switch_times(self) -> np.ndarray:
        """Switch times tried by the search, largest first."""
        return np.linspace(self.horizon, 0.0, self.switch_grid)


class _NeighborGrid:
    """Neighbor commits sampled once on the grid shared by every candidate at ``t_k``."""

    def __init__(self, commits: Sequence[CommittedTrajectory], t_k: float, cfg: GatekeeperConfig, cand_period: float):
        self.commits = sorted(commits, key=lambda c: c.owner)
        self.t_k = t_k
        self.h = cfg.check_dt
        self.cand_period = cand_period
        ends = []
        for c in self.commits:
            tr = as_sampled(c)
            if tr.tail is None:
                raise ValueError("committed trajectories must end in a backup orbit")
            if tr.t0 > t_k + 1e-9:
                raise ValueError("neighbor commit starts after the certification time")
            # long enough for any candidate whose orbit has period cand_period
            ends.append(max(tr.prefix_end, t_k + cfg.horizon) + (joint_period(cand_period, tr.tail.period) or 0.0))
        self.m = [int(math.ceil((e - t_k) / self.h)) + 2 for e in ends]
        self.m_total = max(self.m, default=1)
        self.times = t_k + self.h * np.arange(self.m_total)
        self.pos = [as_sampled(c).positions_at(self.times[:m]) for c, m in zip(self.commits, self.m)]


def _separation_lb(times, d, from_t, window_end, both_tails, period, ball, margin):
    """Lower bound on the separation from sampled distances; mirrors ``separation_witness``."""
    m = len(times)
    first_tail = int(np.searchsorted(times, window_end - 1e-12))
    best, best_t = math.inf, window_end
    if window_end > from_t or not both_tails:
        head = d[: min(first_tail + 1, m)]
        i = int(np.argmin(head))
        best, best_t = head[i] - margin, times[i]
    if both_tails:
        tail_lb, tail_t = ball, window_end
        if period is not None and first_tail < m:
            i = first_tail + int(np.argmin(d[first_tail:]))
            tail_lb, tail_t = max(tail_lb, d[i] - margin), times[i]
        if tail_lb < best:
            best, best_t = tail_lb, tail_t
    return max(0.0, float(best)), float(best_t)


def _check_static(cand: CandidateTrajectory, env, margin: float) -> Optional[ValidityReport]:
    if env is None:
        return None
    tr = cand.base
    ok = env.safe_mask(tr.positions, margin)
    if not ok.all():
        k = int(np.flatnonzero(~ok)[0])
        x, y = tr.positions[k]
        return ValidityReport(False, Condition.SAFE_SET, Witness(tr.t0 + k * tr.dt, Point2(float(x), float(y))))
    orbit = tr.tail
    if not env.in_safe_set(orbit.center, orbit.radius):
        return ValidityReport(False, Condition.SAFE_SET, Witness(tr.prefix_end, orbit.center))
    return None


def _check_backup(cand: CandidateTrajectory, dyn: DubinsParams) -> Optional[ValidityReport]:
    tr = cand.base
    orbit = tr.tail
    end = tr.states[-1]
    witness = Witness(tr.prefix_end, Point2(float(end[0]), float(end[1])))
    if abs(orbit.radius - dyn.turn_radius) > 1e-9 or abs(orbit.speed - dyn.v) > 1e-12:
        return ValidityReport(False, Condition.BACKUP_REACH, witness)
    on = orbit.positions(np.array([tr.prefix_end]))[0]
    heading = orbit.headings(np.array([tr.prefix_end]))[0]
    dth = math.remainder(heading - end[2], 2 * math.pi)
    if math.hypot(on[0] - end[0], on[1] - end[1]) > SPLICE_TOL or abs(dth) > 1e-6:
        return ValidityReport(False, Condition.BACKUP_REACH, witness)
    if abs(tr.prefix_end - cand.entry_time) > 1e-9:
        return ValidityReport(False, Condition.BACKUP_REACH, witness)
    return None


def _check_plan_bound(cand: CandidateTrajectory, r_plan: float) -> Optional[ValidityReport]:
    tr = cand.base
    a = cand.anchor
    if math.hypot(tr.states[0, 0] - a.x, tr.states[0, 1] - a.y) > 1e-9 or abs(tr.t0 - cand.anchor_time) > 1e-12:
        return ValidityReport(False, Condition.PLAN_BOUND, Witness(tr.t0, Point2(*tr.states[0, :2])))
    # samples keep clear of the boundary by the bulge of one turning step
    bulge = arc_bulge(tr.speed * tr.dt, tr.tail.radius) if tr.n_steps else 0.0
    k = first_unbounded_index(tr.positions, a, r_plan - bulge)
    if k >= 0:
        x, y = tr.positions[k]
        return ValidityReport(False, Condition.PLAN_BOUND, Witness(tr.t0 + k * tr.dt, Point2(float(x), float(y))))
    if orbit_extent(tr.tail, a) > r_plan:
        # first orbit point past the bound, found on a fine phase grid
        ts = tr.prefix_end + tr.tail.period * np.arange(1441) / 1440
        pos = tr.tail.positions(ts)
        over = np.flatnonzero(np.hypot(pos[:, 0] - a.x, pos[:, 1] - a.y) > r_plan)
        k = int(over[0]) if len(over) else 0
        x, y = pos[k]
        return ValidityReport(False, Condition.PLAN_BOUND, Witness(float(ts[k]), Point2(float(x), float(y))))
    return None


def _check_neighbors(cand: CandidateTrajectory, grid: _NeighborGrid, delta: float) -> Optional[ValidityReport]:
    if not grid.commits:
        return None
    tr = cand.base
    if abs(tr.tail.period - grid.cand_period) > 1e-12:
        raise ValueError("candidate orbit period differs from the one the grid was sized for")
    t_k = grid.t_k
    needs = []
    for c in grid.commits:
        nt = as_sampled(c)
        window_end = max(tr.prefix_end, nt.prefix_end, t_k)
        period = common_period(tr.tail, nt.tail)
        m = int(math.ceil((window_end + (period or 0.0) - t_k) / grid.h - 1e-9)) + 1
        needs.append((nt, window_end, period, m))
    cand_pos = tr.positions_at(grid.times[: max(n[3] for n in needs)])
    for c, npos, (nt, window_end, period, m) in zip(grid.commits, grid.pos, needs):
        if m > len(npos):
            raise RuntimeError("neighbor grid too short for the comparison window")
        d = np.hypot(cand_pos[:m, 0] - npos[:m, 0], cand_pos[:m, 1] - npos[:m, 1])
        ball = dist_ball_ball(Ball(tr.tail.center, tr.tail.radius), Ball(nt.tail.center, nt.tail.radius))
        margin = 0.5 * (tr.speed + nt.speed) * grid.h
        lb, t_w = _separation_lb(grid.times[:m], d, t_k, window_end, True, period, ball, margin)
        if lb < delta:
            p = tr.positions_at(np.array([t_w]))[0]
            return ValidityReport(
                False, Condition.NEIGHBOR_COLLISION, Witness(t_w, Point2(float(p[0]), float(p[1])), c.owner)
            )
    return None


def _is_valid(cand, grid, env, params: R3RParams, cfg: GatekeeperConfig, dyn: DubinsParams) -> ValidityReport:
    margin = cfg.safe_margin(dyn.v)
    for check in (
        lambda: _check_static(cand, env, margin),
        lambda: _check_backup(cand, dyn),
        lambda: _check_plan_bound(cand, params.r_plan),
        lambda: _check_neighbors(cand, grid, params.delta),
    ):
        report = check()
        if report is not None:
            return report
    return VALID


def is_valid(
    cand: CandidateTrajectory,
    neighbor_commits: Sequence[CommittedTrajectory],
    env,
    params: R3RParams,
    cfg: GatekeeperConfig,
    dyn: DubinsParams = DubinsParams(),
) -> ValidityReport:
    """Run the four validity checks in order and report the first failure.

    1. every prefix sample keeps ``margin`` from unsafe space and the orbit
       disc lies in the safe set;
    2. the prefix ends exactly on the backup orbit (tight loiter circle);
    3. every prefix sample and the whole orbit stay within ``r_plan`` of the
       anchor;
    4. the separation bound to every neighbor commit, over all future time,
       is at least ``delta``.

    Only the commits passed in are consulted.
    """
    if cand.base.n_steps * cand.base.dt > cfg.horizon + 1e-9:
        raise ValueError("candidate prefix is longer than the planning horizon")
    grid = _NeighborGrid(neighbor_commits, cand.anchor_time, cfg, cand.orbit.period)
    return _is_valid(cand, grid, env, params, cfg, dyn)


def certificate_for(report: ValidityReport, neighbor_commits, t: float) -> ValidityCertificate:
    failed = report.failed_condition
    return ValidityCertificate(
        safe_set=failed != Condition.SAFE_SET,
        backup_reach=failed not in (Condition.SAFE_SET, Condition.BACKUP_REACH),
        plan_bound=failed not in (Condition.SAFE_SET, Condition.BACKUP_REACH, Condition.PLAN_BOUND),
        neighbor_collision_free=report.valid,
        neighbor_ids=tuple(sorted(c.owner for c in neighbor_commits)),
        checked_at=t,
    )


@dataclass(frozen=True, eq=False)
class ReplanResult:
    success: bool
    candidate: Optional[CandidateTrajectory]
    nominal: Optional[NominalResult] = None
    switch_time: Optional[float] = None
    tried: int = 0
    last_report: Optional[ValidityReport] = None

    def __iter__(self):
        # unpacks as (success, candidate)
        yield self.success
        yield self.candidate


def sweep_switch_times(
    nominal,
    neighbor_commits: Sequence[CommittedTrajectory],
    env,
    params: R3RParams,
    cfg: GatekeeperConfig,
    dyn: DubinsParams,
    stop_at_first: bool = True,
) -> list[tuple[float, CandidateTrajectory, ValidityReport]]:
    """Build and check candidates for every grid switch time, largest first."""
    grid = _NeighborGrid(neighbor_commits, nominal.t0, cfg, 2.0 * math.pi * dyn.turn_radius / dyn.v)
    out = []
    for ts in cfg.switch_times():
        cand = compose_candidate(nominal, float(ts), dyn, r_plan=params.r_plan, env=env)
        report = _is_valid(cand, grid, env, params, cfg, dyn)
        out.append((float(ts), cand, report))
        if report.valid and stop_at_first:
            break
    return out


def attempt_replan(
    agent,
    neighbor_commits: Sequence[CommittedTrajectory],
    env,
    params: R3RParams,
    cfg: GatekeeperConfig,
    planner_cfg: PlannerConfig,
    t: float,
    cost_to_go=None,
    nominal: Optional[NominalResult] = None,
) -> ReplanResult:
    """Plan one nominal from the agent's state and commit-search its switch times.

    Switch times are tried from ``T_H`` down to 0, so the first valid
    candidate has the largest valid switch time on the grid. Nothing is
    mutated; on failure the caller keeps its old commitment.
    """
    if abs(planner_cfg.horizon - cfg.horizon) > 1e-12:
        raise ValueError("planner and gatekeeper horizons differ")
    if nominal is None:
        nominal = plan_nominal(
            agent.state,
            agent.goal,
            env,
            neighbor_commits,
            planner_cfg,
            agent.dyn,
            params.delta,
            t_start=t,
            cost_to_go=cost_to_go,
        )
    results = sweep_switch_times(nominal.trajectory, neighbor_commits, env, params, cfg, agent.dyn)
    ts, cand, report = results[-1]
    if report.valid:
        return ReplanResult(True, cand, nominal, ts, len(results), report)
    return ReplanResult(False, None, nominal, None, len(results), report)
