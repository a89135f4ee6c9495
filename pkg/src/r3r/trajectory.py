"""Sampled trajectories and the nominal -> candidate -> committed pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from r3r.dynamics import CCW, CW, DubinsParams, DubinsState, LoiterOrbit, make_loiter, orbit_state_at, wrap_angle, wrap_angles
from r3r.geometry import Ball, Point2, dist_ball_ball, orbit_extent

SPLICE_TOL = 1e-6
_GRID_SNAP = 1e-9


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SampledTrajectory:
    """Uniformly sampled prefix, optionally followed by an infinite loiter tail.

    ``states`` has one more row than ``controls``; row ``k`` is the state at
    ``t0 + k * dt`` and ``controls[k]`` the turn rate over the following step.
    Positions between samples are linearly interpolated.
    """

    t0: float
    dt: float
    states: np.ndarray
    controls: np.ndarray
    tail: Optional[LoiterOrbit] = None
    speed: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "states", _frozen(self.states).reshape(-1, 3))
        object.__setattr__(self, "controls", _frozen(self.controls).reshape(-1))
        if len(self.states) != len(self.controls) + 1:
            raise ValueError("states must have exactly one more row than controls")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.tail is not None:
            end = self.states[-1]
            tail_pos = self.tail.positions(np.array([self.prefix_end]))[0]
            if math.hypot(end[0] - tail_pos[0], end[1] - tail_pos[1]) > SPLICE_TOL:
                raise ValueError("orbit tail does not continue the sampled prefix")

    @property
    def n_steps(self) -> int:
        return len(self.controls)

    @property
    def prefix_end(self) -> float:
        return self.t0 + self.n_steps * self.dt

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]

    def _locate(self, times):
        times = np.atleast_1d(np.asarray(times, dtype=float))
        u = (times - self.t0) / self.dt
        if np.any(u < -_GRID_SNAP):
            raise ValueError("query time precedes trajectory start")
        n = self.n_steps
        in_prefix = u <= n + _GRID_SNAP
        if self.tail is None and not np.all(in_prefix):
            raise ValueError("query time beyond a finite trajectory")
        up = np.clip(u[in_prefix], 0.0, n)
        snapped = np.abs(up - np.round(up)) < _GRID_SNAP
        up = np.where(snapped, np.round(up), up)
        k = np.minimum(np.floor(up).astype(int), max(n - 1, 0))
        return times, in_prefix, k, up - k

    def positions_at(self, times) -> np.ndarray:
        """Vectorized position lookup; see :func:`sample_at` for the rules."""
        times, in_prefix, k, frac = self._locate(times)
        out = np.empty((len(times), 2))
        if self.n_steps == 0:
            out[in_prefix] = self.states[0, :2]
        else:
            p0 = self.states[k, :2]
            out[in_prefix] = p0 + (self.states[k + 1, :2] - p0) * frac[:, None]
        if not np.all(in_prefix):
            out[~in_prefix] = self.tail.positions(times[~in_prefix])
        return out

    def headings_at(self, times) -> np.ndarray:
        times, in_prefix, k, frac = self._locate(times)
        out = np.empty(len(times))
        if self.n_steps == 0:
            out[in_prefix] = self.states[0, 2]
        else:
            th0 = self.states[k, 2]
            out[in_prefix] = wrap_angles(th0 + wrap_angles(self.states[k + 1, 2] - th0) * frac)
        if not np.all(in_prefix):
            out[~in_prefix] = self.tail.headings(times[~in_prefix])
        return out


@dataclass(frozen=True)
class CandidateTrajectory:
    base: SampledTrajectory
    switch_time: float
    anchor: Point2
    anchor_time: float

    def __post_init__(self):
        if self.base.tail is None:
            raise ValueError("a candidate trajectory needs a backup (orbit) tail")

    @property
    def orbit(self) -> LoiterOrbit:
        return self.base.tail

    @property
    def entry_time(self) -> float:
        """Absolute time at which the backup orbit is entered."""
        return self.anchor_time + self.switch_time


@dataclass(frozen=True)
class ValidityCertificate:
    """Outcome of the four validity checks at commit time."""

    safe_set: bool
    backup_reach: bool
    plan_bound: bool
    neighbor_collision_free: bool
    neighbor_ids: tuple[int, ...]
    checked_at: float


@dataclass(frozen=True)
class CommittedTrajectory:
    base: SampledTrajectory
    switch_time: float
    anchor: Point2
    anchor_time: float
    committed_at: float
    owner: int
    validity_certificate: ValidityCertificate

    @classmethod
    def from_candidate(
        cls, cand: CandidateTrajectory, owner: int, committed_at: float, certificate: ValidityCertificate
    ) -> "CommittedTrajectory":
        return cls(
            base=cand.base,
            switch_time=cand.switch_time,
            anchor=cand.anchor,
            anchor_time=cand.anchor_time,
            committed_at=committed_at,
            owner=owner,
            validity_certificate=certificate,
        )

    @property
    def orbit(self) -> LoiterOrbit:
        return self.base.tail

    @property
    def entry_time(self) -> float:
        return self.anchor_time + self.switch_time

    def as_candidate(self) -> CandidateTrajectory:
        return CandidateTrajectory(self.base, self.switch_time, self.anchor, self.anchor_time)


TrajectoryLike = Union[SampledTrajectory, CandidateTrajectory, CommittedTrajectory]


def as_sampled(traj: TrajectoryLike) -> SampledTrajectory:
    return traj if isinstance(traj, SampledTrajectory) else traj.base


def sample_at(traj: TrajectoryLike, t: float) -> DubinsState:
    """State at time ``t``: lerp inside the prefix, analytic orbit beyond it."""
    tr = as_sampled(traj)
    u = (t - tr.t0) / tr.dt
    if u < -_GRID_SNAP:
        raise ValueError(f"t={t} precedes trajectory start {tr.t0}")
    n = tr.n_steps
    if u > n + _GRID_SNAP:
        if tr.tail is None:
            raise ValueError(f"t={t} is beyond the finite trajectory end {tr.prefix_end}")
        return orbit_state_at(tr.tail, t)
    ur = round(u)
    if abs(u - ur) < _GRID_SNAP:
        x, y, th = tr.states[min(int(ur), n)]
        return DubinsState(float(x), float(y), float(th))
    k = min(int(math.floor(u)), n - 1)
    frac = u - k
    (x0, y0, th0), (x1, y1, th1) = tr.states[k], tr.states[k + 1]
    dth = wrap_angle(th1 - th0)
    return DubinsState(x0 + (x1 - x0) * frac, y0 + (y1 - y0) * frac, th0 + dth * frac)


def control_at(traj: TrajectoryLike, t: float) -> float:
    tr = as_sampled(traj)
    u = (t - tr.t0) / tr.dt
    if u >= tr.n_steps - _GRID_SNAP:
        return tr.tail.omega if tr.tail is not None else (float(tr.controls[-1]) if tr.n_steps else 0.0)
    return float(tr.controls[max(int(math.floor(u + _GRID_SNAP)), 0)])


def controls_at(traj: TrajectoryLike, times: np.ndarray) -> np.ndarray:
    tr = as_sampled(traj)
    u = (np.asarray(times, dtype=float) - tr.t0) / tr.dt
    idx = np.floor(u + _GRID_SNAP).astype(int)
    tail_w = tr.tail.omega if tr.tail is not None else (float(tr.controls[-1]) if tr.n_steps else 0.0)
    out = np.full(len(u), tail_w)
    inside = idx < tr.n_steps
    out[inside] = tr.controls[np.maximum(idx[inside], 0)]
    return out


def headings_at(traj: TrajectoryLike, times: np.ndarray) -> np.ndarray:
    return as_sampled(traj).headings_at(times)


def _pick_loiter(state: DubinsState, params: DubinsParams, entry_time: float, anchor, r_plan, env) -> LoiterOrbit:
    best_key, best = None, None
    for rank, direction in enumerate((CCW, CW)):
        orbit = make_loiter(state, direction, params, entry_time)
        unsafe = env is not None and not env.in_safe_set(orbit.center, orbit.radius)
        extent = orbit_extent(orbit, anchor) if anchor is not None else 0.0
        over = max(0.0, extent - r_plan) if r_plan is not None else 0.0
        key = (unsafe, over, round(extent, 12), rank)
        if best_key is None or key < best_key:
            best_key, best = key, orbit
    return best


def compose_candidate(
    nominal: SampledTrajectory,
    switch_time: float,
    params: DubinsParams,
    r_plan: float | None = None,
    env=None,
) -> CandidateTrajectory:
    """Keep the nominal up to ``switch_time`` (relative to its start), then loiter.

    The loiter direction is the one whose orbit stays inside the safe set and
    reaches least far from the anchor; ties go counterclockwise.
    """
    horizon = nominal.n_steps * nominal.dt
    if not (-_GRID_SNAP <= switch_time <= horizon + _GRID_SNAP):
        raise ValueError(f"switch_time {switch_time} outside [0, {horizon}]")
    k = int(round(switch_time / nominal.dt))
    if abs(k * nominal.dt - switch_time) > 1e-6:
        raise ValueError("switch_time must fall on the nominal's sample grid")
    x, y, th = nominal.states[k]
    entry = DubinsState(float(x), float(y), float(th))
    anchor = Point2(float(nominal.states[0, 0]), float(nominal.states[0, 1]))
    entry_time = nominal.t0 + k * nominal.dt
    orbit = _pick_loiter(entry, params, entry_time, anchor, r_plan, env)
    base = SampledTrajectory(
        t0=nominal.t0,
        dt=nominal.dt,
        states=nominal.states[: k + 1],
        controls=nominal.controls[:k],
        tail=orbit,
        speed=params.v,
    )
    return CandidateTrajectory(base=base, switch_time=k * nominal.dt, anchor=anchor, anchor_time=nominal.t0)


def loiter_only(state: DubinsState, t: float, params: DubinsParams, dt: float, r_plan=None, env=None) -> CandidateTrajectory:
    """Candidate that enters a loiter immediately from ``state``."""
    nominal = SampledTrajectory(t0=t, dt=dt, states=[state.as_array()], controls=[], speed=params.v)
    return compose_candidate(nominal, 0.0, params, r_plan=r_plan, env=env)


def common_period(a: LoiterOrbit, b: LoiterOrbit, cap: int = 8) -> Optional[float]:
    """Shortest time after which both orbits repeat jointly, or None past ``cap`` laps."""
    return joint_period(a.period, b.period, cap)


def joint_period(pa: float, pb: float, cap: int = 8) -> Optional[float]:
    for m in range(1, cap + 1):
        for n in range(1, cap + 1):
            if abs(m * pa - n * pb) <= 1e-9 * max(pa, pb):
                return m * pa
    return None


def separation_witness(a: TrajectoryLike, b: TrajectoryLike, from_t: float, grid_dt: float) -> tuple[float, float]:
    """Conservative lower bound on the separation of two trajectories, and where it is attained.

    Returns ``(bound, t)``. See :func:`min_separation`.
    """
    ta, tb = as_sampled(a), as_sampled(b)
    if grid_dt <= 0:
        raise ValueError("grid_dt must be positive")
    if from_t < max(ta.t0, tb.t0) - 1e-9:
        raise ValueError("comparison window starts before one of the trajectories")
    both_tails = ta.tail is not None and tb.tail is not None
    period = None
    if both_tails:
        window_end = max(ta.prefix_end, tb.prefix_end, from_t)
        period = common_period(ta.tail, tb.tail)
        sample_end = window_end + (period or 0.0)
    else:
        finite_ends = [t.prefix_end for t in (ta, tb) if t.tail is None]
        window_end = sample_end = min(finite_ends)
        if sample_end < from_t:
            raise ValueError("trajectories share no comparison window")
    m = int(math.ceil((sample_end - from_t) / grid_dt - 1e-9)) + 1
    times = from_t + grid_dt * np.arange(m)
    if not both_tails:
        times[-1] = min(times[-1], sample_end)
    d = np.hypot(*(ta.positions_at(times) - tb.positions_at(times)).T)
    margin = 0.5 * (ta.speed + tb.speed) * grid_dt
    first_tail = int(np.searchsorted(times, window_end - 1e-12))
    best, best_t = math.inf, window_end
    if window_end > from_t or not both_tails:
        # the sample just past the window also bounds the gap before it
        head = d[: min(first_tail + 1, m)]
        i_head = int(np.argmin(head))
        best, best_t = head[i_head] - margin, times[i_head]
    if both_tails:
        ball = dist_ball_ball(Ball(ta.tail.center, ta.tail.radius), Ball(tb.tail.center, tb.tail.radius))
        tail_lb, tail_t = ball, window_end
        if period is not None and first_tail < m:
            # the witness is the closest sampled approach whichever bound wins
            i_tail = first_tail + int(np.argmin(d[first_tail:]))
            tail_lb, tail_t = max(tail_lb, d[i_tail] - margin), times[i_tail]
        if tail_lb < best:
            best, best_t = tail_lb, tail_t
    return max(0.0, float(best)), float(best_t)


def min_separation(a: TrajectoryLike, b: TrajectoryLike, from_t: float, grid_dt: float) -> float:
    """Lower bound on ``min_t |p_a(t) - p_b(t)|`` for ``t >= from_t``.

    Both trajectories are sampled on a common grid and the sampled minimum is
    reduced by the largest inter-sample drift ``(v_a + v_b) * grid_dt / 2``.
    When both end in orbits, the joint motion is periodic once both prefixes
    are over, so one common period is sampled; the distance between the orbit
    discs is always a valid bound and is used when no common period exists.
    """
    return separation_witness(a, b, from_t, grid_dt)[0]


def trace_rows(traj: TrajectoryLike, times: np.ndarray) -> np.ndarray:
    """``t x y theta omega`` rows of a trajectory at the given times."""
    times = np.asarray(times, dtype=float)
    pos = as_sampled(traj).positions_at(times)
    return np.column_stack([times, pos, headings_at(traj, times), controls_at(traj, times)])


def write_trace(path: Union[str, Path], rows: np.ndarray) -> None:
    rows = np.asarray(rows, dtype=float).reshape(-1, 5)
    with open(path, "w") as fh:
        for r in rows:
            fh.write(f"{r[0]:.6f} {r[1]:.6f} {r[2]:.6f} {r[3]:.6f} {r[4]:.6f}\n")


def read_trace(path: Union[str, Path]) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            rows.append([float(p) for p in parts])
    return np.array(rows, dtype=float).reshape(-1, 5)
