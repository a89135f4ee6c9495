"""Dubins vehicle model, propagation and the loiter backup controller."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from r3r.geometry import Point2

TWO_PI = 2.0 * math.pi
CCW = 1
CW = -1


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.remainder(a, TWO_PI)
    return math.pi if w == -math.pi else w


def wrap_angles(a: np.ndarray) -> np.ndarray:
    w = np.remainder(a + math.pi, TWO_PI) - math.pi
    return np.where(w == -math.pi, math.pi, w)


@dataclass(frozen=True)
class DubinsState:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.theta)):
            raise ValueError(f"non-finite state {self}")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def position(self) -> Point2:
        return Point2(self.x, self.y)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])


@dataclass(frozen=True)
class DubinsParams:
    v: float = 1.0
    omega_max: float = 1.0

    def __post_init__(self):
        if not (self.v > 0 and self.omega_max > 0):
            raise ValueError("v and omega_max must be positive")

    @property
    def turn_radius(self) -> float:
        return self.v / self.omega_max


@dataclass(frozen=True)
class LoiterOrbit:
    """A circle traversed at constant speed by the backup controller.

    ``direction`` is +1 for counterclockwise (omega = +omega_max) and -1 for
    clockwise. ``phase_at_entry`` is the polar angle of the entry position
    about ``center``.
    """

    center: Point2
    radius: float
    direction: int
    phase_at_entry: float
    entry_time: float
    speed: float

    @property
    def angular_rate(self) -> float:
        return self.direction * self.speed / self.radius

    @property
    def period(self) -> float:
        return TWO_PI * self.radius / self.speed

    @property
    def omega(self) -> float:
        """Control input held on the orbit."""
        return self.angular_rate

    def positions(self, times: np.ndarray) -> np.ndarray:
        phi = self.phase_at_entry + self.angular_rate * (np.asarray(times, dtype=float) - self.entry_time)
        return np.stack(
            [self.center.x + self.radius * np.cos(phi), self.center.y + self.radius * np.sin(phi)], axis=-1
        )

    def headings(self, times: np.ndarray) -> np.ndarray:
        phi = self.phase_at_entry + self.angular_rate * (np.asarray(times, dtype=float) - self.entry_time)
        return wrap_angles(phi + self.direction * math.pi / 2.0)


def dubins_derivative(s: DubinsState, omega: float, p: DubinsParams) -> tuple[float, float, float]:
    if abs(omega) > p.omega_max:
        raise ValueError(f"|omega|={abs(omega)} exceeds omega_max={p.omega_max}")
    return (p.v * math.cos(s.theta), p.v * math.sin(s.theta), omega)


def arc_step(x: float, y: float, theta: float, v: float, omega: float, tau: float) -> tuple[float, float, float]:
    """Exact end pose after holding ``omega`` for ``tau`` seconds (unwrapped heading)."""
    dth = omega * tau
    if abs(dth) < 1e-9:
        # second-order expansion; exact to ~1e-18 at these magnitudes
        mid = theta + 0.5 * dth
        return x + v * tau * math.cos(mid), y + v * tau * math.sin(mid), theta + dth
    r = v / omega
    th1 = theta + dth
    return x + r * (math.sin(th1) - math.sin(theta)), y - r * (math.cos(th1) - math.cos(theta)), th1


def rk4_step(x: float, y: float, theta: float, v: float, omega: float, h: float) -> tuple[float, float, float]:
    """Classic fourth-order Runge-Kutta step of the Dubins dynamics."""

    def f(th):
        return v * math.cos(th), v * math.sin(th)

    k1 = f(theta)
    k2 = f(theta + 0.5 * h * omega)
    k3 = k2  # heading evolves independently of position
    k4 = f(theta + h * omega)
    nx = x + h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    ny = y + h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    return nx, ny, theta + h * omega


Schedule = Union[float, Sequence[tuple[float, float]]]


def _normalize_schedule(control: Schedule) -> list[tuple[float, float]]:
    if isinstance(control, (int, float)):
        return [(float(control), math.inf)]
    segs = [(float(w), float(d)) for w, d in control]
    if not segs:
        return [(0.0, math.inf)]
    # hold the last input past the end of the schedule
    segs[-1] = (segs[-1][0], math.inf)
    return segs


def propagate(
    s: DubinsState,
    control: Schedule,
    dt: float,
    horizon: float,
    p: DubinsParams,
    t0: float = 0.0,
):
    """Integrate a piecewise-constant turn-rate schedule, sampled every ``dt``.

    ``control`` is either a constant omega or a list of ``(omega, duration)``
    segments. Segments are integrated in closed form, including boundaries
    falling inside a step. The stored per-step control is the mean turn rate
    over that step. A horizon that is not a multiple of ``dt`` is covered with
    the largest uniform step below ``dt``.
    """
    from r3r.trajectory import SampledTrajectory

    if dt <= 0 or horizon < 0:
        raise ValueError("need dt > 0 and horizon >= 0")
    segs = _normalize_schedule(control)
    for w, _ in segs:
        if abs(w) > p.omega_max + 1e-12:
            raise ValueError(f"schedule omega {w} exceeds omega_max={p.omega_max}")
    n = int(round(horizon / dt))
    if abs(n * dt - horizon) > 1e-9 * max(1.0, horizon):
        # keep the grid uniform: shrink the step so it divides the horizon
        n = int(math.ceil(horizon / dt))
        dt = horizon / n
    states = np.empty((n + 1, 3))
    controls = np.empty(n)
    x, y, th = s.x, s.y, s.theta
    states[0] = (x, y, th)
    seg_i, seg_left = 0, segs[0][1]
    for k in range(n):
        th_start = th
        remaining = dt
        while remaining > 1e-15:
            w = segs[seg_i][0]
            tau = min(remaining, seg_left)
            x, y, th = arc_step(x, y, th, p.v, w, tau)
            remaining -= tau
            seg_left -= tau
            if seg_left <= 1e-15 and seg_i + 1 < len(segs):
                seg_i += 1
                seg_left = segs[seg_i][1]
        controls[k] = (th - th_start) / dt
        states[k + 1] = (x, y, th)
    states[:, 2] = wrap_angles(states[:, 2])
    return SampledTrajectory(t0=t0, dt=dt, states=states, controls=controls, tail=None, speed=p.v)


def loiter_center(x: float, y: float, theta: float, radius: float, direction: int) -> tuple[float, float]:
    return x - direction * radius * math.sin(theta), y + direction * radius * math.cos(theta)


def make_loiter(entry: DubinsState, direction: int, p: DubinsParams, entry_time: float) -> LoiterOrbit:
    """Tightest loiter circle tangent to the entry heading."""
    if direction not in (CCW, CW):
        raise ValueError("direction must be +1 (ccw) or -1 (cw)")
    radius = p.turn_radius
    cx, cy = loiter_center(entry.x, entry.y, entry.theta, radius, direction)
    phase = math.atan2(entry.y - cy, entry.x - cx)
    return LoiterOrbit(
        center=Point2(cx, cy),
        radius=radius,
        direction=direction,
        phase_at_entry=phase,
        entry_time=entry_time,
        speed=p.v,
    )


def orbit_state_at(orbit: LoiterOrbit, t: float, p: DubinsParams | None = None) -> DubinsState:
    if t < orbit.entry_time:
        raise ValueError(f"t={t} precedes orbit entry at {orbit.entry_time}")
    phi = orbit.phase_at_entry + orbit.angular_rate * (t - orbit.entry_time)
    return DubinsState(
        orbit.center.x + orbit.radius * math.cos(phi),
        orbit.center.y + orbit.radius * math.sin(phi),
        phi + orbit.direction * math.pi / 2.0,
    )
