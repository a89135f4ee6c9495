"""Euclidean primitives, ball distances and the R3R radius relations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def __iter__(self):
        yield self.x
        yield self.y


@dataclass(frozen=True)
class Ball:
    center: Point2
    radius: float

    def __post_init__(self):
        if not self.radius >= 0.0:
            raise ValueError(f"ball radius must be >= 0, got {self.radius}")


@dataclass(frozen=True)
class R3RParams:
    """Collision radius, planning radius and communication radius of an agent.

    Build with :meth:`from_comm` to derive the planning radius from the
    communication radius; the direct constructor checks the relation
    ``r_comm = 3 * r_plan + delta``.
    """

    delta: float
    r_plan: float
    r_comm: float = field(default=float("nan"))

    def __post_init__(self):
        if math.isnan(self.r_comm):
            object.__setattr__(self, "r_comm", 3.0 * self.r_plan + self.delta)
        if not (self.delta > 0 and self.r_plan > 0 and self.r_comm > 0):
            raise ValueError("delta, r_plan and r_comm must all be positive")
        if not self.delta < self.r_plan:
            raise ValueError(f"delta={self.delta} must be smaller than r_plan={self.r_plan}")
        if not math.isclose(self.r_comm, 3.0 * self.r_plan + self.delta, rel_tol=1e-12, abs_tol=1e-12):
            raise ValueError(
                f"r_comm={self.r_comm} violates r_comm = 3*r_plan + delta "
                f"(= {3.0 * self.r_plan + self.delta})"
            )

    @classmethod
    def from_comm(cls, r_comm: float, delta: float) -> "R3RParams":
        return cls(delta=delta, r_plan=r3r_plan_radius(r_comm, delta), r_comm=r_comm)


def dist_point_point(a: Point2, b: Point2) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def dist_ball_ball(a: Ball, b: Ball) -> float:
    """Set distance between two closed balls (zero when they overlap)."""
    # one subtraction of the radius sum keeps the result exactly symmetric
    return max(0.0, dist_point_point(a.center, b.center) - (a.radius + b.radius))


def r3r_plan_radius(r_comm: float, delta: float) -> float:
    """Largest planning radius compatible with ``r_comm`` and ``delta``."""
    if not (delta > 0 and r_comm > delta):
        raise ValueError(f"need r_comm > delta > 0, got r_comm={r_comm}, delta={delta}")
    return (r_comm - delta) / 3.0


def anchors_preclude_collision(anchor_a: Point2, anchor_b: Point2, r: float, delta: float) -> bool:
    """True when two r-bounded trajectories anchored here can never come within delta."""
    if not (r > delta > 0):
        raise ValueError(f"need r > delta > 0, got r={r}, delta={delta}")
    return dist_point_point(anchor_a, anchor_b) >= 2.0 * r + delta


def first_unbounded_index(positions: np.ndarray, anchor: Point2, r: float, tol: float = 0.0) -> int:
    """Index of the first position further than ``r + tol`` from anchor, or -1."""
    d = np.hypot(positions[:, 0] - anchor.x, positions[:, 1] - anchor.y)
    bad = np.flatnonzero(d > r + tol)
    return int(bad[0]) if bad.size else -1


def orbit_extent(orbit, anchor: Point2) -> float:
    """Largest distance from ``anchor`` reached anywhere on a loiter orbit."""
    return dist_point_point(orbit.center, anchor) + orbit.radius


def arc_bulge(arc_length: float, turn_radius: float) -> float:
    """Largest distance between an arc of curvature at most ``1 / turn_radius`` and its chord."""
    half = min(arc_length / (2.0 * turn_radius), math.pi / 2)
    return turn_radius * (1.0 - math.cos(half))


def is_r_bounded(traj, anchor: Point2, r: float, tol: float = 0.0) -> bool:
    """Check that a trajectory with a loiter tail never leaves ``B(anchor, r + tol)``.

    Prefix samples must sit inside the ball shrunk by the arc bulge of one
    step: a turning arc between two samples can swing that far past its
    chord, and the chord stays inside a ball both endpoints lie in. The
    infinite tail is checked exactly through the orbit's circumscribing disc,
    whose radius is also taken as the tightest turn.
    """
    if traj.tail is None:
        raise ValueError("is_r_bounded needs a trajectory with an infinite (orbit) tail")
    bulge = arc_bulge(traj.speed * traj.dt, traj.tail.radius) if traj.n_steps else 0.0
    if first_unbounded_index(traj.positions, anchor, r - bulge, tol) >= 0:
        return False
    return orbit_extent(traj.tail, anchor) <= r + tol
