"""Decentralized coordination: comm graph, join/replan/leave updates and arbitration."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from r3r.dynamics import DubinsParams, DubinsState
from r3r.geometry import Point2, R3RParams
from r3r.planner import PlannerConfig
from r3r.trajectory import CommittedTrajectory, as_sampled, loiter_only, sample_at
from r3r.validation import (
    GatekeeperConfig,
    ReplanResult,
    attempt_replan,
    certificate_for,
    is_valid,
)

EPSILON = 1e-6


class ArbitrationError(RuntimeError):
    """Two communicating agents tried to update at the same instant."""


class Status(str, Enum):
    PENDING = "Pending"
    ACTIVE = "Active"
    RETIRED = "Retired"


class Outcome(str, Enum):
    JOINED = "Joined"
    COMMITTED = "Committed"
    KEPT_OLD = "KeptOld"
    JOIN_REJECTED = "JoinRejected"
    LEFT = "Left"


@dataclass
class AgentRecord:
    id: int
    state: DubinsState
    goal: Point2
    params: R3RParams
    dyn: DubinsParams
    committed: Optional[CommittedTrajectory] = None
    status: Status = Status.PENDING
    k: int = 0
    at_goal: bool = False
    join_attempts: int = 0
    attempts: int = 0
    last_trigger: Optional[float] = None
    last_success: Optional[float] = None
    last_update: Optional[float] = None

    def position_at(self, t: float) -> Point2:
        """Where the agent is at ``t``: on its commitment if Active, else frozen at spawn."""
        if self.committed is None:
            return self.state.position
        s = sample_at(self.committed, t)
        return Point2(s.x, s.y)

    def advance_to(self, t: float) -> None:
        if self.committed is not None:
            self.state = sample_at(self.committed, t)


@dataclass
class CommGraph:
    """Proximity graph over Active agents at one instant."""

    positions: dict[int, Point2]
    r_comm: float

    @classmethod
    def at(cls, agents: Iterable[AgentRecord], t: float, r_comm: float) -> "CommGraph":
        return cls({a.id: a.position_at(t) for a in agents if a.status == Status.ACTIVE}, r_comm)

    @property
    def memberships(self) -> frozenset[int]:
        return frozenset(self.positions)

    def within(self, p: Point2, radius: float, exclude: Optional[int] = None) -> list[int]:
        out = []
        for j, q in self.positions.items():
            if j != exclude and math.hypot(p.x - q.x, p.y - q.y) <= radius:
                out.append(j)
        return sorted(out)


def neighbors_of(g: CommGraph, i: int, t: Optional[float] = None) -> set[int]:
    """Active agents within ``r_comm`` of agent ``i`` (inclusive threshold)."""
    if i not in g.positions:
        raise ValueError(f"agent {i} is not Active")
    return set(g.within(g.positions[i], g.r_comm, exclude=i))


class TriggerPolicy(str, Enum):
    PERIODIC = "periodic"
    NEAR_SWITCH = "near_switch"
    HYBRID = "hybrid"


@dataclass(frozen=True)
class ReplanTrigger:
    policy: TriggerPolicy = TriggerPolicy.HYBRID
    period: float = 1.0
    lead: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "policy", TriggerPolicy(self.policy))
        if not (self.period > 0 and self.lead >= 0):
            raise ValueError("trigger period must be positive and lead non-negative")


def next_trigger(agent: AgentRecord, trigger: ReplanTrigger, t: float) -> float:
    """Next replan time for an Active agent, strictly after ``t``.

    Periodic counts from the last trigger; NearSwitch fires ``lead`` seconds
    before the committed orbit entry; Hybrid takes the earlier one. A time
    already in the past falls back to one period from ``t``.
    """
    last = agent.last_trigger if agent.last_trigger is not None else t
    periodic = last + trigger.period
    near = math.inf
    if agent.committed is not None:
        near = agent.committed.entry_time - trigger.lead
    if trigger.policy == TriggerPolicy.PERIODIC:
        nxt = periodic
    elif trigger.policy == TriggerPolicy.NEAR_SWITCH:
        nxt = near
    else:
        nxt = min(periodic, near)
    if not nxt > t:
        nxt = t + trigger.period
    return nxt


def join_backoff(attempts: int, rng: np.random.Generator, base: float = 0.5, cap: float = 4.0) -> float:
    """Delay before the next join attempt: capped exponential with 25% jitter."""
    return min(cap, base * 2.0 ** max(attempts - 1, 0)) * (1.0 + 0.25 * rng.random())


def arbitration_schedule(
    requests: Iterable[tuple[int, float]],
    may_communicate: Callable[[int, int], bool],
    eps: float = EPSILON,
) -> list[tuple[float, int]]:
    """Totally order update requests so no communicating pair shares a timestamp.

    Requests are taken in (time, id) order; a request colliding with an
    already scheduled event of an agent it may talk to is pushed back by
    ``eps`` until it is free. Returns ``(time, agent)`` pairs sorted.
    """
    taken: dict[float, list[int]] = {}
    out = []
    for i, t in sorted(requests, key=lambda r: (r[1], r[0])):
        while any(j == i or may_communicate(i, j) for j in taken.get(t, ())):
            t = t + eps
        taken.setdefault(t, []).append(i)
        out.append((t, i))
    out.sort()
    return out


@dataclass
class EventRecord:
    t: float
    event: str
    agent: int
    outcome: Outcome
    switch_time: Optional[float]
    n_neighbors: int
    replan_ms: float

    def line(self, timing: bool = True) -> str:
        """One log line; with ``timing=False`` the measured timing field is written as ``-``."""
        ts = "-" if self.switch_time is None else f"{self.switch_time:.6f}"
        ms = f"{self.replan_ms:.3f}" if timing else "-"
        return f"{self.t:.6f} {self.event} {self.agent} {self.outcome.value} {ts} {self.n_neighbors} {ms}"

    @classmethod
    def parse(cls, line: str) -> "EventRecord":
        """Inverse of :meth:`line`; a ``-`` timing field parses as NaN."""
        t, ev, ag, oc, ts, nn, ms = line.split()
        return cls(
            float(t), ev, int(ag), Outcome(oc), None if ts == "-" else float(ts), int(nn), math.nan if ms == "-" else float(ms)
        )


@dataclass
class World:
    """Shared state read by the protocol: every agent plus the static configuration."""

    agents: dict[int, AgentRecord]
    env: object
    params: R3RParams
    gatekeeper: GatekeeperConfig
    planner: PlannerConfig
    goal_tolerance: float = 1.0
    cost_to_go: dict[int, np.ndarray] = field(default_factory=dict)
    planner_seed: int = 0

    def graph(self, t: float) -> CommGraph:
        return CommGraph.at(self.agents.values(), t, self.params.r_comm)

    def may_communicate(self, i: int, j: int, t: float, eps: float = EPSILON) -> bool:
        a, b = self.agents[i], self.agents[j]
        pa, pb = a.position_at(t), b.position_at(t)
        reach = self.params.r_comm + (a.dyn.v + b.dyn.v) * eps
        return math.hypot(pa.x - pb.x, pa.y - pb.y) <= reach

    def neighbor_commits(self, i: int, t: float) -> list[CommittedTrajectory]:
        """Commitments of Active agents within ``r_comm`` of agent ``i``'s position at ``t``."""
        g = self.graph(t)
        p = self.agents[i].position_at(t)
        return [self.agents[j].committed for j in g.within(p, g.r_comm, exclude=i)]


def _commit(agent: AgentRecord, cand, report, commits, t: float) -> None:
    cert = certificate_for(report, commits, t)
    agent.committed = CommittedTrajectory.from_candidate(cand, agent.id, t, cert)
    agent.k += 1
    agent.last_success = t


def _check_arbitration(world: World, i: int, t: float) -> None:
    for j, other in world.agents.items():
        if j == i or other.last_update != t or other.status == Status.RETIRED:
            continue
        if world.may_communicate(i, j, t):
            raise ArbitrationError(f"agents {i} and {j} both update at t={t}")


def update_state(i: int, world: World, t: float, event: str = "replan") -> EventRecord:
    """Process one protocol event for agent ``i`` at ``t``.

    ``event`` is ``join``, ``replan``, ``goal`` or ``leave``. Only the
    commitments of agents within ``r_comm`` are read, and only agent ``i``
    is modified. A failed certification leaves the old commitment in place.
    """
    agent = world.agents[i]
    _check_arbitration(world, i, t)
    agent.last_update = t
    if event == "leave":
        agent.advance_to(t)
        agent.status = Status.RETIRED
        return EventRecord(t, event, i, Outcome.LEFT, None, 0, 0.0)
    if agent.status == Status.RETIRED:
        raise ValueError(f"agent {i} has left")
    agent.advance_to(t)
    agent.last_trigger = t
    commits = world.neighbor_commits(i, t)
    # CPU time: the cost of the update itself, not of whatever else the machine is doing
    tic = time.process_time()
    result = _try_terminal(agent, world, commits, t) if event == "goal" else None
    if result is None:
        # a fresh, reproducible planner stream per (run, agent, attempt)
        cfg = replace(world.planner, rng_seed=world.planner_seed * 1_000_003 + i * 7919 + agent.attempts)
        agent.attempts += 1
        result = attempt_replan(
            agent, commits, world.env, world.params, world.gatekeeper, cfg, t, cost_to_go=world.cost_to_go.get(i)
        )
    ms = 1e3 * (time.process_time() - tic)
    joining = agent.status == Status.PENDING
    if result.success:
        _commit(agent, result.candidate, result.last_report, commits, t)
        if event == "goal":
            agent.at_goal = True
        if joining:
            agent.status = Status.ACTIVE
            outcome = Outcome.JOINED
        else:
            outcome = Outcome.COMMITTED
    else:
        if joining:
            agent.join_attempts += 1
            outcome = Outcome.JOIN_REJECTED
        else:
            outcome = Outcome.KEPT_OLD
    return EventRecord(t, event, i, outcome, result.switch_time, len(commits), ms)


def _try_terminal(agent: AgentRecord, world: World, commits, t: float) -> Optional[ReplanResult]:
    """Loiter in place once the goal is reached, if that is certifiable."""
    p = agent.state.position
    if math.hypot(p.x - agent.goal.x, p.y - agent.goal.y) > world.goal_tolerance + 1e-9:
        return None
    cand = loiter_only(agent.state, t, agent.dyn, world.planner.dt, r_plan=agent.params.r_plan, env=world.env)
    report = is_valid(cand, commits, world.env, world.params, world.gatekeeper, agent.dyn)
    if not report.valid:
        return None
    return ReplanResult(True, cand, None, 0.0, 1, report)


def first_goal_time(committed: CommittedTrajectory, goal: Point2, tol: float, t_from: float) -> Optional[float]:
    """Earliest prefix grid time at or after ``t_from`` where the commitment is within ``tol`` of ``goal``."""
    tr = as_sampled(committed)
    pos = tr.positions
    times = tr.t0 + tr.dt * np.arange(len(pos))
    ok = (np.hypot(pos[:, 0] - goal.x, pos[:, 1] - goal.y) <= tol) & (times >= t_from - 1e-12)
    idx = np.flatnonzero(ok)
    return float(times[idx[0]]) if len(idx) else None


def make_agents(scenario) -> dict[int, AgentRecord]:
    return {
        i: AgentRecord(i, spec.spawn, spec.goal, scenario.params, scenario.dyn)
        for i, spec in enumerate(scenario.agents)
    }


def replay_lines(records: Sequence[EventRecord]) -> list[str]:
    return [r.line() for r in records]
