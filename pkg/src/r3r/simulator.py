"""Deterministic closed-loop execution, metrics and persistence of runs."""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from r3r.dynamics import DubinsParams, DubinsState
from r3r.environment import (
    AgentSpec,
    OccupancyEnvironment,
    OpenArena,
    Scenario,
    generate_scenario,
    load_map,
    save_map,
)
from r3r.geometry import Point2, R3RParams
from r3r.oracle import Violation, oracle_check
from r3r.planner import PlannerConfig
from r3r.protocol import (
    EPSILON,
    EventRecord,
    Outcome,
    ReplanTrigger,
    Status,
    World,
    first_goal_time,
    join_backoff,
    make_agents,
    next_trigger,
    update_state,
)
from r3r.trajectory import CommittedTrajectory, as_sampled, controls_at, write_trace, read_trace
from r3r.validation import GatekeeperConfig


class InvariantError(RuntimeError):
    """Internal consistency failure that voids the run."""


@dataclass(frozen=True)
class SimConfig:
    sim_dt: float = 0.02
    trigger: ReplanTrigger = field(default_factory=ReplanTrigger)
    goal_tolerance: float = 1.0
    deadlock_window: float = 30.0
    oracle_dt: float = 0.02
    goal_clearance: float = 1.0  # obstacle clearance of the cost-to-go field
    log_timing: bool = False  # measured replan_ms in the event log breaks bitwise replay

    def __post_init__(self):
        if not (self.sim_dt > 0 and 0 < self.oracle_dt <= self.sim_dt + 1e-12):
            raise ValueError("need 0 < oracle_dt <= sim_dt")
        if self.goal_tolerance <= 0 or self.deadlock_window <= 0:
            raise ValueError("goal_tolerance and deadlock_window must be positive")


@dataclass(frozen=True)
class Metrics:
    safety_violations: int
    success_fraction: float
    avg_neighbors_per_replan: float
    max_neighbors: int
    mean_replan_ms: float
    replan_failure_rate: float
    deadlocked_agents: int
    n_agents: int
    unsafe_agents: int = 0

    @property
    def safety_pct(self) -> float:
        return 100.0 * (self.n_agents - self.unsafe_agents) / self.n_agents

    @property
    def success_pct(self) -> float:
        return 100.0 * self.success_fraction


CSV_HEADER = "scenario,n,seed,safety_pct,success_pct,avg_neighbors,max_neighbors,mean_replan_ms,fail_rate,deadlocks"


def metrics_row(name: str, n: int, seed: int, m: Metrics) -> str:
    return (
        f"{name},{n},{seed},{m.safety_pct:.2f},{m.success_pct:.2f},{m.avg_neighbors_per_replan:.3f},"
        f"{m.max_neighbors},{m.mean_replan_ms:.3f},{m.replan_failure_rate:.4f},{m.deadlocked_agents}"
    )


@dataclass(eq=False)
class RunResult:
    scenario: Scenario
    metrics: Metrics
    events: list[EventRecord]
    traces: dict[int, np.ndarray]
    violations: list[Violation]
    end_time: float
    history: dict[int, list[tuple[float, CommittedTrajectory]]]
    reached: dict[int, bool]

    def event_lines(self, timing: bool = False) -> list[str]:
        return [e.line(timing) for e in self.events]

    def timing_csv(self) -> str:
        rows = [f"{e.t:.6f},{e.agent},{e.event},{e.replan_ms:.3f}" for e in self.events]
        return "t,agent,event,replan_ms\n" + "".join(r + "\n" for r in rows)


def _traces(history, leave, grid: np.ndarray) -> dict[int, np.ndarray]:
    out = {}
    for i, commits in history.items():
        parts = []
        for j, (t0, c) in enumerate(commits):
            t1 = commits[j + 1][0] if j + 1 < len(commits) else leave.get(i, math.inf)
            lo = int(np.searchsorted(grid, t0 - 1e-12))
            hi = int(np.searchsorted(grid, t1 - 1e-12))
            if hi <= lo:
                continue
            ts = grid[lo:hi]
            tr = as_sampled(c)
            pos = tr.positions_at(ts)
            parts.append(np.column_stack([ts, pos, tr.headings_at(ts), controls_at(c, ts)]))
        out[i] = np.vstack(parts) if parts else np.empty((0, 5))
    return out


def run(
    scenario: Scenario,
    cfg: SimConfig = SimConfig(),
    planner_cfg: PlannerConfig = PlannerConfig(),
    gk_cfg: GatekeeperConfig = GatekeeperConfig(),
    log_path: Optional[Union[str, Path]] = None,
    on_event: Optional[Callable[[World, EventRecord], None]] = None,
) -> RunResult:
    """Simulate a scenario to its duration or until every agent is done.

    Agents follow their commitments exactly; protocol events come off a
    single time-ordered queue. An event whose time equals a just-processed
    event of an agent it may communicate with is delayed by 1e-6 s, the
    lower id going first. ``on_event(world, record)`` is called after every
    processed event, e.g. for invariant audits.
    """
    agents = make_agents(scenario)
    world = World(
        agents,
        scenario.env,
        scenario.params,
        gk_cfg,
        planner_cfg,
        cfg.goal_tolerance,
        planner_seed=scenario.seed,
    )
    for i, a in agents.items():
        world.cost_to_go[i] = scenario.env.geodesic_field(a.goal, cfg.goal_clearance)
    backoff_rng = {i: np.random.default_rng([scenario.seed, i]) for i in agents}
    heap: list = []
    slot = {i: 0 for i in agents}
    seq = 0

    def push(t, i, kind):
        nonlocal seq
        seq += 1
        heapq.heappush(heap, (t, i, seq, kind, slot[i] if kind != "leave" else -1))

    leave = {}
    for i, spec in enumerate(scenario.agents):
        push(spec.join_time, i, "join")
        if spec.leave_time is not None:
            push(spec.leave_time, i, "leave")

    events: list[EventRecord] = []
    history: dict[int, list] = {i: [] for i in agents}
    reached = {i: False for i in agents}
    processed_at: dict[float, list[int]] = {}
    log = open(log_path, "w") if log_path is not None else None
    end_time = 0.0
    try:
        while heap:
            t, i, _, kind, s = heapq.heappop(heap)
            if t > scenario.duration:
                break
            a = agents[i]
            if a.status == Status.RETIRED or (kind != "leave" and s != slot[i]):
                continue
            if any(world.may_communicate(i, j, t) for j in processed_at.get(t, ()) if j != i):
                push(t + EPSILON, i, kind)
                continue
            if kind == "replan" and a.status == Status.ACTIVE:
                p = a.position_at(t)
                if math.hypot(p.x - a.goal.x, p.y - a.goal.y) <= cfg.goal_tolerance:
                    kind = "goal"
            old = a.committed
            rec = update_state(i, world, t, kind)
            processed_at.setdefault(t, []).append(i)
            if len(processed_at) > 64:
                for key in sorted(processed_at)[:-32]:
                    del processed_at[key]
            events.append(rec)
            end_time = t
            if log is not None:
                log.write(rec.line(cfg.log_timing) + "\n")
                log.flush()
            if rec.outcome in (Outcome.KEPT_OLD, Outcome.JOIN_REJECTED) and a.committed is not old:
                raise InvariantError("a failed update changed the commitment")
            if on_event is not None:
                on_event(world, rec)
            if rec.outcome == Outcome.LEFT:
                leave[i] = t
                continue
            if a.committed is not old:
                history[i].append((t, a.committed))
            slot[i] += 1
            if a.status == Status.PENDING:
                push(t + join_backoff(a.join_attempts, backoff_rng[i]), i, "join")
                continue
            if a.at_goal:
                reached[i] = True
                continue
            nt = next_trigger(a, cfg.trigger, t)
            gt = first_goal_time(a.committed, a.goal, cfg.goal_tolerance, t + 1e-9)
            if gt is not None and gt < nt:
                push(gt, i, "goal")
            else:
                push(nt, i, "replan")
            if all(x.at_goal or x.status == Status.RETIRED for x in agents.values()):
                break
    finally:
        if log is not None:
            log.close()
    if all(x.at_goal or x.status == Status.RETIRED for x in agents.values()):
        t_end = end_time
    else:
        t_end = scenario.duration
    grid = cfg.sim_dt * np.arange(int(math.floor(t_end / cfg.sim_dt + 1e-9)) + 1)
    traces = _traces(history, leave, grid)
    env = scenario.env
    violations = oracle_check(
        traces, env.cells, env.resolution, (env.origin.x, env.origin.y), env.inflation, scenario.params.delta, cfg.oracle_dt
    )
    for i, a in agents.items():
        if not reached[i] and a.committed is not None:
            p = a.position_at(t_end)
            reached[i] = math.hypot(p.x - a.goal.x, p.y - a.goal.y) <= cfg.goal_tolerance
    metrics = _metrics(events, violations, agents, reached, t_end, cfg)
    return RunResult(scenario, metrics, events, traces, violations, t_end, history, reached)


def _metrics(events, violations, agents, reached, t_end, cfg: SimConfig) -> Metrics:
    attempts = [e for e in events if e.event != "leave"]
    # goal events mostly certify a loiter in place without planning; keep them out of the timing
    planned = [e for e in attempts if e.event in ("join", "replan")]
    fails = sum(e.outcome in (Outcome.KEPT_OLD, Outcome.JOIN_REJECTED) for e in attempts)
    unsafe = set()
    for v in violations:
        unsafe.update(v.agents)
    deadlocked = 0
    for i, a in agents.items():
        if a.status == Status.ACTIVE and not a.at_goal and not reached[i]:
            if a.last_success is None or t_end - a.last_success >= cfg.deadlock_window:
                deadlocked += 1
    n = len(agents)
    return Metrics(
        safety_violations=len(violations),
        success_fraction=sum(reached.values()) / n,
        avg_neighbors_per_replan=float(np.mean([e.n_neighbors for e in attempts])) if attempts else 0.0,
        max_neighbors=max((e.n_neighbors for e in attempts), default=0),
        mean_replan_ms=float(np.mean([e.replan_ms for e in planned])) if planned else 0.0,
        replan_failure_rate=fails / len(attempts) if attempts else 0.0,
        deadlocked_agents=deadlocked,
        n_agents=n,
        unsafe_agents=len(unsafe),
    )


# persistence


def scenario_to_dict(sc: Scenario) -> dict:
    return {
        "name": sc.name,
        "seed": sc.seed,
        "duration": sc.duration,
        "params": {"delta": sc.params.delta, "r_plan": sc.params.r_plan, "r_comm": sc.params.r_comm},
        "dyn": asdict(sc.dyn),
        "env": {
            "resolution": sc.env.resolution,
            "inflation": sc.env.inflation,
            "origin": [sc.env.origin.x, sc.env.origin.y],
        },
        "agents": [
            {
                "spawn": [a.spawn.x, a.spawn.y, a.spawn.theta],
                "goal": [a.goal.x, a.goal.y],
                "join_time": a.join_time,
                "leave_time": a.leave_time,
            }
            for a in sc.agents
        ],
    }


def scenario_from_files(meta: dict, map_text: str) -> Scenario:
    e = meta["env"]
    raw = load_map(map_text, e["inflation"])
    env = OccupancyEnvironment(raw.cells, e["resolution"], e["inflation"], Point2(*e["origin"]))
    p = meta["params"]
    params = R3RParams(p["delta"], p["r_plan"], p["r_comm"])
    agents = tuple(
        AgentSpec(DubinsState(*a["spawn"]), Point2(*a["goal"]), a["join_time"], a["leave_time"]) for a in meta["agents"]
    )
    return Scenario(env, agents, params, DubinsParams(**meta["dyn"]), meta["duration"], meta["seed"], meta["name"])


def write_run(out: Union[str, Path], result: RunResult, write_events: bool = True, log_timing: bool = False) -> Path:
    """Persist metrics, event log, measured timings, traces and a scenario snapshot under ``out``."""
    out = Path(out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    sc = result.scenario
    (out / "scenario.json").write_text(json.dumps(scenario_to_dict(sc), indent=1))
    (out / "map.txt").write_text(save_map(sc.env))
    (out / "metrics.csv").write_text(CSV_HEADER + "\n" + metrics_row(sc.name, len(sc.agents), sc.seed, result.metrics) + "\n")
    if write_events:
        (out / "events.log").write_text("".join(ln + "\n" for ln in result.event_lines(log_timing)))
    (out / "timings.csv").write_text(result.timing_csv())
    for i, rows in result.traces.items():
        write_trace(out / "traces" / f"agent_{i:03d}.trace", rows)
    return out


def load_traces(run_dir: Union[str, Path]) -> dict[int, np.ndarray]:
    out = {}
    for f in sorted(Path(run_dir, "traces").glob("agent_*.trace")):
        out[int(f.stem.split("_")[1])] = read_trace(f)
    return out


# density study


@dataclass(frozen=True)
class DensityRow:
    side: float
    trial: int
    seed: int
    density: float
    expected_neighbors: float
    mean_replan_ms: float
    failure_rate: float
    avg_neighbors: float


def density_sweep(
    n: int,
    side_lengths: Sequence[float],
    trials: int,
    base_seed: int = 0,
    params: R3RParams = R3RParams.from_comm(16.0, 0.5),
    dyn: DubinsParams = DubinsParams(),
    duration: float = 60.0,
    cfg: SimConfig = SimConfig(),
    planner_cfg: PlannerConfig = PlannerConfig(),
    gk_cfg: GatekeeperConfig = GatekeeperConfig(),
) -> list[DensityRow]:
    """Fixed agent count in square open arenas of varying side; one row per (side, trial).

    Trial ``k`` uses seed ``base_seed + k``. Trials run interleaved across
    sides, so slow drift in machine speed spreads evenly over the density
    levels instead of biasing whichever level ran last.
    """
    if n < 1 or trials < 1 or not side_lengths:
        raise ValueError("need n >= 1, trials >= 1 and at least one side length")
    rows = []
    for k in range(trials):
        for side in side_lengths:
            rho = n / side**2
            lam = rho * math.pi * params.r_comm**2
            seed = base_seed + k
            sc = generate_scenario(OpenArena(n, side), params, dyn, seed, duration=duration)
            m = run(sc, cfg, planner_cfg, gk_cfg).metrics
            rows.append(
                DensityRow(side, k, seed, rho, lam, m.mean_replan_ms, m.replan_failure_rate, m.avg_neighbors_per_replan)
            )
    rows.sort(key=lambda r: (side_lengths.index(r.side), r.trial))
    return rows


def summarize_density(rows: Sequence[DensityRow]) -> list[dict]:
    """Per-side means and standard deviations."""
    out = []
    for side in sorted({r.side for r in rows}, reverse=True):
        sel = [r for r in rows if r.side == side]
        ms = np.array([r.mean_replan_ms for r in sel])
        fr = np.array([r.failure_rate for r in sel])
        out.append(
            {
                "side": side,
                "density": sel[0].density,
                "expected_neighbors": sel[0].expected_neighbors,
                "mean_replan_ms": float(ms.mean()),
                "std_replan_ms": float(ms.std()),
                "failure_rate": float(fr.mean()),
                "std_failure_rate": float(fr.std()),
                "trials": len(sel),
            }
        )
    return out


DENSITY_HEADER = "side,trial,seed,density,expected_neighbors,replan_ms,fail_rate,avg_neighbors"


def density_csv(rows: Sequence[DensityRow]) -> str:
    lines = [DENSITY_HEADER]
    for r in rows:
        lines.append(
            f"{r.side:g},{r.trial},{r.seed},{r.density:.6f},{r.expected_neighbors:.4f},"
            f"{r.mean_replan_ms:.4f},{r.failure_rate:.4f},{r.avg_neighbors:.4f}"
        )
    return "\n".join(lines) + "\n"
