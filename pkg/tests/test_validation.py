import math

import numpy as np
import pytest
from dense_oracle import CERT, dense_audit, dense_positions, loiter_commit

from r3r.dynamics import CCW, CW, DubinsParams, DubinsState, make_loiter, propagate
from r3r.environment import OccupancyEnvironment
from r3r.geometry import Point2, R3RParams, arc_bulge
from r3r.planner import NominalResult, PlannerConfig
from r3r.protocol import AgentRecord
from r3r.trajectory import (
    CandidateTrajectory,
    CommittedTrajectory,
    SampledTrajectory,
    compose_candidate,
    loiter_only,
)
from r3r.validation import (
    VALID,
    Condition,
    GatekeeperConfig,
    ReplanResult,
    ValidityReport,
    attempt_replan,
    certificate_for,
    is_valid,
    sweep_switch_times,
)

GK = GatekeeperConfig()


def test_report_invariant():
    with pytest.raises(ValueError):
        ValidityReport(True, Condition.SAFE_SET)
    with pytest.raises(ValueError):
        ValidityReport(False)
    assert VALID.valid and VALID.witness is None


def test_config_grid():
    with pytest.raises(ValueError):
        GatekeeperConfig(switch_grid=1)
    ts = GatekeeperConfig(horizon=4.0, switch_grid=21).switch_times()
    assert ts[0] == 4.0 and ts[-1] == 0.0 and len(ts) == 21
    assert np.all(np.diff(ts) < 0)
    assert GK.safe_margin(1.0) == pytest.approx(0.05)


def test_lone_loiter_only_is_valid(dyn, params):
    cand = loiter_only(DubinsState(0, 0, 0), 0.0, dyn, 0.05)
    assert is_valid(cand, [], None, params, GK, dyn) == VALID


def test_plan_bound_prefix_plus_orbit(dyn):
    nom = propagate(DubinsState(0, 0, 0), 0.0, 0.05, 4.0, dyn)
    cand = compose_candidate(nom, 1.5, dyn)
    # the orbit reaches hypot(1.5, 1) + 1 = 2.80 from the anchor
    assert is_valid(cand, [], None, R3RParams(0.5, 3.0), GK, dyn).valid
    rep = is_valid(cand, [], None, R3RParams(0.5, 2.5), GK, dyn)
    assert rep.failed_condition is Condition.PLAN_BOUND
    w = rep.witness
    assert math.hypot(w.position.x, w.position.y) > 2.5
    # independent: first time on the orbit beyond 2.5
    s = np.linspace(0, 2 * math.pi, 200001)
    r = np.hypot(1.5 + np.sin(s), 1 - np.cos(s))
    t_first = 1.5 + s[np.argmax(r > 2.5)]
    assert w.time == pytest.approx(t_first, abs=2 * math.pi / 1440 + 1e-6)


def test_plan_bound_prefix_sample(dyn):
    nom = propagate(DubinsState(0, 0, 0), 0.0, 0.05, 4.0, dyn)
    rep = is_valid(compose_candidate(nom, 4.0, dyn), [], None, R3RParams(0.5, 2.5), GK, dyn)
    assert rep.failed_condition is Condition.PLAN_BOUND
    # samples must keep one step's arc bulge inside the bound
    assert rep.witness.position.x > 2.5 - arc_bulge(0.05, dyn.turn_radius) and rep.witness.time <= 2.5 + 1e-9


def test_neighbor_orbits_closer_than_delta(dyn, params):
    gap = 2 * dyn.turn_radius + params.delta - 0.01
    cand = loiter_only(DubinsState(0, 0, 0), 0.0, dyn, 0.05)  # CCW around (0, 1)
    # anti-phase: the neighbor is at its closest point when the agent is
    nb = loiter_commit(gap, 1.0, math.pi / 2, 7, dyn)
    rep = is_valid(cand, [nb], None, params, GK, dyn)
    assert rep.failed_condition is Condition.NEIGHBOR_COLLISION
    assert rep.witness.neighbor == 7
    d = np.hypot(*(dense_positions(cand, [rep.witness.time]) - dense_positions(nb, [rep.witness.time])).T)[0]
    assert d < params.delta + GK.check_dt
    # in phase the two circles never come closer than the center gap
    same = loiter_commit(gap, 1.0, -math.pi / 2, 7, dyn)
    assert is_valid(cand, [same], None, params, GK, dyn).valid


def test_only_supplied_commits_are_read(dyn, params):
    cand = loiter_only(DubinsState(0, 0, 0), 0.0, dyn, 0.05)
    # same circle, 0.3 rad behind: a constant 0.3 m gap
    blocking = loiter_commit(0.0, 1.0, -math.pi / 2 - 0.3, 3, dyn)
    assert not is_valid(cand, [blocking], None, params, GK, dyn).valid
    assert is_valid(cand, [], None, params, GK, dyn).valid


def test_safe_set_failures(dyn, params):
    cells = np.zeros((20, 20), dtype=bool)
    cells[:, 12:] = True
    env = OccupancyEnvironment(cells, 0.5, 0.5)  # unsafe from x = 5.5
    nom = propagate(DubinsState(2, 5, 0), 0.0, 0.05, 4.0, dyn)
    rep = is_valid(compose_candidate(nom, 4.0, dyn), [], env, params, GK, dyn)
    assert rep.failed_condition is Condition.SAFE_SET
    assert rep.witness.position.x > 5.5 - GK.check_dt - 1e-9
    # prefix fine, orbit disc crosses the boundary
    rep = is_valid(loiter_only(DubinsState(5.0, 5, -math.pi / 2), 0.0, dyn, 0.05), [], env, params, GK, dyn)
    assert rep.failed_condition is Condition.SAFE_SET and rep.witness.time == 0.0
    # everything outside the grid is unsafe
    rep = is_valid(loiter_only(DubinsState(-3, 5, 0), 0.0, dyn, 0.05), [], env, params, GK, dyn)
    assert rep.failed_condition is Condition.SAFE_SET


def test_backup_reach_failures(dyn, params):
    st = DubinsState(0, 0, 0)
    base = SampledTrajectory(0.0, 0.05, [st.as_array()], [], make_loiter(st, CCW, DubinsParams(1.0, 0.5), 0.0), 1.0)
    wide = CandidateTrajectory(base, 0.0, Point2(0, 0), 0.0)
    assert is_valid(wide, [], None, params, GK, dyn).failed_condition is Condition.BACKUP_REACH
    # same point, opposite direction of travel
    back = make_loiter(DubinsState(0, 0, math.pi), CW, dyn, 0.0)
    flip = CandidateTrajectory(SampledTrajectory(0.0, 0.05, [st.as_array()], [], back, 1.0), 0.0, Point2(0, 0), 0.0)
    assert is_valid(flip, [], None, params, GK, dyn).failed_condition is Condition.BACKUP_REACH
    ok = loiter_only(st, 0.0, dyn, 0.05)
    late = CandidateTrajectory(ok.base, 0.5, ok.anchor, ok.anchor_time)
    assert is_valid(late, [], None, params, GK, dyn).failed_condition is Condition.BACKUP_REACH


def test_long_prefix_rejected(dyn, params):
    nom = propagate(DubinsState(0, 0, 0), 0.0, 0.05, 5.0, dyn)
    with pytest.raises(ValueError):
        is_valid(compose_candidate(nom, 5.0, dyn), [], None, params, GK, dyn)


def test_certificate_flags():
    rep = ValidityReport(False, Condition.PLAN_BOUND)
    c = certificate_for(rep, [], 2.0)
    assert (c.safe_set, c.backup_reach, c.plan_bound, c.neighbor_collision_free) == (True, True, False, False)
    assert certificate_for(VALID, [], 1.0).neighbor_collision_free


def _agent(dyn, params, x=0.0, y=0.0, th=0.0, goal=(20.0, 0.0)):
    return AgentRecord(0, DubinsState(x, y, th), Point2(*goal), params, dyn)


def test_lone_agent_keeps_full_nominal(dyn, params):
    res = attempt_replan(_agent(dyn, params), [], None, params, GK, PlannerConfig(), 0.0)
    assert res.success and res.switch_time == pytest.approx(GK.horizon)
    ok, cand = res
    assert ok and cand is res.candidate


def test_horizon_mismatch(dyn, params):
    with pytest.raises(ValueError):
        attempt_replan(_agent(dyn, params), [], None, params, GK, PlannerConfig(horizon=3.0), 0.0)


def _straight_nominal(dyn):
    traj = propagate(DubinsState(0, 0, 0), 0.0, 0.05, 4.0, dyn)
    return NominalResult(traj, reached_goal=False, cost=4.0)


def test_blocking_orbit_gives_intermediate_switch(dyn, params):
    nb = loiter_commit(3.5, 2.4, 7 * math.pi / 4, 1, dyn)
    res = attempt_replan(_agent(dyn, params), [nb], None, params, GK, PlannerConfig(), 0.0, nominal=_straight_nominal(dyn))
    assert res.success and 0.0 < res.switch_time < GK.horizon
    full = sweep_switch_times(res.nominal.trajectory, [nb], None, params, GK, dyn, stop_at_first=False)
    assert res.switch_time == max(ts for ts, _, r in full if r.valid)
    # independent dense check: the accepted one is clean; larger grid values are
    # rejected no further than the sampling allowance away from a real conflict
    assert min(dense_audit(res.candidate, [nb], None, params, GK.check_dt / 10)) >= 0
    allowance = 2 * dyn.v * GK.check_dt / 2
    for ts, cand, rep in full:
        if ts > res.switch_time + 1e-9:
            assert rep.failed_condition is Condition.NEIGHBOR_COLLISION
            assert dense_audit(cand, [nb], None, params, GK.check_dt / 10)[3] < allowance


def ring(dyn, n=12, radius=1.8, offset=math.pi / 2):
    return [
        loiter_commit(radius * math.cos(a), radius * math.sin(a), a + offset, k + 1, dyn)
        for k, a in enumerate(2 * math.pi * np.arange(n) / n)
    ]


@pytest.mark.parametrize("seed", range(4))
def test_encircled_agent_fails(dyn, params, seed):
    nbs = ring(dyn)
    agent = _agent(dyn, params, th=0.3)
    res = attempt_replan(agent, nbs, None, params, GK, PlannerConfig(rng_seed=seed), 0.0)
    assert tuple(res) == (False, None)
    assert res.tried == GK.switch_grid
    assert res.last_report.failed_condition is Condition.NEIGHBOR_COLLISION


def test_attempt_replan_is_pure(dyn, params):
    nbs = ring(dyn)
    agent = _agent(dyn, params, th=0.3)
    agent.committed = CommittedTrajectory.from_candidate(loiter_only(agent.state, 0.0, dyn, 0.05), 0, 0.0, CERT)
    committed, state, counters = agent.committed, agent.state, (agent.k, agent.attempts, agent.status)
    snap = [c.base.states.copy() for c in nbs]
    attempt_replan(agent, nbs, None, params, GK, PlannerConfig(rng_seed=3), 0.0)
    assert agent.committed is committed and agent.state == state
    assert (agent.k, agent.attempts, agent.status) == counters
    assert all(np.array_equal(a, c.base.states) for a, c in zip(snap, nbs))


def test_replan_result_unpacks():
    ok, cand = ReplanResult(False, None)
    assert ok is False and cand is None


def _random_instance(rng, dyn):
    cells = np.zeros((40, 40), dtype=bool)
    for _ in range(4):
        i, j = rng.integers(0, 36, 2)
        cells[i : i + rng.integers(2, 5), j : j + rng.integers(2, 5)] = True
    env = OccupancyEnvironment(cells, 0.5, 0.5)
    while True:
        x, y = rng.uniform(3, 17, 2)
        if env.in_safe_set(Point2(x, y), 2.2):
            break
    nbs = []
    while len(nbs) < 3:
        a, r = rng.uniform(-math.pi, math.pi), rng.uniform(2.6, 6)
        cx, cy = x + r * math.cos(a), y + r * math.sin(a)
        if env.in_safe_set(Point2(cx, cy), 1.0):
            nbs.append(loiter_commit(cx, cy, rng.uniform(-math.pi, math.pi), len(nbs) + 1, dyn))
    goal = Point2(*rng.uniform(1, 19, 2))
    return env, AgentRecord(0, DubinsState(x, y, rng.uniform(-math.pi, math.pi)), goal, None, dyn), nbs


def test_soundness_against_dense_oracle(dyn, params, rng):
    accepted = 0
    for trial in range(12):
        env, agent, nbs = _random_instance(rng, dyn)
        agent.params = params
        res = attempt_replan(agent, nbs, env, params, GK, PlannerConfig(rng_seed=trial), 0.0)
        full = sweep_switch_times(res.nominal.trajectory, nbs, env, params, GK, dyn, stop_at_first=False)
        valid = [ts for ts, _, r in full if r.valid]
        # maximality against the exhaustive sweep
        assert res.success == bool(valid)
        if valid:
            assert res.switch_time == max(valid)
        for ts, cand, rep in full:
            if rep.valid:
                accepted += 1
                margins = dense_audit(cand, nbs, env, params, GK.check_dt / 10)
                assert min(margins) >= 0, (trial, ts, margins)
    assert accepted > 0
