"""Acceptance criteria, one test each.

Every test prints a single ``[PASS]``/``[FAIL]`` line with the measured
numbers before asserting, so ``pytest -m acceptance -v`` doubles as a report.
Runnable directly: ``python3 tests/test_acceptance.py``.
"""

import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from dense_oracle import dense_audit, loiter_commit

from r3r.config import load_config
from r3r.dynamics import DubinsParams, DubinsState
from r3r.environment import AgentSpec, CityLike, OccupancyEnvironment, OpenArena, Scenario, generate_scenario
from r3r.geometry import Point2, R3RParams, anchors_preclude_collision
from r3r.planner import PlannerConfig
from r3r.protocol import AgentRecord, ReplanTrigger, Status, TriggerPolicy
from r3r.simulator import SimConfig, density_sweep, run, summarize_density, write_run
from r3r.validation import GatekeeperConfig, attempt_replan, sweep_switch_times

pytestmark = pytest.mark.acceptance

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
PARAMS = R3RParams.from_comm(16.0, 0.5)
DYN = DubinsParams(1.0, 1.0)
GK = GatekeeperConfig()
SEEDS = range(5)


@pytest.fixture
def report(capsys):
    def emit(label, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
        assert ok, detail

    return emit


def run_config(name, seed):
    cfg = load_config(CONFIGS / name)
    return run(cfg.scenario(seed), cfg.sim(), cfg.planner(), cfg.gatekeeper())


# ---------------------------------------------------------------------------
# 1, 2: scenario tables


def test_c1_swap(report):
    t0 = time.perf_counter()
    rows = []
    for name in ("swap8.cfg", "swap16.cfg"):
        for seed in SEEDS:
            m = run_config(name, seed).metrics
            rows.append((name, seed, m.safety_pct, m.success_pct))
    wall = time.perf_counter() - t0
    bad = [r for r in rows if r[2] != 100.0 or r[3] != 100.0]
    ok = not bad and wall < 120.0
    report("C1 swap 8/16 x 5 seeds", ok, f"runs={len(rows)} not_perfect={bad} wall={wall:.1f}s (<120)")


def test_c2_city(report):
    t0 = time.perf_counter()
    unsafe, success = [], []
    for name in ("city16.cfg", "city32.cfg"):
        for seed in SEEDS:
            m = run_config(name, seed).metrics
            success.append(m.success_pct)
            if m.safety_violations:
                unsafe.append((name, seed, m.safety_violations))
    wall = time.perf_counter() - t0
    mean_success = float(np.mean(success))
    ok = not unsafe and mean_success >= 95.0 and wall < 600.0
    report(
        "C2 city 16/32 x 5 seeds",
        ok,
        f"unsafe={unsafe} mean_success={mean_success:.2f}% (>=95) per_run={[round(s, 1) for s in success]} wall={wall:.1f}s (<600)",
    )


# ---------------------------------------------------------------------------
# 3, 4: locality of bounded trajectories


def bounded_paths(rng, n, r, h=0.01, prefix_max=4.0, horizon=None):
    """Random Dubins paths that switch to a unit loiter circle; all start at the origin.

    Turn rates are piecewise constant on 0.5 s pieces, integrated in closed form
    per step. Returns positions of shape (n, steps, 2) and the time grid, which
    covers the longest prefix plus one full lap.
    """
    horizon = prefix_max + 2 * math.pi + 0.1 if horizon is None else horizon
    ts = h * np.arange(int(math.ceil(horizon / h)) + 1)
    prefix = rng.uniform(0.0, prefix_max, n)
    pieces = rng.uniform(-1.0, 1.0, (n, int(math.ceil(prefix_max / 0.5)) + 1))
    loiter = rng.choice([-1.0, 1.0], n)
    th = rng.uniform(-math.pi, math.pi, n)
    pos = np.zeros((n, len(ts), 2))
    x = np.zeros(n)
    y = np.zeros(n)
    for k in range(1, len(ts)):
        t = ts[k - 1]
        w = np.where(t < prefix, pieces[:, min(int(t / 0.5), pieces.shape[1] - 1)], loiter)
        th1 = th + w * h
        small = np.abs(w) < 1e-12
        ws = np.where(small, 1.0, w)
        x = x + np.where(small, h * np.cos(th), (np.sin(th1) - np.sin(th)) / ws)
        y = y + np.where(small, h * np.sin(th), -(np.cos(th1) - np.cos(th)) / ws)
        th = th1
        pos[:, k, 0], pos[:, k, 1] = x, y
    keep = np.hypot(pos[..., 0], pos[..., 1]).max(axis=1) <= r
    return pos[keep], ts


def test_c3_separated_anchors_never_collide(report):
    rng = np.random.default_rng(101)
    r, delta = PARAMS.r_plan, PARAMS.delta
    trials, worst, violations = 0, math.inf, 0
    while trials < 10_000:
        a, _ = bounded_paths(rng, 2000, r)
        b, _ = bounded_paths(rng, 2000, r)
        m = min(len(a), len(b), 10_000 - trials)
        a, b = a[:m], b[:m]
        # anchors at 2r + delta plus a little, in a random direction
        gap = (2 * r + delta) * (1.0 + rng.exponential(0.01, m))
        ang = rng.uniform(-math.pi, math.pi, m)
        off = np.column_stack([gap * np.cos(ang), gap * np.sin(ang)])
        for k in range(0, m, 50):
            assert anchors_preclude_collision(Point2(0, 0), Point2(*off[k]), r, delta)
        d = np.hypot(*(b + off[:, None, :] - a).transpose(2, 0, 1)).min(axis=1)
        violations += int((d < delta).sum())
        worst = min(worst, float(d.min()))
        trials += m
    ok = violations == 0 and worst >= delta
    report("C3 separated anchors (1e4 pairs)", ok, f"trials={trials} violations={violations} min_sep={worst:.4f} (>= {delta})")


def test_c4_collider_was_in_range(report):
    rng = np.random.default_rng(202)
    r, delta, h = PARAMS.r_plan, PARAMS.delta, 0.01
    bound = 3 * r + delta
    collisions, worst, failures = 0, 0.0, 0
    for _ in range(40):
        # agent 1 is anchored at t1 = 0, agent 2 at t2 in [0, 4]
        p1, ts = bounded_paths(rng, 1000, r, horizon=4.0 + 4.0 + 2 * math.pi + 0.1)
        p2, _ = bounded_paths(rng, 1000, r, horizon=4.0 + 2 * math.pi + 0.1)
        m = min(len(p1), len(p2))
        p1, p2 = p1[:m], p2[:m]
        k2 = rng.integers(0, int(4.0 / h) + 1, m)
        gap = rng.uniform(0.0, bound + 1.0, m)
        ang = rng.uniform(-math.pi, math.pi, m)
        for i in range(m):
            anchor2 = p1[i, k2[i]] + gap[i] * np.array([math.cos(ang[i]), math.sin(ang[i])])
            n2 = p2.shape[1]
            seg1 = p1[i, k2[i] : k2[i] + n2]
            seg2 = p2[i, : len(seg1)] + anchor2
            d = np.hypot(*(seg1 - seg2).T)
            if d.min() < delta:
                collisions += 1
                d2 = math.hypot(*(seg2[0] - seg1[0]))
                worst = max(worst, d2)
                failures += d2 >= bound
    ok = failures == 0 and collisions >= 1000
    report(
        "C4 collider in range (constructed collisions)",
        ok,
        f"collisions={collisions} (>=1000) out_of_range={failures} max_dist_at_t2={worst:.3f} (< {bound:.3f})",
    )


# ---------------------------------------------------------------------------
# 5: forward invariance under random schedules


def random_schedule(seed):
    rng = np.random.default_rng(10_000 + seed)
    base = generate_scenario(CityLike(8, 60.0), PARAMS, DYN, seed=seed, duration=60.0)
    agents = []
    for spec in base.agents:
        join = float(rng.uniform(0.0, 20.0))
        leave = float(join + rng.uniform(3.0, 50.0)) if rng.random() < 0.4 else None
        agents.append(AgentSpec(spec.spawn, spec.goal, join, leave))
    policy = TriggerPolicy(rng.choice([p.value for p in TriggerPolicy]))
    trig = ReplanTrigger(policy, float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.1, 1.0)))
    sc = Scenario(base.env, agents, PARAMS, DYN, base.duration, seed, f"fuzz{seed}")
    return sc, SimConfig(trigger=trig), rng


def test_c5_forward_invariance_fuzz(report):
    h = 0.01
    audited, events, dense_bad, oracle_bad, policies = 0, 0, [], [], set()
    for seed in range(100):
        sc, cfg, rng = random_schedule(seed)
        policies.add(cfg.trigger.policy.value)

        def audit(world, rec):
            nonlocal audited, events
            events += 1
            active = sorted(i for i, a in world.agents.items() if a.status == Status.ACTIVE)
            if not active:
                return
            k = max(1, int(round(0.1 * len(active))))
            for i in rng.choice(active, k, replace=False):
                c = world.agents[int(i)].committed
                others = [world.agents[j].committed for j in active if j != i]
                margins = dense_audit(c, others, world.env, world.params, h, from_t=rec.t)
                audited += 1
                if min(margins) < 0:
                    dense_bad.append((seed, rec.t, int(i), margins))

        res = run(sc, cfg, on_event=audit)
        if res.violations:
            oracle_bad.append((seed, [v.line() for v in res.violations[:3]]))
    ok = not dense_bad and not oracle_bad and audited > 0
    report(
        "C5 forward-invariance fuzz (100 schedules)",
        ok,
        f"events={events} audited={audited} policies={sorted(policies)} dense_violations={dense_bad[:3]} oracle={oracle_bad[:3]}",
    )


# ---------------------------------------------------------------------------
# 6: maximality of the committed switch time


def small_instance(rng):
    cells = np.zeros((40, 40), dtype=bool)
    for _ in range(int(rng.integers(0, 6))):
        i, j = rng.integers(0, 36, 2)
        cells[i : i + rng.integers(2, 5), j : j + rng.integers(2, 5)] = True
    env = OccupancyEnvironment(cells, 0.5, 0.5)
    while True:
        x, y = rng.uniform(3, 17, 2)
        if env.in_safe_set(Point2(x, y), 2.2):
            break
    nbs = []
    want = int(rng.integers(0, 5))
    for _ in range(200):
        if len(nbs) == want:
            break
        a, d = rng.uniform(-math.pi, math.pi), rng.uniform(2.6, 7.0)
        cx, cy = x + d * math.cos(a), y + d * math.sin(a)
        if env.in_safe_set(Point2(cx, cy), 1.0):
            nbs.append(loiter_commit(cx, cy, rng.uniform(-math.pi, math.pi), len(nbs) + 1, DYN, int(rng.choice([-1, 1]))))
    goal = Point2(*rng.uniform(1, 19, 2))
    agent = AgentRecord(0, DubinsState(x, y, rng.uniform(-math.pi, math.pi)), goal, PARAMS, DYN)
    return env, agent, nbs


def test_c6_maximal_switch_time(report):
    rng = np.random.default_rng(606)
    agree, kinds, mismatches = 0, {"full": 0, "partial": 0, "none": 0}, []
    for trial in range(200):
        env, agent, nbs = small_instance(rng)
        res = attempt_replan(agent, nbs, env, PARAMS, GK, PlannerConfig(rng_seed=trial), 0.0)
        full = sweep_switch_times(res.nominal.trajectory, nbs, env, PARAMS, GK, DYN, stop_at_first=False)
        valid = [ts for ts, _, rep in full if rep.valid]
        expect = max(valid) if valid else None
        got = res.switch_time if res.success else None
        if got == expect:
            agree += 1
        else:
            mismatches.append((trial, got, expect))
        kinds["none" if expect is None else "full" if expect == GK.horizon else "partial"] += 1
    ok = agree == 200
    report("C6 maximal T_S (200 instances)", ok, f"agreement={agree}/200 mix={kinds} mismatches={mismatches[:5]}")


# ---------------------------------------------------------------------------
# 7: locality


def test_c7_scaling_and_density(report):
    settings = [(16, 60.0), (32, 60.0 * math.sqrt(2)), (64, 120.0)]
    means = []
    for n, side in settings:
        ms = [run(generate_scenario(OpenArena(n, side), PARAMS, DYN, seed=s, duration=30.0)).metrics.mean_replan_ms for s in (0, 1)]
        means.append(float(np.mean(ms)))
    ratio = max(means) / min(means)
    summary = summarize_density(density_sweep(16, [120.0, 85.0, 60.0], 20, duration=20.0))
    ms = [s["mean_replan_ms"] for s in summary]
    fr = [s["failure_rate"] for s in summary]
    mono = all(b >= a for a, b in zip(ms, ms[1:])) and all(b >= a for a, b in zip(fr, fr[1:]))
    ok = ratio < 2.0 and mono and len(summary) >= 3
    scale = ", ".join(f"N={n}:{m:.2f}ms" for (n, _), m in zip(settings, means))
    dens = ", ".join(f"rho={s['density']:.4f}:{s['mean_replan_ms']:.2f}ms/{s['failure_rate']:.5f}" for s in summary)
    report("C7 locality", ok, f"fixed-density {scale} max/min={ratio:.2f} (<2); density sweep {dens} monotone={mono}")


# ---------------------------------------------------------------------------
# 8: determinism


def test_c8_determinism(report, tmp_path):
    # two runs in this (warm) process and one in a fresh interpreter with another hash seed
    checks = []
    for name, seed in (("swap8.cfg", 2), ("city16.cfg", 1)):
        outs, results = [], []
        for k in range(2):
            results.append(run_config(name, seed))
            outs.append(write_run(tmp_path / f"{name}_{k}", results[-1]))
        fresh = tmp_path / f"{name}_fresh"
        argv = ["run", str(CONFIGS / name), "--seed", str(seed), "--out", str(fresh)]
        code = f"from r3r.cli import main; raise SystemExit(main({argv!r}))"
        env = dict(os.environ, PYTHONHASHSEED="12345")
        subprocess.run([sys.executable, "-c", code], check=True, env=env, capture_output=True)
        outs.append(fresh)
        logs = [(o / "events.log").read_bytes() for o in outs]
        a, b = (r.traces for r in results)
        same_traces = a.keys() == b.keys() and all(np.array_equal(a[i], b[i]) for i in a)
        names = sorted(f.name for f in (outs[0] / "traces").iterdir())
        for o in outs[1:]:
            same_traces &= names == sorted(f.name for f in (o / "traces").iterdir())
            same_traces &= all((outs[0] / "traces" / f).read_bytes() == (o / "traces" / f).read_bytes() for f in names)
        checks.append((name, bool(logs[0]) and logs[0] == logs[1] == logs[2], same_traces))
    ok = all(a and b for _, a, b in checks)
    report(
        "C8 determinism (2 in-process runs + 1 fresh process)",
        ok,
        " ".join(f"{n}: log_identical={a} traces_identical={b}" for n, a, b in checks),
    )


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
