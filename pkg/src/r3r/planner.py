"""Nominal trajectory generation: a horizon-limited RRT* over constant-turn-rate arcs."""

from __future__ import annotations

import math
from collections import namedtuple
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from r3r.dynamics import CCW, CW, DubinsParams, DubinsState, loiter_center, propagate, wrap_angle
from r3r.geometry import Point2
from r3r.trajectory import SampledTrajectory, as_sampled


@dataclass(frozen=True)
class PlannerConfig:
    horizon: float = 4.0
    max_iterations: int = 50
    goal_bias: float = 0.1
    step_arc_length: float = 1.0
    rewire_radius: float = 1.5
    rng_seed: int = 0
    dt: float = 0.05
    check_dt: float = 0.1
    clearance: float = 0.1
    neighbor_margin: float = 0.25
    goal_tolerance: float = 1.0
    omega_levels: int = 7

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("planning horizon must be positive")
        if not 0.0 <= self.goal_bias <= 1.0:
            raise ValueError("goal_bias must lie in [0, 1]")
        if self.max_iterations < 0 or self.step_arc_length <= 0 or self.rewire_radius < 0:
            raise ValueError("invalid planner iteration/step/rewire settings")
        if self.omega_levels < 3 or self.omega_levels % 2 == 0:
            raise ValueError("omega_levels must be an odd number >= 3")


@dataclass
class PlannerTree:
    """Flat RRT* tree; ``insert_cost`` keeps each node's cost when it was added."""

    x: list = field(default_factory=list)
    y: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    time: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    parent: list = field(default_factory=list)
    omega: list = field(default_factory=list)
    length: list = field(default_factory=list)
    children: list = field(default_factory=list)
    insert_cost: list = field(default_factory=list)
    rewires: int = 0

    def add(self, x, y, th, t, c, parent, omega, length):
        self.x.append(x)
        self.y.append(y)
        self.theta.append(th)
        self.time.append(t)
        self.cost.append(c)
        self.parent.append(parent)
        self.omega.append(omega)
        self.length.append(length)
        self.children.append(0)
        self.insert_cost.append(c)
        if parent >= 0:
            self.children[parent] += 1
        return len(self.x) - 1

    def __len__(self):
        return len(self.x)

    def path_to(self, i: int) -> list[int]:
        out = []
        while i >= 0:
            out.append(i)
            i = self.parent[i]
        return out[::-1]


@dataclass(frozen=True, eq=False)
class NominalResult:
    trajectory: SampledTrajectory
    reached_goal: bool
    cost: float
    degenerate: bool = False
    tree: Optional[PlannerTree] = None


# --------------------------------------------------------------------------
# arc primitives


def arc_end(x, y, th, v, omega, s):
    """End pose of a constant-turn-rate arc of length ``s`` (numpy-broadcasting)."""
    k = omega / v
    small = np.abs(k * s) < 1e-9
    k_safe = np.where(small, 1.0, k)
    th1 = th + k * s
    ex = np.where(small, x + s * np.cos(th + 0.5 * k * s), x + (np.sin(th1) - np.sin(th)) / k_safe)
    ey = np.where(small, y + s * np.sin(th + 0.5 * k * s), y - (np.cos(th1) - np.cos(th)) / k_safe)
    return ex, ey, th1


_STEER_TABLES: dict = {}


def _steer_table(max_arc, v, omega_max, levels, n_lengths):
    # exact key: a near-miss hit would make results depend on what ran earlier in the process
    key = (max_arc, v, omega_max, levels, n_lengths)
    tab = _STEER_TABLES.get(key)
    if tab is None:
        omegas = np.repeat(np.linspace(-omega_max, omega_max, levels), n_lengths)
        lengths = np.tile(max_arc * np.arange(1, n_lengths + 1) / n_lengths, levels)
        dx, dy, dth = arc_end(0.0, 0.0, 0.0, v, omegas, lengths)
        tab = (omegas, lengths, dx, dy, dth)
        if len(_STEER_TABLES) < 256:
            _STEER_TABLES[key] = tab
    return tab


def steer_dubins(
    start: DubinsState, to: Point2, max_arc: float, p: DubinsParams, levels: int = 7, n_lengths: int = 8
) -> tuple[float, float, DubinsState]:
    """Constant-turn-rate arc of length at most ``max_arc`` ending closest to ``to``.

    Returns ``(omega, length, end_state)``. Turn rates are searched on an even
    grid over ``[-omega_max, omega_max]`` that always contains zero.
    """
    if max_arc <= 0:
        raise ValueError("max_arc must be positive")
    tab = _steer_table(max_arc, p.v, p.omega_max, levels, n_lengths)
    w, length, ex, ey, th = _steer_raw(start.x, start.y, start.theta, to.x, to.y, tab)
    return w, length, DubinsState(ex, ey, th)


def _steer_raw(x, y, th, tx, ty, tab):
    omegas, lengths, dx, dy, dth = tab
    c, s = math.cos(th), math.sin(th)
    # nearest end point to the target in the node's own frame
    lx, ly = c * (tx - x) + s * (ty - y), -s * (tx - x) + c * (ty - y)
    i = int(np.argmin((dx - lx) ** 2 + (dy - ly) ** 2))
    ex = x + c * dx[i] - s * dy[i]
    ey = y + s * dx[i] + c * dy[i]
    return float(omegas[i]), float(lengths[i]), float(ex), float(ey), th + float(dth[i])


def connect_arc(x, y, th, tx, ty, v, omega_max):
    """Single arc tangent to heading ``th`` at ``(x, y)`` passing through ``(tx, ty)``.

    Returns ``(omega, length, end_heading)`` or None when the target is not
    ahead or would need a turn rate above ``omega_max``.
    """
    dx, dy = tx - x, ty - y
    c, s = math.cos(th), math.sin(th)
    fx, ly = c * dx + s * dy, -s * dx + c * dy
    if fx <= 1e-9:
        return None
    d2 = fx * fx + ly * ly
    kappa = 2.0 * ly / d2
    if abs(kappa) * v > omega_max + 1e-12:
        return None
    turn = 2.0 * math.atan2(ly, fx)
    chord = math.sqrt(d2)
    length = chord if abs(turn) < 1e-9 else chord * turn / (2.0 * math.sin(turn / 2.0))
    return kappa * v, length, th + turn


# --------------------------------------------------------------------------
# collision checking


class NeighborField:
    """Neighbor positions on a fixed time grid, for time-indexed avoidance."""

    def __init__(self, neighbor_commits: Sequence, t_start: float, horizon: float, h: float, threshold: float):
        self.t_start = t_start
        self.h = h
        self.threshold = threshold
        self.n_slots = int(math.ceil(horizon / h)) + 2
        times = t_start + h * np.arange(self.n_slots)
        commits = list(neighbor_commits)
        if commits:
            self.pos = np.stack([as_sampled(c).positions_at(times) for c in commits])
        else:
            self.pos = np.empty((0, self.n_slots, 2))

    def __len__(self):
        return self.pos.shape[0]

    def clear(self, xs: np.ndarray, ys: np.ndarray, rel_times: np.ndarray) -> bool:
        return bool(self.clear_mask(xs, ys, rel_times).all())

    def clear_mask(self, xs: np.ndarray, ys: np.ndarray, rel_times: np.ndarray) -> np.ndarray:
        """Per-sample flag: far enough from every neighbor at the nearest grid time."""
        if self.pos.shape[0] == 0:
            return np.ones(len(xs), dtype=bool)
        # times are never negative here, so only the top needs clamping
        j = np.rint(rel_times * (1.0 / self.h)).astype(np.int64)
        np.minimum(j, self.n_slots - 1, out=j)
        nb = self.pos[:, j, :]
        d2 = (nb[..., 0] - xs) ** 2 + (nb[..., 1] - ys) ** 2
        return d2.min(axis=0) >= self.threshold * self.threshold


_FRACTIONS: dict = {}
_Pose = namedtuple("_Pose", "x y theta")


class _Checker:
    def __init__(self, env, neighbors: NeighborField, cfg: PlannerConfig, p: DubinsParams):
        self.env = env
        self.nb = neighbors
        self.cfg = cfg
        self.p = p
        if env is not None:
            self.free = env.clearance_grid(cfg.clearance)
            self.ox, self.oy = env.origin.x, env.origin.y
            self.res = env.resolution
            self.H, self.W = self.free.shape

    def points_free(self, xs, ys) -> bool:
        if self.env is None:
            return True
        ix = np.floor((xs - self.ox) / self.res).astype(np.int64)
        iy = np.floor((ys - self.oy) / self.res).astype(np.int64)
        if ix.min() < 0 or iy.min() < 0 or ix.max() >= self.W or iy.max() >= self.H:
            return False
        return bool(self.free[iy, ix].all())

    def arc_free(self, x, y, th, t_rel, omega, length) -> bool:
        v = self.p.v
        n = max(1, int(math.ceil(length / (v * self.cfg.check_dt) - 1e-12)))
        frac = _FRACTIONS.get(n)
        if frac is None:
            frac = _FRACTIONS.setdefault(n, np.arange(1, n + 1) / n)
        s = length * frac
        k = omega / v
        if abs(k * length) < 1e-9:
            a = th + 0.5 * k * s
            xs, ys = x + s * np.cos(a), y + s * np.sin(a)
        else:
            a = th + k * s
            xs = x + (np.sin(a) - math.sin(th)) / k
            ys = y - (np.cos(a) - math.cos(th)) / k
        if self.env is not None:
            ix = np.floor((xs - self.ox) / self.res).astype(np.int64)
            iy = np.floor((ys - self.oy) / self.res).astype(np.int64)
            if ix.min() < 0 or iy.min() < 0 or ix.max() >= self.W or iy.max() >= self.H:
                return False
            if not self.free[iy, ix].all():
                return False
        if len(self.nb):
            return self.nb.clear(xs, ys, t_rel + s / v)
        return True

    def arcs_free(self, x, y, th, t_rel, omega, length) -> np.ndarray:
        """Vectorized :meth:`arc_free` over several arcs at once."""
        x, y, th, t_rel, omega, length = (np.asarray(a, dtype=float) for a in (x, y, th, t_rel, omega, length))
        ds = self.p.v * self.cfg.check_dt
        counts = np.maximum(1, np.ceil(length / ds - 1e-12).astype(np.int64))
        owner = np.repeat(np.arange(len(x)), counts)
        starts = np.cumsum(counts) - counts
        k = np.arange(len(owner)) - starts[owner] + 1
        s = length[owner] * k / counts[owner]
        xs, ys, _ = arc_end(x[owner], y[owner], th[owner], self.p.v, omega[owner], s)
        bad = np.zeros(len(owner), dtype=bool)
        if self.env is not None:
            ix = np.floor((xs - self.ox) / self.res).astype(np.int64)
            iy = np.floor((ys - self.oy) / self.res).astype(np.int64)
            inside = (ix >= 0) & (iy >= 0) & (ix < self.W) & (iy < self.H)
            bad = ~inside
            bad[inside] = ~self.free[iy[inside], ix[inside]]
        if len(self.nb):
            bad |= ~self.nb.clear_mask(xs, ys, t_rel[owner] + s / self.p.v)
        out = np.ones(len(x), dtype=bool)
        out[owner[bad]] = False
        return out


def edge_collision_free(
    arc: SampledTrajectory,
    env,
    neighbor_commits: Sequence,
    t_offset: float,
    delta: float,
    margin: float = 0.0,
    clearance: float = 0.0,
) -> bool:
    """Check a sampled arc against the safe set and, time-indexed, against neighbor commits.

    Arc sample ``k`` is taken to happen at absolute time ``t_offset + arc.t0 + k*dt``.
    """
    pts = arc.positions
    if env is not None and not env.safe_mask(pts, clearance).all():
        return False
    times = t_offset + arc.t0 + arc.dt * np.arange(len(pts))
    for c in neighbor_commits:
        other = as_sampled(c).positions_at(times)
        if np.hypot(*(other - pts).T).min() < delta + margin:
            return False
    return True


# --------------------------------------------------------------------------
# goal guidance


def field_lookup(env, field_m: Optional[np.ndarray], goal: Point2) -> Callable[[float, float], float]:
    """Cost-to-go function: geodesic field where finite, Euclidean otherwise."""
    if env is None or field_m is None:
        return lambda x, y: math.hypot(x - goal.x, y - goal.y)
    ox, oy, res = env.origin.x, env.origin.y, env.resolution
    H, W = field_m.shape
    far = float(np.nanmax(np.where(np.isfinite(field_m), field_m, 0.0))) + 1.0

    def h(x, y):
        ix = int((x - ox) // res)
        iy = int((y - oy) // res)
        if 0 <= ix < W and 0 <= iy < H:
            v = field_m[iy, ix]
            if math.isfinite(v):
                return float(v)
        return far + math.hypot(x - goal.x, y - goal.y)

    return h


def _subgoal(start: DubinsState, goal: Point2, reach: float, env, field_m) -> Point2:
    if math.hypot(goal.x - start.x, goal.y - start.y) <= reach or env is None or field_m is None:
        d = math.hypot(goal.x - start.x, goal.y - start.y)
        if d <= reach:
            return goal
        f = reach / d
        return Point2(start.x + f * (goal.x - start.x), start.y + f * (goal.y - start.y))
    # walk down the geodesic field for `reach` meters
    res = env.resolution
    H, W = field_m.shape
    ix, iy = env.cell_of((start.x, start.y))
    if not (0 <= ix < W and 0 <= iy < H) or not math.isfinite(field_m[iy, ix]):
        d = math.hypot(goal.x - start.x, goal.y - start.y)
        f = reach / d
        return Point2(start.x + f * (goal.x - start.x), start.y + f * (goal.y - start.y))
    walked = 0.0
    while walked < reach:
        best, step = None, None
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                jx, jy = ix + dx, iy + dy
                if (dx or dy) and 0 <= jx < W and 0 <= jy < H:
                    v = field_m[jy, jx]
                    if best is None or v < best:
                        best, step = v, (dx, dy)
        if best is None or not best < field_m[iy, ix]:
            break
        walked += res * math.hypot(*step)
        ix, iy = ix + step[0], iy + step[1]
    return Point2(env.origin.x + (ix + 0.5) * res, env.origin.y + (iy + 0.5) * res)


# --------------------------------------------------------------------------
# planner


def _pad_direction(x, y, th, p: DubinsParams, env) -> int:
    if env is None:
        return CCW
    for d in (CCW, CW):
        cx, cy = loiter_center(x, y, th, p.turn_radius, d)
        if env.in_safe_set((cx, cy), p.turn_radius):
            return d
    return CCW


def plan_nominal(
    start: DubinsState,
    goal: Point2,
    env,
    neighbor_commits: Sequence,
    cfg: PlannerConfig,
    p: DubinsParams = DubinsParams(),
    delta: float = 0.5,
    t_start: float = 0.0,
    cost_to_go: Optional[np.ndarray] = None,
) -> NominalResult:
    """Plan a dynamically feasible trajectory of duration exactly ``cfg.horizon``.

    The tree grows from ``start`` with constant-turn-rate arcs, chooses the
    cheapest collision-free parent among nearby nodes and rewires leaves
    through the new node when that shortens them. Edges must stay in the
    safe set (with ``cfg.clearance``) and keep ``delta + cfg.neighbor_margin``
    from every neighbor commit at the same absolute time. The branch reaching
    the goal (cheapest), or else the one ending closest to it by
    ``cost_to_go``, is padded to the horizon with a max-rate turn.

    The output is not guaranteed collision free; callers validate it.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    v, T = p.v, cfg.horizon
    nb = NeighborField(neighbor_commits, t_start, T, cfg.check_dt, delta + cfg.neighbor_margin)
    chk = _Checker(env, nb, cfg, p)
    h = field_lookup(env, cost_to_go, goal)
    reach = v * T

    tree = PlannerTree()
    tree.add(start.x, start.y, start.theta, 0.0, 0.0, -1, 0.0, 0.0)
    xs = np.empty(cfg.max_iterations + 1)
    ys = np.empty(cfg.max_iterations + 1)
    open_ = np.zeros(cfg.max_iterations + 1, dtype=bool)
    hs = np.empty(cfg.max_iterations + 1)
    fails = np.zeros(cfg.max_iterations + 1)
    xs[0], ys[0], open_[0] = start.x, start.y, True
    hs[0] = h(start.x, start.y)
    t_eps = 1e-9
    full_tab = _steer_table(cfg.step_arc_length, v, p.omega_max, cfg.omega_levels, 8)

    for _ in range(cfg.max_iterations):
        n = len(tree)
        if rng.random() < cfg.goal_bias:
            # grow the most promising open node a little way down the cost-to-go
            # (nodes whose biased extensions keep failing drop down the order)
            step = cfg.step_arc_length
            hn = np.where(open_[:n], hs[:n] + step * fails[:n], np.inf)
            near_i = int(np.argmin(hn))
            if not math.isfinite(hn[near_i]):
                break
            biased = True
            g = _subgoal(_Pose(tree.x[near_i], tree.y[near_i], 0.0), goal, 2.0 * step, env, cost_to_go)
            r = 0.5 * step * math.sqrt(rng.random())
            a = rng.uniform(-math.pi, math.pi)
            tx, ty = g.x + r * math.cos(a), g.y + r * math.sin(a)
        else:
            r = reach * math.sqrt(rng.random())
            a = rng.uniform(-math.pi, math.pi)
            tx, ty = start.x + r * math.cos(a), start.y + r * math.sin(a)
            d2 = (xs[:n] - tx) ** 2 + (ys[:n] - ty) ** 2
            d2[~open_[:n]] = np.inf
            near_i = int(np.argmin(d2))
            if not math.isfinite(d2[near_i]):
                break
            biased = False
        t_left = T - tree.time[near_i]
        max_arc = min(cfg.step_arc_length, v * t_left)
        if max_arc <= 1e-6:
            continue
        tab = full_tab if max_arc == cfg.step_arc_length else _steer_table(max_arc, v, p.omega_max, cfg.omega_levels, 8)
        w, s, ex, ey, eth = _steer_raw(tree.x[near_i], tree.y[near_i], tree.theta[near_i], tx, ty, tab)
        end = _Pose(ex, ey, wrap_angle(eth))
        if not chk.arc_free(tree.x[near_i], tree.y[near_i], tree.theta[near_i], tree.time[near_i], w, s):
            if biased:
                fails[near_i] += 1
            continue
        best = (tree.cost[near_i] + s, near_i, w, s, end.theta)
        # choose the cheapest parent among nodes around the new point
        d2n = (xs[:n] - end.x) ** 2 + (ys[:n] - end.y) ** 2
        near = [int(j) for j in np.flatnonzero(d2n <= cfg.rewire_radius**2)]
        cands = []
        for j in near:
            if j == near_i or tree.cost[j] >= best[0]:
                continue
            arc = connect_arc(tree.x[j], tree.y[j], tree.theta[j], end.x, end.y, v, p.omega_max)
            if arc is None:
                continue
            wj, sj, thj = arc
            cj = tree.cost[j] + sj
            if cj < best[0] and tree.time[j] + sj / v <= T + t_eps:
                cands.append((cj, j, wj, sj, thj))
        if cands:
            free = chk.arcs_free(
                [tree.x[c[1]] for c in cands],
                [tree.y[c[1]] for c in cands],
                [tree.theta[c[1]] for c in cands],
                [tree.time[c[1]] for c in cands],
                [c[2] for c in cands],
                [c[3] for c in cands],
            )
            for c, ok in zip(cands, free):
                if ok and c[0] < best[0]:
                    best = c
        c_new, par, w_new, s_new, th_new = best
        i_new = tree.add(end.x, end.y, th_new, tree.time[par] + s_new / v, c_new, par, w_new, s_new)
        xs[i_new], ys[i_new] = end.x, end.y
        hs[i_new] = h(end.x, end.y)
        fails[i_new] = 0.0
        open_[i_new] = tree.time[i_new] < T - 1e-6
        # rewire leaves through the new node; each leaf is independent of the others
        t_new = tree.time[i_new]
        cands = []
        for j in near:
            if j == 0 or j == par or tree.children[j] > 0:
                continue
            arc = connect_arc(end.x, end.y, th_new, tree.x[j], tree.y[j], v, p.omega_max)
            if arc is None:
                continue
            wj, sj, thj = arc
            cj = c_new + sj
            tj = t_new + sj / v
            if cj < tree.cost[j] - 1e-12 and tj <= T + t_eps:
                cands.append((j, wj, sj, thj, cj, tj))
        if cands:
            k = len(cands)
            free = chk.arcs_free([end.x] * k, [end.y] * k, [th_new] * k, [t_new] * k, [c[1] for c in cands], [c[2] for c in cands])
            for (j, wj, sj, thj, cj, tj), ok in zip(cands, free):
                if not ok:
                    continue
                tree.children[tree.parent[j]] -= 1
                tree.parent[j], tree.omega[j], tree.length[j] = i_new, wj, sj
                tree.theta[j], tree.time[j], tree.cost[j] = thj, tj, cj
                tree.children[i_new] += 1
                open_[j] = tj < T - 1e-6
                tree.rewires += 1

    if len(tree) == 1:
        d = _pad_direction(start.x, start.y, start.theta, p, env)
        traj = propagate(start, d * p.omega_max, cfg.dt, T, p, t0=t_start)
        return NominalResult(traj, reached_goal=False, cost=0.0, degenerate=True, tree=tree)

    n = len(tree)
    gd = np.hypot(xs[:n] - goal.x, ys[:n] - goal.y)
    at_goal = np.flatnonzero(gd <= cfg.goal_tolerance)
    if at_goal.size:
        best_i = min((int(i) for i in at_goal), key=lambda i: (tree.cost[i], i))
        reached = True
    else:
        best_i = min(range(1, n), key=lambda i: (round(h(tree.x[i], tree.y[i]), 9), tree.cost[i], i))
        reached = False
    path = tree.path_to(best_i)
    schedule = [(tree.omega[i], tree.length[i] / v) for i in path[1:]]
    t_used = tree.time[best_i]
    if t_used < T - 1e-9:
        d = _pad_direction(tree.x[best_i], tree.y[best_i], tree.theta[best_i], p, env)
        schedule.append((d * p.omega_max, T - t_used))
    traj = propagate(start, schedule, cfg.dt, T, p, t0=t_start)
    return NominalResult(traj, reached_goal=reached, cost=float(tree.cost[best_i]), tree=tree)


def dump_tree(tree: PlannerTree, path) -> None:
    """Write ``parent_idx x y theta cost`` lines, one per node."""
    with open(path, "w") as fh:
        for i in range(len(tree)):
            fh.write(f"{tree.parent[i]} {tree.x[i]:.6f} {tree.y[i]:.6f} {tree.theta[i]:.6f} {tree.cost[i]:.6f}\n")
