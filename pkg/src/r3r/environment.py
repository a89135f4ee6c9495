"""Occupancy-grid world model, the safe set and scenario generation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from r3r.dynamics import DubinsParams, DubinsState
from r3r.geometry import Point2, R3RParams


class MapParseError(ValueError):
    def __init__(self, line: int, column: int, message: str):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


def _disc_offsets(radius_cells: float) -> np.ndarray:
    k = int(math.floor(radius_cells))
    ii, jj = np.mgrid[-k : k + 1, -k : k + 1]
    return (ii**2 + jj**2) <= radius_cells**2 + 1e-9


@dataclass(frozen=True, eq=False)
class OccupancyEnvironment:
    """Raw occupancy grid plus its inflation; the safe set is the inflated free space.

    ``cells[iy, ix]`` is True when occupied. Cell ``(ix, iy)`` covers
    ``[ox + ix*res, ox + (ix+1)*res) x [oy + iy*res, oy + (iy+1)*res)``.
    Points outside the grid are unsafe.
    """

    cells: np.ndarray
    resolution: float
    inflation: float = 0.0
    origin: Point2 = field(default_factory=lambda: Point2(0.0, 0.0))

    def __post_init__(self):
        cells = np.array(self.cells, dtype=bool)
        if cells.ndim != 2 or cells.size == 0:
            raise ValueError("cells must be a non-empty 2D grid")
        if self.resolution <= 0 or self.inflation < 0:
            raise ValueError("resolution must be positive and inflation non-negative")
        cells.flags.writeable = False
        object.__setattr__(self, "cells", cells)

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def extent(self) -> tuple[float, float, float, float]:
        ox, oy = self.origin.x, self.origin.y
        return ox, oy, ox + self.width * self.resolution, oy + self.height * self.resolution

    @cached_property
    def inflated(self) -> np.ndarray:
        if self.inflation == 0 or not self.cells.any():
            out = self.cells.copy()
        else:
            struct = _disc_offsets(self.inflation / self.resolution)
            out = ndimage.binary_dilation(self.cells, structure=struct) | self.cells
        out.flags.writeable = False
        return out

    def with_inflation(self, inflation: float) -> "OccupancyEnvironment":
        return OccupancyEnvironment(self.cells, self.resolution, inflation, self.origin)

    def cell_of(self, p) -> tuple[int, int]:
        x, y = p
        return (
            int(math.floor((x - self.origin.x) / self.resolution)),
            int(math.floor((y - self.origin.y) / self.resolution)),
        )

    def safe_mask(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Vectorized :meth:`in_safe_set` over an ``(M, 2)`` array."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        res = self.resolution
        gx = (pts[:, 0] - self.origin.x) / res
        gy = (pts[:, 1] - self.origin.y) / res
        ix = np.floor(gx).astype(np.int64)
        iy = np.floor(gy).astype(np.int64)
        occ = self.inflated
        H, W = occ.shape
        # the disc must stay inside the grid
        x0, y0, x1, y1 = self.extent
        ok = (
            (pts[:, 0] - margin > x0)
            & (pts[:, 0] + margin < x1)
            & (pts[:, 1] - margin > y0)
            & (pts[:, 1] + margin < y1)
        )
        # cells whose every point is safe need no exact test
        quick = self.clearance_grid(margin)
        inside = (ix >= 0) & (ix < W) & (iy >= 0) & (iy < H)
        sure = np.zeros(len(pts), dtype=bool)
        sure[inside] = quick[iy[inside], ix[inside]]
        todo = ok & ~sure
        if not todo.any():
            return ok
        k = int(math.ceil(margin / res)) + 1
        for dy in range(-k, k + 1):
            for dx in range(-k, k + 1):
                gap = math.hypot(max(abs(dx) - 1, 0), max(abs(dy) - 1, 0)) * res
                if gap > margin:
                    continue
                cx, cy = ix + dx, iy + dy
                inside = (cx >= 0) & (cx < W) & (cy >= 0) & (cy < H)
                blocked = np.zeros(len(pts), dtype=bool)
                blocked[inside] = occ[cy[inside], cx[inside]]
                if not blocked.any():
                    continue
                # distance from point to the closed cell square, in cells
                ddx = np.maximum(np.maximum(cx - gx, gx - (cx + 1)), 0.0)
                ddy = np.maximum(np.maximum(cy - gy, gy - (cy + 1)), 0.0)
                ok &= ~(blocked & (np.hypot(ddx, ddy) * res <= margin))
        return ok

    def in_safe_set(self, p, margin: float = 0.0) -> bool:
        """True iff the closed disc of radius ``margin`` at ``p`` avoids every inflated cell."""
        x, y = p
        return bool(self.safe_mask(np.array([[x, y]]), margin)[0])

    def clearance_grid(self, margin: float) -> np.ndarray:
        """Cells every point of which is safe with ``margin`` (conservative, for fast lookups)."""
        cache = self.__dict__.setdefault("_clearance_cache", {})
        key = float(margin)
        if key not in cache:
            k = int(math.ceil(margin / self.resolution))
            ii, jj = np.mgrid[-k - 1 : k + 2, -k - 1 : k + 2]
            gap = np.hypot(np.maximum(np.abs(ii) - 1, 0), np.maximum(np.abs(jj) - 1, 0)) * self.resolution
            struct = gap <= margin
            padded = np.pad(self.inflated, k + 1, constant_values=True)
            blocked = ndimage.binary_dilation(padded, structure=struct)[k + 1 : -(k + 1), k + 1 : -(k + 1)]
            cache[key] = ~blocked
        return cache[key]

    def geodesic_field(self, goal: Point2, clearance: float = 0.0) -> np.ndarray:
        """Shortest free-space path length (meters) from every cell to ``goal``'s cell.

        Paths keep ``clearance`` from unsafe space where they can. Cells cut
        off at that clearance get their zero-clearance distance plus a penalty
        above every clearance-respecting value, so descent still finds the
        narrow way out.
        """
        full = self._field(goal, ~self.inflated)
        if clearance <= 0:
            return full
        wide = self._field(goal, self.clearance_grid(clearance))
        ok = np.isfinite(wide)
        if not ok.any():
            return full
        penalty = float(wide[ok].max()) + 1.0
        return np.where(ok, wide, full + penalty)

    def _field(self, goal: Point2, free: np.ndarray) -> np.ndarray:
        from skimage.graph import MCP_Geometric

        gx, gy = self.cell_of(goal)
        gx = min(max(gx, 0), self.width - 1)
        gy = min(max(gy, 0), self.height - 1)
        free = free.copy()
        free[gy, gx] = True
        costs = np.where(free, 1.0, np.inf)
        mcp = MCP_Geometric(costs, fully_connected=True)
        dist, _ = mcp.find_costs([(gy, gx)])
        return dist * self.resolution

    def occupied_count(self) -> int:
        return int(self.cells.sum())


GLYPH_FREE = "."
GLYPH_OCC = "#"


def load_map(text: str, inflation: float = 0.0) -> OccupancyEnvironment:
    """Parse ``W H RES`` followed by H rows of W glyphs (first row is the top)."""
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise MapParseError(1, 1, "empty map document")
    head = lines[0].split()
    if len(head) != 3:
        raise MapParseError(1, 1, "header must be 'W H RES'")
    try:
        w, h = int(head[0]), int(head[1])
        res = float(head[2])
    except ValueError:
        raise MapParseError(1, 1, f"malformed header {lines[0]!r}") from None
    if w <= 0 or h <= 0 or not res > 0:
        raise MapParseError(1, 1, "W, H and RES must be positive")
    rows = lines[1:]
    if len(rows) != h:
        raise MapParseError(len(lines) + 1, 1, f"expected {h} rows, found {len(rows)}")
    grid = np.zeros((h, w), dtype=bool)
    for r, row in enumerate(rows):
        row = row.rstrip()
        if len(row) != w:
            raise MapParseError(r + 2, min(len(row), w) + 1, f"row has {len(row)} glyphs, expected {w}")
        for c, ch in enumerate(row):
            if ch == GLYPH_OCC:
                grid[h - 1 - r, c] = True
            elif ch != GLYPH_FREE:
                raise MapParseError(r + 2, c + 1, f"unknown glyph {ch!r}")
    return OccupancyEnvironment(grid, res, inflation)


def save_map(env: OccupancyEnvironment) -> str:
    lines = [f"{env.width} {env.height} {env.resolution:g}"]
    for r in range(env.height - 1, -1, -1):
        lines.append("".join(GLYPH_OCC if v else GLYPH_FREE for v in env.cells[r]))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class AgentSpec:
    spawn: DubinsState
    goal: Point2
    join_time: float = 0.0
    leave_time: Optional[float] = None


@dataclass(frozen=True)
class Swap:
    n: int
    radius: Optional[float] = None


@dataclass(frozen=True)
class CityLike:
    n: int
    size: float = 100.0


@dataclass(frozen=True)
class MapFile:
    path: str
    n: int


@dataclass(frozen=True)
class OpenArena:
    n: int
    side: float


ScenarioKind = Union[Swap, CityLike, MapFile, OpenArena]


@dataclass(frozen=True, eq=False)
class Scenario:
    env: OccupancyEnvironment
    agents: tuple[AgentSpec, ...]
    params: R3RParams
    dyn: DubinsParams
    duration: float
    seed: int
    name: str = "scenario"

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))

    def same_as(self, other: "Scenario") -> bool:
        return (
            self.agents == other.agents
            and self.params == other.params
            and self.dyn == other.dyn
            and self.duration == other.duration
            and np.array_equal(self.env.cells, other.env.cells)
            and self.env.resolution == other.env.resolution
            and self.env.origin == other.env.origin
        )


class ScenarioError(ValueError):
    pass


MAX_TRIES = 10_000


def default_inflation(params: R3RParams) -> float:
    body = params.delta / 2.0
    return params.delta / 2.0 + body


def spawn_clearance(dyn: DubinsParams) -> float:
    """Free radius needed around a spawn or goal so a loiter fits in either direction."""
    return 2.0 * dyn.turn_radius + 0.5


def _empty_env(x0: float, y0: float, side_x: float, side_y: float, res: float, inflation: float):
    w = int(math.ceil(side_x / res))
    h = int(math.ceil(side_y / res))
    return OccupancyEnvironment(np.zeros((h, w), dtype=bool), res, inflation, Point2(x0, y0))


def _city_grid(size: float, res: float, dyn: DubinsParams, inflation: float, rng) -> np.ndarray:
    n = int(math.ceil(size / res))
    grid = np.zeros((n, n), dtype=bool)
    pitch = 20.0
    street = max(4.0 * dyn.turn_radius + 2.0 * inflation, 6.0)
    max_block = pitch - street - 1.0
    lattice = int(round(size / pitch))
    for i in range(lattice):
        for j in range(lattice):
            if rng.random() < 0.15:
                continue  # plaza
            bw = rng.uniform(0.55, 1.0) * max_block
            bh = rng.uniform(0.55, 1.0) * max_block
            cx = (i + 0.5) * pitch + rng.uniform(-0.5, 0.5)
            cy = (j + 0.5) * pitch + rng.uniform(-0.5, 0.5)
            x0 = int(round((cx - bw / 2) / res))
            x1 = int(round((cx + bw / 2) / res))
            y0 = int(round((cy - bh / 2) / res))
            y1 = int(round((cy + bh / 2) / res))
            grid[max(y0, 0) : min(y1, n), max(x0, 0) : min(x1, n)] = True
    return grid


def _sample_points(env, count, clearance, min_sep, rng, existing=()):
    x0, y0, x1, y1 = env.extent
    free = env.clearance_grid(clearance)
    pts: list[tuple[float, float]] = []
    tries = 0
    while len(pts) < count:
        tries += 1
        if tries > MAX_TRIES:
            raise ScenarioError(
                f"could not place {count} points with separation {min_sep:.3f} after {MAX_TRIES} tries"
            )
        p = (rng.uniform(x0, x1), rng.uniform(y0, y1))
        ix, iy = env.cell_of(p)
        if not (0 <= ix < env.width and 0 <= iy < env.height and free[iy, ix]):
            continue
        if not env.in_safe_set(p, clearance):
            continue
        if any(math.hypot(p[0] - q[0], p[1] - q[1]) < min_sep for q in pts):
            continue
        pts.append(p)
    return pts


def _random_agents(env, n, params, dyn, rng, join_spread: float = 0.0):
    clearance = spawn_clearance(dyn)
    spawns = _sample_points(env, n, clearance, 2.0 * params.r_plan + params.delta, rng)
    goals = _sample_points(env, n, clearance, 4.0 * dyn.turn_radius + params.delta + 1.0, rng)
    agents = []
    for (sx, sy), (gx, gy) in zip(spawns, goals):
        heading = rng.uniform(-math.pi, math.pi)
        join = rng.uniform(0.0, join_spread) if join_spread > 0 else 0.0
        agents.append(AgentSpec(DubinsState(sx, sy, heading), Point2(gx, gy), join_time=join))
    return agents


def generate_scenario(
    kind: ScenarioKind,
    params: R3RParams,
    dyn: DubinsParams,
    seed: int,
    duration: float = 300.0,
    resolution: float = 0.5,
    inflation: Optional[float] = None,
) -> Scenario:
    """Build a deterministic scenario from a kind directive and a seed."""
    if kind.n < 1:
        raise ScenarioError("a scenario needs at least one agent")
    rng = np.random.default_rng(seed)
    infl = default_inflation(params) if inflation is None else inflation
    if isinstance(kind, Swap):
        sep = 2.0 * params.r_plan + params.delta
        needed = sep / (2.0 * math.sin(math.pi / kind.n)) * 1.05 if kind.n > 1 else 0.0
        radius = kind.radius if kind.radius is not None else max(10.0, needed)
        if kind.n > 1 and 2.0 * radius * math.sin(math.pi / kind.n) < sep - 1e-9:
            raise ScenarioError(f"swap radius {radius} too small for separation {sep:.3f}")
        pad = 10.0
        env = _empty_env(-radius - pad, -radius - pad, 2 * (radius + pad), 2 * (radius + pad), resolution, infl)
        agents = []
        for i in range(kind.n):
            a = 2.0 * math.pi * i / kind.n
            sx, sy = radius * math.cos(a), radius * math.sin(a)
            # exact antipode without trig round-off
            agents.append(AgentSpec(DubinsState(sx, sy, a + math.pi), Point2(-sx, -sy)))
        name = f"swap{kind.n}"
    elif isinstance(kind, CityLike):
        grid = _city_grid(kind.size, resolution, dyn, infl, rng)
        env = OccupancyEnvironment(grid, resolution, infl)
        agents = _random_agents(env, kind.n, params, dyn, rng)
        name = f"city{kind.n}"
    elif isinstance(kind, MapFile):
        env = load_map(Path(kind.path).read_text(), infl)
        agents = _random_agents(env, kind.n, params, dyn, rng)
        name = f"{Path(kind.path).stem}{kind.n}"
    elif isinstance(kind, OpenArena):
        env = _empty_env(0.0, 0.0, kind.side, kind.side, resolution, infl)
        agents = _random_agents(env, kind.n, params, dyn, rng)
        name = f"open{kind.n}x{kind.side:g}"
    else:
        raise TypeError(f"unknown scenario kind {kind!r}")
    return Scenario(env, tuple(agents), params, dyn, duration, seed, name)
