"""Independent safety re-check of recorded traces.

Deliberately shares no geometry or grid code with the rest of the package:
distances and grid lookups are recomputed here from raw arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class Violation:
    kind: str  # "pair" or "safe_set"
    t_start: float
    t_end: float
    agents: tuple[int, ...]
    distance: float  # closest pair distance, or nan for safe-set exits

    def line(self) -> str:
        who = "-".join(str(a) for a in self.agents)
        return f"{self.kind} {who} t=[{self.t_start:.4f},{self.t_end:.4f}] d={self.distance:.4f}"


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Index ranges [start, end] of contiguous True runs."""
    if not mask.any():
        return []
    m = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(m))
    return [(int(s), int(e) - 1) for s, e in zip(edges[::2], edges[1::2])]


def inflate_cells(cells: np.ndarray, resolution: float, inflation: float) -> np.ndarray:
    """Grow obstacles by every cell whose center lies within ``inflation`` of an occupied center."""
    cells = np.asarray(cells, dtype=bool)
    if inflation <= 0 or not cells.any():
        return cells.copy()
    dist = ndimage.distance_transform_edt(~cells)  # in cells, center to center
    return dist * resolution <= inflation + 1e-9 * resolution


def _resample(rows: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Positions of one agent on ``grid``; NaN where the agent is absent."""
    out = np.full((len(grid), 2), np.nan)
    if len(rows) == 0:
        return out
    t = rows[:, 0]
    idx = np.searchsorted(grid, t - 1e-9)
    hit = (idx < len(grid)) & (np.abs(grid[np.minimum(idx, len(grid) - 1)] - t) <= 1e-6)
    out[idx[hit]] = rows[hit, 1:3]
    return out


def oracle_check(
    traces: Mapping[int, np.ndarray],
    cells: Optional[np.ndarray],
    resolution: float,
    origin: tuple[float, float],
    inflation: float,
    delta: float,
    oracle_dt: float,
) -> list[Violation]:
    """Pairwise distances and safe-set membership at every ``oracle_dt`` step.

    ``traces`` maps agent id to ``t x y theta omega`` rows. Rows are matched to
    the grid ``k * oracle_dt``; rows off the grid are ignored. Each
    contiguous stretch of violation for one pair (or one agent) is one event.
    """
    if not traces:
        return []
    t_max = max(float(r[-1, 0]) for r in traces.values() if len(r))
    grid = oracle_dt * np.arange(int(np.floor(t_max / oracle_dt + 1e-6)) + 1)
    ids = sorted(traces)
    pos = {i: _resample(np.asarray(traces[i], dtype=float), grid) for i in ids}
    found: list[Violation] = []
    for a_i, a in enumerate(ids):
        pa = pos[a]
        for b in ids[a_i + 1 :]:
            pb = pos[b]
            both = ~np.isnan(pa[:, 0]) & ~np.isnan(pb[:, 0])
            if not both.any():
                continue
            d = np.full(len(grid), np.inf)
            diff = pa[both] - pb[both]
            d[both] = np.sqrt(diff[:, 0] ** 2 + diff[:, 1] ** 2)
            for s, e in _runs(d < delta):
                found.append(Violation("pair", grid[s], grid[e], (a, b), float(d[s : e + 1].min())))
    if cells is not None:
        blocked = inflate_cells(cells, resolution, inflation)
        h, w = blocked.shape
        for a in ids:
            p = pos[a]
            present = ~np.isnan(p[:, 0])
            bad = np.zeros(len(grid), dtype=bool)
            cx = np.floor((p[present, 0] - origin[0]) / resolution).astype(np.int64)
            cy = np.floor((p[present, 1] - origin[1]) / resolution).astype(np.int64)
            outside = (cx < 0) | (cx >= w) | (cy < 0) | (cy >= h)
            hit = outside.copy()
            hit[~outside] = blocked[cy[~outside], cx[~outside]]
            bad[present] = hit
            for s, e in _runs(bad):
                found.append(Violation("safe_set", grid[s], grid[e], (a,), float("nan")))
    found.sort(key=lambda v: (v.t_start, v.kind, v.agents))
    return found
