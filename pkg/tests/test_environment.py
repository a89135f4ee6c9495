import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from r3r.environment import (
    CityLike,
    MapParseError,
    OccupancyEnvironment,
    OpenArena,
    ScenarioError,
    Swap,
    generate_scenario,
    load_map,
    save_map,
    spawn_clearance,
)
from r3r.geometry import Point2, R3RParams


def test_load_all_free():
    env = load_map("3 3 1.0\n...\n...\n...\n")
    assert env.occupied_count() == 0
    assert env.width == env.height == 3


def test_load_single_obstacle():
    env = load_map("3 3 1.0\n...\n.#.\n...\n")
    assert env.occupied_count() == 1
    assert env.cells[1, 1]


def test_first_row_is_top():
    env = load_map("2 2 0.5\n#.\n..\n")
    assert env.cells[1, 0] and not env.cells[0, 0]


@pytest.mark.parametrize(
    "doc, line, col",
    [
        ("3 3\n...\n...\n...\n", 1, 1),
        ("3 x 1\n...\n...\n...\n", 1, 1),
        ("3 3 1\n...\n..\n...\n", 3, 3),
        ("3 3 1\n...\n.o.\n...\n", 3, 2),
        ("3 3 1\n...\n...\n", 4, 1),
    ],
)
def test_parse_errors_carry_position(doc, line, col):
    with pytest.raises(MapParseError) as e:
        load_map(doc)
    assert (e.value.line, e.value.column) == (line, col)


@st.composite
def map_docs(draw):
    w = draw(st.integers(1, 12))
    h = draw(st.integers(1, 12))
    res = draw(st.sampled_from([0.1, 0.25, 0.5, 1, 2]))
    rows = ["".join(draw(st.lists(st.sampled_from("#."), min_size=w, max_size=w))) for _ in range(h)]
    return f"{w} {h} {res:g}\n" + "\n".join(rows) + "\n"


@given(map_docs())
def test_map_roundtrip(doc):
    assert save_map(load_map(doc)) == doc


def test_safe_set_examples():
    env = load_map("5 5 1.0\n.....\n.....\n..#..\n.....\n.....\n")
    assert env.in_safe_set(Point2(0.5, 0.5), 0.2)
    assert not env.in_safe_set(Point2(2.5, 2.5))
    # the obstacle is closed: its boundary is unsafe
    assert not env.in_safe_set(Point2(2.0, 2.5))
    assert env.in_safe_set(Point2(1.99, 2.5))
    assert not env.in_safe_set(Point2(1.875, 2.5), 0.125)
    # outside the grid
    assert not env.in_safe_set(Point2(-0.1, 2.5))
    assert not env.in_safe_set(Point2(4.95, 2.5), 0.1)


def test_safe_mask_matches_scalar(rng):
    cells = rng.random((30, 40)) < 0.1
    env = OccupancyEnvironment(cells, 0.5, 0.5, Point2(-3, 2))
    pts = np.column_stack([rng.uniform(-4, 18, 400), rng.uniform(1, 18, 400)])
    for margin in (0.0, 0.3, 1.1):
        mask = env.safe_mask(pts, margin)
        assert list(mask) == [env.in_safe_set(Point2(*p), margin) for p in pts]


def test_safe_set_agrees_with_brute_force(rng):
    cells = rng.random((20, 20)) < 0.08
    env = OccupancyEnvironment(cells, 0.5, 0.3)
    occ = env.inflated
    iy, ix = np.nonzero(occ)
    for _ in range(300):
        p = rng.uniform(0.2, 9.8, 2)
        margin = float(rng.uniform(0, 0.8))
        # distance to each closed occupied square
        dx = np.maximum(np.maximum(ix * 0.5 - p[0], p[0] - (ix + 1) * 0.5), 0)
        dy = np.maximum(np.maximum(iy * 0.5 - p[1], p[1] - (iy + 1) * 0.5), 0)
        clear = len(ix) == 0 or np.hypot(dx, dy).min() > margin
        inside = margin < p[0] < 10 - margin and margin < p[1] < 10 - margin
        assert env.in_safe_set(Point2(*p), margin) == (clear and inside)


def test_inflation_never_frees_and_is_monotone(rng):
    cells = rng.random((25, 25)) < 0.05
    prev = None
    for m in (0.0, 0.25, 0.5, 1.0, 1.7):
        occ = OccupancyEnvironment(cells, 0.5, m).inflated
        assert np.all(occ[cells])
        if prev is not None:
            assert np.all(occ[prev])
        prev = occ


def test_interior_point_of_isolated_free_cell_is_safe():
    env = load_map("3 3 1.0\n...\n...\n...\n")
    assert env.in_safe_set(Point2(1.5, 1.5), 0.49)


def test_geodesic_field_goes_around_walls():
    doc = "7 5 1\n.......\n...#...\n...#...\n...#...\n.......\n"
    env = load_map(doc)
    f = env.geodesic_field(Point2(6.5, 2.5))
    assert f[2, 6] == 0.0
    # straight-line distance is 6, the wall forces a detour
    assert f[2, 0] > 6.0 + 1e-9
    assert np.isfinite(f).sum() == 7 * 5 - 3


def test_swap_two_on_radius_ten(params, dyn):
    sc = generate_scenario(Swap(2, radius=10.0), params, dyn, seed=0)
    (a, b) = sc.agents
    assert (a.spawn.x, a.spawn.y) == pytest.approx((10, 0))
    assert (b.spawn.x, b.spawn.y) == pytest.approx((-10, 0), abs=1e-12)
    assert (a.goal.x, a.goal.y) == pytest.approx((b.spawn.x, b.spawn.y))
    assert (b.goal.x, b.goal.y) == pytest.approx((a.spawn.x, a.spawn.y))


def test_swap_rejects_crowded_circle(params, dyn):
    with pytest.raises(ScenarioError):
        generate_scenario(Swap(8, radius=5.0), params, dyn, seed=0)


def test_city_spawn_separation(params, dyn):
    sc = generate_scenario(CityLike(32), params, dyn, seed=3)
    assert len(sc.agents) == 32
    pts = np.array([[a.spawn.x, a.spawn.y] for a in sc.agents])
    d = np.hypot(*(pts[:, None] - pts[None]).transpose(2, 0, 1))
    np.fill_diagonal(d, np.inf)
    assert d.min() >= 2 * params.r_plan + params.delta
    for a in sc.agents:
        assert sc.env.in_safe_set(a.spawn.position, spawn_clearance(dyn))
        assert sc.env.in_safe_set(a.goal, spawn_clearance(dyn))
    x0, y0, x1, y1 = sc.env.extent
    assert x1 - x0 == pytest.approx(100) and y1 - y0 == pytest.approx(100)
    assert 0.1 < sc.env.cells.mean() < 0.6


def test_scenarios_are_deterministic(params, dyn):
    for kind in (Swap(4), CityLike(8), OpenArena(6, 60.0)):
        a = generate_scenario(kind, params, dyn, seed=11)
        b = generate_scenario(kind, params, dyn, seed=11)
        assert a.same_as(b)
    c = generate_scenario(CityLike(8), params, dyn, seed=12)
    assert not c.same_as(generate_scenario(CityLike(8), params, dyn, seed=11))


def test_unsatisfiable_separation_is_rejected(dyn):
    params = R3RParams.from_comm(16.0, 0.5)
    with pytest.raises(ScenarioError):
        generate_scenario(OpenArena(30, 20.0), params, dyn, seed=0)


def test_zero_agents_rejected(params, dyn):
    with pytest.raises(ScenarioError):
        generate_scenario(Swap(0), params, dyn, seed=0)
