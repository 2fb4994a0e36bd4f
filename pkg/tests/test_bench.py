import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from copamap.bench import (
    CostMap, Scenario, build_cost_map, chi2_distance, daily_departures, evaluate_model, free_cells,
    model_rates, nrmse, path_cost, plan_path, run_scenario, service_disturbance, simulate_encounters,
    write_curve_csv, write_report_csv,
)
from copamap.data import DetectionLog, GridSpec, OccupancyGrid, TrainingSet
from copamap.errors import DataError, NoPathError

SQRT2 = math.sqrt(2.0)


# -- metrics ----------------------------------------------------------------------


def test_nrmse_examples():
    assert nrmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert nrmse([2.0, 2.0], [1.0, 3.0]) == pytest.approx(0.5, abs=1e-12)
    y = np.array([0.5, 1.5, 4.0])
    assert nrmse(y + 0.3, y) == pytest.approx(0.3 / y.mean(), rel=1e-12)


def test_nrmse_errors():
    with pytest.raises(DataError):
        nrmse([1.0], [0.0])
    with pytest.raises(DataError):
        nrmse([1.0, 2.0], [1.0])
    with pytest.raises(DataError):
        nrmse([], [])


def test_chi2_examples():
    assert chi2_distance([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert chi2_distance([2.0], [0.0]) == 2.0
    with pytest.raises(DataError):
        chi2_distance([-1.0], [1.0])


def test_chi2_matches_loop(rng):
    a = rng.gamma(1.0, 1.0, 200) * (rng.uniform(size=200) < 0.7)
    b = rng.gamma(1.0, 1.0, 200) * (rng.uniform(size=200) < 0.7)
    want = 0.0
    for x, y in zip(a, b):
        if x + y > 0:
            want += (x - y) ** 2 / (x + y)
    assert chi2_distance(a, b) == pytest.approx(want, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_metrics_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.gamma(2.0, 1.0, 30), rng.gamma(2.0, 1.0, 30)
    p = rng.permutation(30)
    assert nrmse(a[p], b[p]) == pytest.approx(nrmse(a, b), rel=1e-12)
    assert chi2_distance(a[p], b[p]) == pytest.approx(chi2_distance(a, b), rel=1e-12)
    assert chi2_distance(a, b) > 0


class ConstantModel:
    def __init__(self, value):
        self.value = value

    def predict_rates(self, X):
        return np.full(len(X), self.value)


class Oracle:
    def __init__(self, gt):
        self.gt = gt

    def predict_rates(self, X):
        assert_array_equal(X, self.gt.X)
        return self.gt.y


def gt_set(rng, n=40):
    grid = GridSpec(1.0, 1800.0, (0, 0), 0.0, (5, 5))
    return TrainingSet.from_cells(grid, rng.integers(0, 25, n), np.arange(n), rng.poisson(4, n),
                                  np.full(n, 1800.0))


def test_evaluate_perfect_and_aggregation(rng):
    gts = [gt_set(rng), gt_set(rng)]
    perfect = evaluate_model([Oracle(g) for g in gts], gts)
    assert perfect.nrmse == 0.0 and perfect.chi2 == 0.0
    const = evaluate_model([ConstantModel(0.001)] * 2, gts)
    assert const.nrmse == pytest.approx(np.mean([nrmse(np.full(g.n, 0.001), g.y) for g in gts]))
    assert const.chi2 == pytest.approx(sum(chi2_distance(np.full(g.n, 0.001), g.y) for g in gts))
    with pytest.raises(DataError):
        evaluate_model([ConstantModel(0.0)], gts)


# -- cost maps ----------------------------------------------------------------------


def open_room(nx=6, ny=6, r_s=1.0):
    occ = OccupancyGrid((0.0, 0.0), r_s, np.zeros((ny, nx), bool))
    return occ, GridSpec(r_s, 3600.0, (0.0, 0.0), 0.0, (nx, ny))


def test_zero_activity_is_metric():
    occ, grid = open_room()
    cm = build_cost_map(np.zeros(grid.n_cells), occ, grid, base_cost=1.0)
    path = plan_path(cm, 0, grid.n_cells - 1)
    assert path.cost == pytest.approx(5 * SQRT2, rel=1e-12)
    path = plan_path(cm, 0, 5)
    assert path.cost == pytest.approx(5.0, rel=1e-12)
    assert_array_equal(path.cells, np.arange(6))


def test_edge_weights_match_formula(rng):
    occ, grid = open_room(7, 5, r_s=0.5)
    occ.cells[2, 3] = True
    rates = rng.normal(0.05, 0.05, grid.n_cells)
    cm = build_cost_map(rates, occ, grid, base_cost=0.05)
    nx, ny = grid.shape
    free = free_cells(occ, grid)
    for a in range(grid.n_cells):
        ax, ay = a % nx, a // nx
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                bx, by = ax + dx, ay + dy
                if (dx, dy) == (0, 0) or not (0 <= bx < nx and 0 <= by < ny):
                    continue
                b = by * nx + bx
                allowed = free[ay, ax] and free[by, bx] and (
                    not (dx and dy) or (free[ay, bx] and free[by, ax]))
                got = cm.edge_weight(a, b)
                if not allowed:
                    assert got == math.inf
                    continue
                step = 0.5 * (SQRT2 if dx and dy else 1.0)
                want = step * (0.05 + 0.5 * (abs(rates[a]) + abs(rates[b])))
                assert got == pytest.approx(want, rel=1e-12, abs=0)
                assert got == cm.edge_weight(b, a)


def test_cost_map_errors():
    occ, grid = open_room()
    with pytest.raises(DataError):
        build_cost_map(np.zeros(5), occ, grid)
    with pytest.raises(DataError):
        build_cost_map(np.zeros(grid.n_cells), occ, grid, base_cost=-1)
    cm = build_cost_map(np.zeros(grid.n_cells), occ, grid)
    with pytest.raises(DataError):
        cm.edge_weight(0, 2)


def test_busy_corridor_avoided():
    # two corridors of equal length around a central wall
    occ, grid = open_room(7, 5)
    occ.cells[1:4, 1:6] = True
    rates = np.zeros(grid.n_cells)
    rates[:7] = 0.5  # bottom corridor busy
    cm = build_cost_map(rates, occ, grid)
    path = plan_path(cm, (0.5, 2.5), (6.5, 2.5))
    assert np.all(path.points[:, 1] > 2.0)  # goes through the top
    flipped = build_cost_map(rates[::-1].copy(), occ, grid)
    assert plan_path(flipped, (0.5, 2.5), (6.5, 2.5)).cost == pytest.approx(path.cost, rel=1e-12)


def test_blocked_line_detour():
    occ, grid = open_room(5, 5)
    occ.cells[0:4, 2] = True
    cm = build_cost_map(np.zeros(grid.n_cells), occ, grid)
    path = plan_path(cm, 0, 4)
    nx = grid.shape[0]
    assert all(cm.free[c // nx, c % nx] for c in path.cells)
    assert 22 in path.cells  # the only gap, top row


def test_no_path_and_bad_endpoints():
    occ, grid = open_room(5, 5)
    occ.cells[:, 2] = True
    cm = build_cost_map(np.zeros(grid.n_cells), occ, grid)
    with pytest.raises(NoPathError):
        plan_path(cm, 0, 4)
    with pytest.raises(DataError):
        plan_path(cm, 2, 0)
    with pytest.raises(DataError):
        plan_path(cm, (-3.0, 0.0), 0)


def brute_force_cost(cm: CostMap, s: int, g: int) -> float:
    """Depth-first enumeration of simple paths; only branches already worse than the best are cut."""
    nx, ny = cm.grid.shape
    best = [math.inf]
    on_path = np.zeros(nx * ny, bool)

    def dfs(u, cost):
        if cost >= best[0]:
            return
        if u == g:
            best[0] = cost
            return
        on_path[u] = True
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                x, y = u % nx + dx, u // nx + dy
                if (dx, dy) == (0, 0) or not (0 <= x < nx and 0 <= y < ny):
                    continue
                v = y * nx + x
                w = cm.edge_weight(u, v)
                if w < math.inf and not on_path[v]:
                    dfs(v, cost + w)
        on_path[u] = False

    dfs(s, 0.0)
    return best[0]


def random_cost_map(rng, n=4):
    occ, grid = open_room(n, n)
    occ.cells[:] = rng.uniform(size=(n, n)) < 0.2
    occ.cells[0, 0] = occ.cells[-1, -1] = False
    return build_cost_map(rng.gamma(1.0, 0.5, grid.n_cells), occ, grid, base_cost=0.05)


def test_planner_matches_brute_force(rng):
    for _ in range(30):
        cm = random_cost_map(rng)
        want = brute_force_cost(cm, 0, 15)
        if want == math.inf:
            with pytest.raises(NoPathError):
                plan_path(cm, 0, 15)
            continue
        path = plan_path(cm, 0, 15)
        assert path.cost == pytest.approx(want, rel=1e-12)
        assert path_cost(cm, path.cells) == path.cost


def test_planner_no_worse_than_metric_path(rng):
    occ, grid = open_room(12, 9)
    occ.cells[3:6, 4:8] = True
    rates = rng.gamma(1.0, 0.3, grid.n_cells)
    cm = build_cost_map(rates, occ, grid)
    metric = plan_path(build_cost_map(np.zeros(grid.n_cells), occ, grid), 0, grid.n_cells - 1)
    assert plan_path(cm, 0, grid.n_cells - 1).cost <= path_cost(cm, metric.cells) + 1e-12


def test_planner_deterministic(rng):
    occ, grid = open_room(8, 8)
    cm = build_cost_map(np.zeros(grid.n_cells), occ, grid)
    a = plan_path(cm, 0, 63)
    assert_array_equal(a.cells, plan_path(cm, 0, 63).cells)


# -- encounters ---------------------------------------------------------------------


def test_encounters_trivial():
    path = np.array([[0.0, 0.0], [10.0, 0.0]])
    empty = DetectionLog(np.empty(0), np.empty(0), np.empty(0))
    assert simulate_encounters(path, 0.0, 0.5, empty, 1.0) == 0
    one = DetectionLog([8.0], [4.0], [0.0])
    assert simulate_encounters(path, 0.0, 0.5, one, 1.0) == 1
    late = DetectionLog([21.0], [10.0], [0.0])
    assert simulate_encounters(path, 0.0, 0.5, late, 1.0) == 0
    with pytest.raises(DataError):
        simulate_encounters(path, 0.0, 0.5, one, 0.0)


def crossing_stream(rng, n_people=60, hz=2.0):
    """People walking +y across the x axis; returns detections and per-person tracks."""
    xs = rng.uniform(0, 20, n_people)
    # most cross near the moment a robot leaving at t = 100 passes by
    cross = 100 + xs / 0.5 + rng.uniform(-4, 4, n_people)
    speed = rng.uniform(0.8, 1.5, n_people)
    phase = rng.uniform(0, 1 / hz, n_people)
    t, x1, x2 = [], [], []
    for c, T, u, ph in zip(xs, cross, speed, phase):
        k = np.arange(-20, 21)
        tk = T + ph + k / hz
        t.append(tk)
        x1.append(np.full(k.size, c))
        x2.append(u * (tk - T))
    return DetectionLog(np.concatenate(t), np.concatenate(x1), np.concatenate(x2)), (xs, cross, speed, phase)


def analytic_crossings(people, depart, v, length, radius, hz):
    """Count detection instants inside the closed disc around a robot moving along +x."""
    total = 0
    t_end = depart + length / v
    for c, T, u, ph in zip(*people):
        # |(c - v (t - depart), u (t - T))| <= radius  ->  a t^2 + b t + q <= 0
        a = v * v + u * u
        b = -2 * v * (c + v * depart) - 2 * u * u * T
        q = (c + v * depart) ** 2 + (u * T) ** 2 - radius ** 2
        disc = b * b - 4 * a * q
        if disc < 0:
            continue
        lo = max((-b - math.sqrt(disc)) / (2 * a), depart)
        hi = min((-b + math.sqrt(disc)) / (2 * a), t_end)
        k = np.arange(-20, 21)
        tk = T + ph + k / hz
        total += int(np.count_nonzero((tk >= lo) & (tk <= hi)))
    return total


def test_encounters_match_analytic_crossings(rng):
    log, people = crossing_stream(rng)
    path = np.array([[0.0, 0.0], [5.0, 0.0], [20.0, 0.0]])
    for depart in (80.0, 100.0, 110.0):
        got = simulate_encounters(path, depart, 0.5, log, 1.0)
        assert got == analytic_crossings(people, depart, 0.5, 20.0, 1.0, 2.0)
    assert simulate_encounters(path, 100.0, 0.5, log, 1.0) > 10


def test_encounters_monotone_in_radius(rng):
    log, _ = crossing_stream(rng)
    path = np.array([[0.0, 0.0], [20.0, 0.0]])
    counts = [simulate_encounters(path, 100.0, 0.5, log, r) for r in (0.25, 0.5, 1.0, 2.0, 4.0)]
    assert counts == sorted(counts)


# -- service disturbance ------------------------------------------------------------


def test_service_disturbance_prefix_sums():
    costs = [3.0, 1.0, 2.0, 5.0]
    enc = [4, 1, 0, 7]
    r, E = service_disturbance(costs, enc, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert_array_equal(E, [0, 1, 1, 5, 12])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), p=st.integers(1, 300))
def test_service_disturbance_non_decreasing(seed, p):
    rng = np.random.default_rng(seed)
    r, E = service_disturbance(rng.uniform(size=p), rng.integers(0, 10, p))
    assert E[0] == 0
    assert np.all(np.diff(E) >= 0)


def test_scenario_count():
    days = [0.0, 86400.0, 2 * 86400.0, 3 * 86400.0]
    deps = daily_departures(days)
    assert len(deps) == 240
    assert deps[0] == 9 * 3600.0 and deps[4] == 9 * 3600.0 + 4 * 720.0
    assert max(d % 86400 for d in deps) < 21 * 3600.0
    with pytest.raises(DataError):
        Scenario([(0, 0)], deps)


def test_run_scenario_and_exports(tmp_path, rng):
    occ, grid = open_room(10, 6)
    log, _ = crossing_stream(rng)
    sc = Scenario([(0.5, 0.5), (9.5, 0.5), (9.5, 5.5)], [90.0, 100.0, 130.0])
    busy = np.zeros(grid.n_cells)
    busy[:10] = 1.0

    class Busy:
        def predict_rates(self, X):
            return np.where(X[:, 1] < 1.0, 1.0, 0.0)

    rep = run_scenario(sc, model_rates(Busy(), grid), occ, grid, log)
    metric = run_scenario(sc, None, occ, grid, log)
    assert rep.E[0] == 0 and np.all(np.diff(rep.E) >= 0)
    assert np.all(rep.costs > metric.costs)
    assert rep.E[-1] == rep.encounters.sum()
    write_report_csv(rep, tmp_path / "report.csv")
    write_curve_csv(rep, tmp_path / "curve.csv")
    rows = np.genfromtxt(tmp_path / "report.csv", delimiter=",", names=True)
    assert_allclose(rows["cost"], rep.costs, rtol=0)
    assert (tmp_path / "curve.csv").read_text().startswith("r,E\n")
