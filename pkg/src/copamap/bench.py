"""Error metrics and the service-disturbance navigation benchmark."""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import DetectionLog, GridSpec, OccupancyGrid, TrainingSet
from .errors import DataError, NoPathError

TABLE_COMBOS = ((0.5, 1800.0), (0.5, 3600.0), (0.75, 1800.0), (0.75, 3600.0))

# 8-neighbourhood as (dx, dy); order fixes the relaxation order, not the result
_MOVES = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _pair(y_hat, y_gt):
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    y_gt = np.asarray(y_gt, dtype=float).ravel()
    if y_hat.shape != y_gt.shape or y_hat.size == 0:
        raise DataError("predictions and ground truth must be non-empty and equally long")
    return y_hat, y_gt


def nrmse(y_hat, y_gt) -> float:
    """Root-mean-square error divided by the mean ground-truth value."""
    y_hat, y_gt = _pair(y_hat, y_gt)
    mean = y_gt.mean()
    if mean == 0:
        raise DataError("ground truth has zero mean; NRMSE undefined")
    return float(np.sqrt(np.mean((y_hat - y_gt) ** 2)) / mean)


def chi2_distance(y_hat, y_gt) -> float:
    """``sum (y_hat - y_gt)^2 / (y_hat + y_gt)``; terms with a zero denominator are 0."""
    y_hat, y_gt = _pair(y_hat, y_gt)
    if np.any(y_hat < 0) or np.any(y_gt < 0):
        raise DataError("chi-square distance needs non-negative inputs")
    den = y_hat + y_gt
    num = (y_hat - y_gt) ** 2
    return float(np.sum(np.divide(num, den, out=np.zeros_like(num), where=den > 0)))


@dataclass(frozen=True)
class PathMetrics:
    nrmse_per_path: tuple
    chi2_per_path: tuple

    @property
    def nrmse(self) -> float:
        return float(np.mean(self.nrmse_per_path))

    @property
    def chi2(self) -> float:
        return float(np.sum(self.chi2_per_path))


def evaluate_model(models: Sequence, truths: Sequence[TrainingSet]) -> PathMetrics:
    """Score one model per robot path against that path's ground truth.

    NRMSE is averaged over paths and the chi-square distance summed, the
    usual aggregation for comparing activity models across paths.
    """
    if len(models) != len(truths) or not truths:
        raise DataError("need one model per ground-truth set")
    nr, ch = [], []
    for model, gt in zip(models, truths):
        if gt.n == 0:
            raise DataError("ground truth has no cells")
        pred = np.maximum(np.asarray(model.predict_rates(gt.X), dtype=float), 0.0)
        nr.append(nrmse(pred, gt.y))
        ch.append(chi2_distance(pred, gt.y))
    return PathMetrics(tuple(nr), tuple(ch))


def write_metrics_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=["model", "r_s", "tau", "nrmse", "chi2"])
        out.writeheader()
        for row in rows:
            out.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------------------
# cost maps and planning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostMap:
    """Undirected 8-connected graph over the free cells of a planning grid.

    ``weights[d, iy, ix]`` is the cost of the move ``_MOVES[d]`` out of cell
    ``(ix, iy)``; ``inf`` where the move is not allowed.
    """

    grid: GridSpec
    free: np.ndarray  # (ny, nx)
    rates: np.ndarray  # (ny, nx), rectified
    base_cost: float
    weights: np.ndarray  # (8, ny, nx)

    def edge_weight(self, a: int, b: int) -> float:
        nx = self.grid.shape[0]
        dx, dy = b % nx - a % nx, b // nx - a // nx
        try:
            d = _MOVES.index((dx, dy))
        except ValueError:
            raise DataError("cells are not adjacent") from None
        return float(self.weights[d, a // nx, a % nx])


def free_cells(occ: OccupancyGrid, grid: GridSpec) -> np.ndarray:
    """Planning cells whose centre lies on free map space, shape ``(ny, nx)``."""
    x1, x2 = grid.cell_center(grid.all_cells())
    return (~occ.occupied_at(x1, x2)).reshape(grid.shape[1], grid.shape[0])


def build_cost_map(rates, occ: OccupancyGrid, grid: GridSpec, base_cost: float = 0.05,
                   free=None) -> CostMap:
    """Edge weight = step length * (base_cost + mean rectified rate of the two cells).

    ``rates`` holds one predicted rate per grid cell (linear ids). Diagonal
    moves must not cut the corner of a blocked cell.
    """
    if base_cost < 0:
        raise DataError("base_cost must be non-negative")
    nx, ny = grid.shape
    rates = np.asarray(rates, dtype=float).ravel()
    if rates.size != nx * ny:
        raise DataError(f"need {nx * ny} cell rates, got {rates.size}")
    free = free_cells(occ, grid) if free is None else np.asarray(free, dtype=bool)
    r = np.where(free, np.abs(rates.reshape(ny, nx)), 0.0)
    if not np.all(np.isfinite(r)):
        raise DataError("predicted rates must be finite on free cells")
    # pad by one blocked ring so every shifted view is in range
    fp = np.pad(free, 1)
    rp = np.pad(r, 1)
    W = np.full((8, ny, nx), np.inf)
    for d, (dx, dy) in enumerate(_MOVES):
        nb_free = fp[1 + dy:1 + dy + ny, 1 + dx:1 + dx + nx]
        nb_rate = rp[1 + dy:1 + dy + ny, 1 + dx:1 + dx + nx]
        ok = free & nb_free
        if dx and dy:
            ok &= fp[1:1 + ny, 1 + dx:1 + dx + nx] & fp[1 + dy:1 + dy + ny, 1:1 + nx]
        step = grid.r_s * (math.sqrt(2.0) if dx and dy else 1.0)
        W[d] = np.where(ok, step * (base_cost + 0.5 * (r + nb_rate)), np.inf)
    return CostMap(grid, free, r, float(base_cost), W)


@dataclass(frozen=True)
class PlannedPath:
    cells: np.ndarray
    cost: float
    points: np.ndarray  # (k, 2) cell centres

    @property
    def length(self) -> float:
        return float(np.sum(np.hypot(*np.diff(self.points, axis=0).T))) if len(self.points) > 1 else 0.0


def _as_cell(cm: CostMap, p) -> int:
    if np.ndim(p) == 0:
        cell = int(p)
        if not 0 <= cell < cm.grid.n_cells:
            raise DataError(f"cell {cell} outside the grid")
    else:
        cell = int(cm.grid.cell_index(p[0], p[1]))
        if cell < 0:
            raise DataError(f"position {tuple(p)} outside the grid")
    nx = cm.grid.shape[0]
    if not cm.free[cell // nx, cell % nx]:
        raise DataError(f"cell {cell} is not free")
    return cell


def plan_path(cm: CostMap, start, goal) -> PlannedPath:
    """Minimum-cost path by Dijkstra; ties in distance pop the lower cell id first.

    ``start``/``goal`` are cell ids or ``(x1, x2)`` positions.
    """
    s, g = _as_cell(cm, start), _as_cell(cm, goal)
    nx, ny = cm.grid.shape
    n = nx * ny
    W = cm.weights.reshape(8, n)
    offs = [dy * nx + dx for dx, dy in _MOVES]
    dist = np.full(n, np.inf)
    prev = np.full(n, -1, dtype=np.int64)
    dist[s] = 0.0
    heap = [(0.0, s)]
    done = np.zeros(n, dtype=bool)
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        if u == g:
            break
        for k in range(8):
            w = W[k, u]
            if w == math.inf:
                continue
            v = u + offs[k]
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                prev[v] = u
                heapq.heappush(heap, (nd, v))
    if not done[g]:
        raise NoPathError(f"no path from cell {s} to cell {g}")
    cells = [g]
    while cells[-1] != s:
        cells.append(int(prev[cells[-1]]))
    cells = np.array(cells[::-1], dtype=np.int64)
    return PlannedPath(cells, path_cost(cm, cells), np.column_stack(cm.grid.cell_center(cells)))


def path_cost(cm: CostMap, cells) -> float:
    """Sum of edge weights along consecutive cells, accumulated from the start."""
    total = 0.0
    for a, b in zip(cells[:-1], cells[1:]):
        total += cm.edge_weight(int(a), int(b))
    return total


# ---------------------------------------------------------------------------
# encounters and service disturbance
# ---------------------------------------------------------------------------


def _timeline(points, depart_time: float, speed: float):
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.any(np.diff(pts, axis=0) != 0, axis=1)
    pts = pts[keep]
    s = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
    return pts, depart_time + s / speed


def simulate_encounters(points, depart_time: float, speed: float, test_log: DetectionLog,
                        radius: float) -> int:
    """Detections within ``radius`` of the robot at their own timestamp.

    The robot follows the polyline ``points`` at constant ``speed`` from
    ``depart_time``; every detection is an instant and so counts at most once.
    """
    if not radius > 0 or not speed > 0:
        raise DataError("radius and speed must be positive")
    pts, times = _timeline(points, depart_time, speed)
    sel = (test_log.t >= times[0]) & (test_log.t <= times[-1])
    if not sel.any():
        return 0
    t = test_log.t[sel]
    if len(pts) == 1:
        rx, ry = np.full(t.size, pts[0, 0]), np.full(t.size, pts[0, 1])
    else:
        rx, ry = np.interp(t, times, pts[:, 0]), np.interp(t, times, pts[:, 1])
    return int(np.count_nonzero(np.hypot(test_log.x1[sel] - rx, test_log.x2[sel] - ry) <= radius))


@dataclass(frozen=True)
class Scenario:
    """A goal tour driven once per departure time."""

    goals: tuple
    departures: tuple
    speed: float = 0.5
    radius: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "goals", tuple((float(x), float(y)) for x, y in self.goals))
        object.__setattr__(self, "departures", tuple(float(t) for t in self.departures))
        if len(self.goals) < 2:
            raise DataError("a scenario needs at least two goals")
        if not self.speed > 0 or not self.radius > 0:
            raise DataError("speed and radius must be positive")

    @property
    def p(self) -> int:
        return len(self.departures)


def daily_departures(day_starts: Sequence[float], first_hour: float = 9.0, last_hour: float = 21.0,
                     per_hour: int = 5) -> tuple:
    """``per_hour`` evenly spaced departures in ``[first_hour, last_hour)`` of every day."""
    k = int(round((last_hour - first_hour) * per_hour))
    offs = first_hour * 3600.0 + np.arange(k) * (3600.0 / per_hour)
    return tuple(float(d + o) for d in day_starts for o in offs)


@dataclass(frozen=True)
class DisturbanceReport:
    departures: np.ndarray
    costs: np.ndarray
    encounters: np.ndarray
    paths: tuple
    r: np.ndarray
    E: np.ndarray


def service_disturbance(costs, encounters, r_grid=None) -> tuple[np.ndarray, np.ndarray]:
    """``E(floor(p r))``: encounters summed over the ``floor(p r)`` cheapest scenarios."""
    costs = np.asarray(costs, dtype=float)
    enc = np.asarray(encounters, dtype=float)
    if costs.shape != enc.shape or costs.size == 0:
        raise DataError("need one cost per encounter count and at least one scenario")
    r = np.linspace(0.0, 1.0, 21) if r_grid is None else np.asarray(r_grid, dtype=float)
    if np.any((r < 0) | (r > 1)):
        raise DataError("servicing ratios must lie in [0, 1]")
    order = np.argsort(costs, kind="stable")
    cum = np.concatenate([[0.0], np.cumsum(enc[order])])
    k = np.floor(costs.size * r + 1e-9).astype(np.int64)
    return r, cum[k]


def run_scenario(scenario: Scenario, rates_at: Callable[[float], np.ndarray], occ: OccupancyGrid,
                 grid: GridSpec, test_log: DetectionLog, base_cost: float = 0.05,
                 r_grid=None) -> DisturbanceReport:
    """Plan every tour on a cost map frozen at its departure time and count encounters.

    ``rates_at(t)`` returns one predicted rate per grid cell; ``None`` plans
    by metric distance alone.
    """
    free = free_cells(occ, grid)
    zero = np.zeros(grid.n_cells)
    costs, enc, paths = [], [], []
    for t0 in scenario.departures:
        rates = zero if rates_at is None else rates_at(t0)
        cm = build_cost_map(rates, occ, grid, base_cost, free)
        legs = [plan_path(cm, a, b) for a, b in zip(scenario.goals[:-1], scenario.goals[1:])]
        pts = np.vstack([legs[0].points] + [leg.points[1:] for leg in legs[1:]])
        costs.append(sum(leg.cost for leg in legs))
        enc.append(simulate_encounters(pts, t0, scenario.speed, test_log, scenario.radius))
        paths.append(pts)
    r, E = service_disturbance(costs, enc, r_grid)
    return DisturbanceReport(np.array(scenario.departures), np.array(costs), np.array(enc, dtype=np.int64),
                             tuple(paths), r, E)


def model_rates(model, grid: GridSpec, cells=None) -> Callable[[float], np.ndarray]:
    """``t -> predicted rate per grid cell``, querying only ``cells`` (others 0)."""
    cells = grid.all_cells() if cells is None else np.asarray(cells, dtype=np.int64)
    x1, x2 = grid.cell_center(cells)

    def at(t: float) -> np.ndarray:
        out = np.zeros(grid.n_cells)
        out[cells] = model.predict_rates(np.column_stack([x1, x2, np.full(cells.size, t)]))
        return out

    return at


def write_report_csv(report: DisturbanceReport, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["scenario", "depart_t", "cost", "encounters"])
        for k, (t, c, e) in enumerate(zip(report.departures, report.costs, report.encounters)):
            out.writerow([k, repr(float(t)), repr(float(c)), int(e)])


def write_curve_csv(report: DisturbanceReport, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["r", "E"])
        for r, e in zip(report.r, report.E):
            out.writerow([repr(float(r)), repr(float(e))])
