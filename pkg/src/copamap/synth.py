"""Synthetic pedestrian worlds with planted periodic activity.

Detections follow an inhomogeneous Poisson process on the free space of a
map with intensity (detections per second per square meter)

    lambda(x, t) = base_rate + sum_j rate_j * N(x; c_j, diag(s_j^2)) * h_j(t),
    h_j(t) = 1 + sum_k a_k cos(2 pi (t - peak_k) / P_k),

and zero on occupied space. Sampling is exact: candidate points are drawn
from an envelope and thinned.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import (
    DetectionLog, GridSpec, OccupancyGrid, Trajectory, save_detections, save_occupancy_map,
    save_trajectory,
)
from .errors import DataError

HOUR = 3600.0
DAY = 86400.0


@dataclass(frozen=True)
class Component:
    """One cosine term ``amplitude * cos(2 pi (t - peak) / period)``."""

    period: float
    amplitude: float
    peak: float = 0.0


@dataclass(frozen=True)
class Source:
    """Gaussian spatial bump emitting ``rate`` detections/s on time average."""

    center: tuple
    sigma: tuple
    rate: float
    components: tuple = ()

    def __post_init__(self):
        if self.rate < 0 or min(self.sigma) <= 0:
            raise DataError("source rate must be >= 0 and sigmas > 0")
        if sum(abs(c.amplitude) for c in self.components) > 1 + 1e-12:
            raise DataError("component amplitudes must sum to at most 1 so the rate stays >= 0")

    def profile(self, t):
        t = np.asarray(t, dtype=float)
        h = np.ones_like(t)
        for c in self.components:
            h += c.amplitude * np.cos(2 * np.pi * (t - c.peak) / c.period)
        return h

    def profile_integral(self, t_a, t_b):
        """``int_{t_a}^{t_b} h(t) dt``."""
        t_a, t_b = np.asarray(t_a, dtype=float), np.asarray(t_b, dtype=float)
        out = t_b - t_a
        for c in self.components:
            w = 2 * np.pi / c.period
            out = out + c.amplitude / w * (np.sin(w * (t_b - c.peak)) - np.sin(w * (t_a - c.peak)))
        return out

    def density(self, x1, x2):
        (cx, cy), (sx, sy) = self.center, self.sigma
        z = ((np.asarray(x1) - cx) / sx) ** 2 + ((np.asarray(x2) - cy) / sy) ** 2
        return np.exp(-0.5 * z) / (2 * np.pi * sx * sy)

    def mass(self, x_lo, x_hi, y_lo, y_hi):
        """Probability mass of the bump in an axis-aligned rectangle."""
        (cx, cy), (sx, sy) = self.center, self.sigma

        def cdf(v, c, s):
            return 0.5 * (1 + np.vectorize(math.erf)((np.asarray(v, dtype=float) - c) / (s * math.sqrt(2))))

        return (cdf(x_hi, cx, sx) - cdf(x_lo, cx, sx)) * (cdf(y_hi, cy, sy) - cdf(y_lo, cy, sy))


@dataclass(frozen=True)
class World:
    occ: OccupancyGrid
    sources: tuple = ()
    base_rate: float = 0.0  # detections / s / m^2

    def intensity(self, x1, x2, t):
        """The ground-truth intensity (detections / s / m^2) at points ``(x1, x2, t)``."""
        x1, x2, t = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (x1, x2, t)))
        lam = np.full(x1.shape, self.base_rate)
        for s in self.sources:
            lam = lam + s.rate * s.density(x1, x2) * s.profile(t)
        return np.where(self.occ.occupied_at(x1, x2), 0.0, lam)

    def expected_counts(self, grid: GridSpec, cells, bins) -> np.ndarray:
        """Expected detections per ``(cell, bin)`` pair for cells without occupied space."""
        cells, bins = np.asarray(cells), np.asarray(bins)
        nx = grid.shape[0]
        x_lo = grid.origin[0] + (cells % nx) * grid.r_s
        y_lo = grid.origin[1] + (cells // nx) * grid.r_s
        t_lo = grid.t0 + bins * grid.tau
        out = np.full(cells.shape, self.base_rate * grid.r_s ** 2 * grid.tau)
        for s in self.sources:
            out = out + s.rate * s.mass(x_lo, x_lo + grid.r_s, y_lo, y_lo + grid.r_s) * \
                s.profile_integral(t_lo, t_lo + grid.tau)
        return out

    def sample(self, t_a: float, t_b: float, rng: np.random.Generator) -> DetectionLog:
        """Exact draw of all detections in ``[t_a, t_b)``."""
        occ = self.occ
        x0, y0 = occ.origin
        T = t_b - t_a
        ts, xs, ys = [], [], []
        n = rng.poisson(self.base_rate * occ.width * occ.height * T)
        ts.append(rng.uniform(t_a, t_b, n))
        xs.append(rng.uniform(x0, x0 + occ.width, n))
        ys.append(rng.uniform(y0, y0 + occ.height, n))
        for s in self.sources:
            env = 1 + sum(abs(c.amplitude) for c in s.components)
            n = rng.poisson(s.rate * env * T)
            t = rng.uniform(t_a, t_b, n)
            keep = rng.uniform(0, env, n) < s.profile(t)
            t = t[keep]
            ts.append(t)
            xs.append(rng.normal(s.center[0], s.sigma[0], t.size))
            ys.append(rng.normal(s.center[1], s.sigma[1], t.size))
        t, x, y = np.concatenate(ts), np.concatenate(xs), np.concatenate(ys)
        ok = occ.contains(x, y)
        ok[ok] = ~occ.occupied_at(x[ok], y[ok])
        t, x, y = t[ok], x[ok], y[ok]
        order = np.argsort(t, kind="stable")
        return DetectionLog(t[order], x[order], y[order])


def room_map(width: float, height: float, cell: float = 0.25, blocks: Sequence = ()) -> OccupancyGrid:
    """Walled rectangle with solid ``(x_lo, y_lo, x_hi, y_hi)`` blocks inside."""
    nx, ny = int(round(width / cell)), int(round(height / cell))
    cells = np.zeros((ny, nx), dtype=bool)
    cells[0, :] = cells[-1, :] = cells[:, 0] = cells[:, -1] = True
    for x_lo, y_lo, x_hi, y_hi in blocks:
        cells[int(round(y_lo / cell)):int(round(y_hi / cell)), int(round(x_lo / cell)):int(round(x_hi / cell))] = True
    return OccupancyGrid((0.0, 0.0), cell, cells)


def patrol(waypoints: Sequence, dock: tuple, days: int, active=(7 * HOUR, 21 * HOUR),
           speed: float = 0.5, t0: float = 0.0, every: Optional[float] = None) -> Trajectory:
    """Daily schedule: parked at ``dock`` except for whole patrol loops in the active window.

    ``waypoints`` are ``(x1, x2, dwell_seconds)``; every loop starts and ends
    at the dock. Loops start ``every`` seconds apart (back to back when None).
    The schedule repeats identically each day.
    """
    loop = Trajectory.from_waypoints([(dock[0], dock[1], 0.0), *waypoints, (dock[0], dock[1], 0.0)],
                                     speed=speed)
    dur = loop.t[-1] - loop.t[0]
    every = dur if every is None else every
    if every < dur:
        raise DataError("loop spacing shorter than one loop")
    n_loops = int((active[1] - active[0] - dur) // every) + 1
    if active[1] - active[0] < dur:
        raise DataError("patrol loop longer than the active window")
    rel_t = [np.array([0.0])]
    px, py = [np.array([dock[0]])], [np.array([dock[1]])]
    start = active[0]
    for k in range(n_loops):
        first = 0 if k == 0 or every > dur else 1  # back-to-back loops share the dock point
        rel_t.append(start + k * every + (loop.t[first:] - loop.t[0]))
        px.append(loop.x1[first:])
        py.append(loop.x2[first:])
    day_t = np.concatenate(rel_t)
    day_x, day_y = np.concatenate(px), np.concatenate(py)
    T = [t0 + d * DAY + day_t for d in range(days)] + [np.array([t0 + days * DAY])]
    X = [day_x] * days + [np.array([dock[0]])]
    Y = [day_y] * days + [np.array([dock[1]])]
    return Trajectory(np.concatenate(T), np.concatenate(X), np.concatenate(Y), speed)


@dataclass(frozen=True)
class Dataset:
    """A generated world, its robot, and the train/test split."""

    name: str
    world: World
    trajectory: Trajectory
    train_span: tuple
    test_span: tuple
    r_s: float
    tau: float
    fov_radius: float
    time_step: float
    goals: tuple = ()
    log: Optional[DetectionLog] = field(default=None, compare=False)

    @property
    def train_log(self) -> DetectionLog:
        return self.log.between(*self.train_span)

    @property
    def test_log(self) -> DetectionLog:
        return self.log.between(*self.test_span)

    def grid(self, r_s: Optional[float] = None, tau: Optional[float] = None) -> GridSpec:
        return GridSpec.for_map(self.world.occ, r_s or self.r_s, tau or self.tau, 0.0)

    def truth(self) -> dict:
        return {
            "name": self.name, "base_rate": self.world.base_rate,
            "sources": [{"center": list(s.center), "sigma": list(s.sigma), "rate": s.rate,
                         "components": [[c.period, c.amplitude, c.peak] for c in s.components]}
                        for s in self.world.sources],
            "train_span": list(self.train_span), "test_span": list(self.test_span),
            "r_s": self.r_s, "tau": self.tau, "fov_radius": self.fov_radius,
            "time_step": self.time_step, "goals": [list(g) for g in self.goals],
        }


def _finish(ds: Dataset, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    log = ds.world.sample(ds.train_span[0], ds.test_span[1], rng)
    return Dataset(**{**ds.__dict__, "log": log})


def periodic_dataset(seed: int = 0, days: int = 14, amplitudes=(0.6, 0.2), periods=(DAY, 8 * HOUR),
                     rate: float = 0.05) -> Dataset:
    """Open 20 m room seen in full by a parked robot; shared planted cycles everywhere.

    With no components the activity is homogeneous at the base rate.
    """
    occ = room_map(20.0, 20.0)
    comps = tuple(Component(p, a, peak) for p, a, peak in zip(periods, amplitudes, (13 * HOUR, 2 * HOUR)))
    centers = ((5.0, 5.0), (15.0, 6.0), (6.0, 14.0), (14.0, 15.0))
    sources = tuple(Source(c, (2.5, 2.5), rate, comps) for c in centers) if comps else ()
    world = World(occ, sources, base_rate=2e-5 if comps else 2e-4)
    end = days * DAY
    traj = Trajectory(np.array([0.0, end]), np.array([10.0, 10.0]), np.array([10.0, 10.0]))
    return _finish(Dataset("periodic", world, traj, (0.0, end), (end, end), 1.0, 1800.0, 15.0, 60.0), seed)


def benchmark_dataset(seed: int = 0, train_days: int = 3, test_days: int = 3) -> Dataset:
    """Office-like floor with a side room the robot never sees and a nightly dock."""
    occ = room_map(24.0, 16.0, blocks=[(18.0, 0.0, 18.25, 16.0), (8.0, 6.0, 10.0, 10.0)])
    sources = (
        Source((8.0, 3.0), (4.0, 1.0), 0.15, (Component(DAY, 0.7, 12 * HOUR), Component(DAY / 2, 0.2, 9 * HOUR))),
        Source((13.0, 12.5), (1.5, 1.5), 0.10, (Component(DAY, 0.9, 18 * HOUR),)),
        Source((4.0, 11.0), (1.2, 1.2), 0.05, (Component(DAY, 0.6, 10 * HOUR),)),
        Source((21.0, 8.0), (1.5, 3.0), 0.08, (Component(DAY, 0.5, 15 * HOUR),)),
    )
    world = World(occ, sources, base_rate=3e-4)
    wps = [(2.0, 3.0, 0.0), (14.0, 3.0, 600.0), (15.0, 8.0, 0.0), (14.0, 13.0, 600.0), (5.0, 13.0, 300.0)]
    # three sweeps a day (07:00, 12:00, 17:00); each fits inside one hour bin
    traj = patrol(wps, dock=(2.0, 14.0), days=train_days, active=(7 * HOUR, 19 * HOUR), every=5 * HOUR)
    end = train_days * DAY
    return _finish(Dataset("benchmark", world, traj, (0.0, end), (end, end + test_days * DAY),
                           0.75, 3600.0, 2.5, 5.0,
                           goals=((2.0, 2.0), (16.0, 2.5), (16.0, 13.5), (4.0, 9.0))), seed)


def corridor_dataset(seed: int = 0, train_days: int = 3, test_days: int = 1) -> Dataset:
    """Two corridors around a central block; each is busy at a different time of day."""
    occ = room_map(30.0, 14.0, blocks=[(6.0, 3.5, 24.0, 10.5)])
    # anti-phase daily cycles: the lower corridor peaks at 09:00, the upper one at 21:00
    sources = (
        Source((15.0, 1.9), (6.0, 0.8), 0.6, (Component(DAY, 1.0, 9 * HOUR),)),
        Source((15.0, 12.1), (6.0, 0.8), 0.6, (Component(DAY, 1.0, 21 * HOUR),)),
    )
    world = World(occ, sources, base_rate=2e-4)
    wps = [(3.0, 1.9, 0.0), (27.0, 1.9, 0.0), (27.0, 7.0, 120.0), (27.0, 12.1, 0.0), (3.0, 12.1, 0.0)]
    traj = patrol(wps, dock=(3.0, 7.0), days=train_days, active=(6 * HOUR, 23 * HOUR), every=2 * HOUR)
    end = train_days * DAY
    # goals sit below the middle so the lower corridor is the metric-shortest route
    return _finish(Dataset("corridor", world, traj, (0.0, end), (end, end + test_days * DAY),
                           1.0, 3600.0, 2.0, 5.0, goals=((3.0, 6.0), (27.0, 6.0))), seed)


SCENARIOS = {"periodic": periodic_dataset, "benchmark": benchmark_dataset, "corridor": corridor_dataset}


def make_dataset(name: str, seed: int = 0, **kw) -> Dataset:
    if name not in SCENARIOS:
        raise DataError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    return SCENARIOS[name](seed=seed, **kw)


def write_dataset(ds: Dataset, out_dir) -> dict:
    """Write ``detections.csv``, ``map.pgm``/``map.meta``, ``trajectory.csv`` and ``truth.json``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    paths = {"detections": out / "detections.csv", "map": out / "map.pgm",
             "trajectory": out / "trajectory.csv", "truth": out / "truth.json"}
    save_detections(ds.log, paths["detections"])
    save_occupancy_map(ds.world.occ, paths["map"])
    save_trajectory(ds.trajectory, paths["trajectory"])
    paths["truth"].write_text(json.dumps(ds.truth(), indent=1, sort_keys=True) + "\n")
    return {k: str(v) for k, v in paths.items()}


def world_from_truth(truth: dict, occ: OccupancyGrid) -> World:
    sources = tuple(Source(tuple(s["center"]), tuple(s["sigma"]), s["rate"],
                           tuple(Component(*c) for c in s["components"])) for s in truth["sources"])
    return World(occ, sources, truth["base_rate"])
