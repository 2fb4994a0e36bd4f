"""Core data containers and file formats for detections, maps and trajectories.

Conventions used throughout the package:

* world coordinates are meters, time is seconds since the dataset epoch;
* occupancy arrays are indexed ``cells[iy, ix]`` with row 0 at the map origin
  (lowest x2), i.e. *not* image order; PGM files are flipped on load/save;
* spatial grid cells are addressed by a linear id ``iy * nx + ix``;
* rates are persons (detections) per second.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, DegenerateDataError

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Detections
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DetectionLog:
    """Time-sorted pedestrian detections ``(t, x1, x2[, person_id])``."""

    t: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    person_id: Optional[np.ndarray] = None

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        x1 = np.asarray(self.x1, dtype=float)
        x2 = np.asarray(self.x2, dtype=float)
        if not (t.shape == x1.shape == x2.shape) or t.ndim != 1:
            raise DataError("t, x1, x2 must be 1-D arrays of equal length")
        if not (np.isfinite(t).all() and np.isfinite(x1).all() and np.isfinite(x2).all()):
            raise DataError("detections must be finite")
        pid = None if self.person_id is None else np.asarray(self.person_id, dtype=np.int64)
        if pid is not None and pid.shape != t.shape:
            raise DataError("person_id length mismatch")
        order = np.argsort(t, kind="stable")
        if np.any(order != np.arange(t.size)):
            t, x1, x2 = t[order], x1[order], x2[order]
            pid = None if pid is None else pid[order]
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x1", x1)
        object.__setattr__(self, "x2", x2)
        object.__setattr__(self, "person_id", pid)

    def __len__(self):
        return self.t.size

    @property
    def records(self):
        pid = self.person_id if self.person_id is not None else [None] * len(self)
        return list(zip(self.t.tolist(), self.x1.tolist(), self.x2.tolist(),
                        pid if isinstance(pid, list) else pid.tolist()))

    def select(self, mask) -> "DetectionLog":
        mask = np.asarray(mask)
        return DetectionLog(self.t[mask], self.x1[mask], self.x2[mask],
                            None if self.person_id is None else self.person_id[mask])

    def between(self, t_a: float, t_b: float) -> "DetectionLog":
        """Detections with ``t_a <= t < t_b``."""
        return self.select((self.t >= t_a) & (self.t < t_b))


def downsample(log: DetectionLog, hz: float) -> DetectionLog:
    """Keep the first record of each ``1/hz`` window, per person when ids exist."""
    if hz <= 0:
        raise DataError("downsample_hz must be positive")
    window = np.floor(log.t * hz).astype(np.int64)
    pid = log.person_id if log.person_id is not None else np.zeros(len(log), dtype=np.int64)
    keys = np.stack([pid, window], axis=1)
    # log is time sorted, so np.unique's first index is the earliest record per window
    _, first = np.unique(keys, axis=0, return_index=True)
    return log.select(np.sort(first))


def load_detections(path, downsample_hz: Optional[float] = None) -> DetectionLog:
    """Read a detections CSV with header ``t,x1,x2[,person_id]``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    t, x1, x2, pid = [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if header[:3] != ["t", "x1", "x2"]:
            raise DataError(f"expected header t,x1,x2[,person_id], got {header}", line=1)
        has_pid = len(header) > 3 and header[3] == "person_id"
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                t.append(float(row[0]))
                x1.append(float(row[1]))
                x2.append(float(row[2]))
                if has_pid:
                    pid.append(int(row[3]))
            except (ValueError, IndexError) as exc:
                raise DataError(f"cannot parse {row!r}: {exc}", line=lineno) from None
    if not t:
        raise DataError(f"{path}: no detections")
    log = DetectionLog(np.array(t), np.array(x1), np.array(x2),
                       np.array(pid) if has_pid else None)
    if downsample_hz is not None:
        log = downsample(log, downsample_hz)
    return log


def save_detections(log: DetectionLog, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        has_pid = log.person_id is not None
        fh.write("t,x1,x2,person_id\n" if has_pid else "t,x1,x2\n")
        pids = log.person_id.tolist() if has_pid else None
        for i, (t, x, y) in enumerate(zip(log.t.tolist(), log.x1.tolist(), log.x2.tolist())):
            row = f"{t!r},{x!r},{y!r}"
            if has_pid:
                row += f",{int(pids[i])}"
            fh.write(row + "\n")


# ---------------------------------------------------------------------------
# Occupancy map
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OccupancyGrid:
    """Static occupancy map; ``cells[iy, ix]`` is True when occupied."""

    origin: tuple
    cell_size: float
    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=bool)
        if cells.ndim != 2 or cells.size == 0:
            raise DataError("occupancy array must be a non-empty 2-D array")
        if not self.cell_size > 0:
            raise DataError("cell_size must be positive")
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self):
        return self.cells.shape

    @property
    def width(self) -> float:
        return self.cells.shape[1] * self.cell_size

    @property
    def height(self) -> float:
        return self.cells.shape[0] * self.cell_size

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def contains(self, x1, x2):
        x1 = np.asarray(x1)
        x2 = np.asarray(x2)
        return ((x1 >= self.origin[0]) & (x1 < self.origin[0] + self.width)
                & (x2 >= self.origin[1]) & (x2 < self.origin[1] + self.height))

    def cell_of(self, x1, x2):
        ix = np.floor((np.asarray(x1) - self.origin[0]) / self.cell_size).astype(np.int64)
        iy = np.floor((np.asarray(x2) - self.origin[1]) / self.cell_size).astype(np.int64)
        return ix, iy

    def occupied_at(self, x1, x2):
        """Occupancy at world points; points outside the map count as occupied."""
        ix, iy = self.cell_of(x1, x2)
        inside = (ix >= 0) & (iy >= 0) & (ix < self.cells.shape[1]) & (iy < self.cells.shape[0])
        out = np.ones(np.shape(ix), dtype=bool)
        out[inside] = self.cells[iy[inside], ix[inside]]
        return out


def _read_pgm(path: Path) -> tuple[np.ndarray, int]:
    raw = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    # header: magic, width, height, maxval, with '#' comments
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    magic = tokens[0]
    try:
        width, height, maxval = (int(tok) for tok in tokens[1:4])
    except ValueError:
        raise DataError(f"{path}: bad PGM header") from None
    if magic == b"P5":
        pos += 1  # single whitespace after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.uint8
        count = width * height
        data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    elif magic == b"P2":
        data = np.array(raw[pos:].split(), dtype=np.int64)
        if data.size != width * height:
            raise DataError(f"{path}: expected {width * height} pixels, found {data.size}")
    else:
        raise DataError(f"{path}: unsupported PGM magic {magic!r}")
    return data.reshape(height, width).astype(np.int64), maxval


def write_pgm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Write a binary (P5) PGM; ``image`` is in image order (row 0 on top)."""
    image = np.asarray(image)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(image.astype(np.uint8 if maxval <= 255 else ">u2").tobytes())


def read_metadata(path) -> dict[str, str]:
    """Parse ``key: value`` or ``key = value`` lines, ignoring ``#`` comments."""
    meta = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = ":" if ":" in line else "="
        if sep not in line:
            raise DataError(f"{path}: expected key/value pair", line=lineno)
        key, value = line.split(sep, 1)
        meta[key.strip()] = value.strip()
    return meta


def load_occupancy_map(pgm_path, meta_path=None) -> OccupancyGrid:
    """Load a PGM map with its sidecar (``origin_x, origin_y, resolution, occupied_threshold``)."""
    pgm_path = Path(pgm_path)
    meta_path = Path(meta_path) if meta_path else pgm_path.with_suffix(".meta")
    if not pgm_path.exists():
        raise DataError(f"no such file: {pgm_path}")
    if not meta_path.exists():
        raise DataError(f"missing map metadata file: {meta_path}")
    meta = read_metadata(meta_path)
    try:
        origin = (float(meta["origin_x"]), float(meta["origin_y"]))
        resolution = float(meta["resolution"])
        threshold = float(meta.get("occupied_threshold", 128))
    except (KeyError, ValueError) as exc:
        raise DataError(f"{meta_path}: bad or missing key {exc}") from None
    pixels, _ = _read_pgm(pgm_path)
    return OccupancyGrid(origin, resolution, np.flipud(pixels >= threshold))


def save_occupancy_map(grid: OccupancyGrid, pgm_path, meta_path=None) -> None:
    pgm_path = Path(pgm_path)
    meta_path = Path(meta_path) if meta_path else pgm_path.with_suffix(".meta")
    write_pgm(pgm_path, np.flipud(grid.cells).astype(np.uint8) * 255)
    meta_path.write_text(
        f"origin_x: {grid.origin[0]!r}\norigin_y: {grid.origin[1]!r}\n"
        f"resolution: {grid.cell_size!r}\noccupied_threshold: 128\n",
        encoding="utf-8")


# ---------------------------------------------------------------------------
# Robot trajectory
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """Piecewise-linear robot path; repeated positions encode dwell segments."""

    t: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    speed: float = 0.5

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        x1 = np.asarray(self.x1, dtype=float)
        x2 = np.asarray(self.x2, dtype=float)
        if t.ndim != 1 or t.size < 1 or not (t.shape == x1.shape == x2.shape):
            raise DataError("trajectory needs equally long, non-empty t/x1/x2")
        if np.any(np.diff(t) <= 0):
            raise DataError("trajectory timestamps must be strictly increasing")
        step = np.hypot(np.diff(x1), np.diff(x2))
        slack = 1e-6 + 1e-9 * np.abs(t[1:])
        if self.speed > 0 and np.any(step > self.speed * np.diff(t) + slack):
            raise DataError("trajectory moves faster than its declared speed")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x1", x1)
        object.__setattr__(self, "x2", x2)

    @property
    def span(self):
        return float(self.t[0]), float(self.t[-1])

    def position(self, t):
        t = np.asarray(t, dtype=float)
        return np.interp(t, self.t, self.x1), np.interp(t, self.t, self.x2)

    @classmethod
    def from_waypoints(cls, waypoints: Sequence[Sequence[float]], speed: float = 0.5,
                       t_start: float = 0.0, t_end: Optional[float] = None) -> "Trajectory":
        """Expand ``(x1, x2, dwell_seconds)`` waypoints at constant ``speed``.

        With ``t_end`` the waypoint loop is repeated (closing back to the first
        waypoint) until ``t_end``; the final pose is clipped to ``t_end``.
        """
        if speed <= 0:
            raise DataError("speed must be positive")
        wps = [tuple(map(float, w)) for w in waypoints]
        if not wps:
            raise DataError("no waypoints")
        ts, xs, ys = [t_start], [wps[0][0]], [wps[0][1]]

        def add(t, x, y):
            if t > ts[-1]:
                ts.append(t)
                xs.append(x)
                ys.append(y)

        def run_once(first):
            for k, (x, y, dwell) in enumerate(wps):
                if not (first and k == 0):
                    dist = math.hypot(x - xs[-1], y - ys[-1])
                    add(ts[-1] + dist / speed, x, y)
                if dwell > 0:
                    add(ts[-1] + dwell, x, y)
                if t_end is not None and ts[-1] >= t_end:
                    return True
            return False

        done = run_once(first=True)
        while t_end is not None and not done:
            n_before = len(ts)
            done = run_once(first=False)
            if len(ts) == n_before:
                raise DataError("waypoint loop has zero duration")
        t_arr, x_arr, y_arr = np.array(ts), np.array(xs), np.array(ys)
        if t_end is not None and t_arr[-1] > t_end:
            keep = t_arr < t_end
            xe, ye = np.interp(t_end, t_arr, x_arr), np.interp(t_end, t_arr, y_arr)
            t_arr = np.append(t_arr[keep], t_end)
            x_arr = np.append(x_arr[keep], xe)
            y_arr = np.append(y_arr[keep], ye)
        return cls(t_arr, x_arr, y_arr, speed)


def load_trajectory(path, speed: float = 0.5, t_start: float = 0.0,
                    t_end: Optional[float] = None) -> Trajectory:
    """Load ``t,x1,x2`` poses or ``x1,x2,dwell_seconds`` waypoints."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    try:
        values = np.array([[float(c) for c in r[:3]] for r in rows[1:]])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if values.size == 0:
        raise DataError(f"{path}: no rows")
    if header == ["t", "x1", "x2"]:
        return Trajectory(values[:, 0], values[:, 1], values[:, 2], speed=speed)
    if header == ["x1", "x2", "dwell_seconds"]:
        return Trajectory.from_waypoints(values, speed=speed, t_start=t_start, t_end=t_end)
    raise DataError(f"{path}: unrecognised trajectory header {header}", line=1)


def save_trajectory(traj: Trajectory, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,x1,x2\n")
        for t, x, y in zip(traj.t.tolist(), traj.x1.tolist(), traj.x2.tolist()):
            fh.write(f"{t!r},{x!r},{y!r}\n")


# ---------------------------------------------------------------------------
# Spatio-temporal grid and training data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Regular spatio-temporal binning: square cells of edge ``r_s``, bins of ``tau`` seconds."""

    r_s: float
    tau: float
    origin: tuple = (0.0, 0.0)
    t0: float = 0.0
    shape: tuple = (1, 1)  # (nx, ny) spatial cells

    def __post_init__(self):
        if not self.r_s > 0 or not self.tau > 0:
            raise DataError("r_s and tau must be positive")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "shape", (int(self.shape[0]), int(self.shape[1])))

    @classmethod
    def for_map(cls, occ: OccupancyGrid, r_s: float, tau: float, t0: float = 0.0) -> "GridSpec":
        nx = int(math.ceil(occ.width / r_s - 1e-9))
        ny = int(math.ceil(occ.height / r_s - 1e-9))
        return cls(r_s, tau, occ.origin, t0, (nx, ny))

    @property
    def n_cells(self) -> int:
        return self.shape[0] * self.shape[1]

    def cell_index(self, x1, x2):
        """Linear spatial ids, ``-1`` for points outside the grid."""
        ix = np.floor((np.asarray(x1, dtype=float) - self.origin[0]) / self.r_s).astype(np.int64)
        iy = np.floor((np.asarray(x2, dtype=float) - self.origin[1]) / self.r_s).astype(np.int64)
        ok = (ix >= 0) & (iy >= 0) & (ix < self.shape[0]) & (iy < self.shape[1])
        return np.where(ok, iy * self.shape[0] + ix, -1)

    def cell_center(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        ix, iy = ids % self.shape[0], ids // self.shape[0]
        return (self.origin[0] + (ix + 0.5) * self.r_s, self.origin[1] + (iy + 0.5) * self.r_s)

    def bin_index(self, t):
        return np.floor((np.asarray(t, dtype=float) - self.t0) / self.tau).astype(np.int64)

    def bin_center(self, bins):
        return self.t0 + (np.asarray(bins, dtype=float) + 0.5) * self.tau

    def all_cells(self) -> np.ndarray:
        return np.arange(self.n_cells)

    def query_inputs(self, cells, bins) -> np.ndarray:
        """Cartesian product of spatial cells and time bins as an ``(n, 3)`` input array."""
        cells = np.asarray(cells, dtype=np.int64)
        bins = np.asarray(bins, dtype=np.int64)
        cc, bb = np.meshgrid(cells, bins)
        x1, x2 = self.cell_center(cc.ravel())
        return np.column_stack([x1, x2, self.bin_center(bb.ravel())])


@dataclass(frozen=True)
class Scaler:
    """Affine standardization ``(y - mean) / std``."""

    mean: float
    std: float

    def transform(self, y):
        return (np.asarray(y, dtype=float) - self.mean) / self.std

    def inverse(self, y_std):
        return np.asarray(y_std, dtype=float) * self.std + self.mean


def standardize(y) -> tuple[np.ndarray, Scaler]:
    """Scale rates to zero mean and unit (population) standard deviation."""
    y = np.asarray(y, dtype=float)
    if y.size < 2:
        raise DegenerateDataError("need at least two targets to standardize")
    mean = float(np.mean(y))
    std = float(np.std(y))
    if not std > 0:
        raise DegenerateDataError("targets are constant; standard deviation is zero")
    scaler = Scaler(mean, std)
    return scaler.transform(y), scaler


def destandardize(y_std, scaler: Scaler) -> np.ndarray:
    return scaler.inverse(y_std)


@dataclass(frozen=True)
class TrainingSet:
    """Observed spatio-temporal cells, rows sorted by ``(bin, cell)``.

    ``y`` holds raw rates ``c / delta``; :attr:`y_std` the standardized targets.
    """

    X: np.ndarray
    y: np.ndarray
    c: np.ndarray
    delta: np.ndarray
    grid: GridSpec
    cell: np.ndarray
    bin: np.ndarray
    scaler: Optional[Scaler] = field(default=None)

    def __post_init__(self):
        if self.scaler is None and self.y.size >= 2 and np.std(self.y) > 0:
            object.__setattr__(self, "scaler", standardize(self.y)[1])

    def __len__(self):
        return self.y.size

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def y_std(self) -> np.ndarray:
        if self.scaler is None:
            raise DegenerateDataError("training targets are constant; no scaler available")
        return self.scaler.transform(self.y)

    @property
    def time_span(self) -> tuple[float, float]:
        return (float(self.grid.t0 + self.bin.min() * self.grid.tau),
                float(self.grid.t0 + (self.bin.max() + 1) * self.grid.tau))

    def subset(self, mask) -> "TrainingSet":
        mask = np.asarray(mask)
        return TrainingSet(self.X[mask], self.y[mask], self.c[mask], self.delta[mask],
                           self.grid, self.cell[mask], self.bin[mask], self.scaler)

    @classmethod
    def from_cells(cls, grid: GridSpec, cell, bin_, c, delta,
                   scaler: Optional[Scaler] = None) -> "TrainingSet":
        cell = np.asarray(cell, dtype=np.int64)
        bin_ = np.asarray(bin_, dtype=np.int64)
        c = np.asarray(c, dtype=np.int64)
        delta = np.asarray(delta, dtype=float)
        order = np.lexsort((cell, bin_))
        cell, bin_, c, delta = cell[order], bin_[order], c[order], delta[order]
        x1, x2 = grid.cell_center(cell)
        X = np.column_stack([x1, x2, grid.bin_center(bin_)])
        return cls(X, c / delta, c, delta, grid, cell, bin_, scaler)


def save_training_set(ts: TrainingSet, path) -> None:
    g = ts.grid
    np.savez(path, cell=ts.cell, bin=ts.bin, c=ts.c, delta=ts.delta,
             grid=np.array([g.r_s, g.tau, g.origin[0], g.origin[1], g.t0, g.shape[0], g.shape[1]]))


def load_training_set(path) -> TrainingSet:
    with np.load(path) as z:
        r_s, tau, ox, oy, t0, nx, ny = z["grid"]
        grid = GridSpec(float(r_s), float(tau), (ox, oy), float(t0), (int(nx), int(ny)))
        return TrainingSet.from_cells(grid, z["cell"], z["bin"], z["c"], z["delta"])
