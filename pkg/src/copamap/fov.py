"""Field-of-view simulation and spatio-temporal binning of detections."""

from __future__ import annotations

import logging
import math
from typing import Iterable, Optional

import numpy as np

from .data import DetectionLog, GridSpec, OccupancyGrid, TrainingSet, Trajectory
from .errors import DataError

logger = logging.getLogger(__name__)


_EPS = 1e-9


def traverse_cells(occ: OccupancyGrid, p0, p1) -> list[tuple[int, int]]:
    """Map cells ``(ix, iy)`` the segment ``p0 -> p1`` passes through with positive length.

    Amanatides-Woo traversal in the segment parameter ``s in [0, 1]``; contacts
    shorter than ``1e-9`` of the segment (corner grazes) are ignored.
    """
    cs = occ.cell_size
    u0, v0 = (float(p0[0]) - occ.origin[0]) / cs, (float(p0[1]) - occ.origin[1]) / cs
    u1, v1 = (float(p1[0]) - occ.origin[0]) / cs, (float(p1[1]) - occ.origin[1]) / cs
    du, dv = u1 - u0, v1 - v0
    sx = (du > 0) - (du < 0)
    sy = (dv > 0) - (dv < 0)
    # start in the cell the segment actually enters
    ix = math.floor(u0) if sx >= 0 else math.ceil(u0) - 1
    iy = math.floor(v0) if sy >= 0 else math.ceil(v0) - 1
    s_x = ((ix + (sx > 0)) - u0) / du if sx else math.inf
    s_y = ((iy + (sy > 0)) - v0) / dv if sy else math.inf
    ds_x = abs(1.0 / du) if sx else math.inf
    ds_y = abs(1.0 / dv) if sy else math.inf
    cells = [(ix, iy)]
    while min(s_x, s_y) < 1.0 - _EPS:
        if abs(s_x - s_y) <= _EPS:
            # through a corner: the diagonal neighbour is next, side cells are only touched
            ix += sx
            iy += sy
            s_x += ds_x
            s_y += ds_y
        elif s_x < s_y:
            ix += sx
            s_x += ds_x
        else:
            iy += sy
            s_y += ds_y
        cells.append((ix, iy))
    return cells


def _touches(ix, iy, u, v):
    return ix - _EPS <= u <= ix + 1 + _EPS and iy - _EPS <= v <= iy + 1 + _EPS


def ray_blocked(occ: OccupancyGrid, p0, p1) -> bool:
    """True if the segment crosses an occupied map cell other than the endpoint cells.

    Endpoint cells are all map cells whose closure contains ``p0`` or ``p1``
    (up to four when an endpoint sits on a cell corner).
    """
    cs = occ.cell_size
    u0, v0 = (float(p0[0]) - occ.origin[0]) / cs, (float(p0[1]) - occ.origin[1]) / cs
    u1, v1 = (float(p1[0]) - occ.origin[0]) / cs, (float(p1[1]) - occ.origin[1]) / cs
    ny, nx = occ.cells.shape
    for ix, iy in traverse_cells(occ, p0, p1):
        if not (0 <= ix < nx and 0 <= iy < ny and occ.cells[iy, ix]):
            continue
        if _touches(ix, iy, u0, v0) or _touches(ix, iy, u1, v1):
            continue
        return True
    return False


def _check_pose(pose, occ: OccupancyGrid):
    if not occ.contains(pose[0], pose[1]):
        raise DataError(f"pose {tuple(pose)} lies outside the map")
    if occ.occupied_at(pose[0], pose[1]):
        raise DataError(f"pose {tuple(pose)} lies inside an occupied map cell")


def visible_cell_ids(pose, radius: float, occ: OccupancyGrid, grid: GridSpec) -> np.ndarray:
    """Sorted linear ids of grid cells visible from ``pose``; see :func:`compute_fov`."""
    if not radius > 0:
        raise DataError("fov radius must be positive")
    _check_pose(pose, occ)
    px, py = float(pose[0]), float(pose[1])
    nx, ny = grid.shape
    ix0 = max(0, math.floor((px - radius - grid.origin[0]) / grid.r_s))
    ix1 = min(nx - 1, math.floor((px + radius - grid.origin[0]) / grid.r_s))
    iy0 = max(0, math.floor((py - radius - grid.origin[1]) / grid.r_s))
    iy1 = min(ny - 1, math.floor((py + radius - grid.origin[1]) / grid.r_s))
    if ix1 < ix0 or iy1 < iy0:
        return np.empty(0, dtype=np.int64)
    ixs, iys = np.meshgrid(np.arange(ix0, ix1 + 1), np.arange(iy0, iy1 + 1))
    ids = (iys * nx + ixs).ravel()
    cx, cy = grid.cell_center(ids)
    keep = (np.hypot(cx - px, cy - py) <= radius) & occ.contains(cx, cy)
    out = [i for i, x, y in zip(ids[keep].tolist(), cx[keep].tolist(), cy[keep].tolist())
           if not ray_blocked(occ, (px, py), (x, y))]
    return np.array(sorted(out), dtype=np.int64)


def compute_fov(pose, radius: float, occ: OccupancyGrid, grid: GridSpec) -> frozenset:
    """Spatial cells ``(ix, iy)`` whose centers are within ``radius`` of ``pose`` and unoccluded.

    A cell is occluded when the segment from the pose to its center crosses an
    occupied map cell other than the map cells containing the two endpoints.
    """
    ids = visible_cell_ids(pose, radius, occ, grid)
    nx = grid.shape[0]
    return frozenset((int(i % nx), int(i // nx)) for i in ids)


class FovCache:
    """Memoizes visible cell ids per (rounded) pose and stores them CSR-style."""

    def __init__(self, occ: OccupancyGrid, grid: GridSpec, radius: float, decimals: int = 6):
        self.occ, self.grid, self.radius, self.decimals = occ, grid, radius, decimals

    def build(self, x1, x2):
        """Return ``(pose_id per input, ptr, cells)`` for the given poses."""
        poses = np.round(np.column_stack([x1, x2]), self.decimals)
        uniq, pose_id = np.unique(poses, axis=0, return_inverse=True)
        lists = [visible_cell_ids(p, self.radius, self.occ, self.grid) for p in uniq]
        ptr = np.zeros(len(lists) + 1, dtype=np.int64)
        ptr[1:] = np.cumsum([len(v) for v in lists])
        cells = np.concatenate(lists) if lists else np.empty(0, dtype=np.int64)
        return pose_id.ravel(), ptr, cells


def _step_range(traj: Trajectory, grid: GridSpec, dt: float):
    t_first, t_last = traj.span
    k0 = math.ceil((t_first - grid.t0) / dt - 1e-9)
    k1 = math.ceil((t_last - grid.t0) / dt - 1e-9)  # steps k with t_k < t_last
    return k0, k1


def bin_observations(log: DetectionLog, traj: Trajectory, occ: OccupancyGrid, grid: GridSpec,
                     fov_radius: float, time_step: float = 1.0) -> TrainingSet:
    """Simulate a robot's partial view and bin detections into observed rates.

    The trajectory is sampled on the grid-aligned time steps ``t0 + k*time_step``;
    every cell visible at step ``k`` accrues ``time_step`` seconds of observation
    in the bin containing the step, and a detection counts for its cell iff that
    cell is visible at the step containing the detection.
    """
    if not 0 < time_step <= grid.tau:
        raise DataError("time_step must lie in (0, tau]")
    ratio = grid.tau / time_step
    steps_per_bin = int(round(ratio))
    if abs(ratio - steps_per_bin) > 1e-9:
        raise DataError("tau must be an integer multiple of time_step")

    k0, k1 = _step_range(traj, grid, time_step)
    if k1 <= k0:
        raise DataError("trajectory shorter than a single time step")
    steps = np.arange(k0, k1, dtype=np.int64)
    px, py = traj.position(grid.t0 + steps * time_step)
    pose_id, ptr, vis = FovCache(occ, grid, fov_radius).build(px, py)
    ncell = grid.n_cells
    step_bin = np.floor_divide(steps, steps_per_bin)

    # observation time: count steps per (pose, bin), then spread over visible cells
    pair, n_steps = np.unique(np.stack([pose_id, step_bin], axis=1), axis=0, return_counts=True)
    lengths = ptr[pair[:, 0] + 1] - ptr[pair[:, 0]]
    rep_bin = np.repeat(pair[:, 1], lengths)
    rep_w = np.repeat(n_steps * time_step, lengths)
    offs = np.arange(lengths.sum()) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    rep_cell = vis[np.repeat(ptr[pair[:, 0]], lengths) + offs]
    keys = rep_bin * ncell + rep_cell
    uniq_keys, inv = np.unique(keys, return_inverse=True)
    delta = np.minimum(np.bincount(inv.ravel(), weights=rep_w), grid.tau)
    if uniq_keys.size == 0:
        raise DataError("no cell was ever visible along the trajectory")

    # detections: step index, then membership of their cell in that step's view
    det_cell = grid.cell_index(log.x1, log.x2)
    outside = det_cell < 0
    if outside.any():
        logger.warning("dropped %d detections outside the grid", int(outside.sum()))
    det_step = np.floor((log.t - grid.t0) / time_step).astype(np.int64)
    active = (~outside) & (det_step >= k0) & (det_step < k1)
    d_step = det_step[active]
    d_cell = det_cell[active]
    d_pose = pose_id[d_step - k0]
    # (pose, cell) visibility lookup via sorted keys
    pose_of_vis = np.repeat(np.arange(ptr.size - 1), np.diff(ptr))
    vis_keys = pose_of_vis * ncell + vis  # sorted: pose ascending, cells sorted per pose
    q = d_pose * ncell + d_cell
    pos = np.searchsorted(vis_keys, q)
    seen = (pos < vis_keys.size) & (vis_keys[np.minimum(pos, vis_keys.size - 1)] == q)
    det_keys = np.floor_divide(d_step[seen], steps_per_bin) * ncell + d_cell[seen]
    kpos = np.searchsorted(uniq_keys, det_keys)
    counts = np.bincount(kpos, minlength=uniq_keys.size)

    return TrainingSet.from_cells(grid, uniq_keys % ncell, uniq_keys // ncell, counts, delta)


def build_ground_truth(log: DetectionLog, grid: GridSpec, visited_cells: Iterable[int],
                       t_range: Optional[tuple] = None) -> TrainingSet:
    """Fully observed rates ``c / tau`` for the given spatial cells over whole bins.

    ``t_range`` defaults to the bins spanned by the log; every visited cell is
    present in every bin, including cells with zero detections.
    """
    cells = np.unique(np.fromiter((int(c) for c in visited_cells), dtype=np.int64))
    if cells.size == 0:
        raise DataError("ground truth needs at least one visited cell")
    if t_range is None:
        if len(log) == 0:
            raise DataError("empty log and no t_range")
        b0, b1 = int(grid.bin_index(log.t[0])), int(grid.bin_index(log.t[-1])) + 1
    else:
        b0 = int(math.floor((t_range[0] - grid.t0) / grid.tau + 1e-9))
        b1 = int(math.ceil((t_range[1] - grid.t0) / grid.tau - 1e-9))
    bins = np.arange(b0, b1, dtype=np.int64)
    det_cell = grid.cell_index(log.x1, log.x2)
    det_bin = grid.bin_index(log.t)
    keep = np.isin(det_cell, cells) & (det_bin >= b0) & (det_bin < b1)
    pos = np.searchsorted(cells, det_cell[keep])
    counts = np.zeros((bins.size, cells.size), dtype=np.int64)
    np.add.at(counts, (det_bin[keep] - b0, pos), 1)
    cc, bb = np.meshgrid(cells, bins)
    return TrainingSet.from_cells(grid, cc.ravel(), bb.ravel(), counts.ravel(),
                                  np.full(cc.size, grid.tau))
