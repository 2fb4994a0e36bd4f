"""Predictive rates and uncertainties on query grids, plus field export."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import GridSpec, Scaler, TrainingSet, write_pgm
from .errors import DataError
from .kernels import DTYPE, KernelSpec, spec_tensors
from .svgp import Prior, VariationalState, gauss_hermite

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PredictiveField:
    """Predictive mean ``m_y`` (persons/s, rectified) and variance ``sigma2_y`` per query row."""

    X_star: np.ndarray
    m_y: np.ndarray
    sigma2_y: np.ndarray
    grid: Optional[GridSpec] = None
    observed_mask: Optional[np.ndarray] = None
    n_rectified: int = 0

    def __post_init__(self):
        n = len(self.X_star)
        if len(self.m_y) != n or len(self.sigma2_y) != n:
            raise DataError("field arrays differ in length")


def _moments(X, Z, mu, L, kp, which, spec, mean):
    prior = Prior.build(X, Z, kp, which, spec)
    m, v = prior.moments(torch.as_tensor(mu, dtype=DTYPE), torch.as_tensor(L @ L.T, dtype=DTYPE))
    return (m + mean).numpy(), v.numpy()


def predict(X_star, state: VariationalState, spec: KernelSpec, scaler: Scaler, quad_order: int = 20,
            grid: Optional[GridSpec] = None, observed_cells=None, chunk: int = 4096) -> PredictiveField:
    """Predictive distribution of the rate at ``X_star``.

    The mean is ``|m_f * std + mean|``; the variance is
    ``(v_f + E[softplus(g)]) * std^2`` with the expectation over q(g) taken by
    Gauss-Hermite quadrature of order ``quad_order``.
    """
    X = np.atleast_2d(np.asarray(X_star, dtype=float))
    if X.shape[1] != 3:
        raise DataError("query inputs must have three columns (x1, x2, t)")
    x, w = gauss_hermite(quad_order)
    mf = np.empty(len(X))
    vf = np.empty(len(X))
    noise = np.empty(len(X))
    kp = spec_tensors(spec)
    Z = torch.as_tensor(state.Z, dtype=DTYPE)
    with torch.no_grad():
        for a in range(0, len(X), chunk):
            Xb = torch.as_tensor(X[a:a + chunk], dtype=DTYPE)
            mf[a:a + chunk], vf[a:a + chunk] = _moments(Xb, Z, state.mu_f, state.L_f, kp, "f",
                                                        spec, state.f_mean)
            mg, vg = _moments(Xb, Z, state.mu_g, state.L_g, kp, "g", spec, state.g_mean)
            g = mg[:, None] + np.sqrt(vg)[:, None] * x
            noise[a:a + chunk] = np.logaddexp(0.0, g) @ w
    raw = mf * scaler.std + scaler.mean
    n_rect = int(np.count_nonzero(raw < 0))
    if n_rect:
        logger.info("rectified %d negative predictive means", n_rect)
    observed = None
    if observed_cells is not None and grid is not None:
        observed = np.isin(grid.cell_index(X[:, 0], X[:, 1]), np.asarray(observed_cells))
    return PredictiveField(X, np.abs(raw), (vf + noise) * scaler.std ** 2, grid, observed, n_rect)


@dataclass(frozen=True)
class CopaMapModel:
    """A trained heteroscedastic model with everything needed to predict rates."""

    state: VariationalState
    spec: KernelSpec
    scaler: Scaler
    grid: GridSpec
    observed_cells: np.ndarray
    quad_order: int = 20
    kind = "copamap"

    @classmethod
    def from_training(cls, train: TrainingSet, state, spec, quad_order: int = 20) -> "CopaMapModel":
        return cls(state, spec, train.scaler, train.grid, np.unique(train.cell), quad_order)

    def predict(self, X_star) -> PredictiveField:
        return predict(X_star, self.state, self.spec, self.scaler, self.quad_order, self.grid,
                       self.observed_cells)

    def predict_rates(self, X_star) -> np.ndarray:
        return self.predict(X_star).m_y


def expected_count(field: PredictiveField, region, t_span) -> float:
    """Expected number of persons in the spatial cells ``region`` during ``t_span``.

    Each field row covers one grid cell for one bin; it contributes its mean
    rate times the seconds of its bin that fall inside ``t_span``.
    """
    if field.grid is None:
        raise DataError("expected_count needs a field with a grid")
    region = np.unique(np.asarray(list(region), dtype=np.int64))
    if region.size == 0:
        raise DataError("empty region")
    t_a, t_b = float(t_span[0]), float(t_span[1])
    if t_b < t_a:
        raise DataError("t_span must be increasing")
    g = field.grid
    cells = g.cell_index(field.X_star[:, 0], field.X_star[:, 1])
    missing = np.setdiff1d(region, cells)
    if missing.size:
        raise DataError(f"{missing.size} region cells are not in the field")
    bins = g.bin_index(field.X_star[:, 2])
    start = g.t0 + bins * g.tau
    overlap = np.clip(np.minimum(start + g.tau, t_b) - np.maximum(start, t_a), 0.0, None)
    sel = np.isin(cells, region)
    return float(np.sum(field.m_y[sel] * overlap[sel]))


def write_field_csv(field: PredictiveField, path) -> None:
    observed = field.observed_mask if field.observed_mask is not None else np.ones(len(field.m_y), bool)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["x1", "x2", "t", "mean", "var", "observed"])
        for (x1, x2, t), m, v, o in zip(field.X_star, field.m_y, field.sigma2_y, observed):
            out.writerow([repr(float(x1)), repr(float(x2)), repr(float(t)), repr(float(m)),
                          repr(float(v)), int(o)])


def write_heatmaps(field: PredictiveField, out_dir, prefix: str = "mean", which: str = "mean") -> list[Path]:
    """One grayscale PGM per time bin; never-observed cells are white (255).

    Values are min-max scaled to 0..254 over the whole field; the constants
    go to a ``.scale`` sidecar next to every image.
    """
    if field.grid is None:
        raise DataError("heatmaps need a field with a grid")
    g = field.grid
    values = field.m_y if which == "mean" else field.sigma2_y
    vmin, vmax = float(values.min()), float(values.max())
    span = vmax - vmin or 1.0
    cells = g.cell_index(field.X_star[:, 0], field.X_star[:, 1])
    bins = g.bin_index(field.X_star[:, 2])
    observed = field.observed_mask if field.observed_mask is not None else np.ones(len(values), bool)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    nx, ny = g.shape
    paths = []
    for b in np.unique(bins):
        img = np.full((ny, nx), 255, dtype=np.uint8)
        sel = bins == b
        px = np.round(254 * (values[sel] - vmin) / span).astype(np.uint8)
        px[~observed[sel]] = 255
        img[cells[sel] // nx, cells[sel] % nx] = px
        path = out_dir / f"{prefix}_{int(b):06d}.pgm"
        write_pgm(path, np.flipud(img))
        path.with_suffix(".scale").write_text(
            f"vmin: {vmin!r}\nvmax: {vmax!r}\nt_start: {g.t0 + int(b) * g.tau!r}\ntau: {g.tau!r}\n"
            "unobserved: 255\n")
        paths.append(path)
    return paths
