"""Comparison models: per-cell mean rate, per-cell spectral model, and a Poisson GP."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .data import GridSpec, TrainingSet
from .errors import DataError
from .kernels import DTYPE, KernelSpec, spec_tensors
from .spectral import candidate_periods, inverse_dft, nudft, select_components, strongest
from .svgp import Poisson, Prior, TrainConfig, VariationalState, initial_spec, initial_state, train


def _cells_of(grid: GridSpec, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return grid.cell_index(X[:, 0], X[:, 1])


@dataclass(frozen=True)
class MLModel:
    """Time-invariant per-cell mean of observed rates; unseen cells get the global mean."""

    grid: GridSpec
    cells: np.ndarray  # sorted spatial ids
    rates: np.ndarray
    fallback: float
    kind = "ml"

    def predict_rates(self, X_star) -> np.ndarray:
        ids = _cells_of(self.grid, X_star)
        pos = np.clip(np.searchsorted(self.cells, ids), 0, self.cells.size - 1)
        hit = self.cells[pos] == ids
        return np.where(hit, self.rates[pos], self.fallback)


def fit_ml(train: TrainingSet) -> MLModel:
    """Unweighted mean of the observed rates of every spatial cell."""
    if train.n == 0:
        raise DataError("empty training set")
    cells, inv = np.unique(train.cell, return_inverse=True)
    inv = inv.ravel()
    rates = np.bincount(inv, weights=train.y) / np.bincount(inv)
    return MLModel(train.grid, cells, rates, float(train.y.mean()))


@dataclass(frozen=True)
class FremenModel:
    """Per-cell ``dc + 2 sum |c| cos(2 pi t / P + arg c)`` clamped at zero."""

    grid: GridSpec
    cells: np.ndarray
    dc: np.ndarray
    ptr: np.ndarray  # CSR offsets into coeffs/periods
    coeffs: np.ndarray
    periods: np.ndarray
    fallback: float
    kind = "fremen"

    def predict_rates(self, X_star) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X_star, dtype=float))
        ids = _cells_of(self.grid, X)
        out = np.full(len(X), self.fallback)
        pos = np.clip(np.searchsorted(self.cells, ids), 0, self.cells.size - 1)
        hit = self.cells[pos] == ids
        for j in np.unique(pos[hit]):
            rows = hit & (pos == j)
            a, b = self.ptr[j], self.ptr[j + 1]
            out[rows] = inverse_dft(self.coeffs[a:b], self.periods[a:b], X[rows, 2], self.dc[j])
        return np.maximum(out, 0.0)


def fit_fremen_cells(train: TrainingSet, periods=None, psi_max: int = 10, folds: int = 5) -> FremenModel:
    """Per-cell spectral model of the observed rates.

    The number of components comes from the contiguous cross-validation of
    the periodic initialization; the chosen count of strongest components is
    then taken from a transform of all of the cell's observations.
    """
    if train.n == 0:
        raise DataError("empty training set")
    periods = candidate_periods() if periods is None else np.asarray(periods, dtype=float)
    cells, inv = np.unique(train.cell, return_inverse=True)
    inv = inv.ravel()
    dc, ptr, coeffs, pers = [], [0], [], []
    for j in range(cells.size):
        rows = np.flatnonzero(inv == j)
        t, y = train.X[rows, 2], train.y[rows]
        p = select_components(t, y, periods, psi_max, folds).p if psi_max > 0 else 0
        spec = nudft(t, y, periods)
        sel = strongest(spec, p)
        dc.append(spec.dc)
        coeffs.append(spec.coeffs[sel])
        pers.append(periods[sel])
        ptr.append(ptr[-1] + sel.size)
    return FremenModel(train.grid, cells, np.array(dc), np.array(ptr, dtype=np.int64),
                       np.concatenate(coeffs) if coeffs else np.empty(0, complex),
                       np.concatenate(pers) if pers else np.empty(0), float(train.y.mean()))


@dataclass(frozen=True)
class GPHomModel:
    """Single-latent sparse GP with a Poisson likelihood on counts; rate = exp(f)."""

    state: VariationalState
    spec: KernelSpec
    grid: GridSpec
    observed_cells: np.ndarray
    kind = "gphom"

    def latent(self, X_star, chunk: int = 4096):
        X = np.atleast_2d(np.asarray(X_star, dtype=float))
        m = np.empty(len(X))
        v = np.empty(len(X))
        kp = spec_tensors(self.spec)
        Z = torch.as_tensor(self.state.Z, dtype=DTYPE)
        mu = torch.as_tensor(self.state.mu_f, dtype=DTYPE)
        S = torch.as_tensor(self.state.S_f, dtype=DTYPE)
        with torch.no_grad():
            for a in range(0, len(X), chunk):
                prior = Prior.build(torch.as_tensor(X[a:a + chunk], dtype=DTYPE), Z, kp, "f", self.spec)
                mm, vv = prior.moments(mu, S)
                m[a:a + chunk] = mm.numpy() + self.state.f_mean
                v[a:a + chunk] = vv.numpy()
        return m, v

    def predict_rates(self, X_star) -> np.ndarray:
        """Posterior mean rate ``E[exp(f)] = exp(m + v/2)``."""
        m, v = self.latent(X_star)
        return np.exp(m + 0.5 * v)


def fit_gp_hom(train_set: TrainingSet, init: tuple, config: TrainConfig = TrainConfig(),
               spec: KernelSpec = None) -> GPHomModel:
    """Poisson GP on counts with exposure ``delta``; same kernels and optimizers as the main model.

    The constant prior mean of f is the log of the pooled rate ``sum c / sum delta``.
    """
    if train_set.n == 0:
        raise DataError("empty training set")
    total_c, total_d = float(train_set.c.sum()), float(train_set.delta.sum())
    f_mean = math.log(max(total_c, 0.5) / total_d)  # half a count keeps an all-zero set finite
    spec = initial_spec(train_set, init[0]) if spec is None else spec
    state = initial_state(init[1].Z, spec, f_mean=f_mean)
    res = train(train_set, init, config, spec=spec, state=state, likelihood=Poisson(config.quad_order))
    return GPHomModel(res.state, res.spec, train_set.grid, np.unique(train_set.cell))
