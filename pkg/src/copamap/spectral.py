"""Spectral initialization of the periodic kernel and k-means placement of inducing points."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .data import GridSpec, TrainingSet
from .errors import DataError

HOUR = 3600.0
DAY = 24 * HOUR


def candidate_periods(min_period: float = HOUR, max_period: float = 7 * DAY,
                      count: int = 200) -> np.ndarray:
    """Equally spaced candidate periods (seconds), strictly increasing."""
    if not 0 < min_period < max_period or count < 2:
        raise DataError("need 0 < min_period < max_period and at least two candidates")
    return np.linspace(min_period, max_period, count)


def fourier_periods(span: float, min_period: float = HOUR, max_period: float = 7 * DAY) -> np.ndarray:
    """Periods ``span / k`` (integer ``k``) of a record of length ``span`` inside the range.

    This is the resolution the record actually supports: neighbouring
    frequencies are ``1 / span`` apart.
    """
    if not span > 0 or not 0 < min_period < max_period:
        raise DataError("need span > 0 and 0 < min_period < max_period")
    k = np.arange(max(1, math.ceil(span / max_period - 1e-9)), math.floor(span / min_period + 1e-9) + 1)
    periods = np.sort(span / k)
    if periods.size == 0:
        raise DataError("no Fourier period of the record falls inside the range")
    return periods


class Spectrum(NamedTuple):
    dc: float
    coeffs: np.ndarray  # complex, one per period
    periods: np.ndarray


def nudft(times, values, periods) -> Spectrum:
    """Direct non-uniform DFT of a real signal at the given periods.

    ``coeffs[j] = mean_k((v_k - dc) * exp(-2j*pi*t_k / periods[j]))`` with the
    mean ``dc`` removed up front and returned separately.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    periods = np.asarray(periods, dtype=float)
    if t.size == 0:
        raise DataError("nudft needs at least one sample")
    if t.shape != v.shape:
        raise DataError("times and values differ in length")
    dc = float(v.mean())
    phase = np.exp(-2j * np.pi * np.outer(1.0 / periods, t))
    return Spectrum(dc, phase @ (v - dc) / t.size, periods)


def inverse_dft(components, periods, query_times, dc: float = 0.0) -> np.ndarray:
    """Real reconstruction ``dc + 2 * sum_j |c_j| cos(2*pi*t/P_j + arg c_j)``."""
    c = np.asarray(components, dtype=complex)
    periods = np.asarray(periods, dtype=float)
    t = np.asarray(query_times, dtype=float)
    if c.shape != periods.shape:
        raise DataError("components and periods differ in length")
    out = np.full(t.shape, dc, dtype=float)
    if c.size:
        arg = 2 * np.pi * np.outer(t, 1.0 / periods) + np.angle(c)
        out += 2 * (np.cos(arg) @ np.abs(c))
    return out


def strongest(spec: Spectrum, p: int) -> np.ndarray:
    """Indices of the ``p`` largest-magnitude components, ties to the smaller period."""
    order = np.lexsort((spec.periods, -np.abs(spec.coeffs)))
    return order[:p]


def contiguous_folds(n: int, folds: int) -> list[np.ndarray]:
    """Split ``range(n)`` into ``folds`` contiguous, nearly equal index blocks."""
    return np.array_split(np.arange(n), folds)


class CellSelection(NamedTuple):
    p: int
    fold: int
    magnitudes: np.ndarray
    periods: np.ndarray
    errors: np.ndarray  # (folds, psi_max + 1) test RMSE


def select_components(times, values, periods, psi_max: int, folds: int = 5,
                      rtol: float = 1e-9) -> CellSelection:
    """Contiguous k-fold choice of the number of spectral components for one cell.

    For every fold the signal is transformed on the training part and
    reconstructed from the ``p = 0..psi_max`` strongest components; the pair
    ``(fold, p)`` with the smallest test RMSE wins (earliest pair on near-ties).
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    order = np.argsort(t, kind="stable")
    t, y = t[order], y[order]
    periods = np.asarray(periods, dtype=float)
    empty = np.empty(0)
    if t.size < 2 * folds:
        return CellSelection(0, 0, empty, empty, np.zeros((1, psi_max + 1)))
    errors = np.empty((folds, psi_max + 1))
    spectra = []
    for i, test in enumerate(contiguous_folds(t.size, folds)):
        train = np.setdiff1d(np.arange(t.size), test)
        spec = nudft(t[train], y[train], periods)
        spectra.append(spec)
        ranked = strongest(spec, psi_max)
        for p in range(psi_max + 1):
            sel = ranked[:p]
            y_hat = inverse_dft(spec.coeffs[sel], periods[sel], t[test], spec.dc)
            errors[i, p] = math.sqrt(np.mean((y_hat - y[test]) ** 2))
    flat = errors.ravel()
    best = flat.min()
    scale = max(float(np.abs(y).max()), 1e-300)
    idx = int(np.flatnonzero(flat <= best + rtol * scale)[0])
    fold, p = divmod(idx, psi_max + 1)
    sel = strongest(spectra[fold], p)
    return CellSelection(p, fold, np.abs(spectra[fold].coeffs[sel]), periods[sel], errors)


# ---------------------------------------------------------------------------
# weighted k-means
# ---------------------------------------------------------------------------


class KMeansResult(NamedTuple):
    centroids: np.ndarray
    labels: np.ndarray
    objective: float
    history: list


def _assign(points, centroids, chunk=4096):
    labels = np.empty(len(points), dtype=np.int64)
    dist = np.empty(len(points))
    c2 = (centroids ** 2).sum(1)
    for a in range(0, len(points), chunk):
        p = points[a:a + chunk]
        d = (p ** 2).sum(1)[:, None] - 2 * p @ centroids.T + c2[None, :]
        np.maximum(d, 0.0, out=d)
        labels[a:a + chunk] = d.argmin(1)
        dist[a:a + chunk] = d[np.arange(len(p)), labels[a:a + chunk]]
    return labels, dist


def _seed(points, w, k, rng):
    """k-means++ seeding with probabilities proportional to ``w * D^2``."""
    idx = [rng.choice(len(points), p=w / w.sum())]
    d2 = ((points - points[idx[0]]) ** 2).sum(1)
    for _ in range(1, k):
        score = w * d2
        total = score.sum()
        nxt = int(rng.choice(len(points), p=score / total)) if total > 0 else int(np.argmax(w))
        idx.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(1))
    return points[idx].copy()


def _lloyd(points, w, centroids, max_iter):
    labels, d2 = _assign(points, centroids)
    history = [float(w @ d2)]
    for _ in range(max_iter):
        for j in range(len(centroids)):
            mask = labels == j
            mass = w[mask].sum()
            if mass > 0:
                centroids[j] = w[mask] @ points[mask] / mass
            else:
                # empty cluster: move it onto the worst-served point
                far = int(np.argmax(w * d2))
                centroids[j] = points[far]
                d2[far] = 0.0
        new_labels, d2 = _assign(points, centroids)
        history.append(float(w @ d2))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return centroids, labels, history


def _hartigan(points, w, centroids, labels, max_sweeps=100):
    """Single-point transfers that strictly lower the weighted objective.

    Moving point ``x`` (weight ``v``) from cluster ``a`` (mass ``A``) to ``b``
    (mass ``B``) changes the objective by
    ``v*B/(B+v)*|x-c_b|^2 - v*A/(A-v)*|x-c_a|^2``.
    """
    k = len(centroids)
    mass = np.bincount(labels, weights=w, minlength=k)
    for _ in range(max_sweeps):
        moved = False
        for i in range(len(points)):
            a, v = labels[i], w[i]
            if v <= 0 or mass[a] - v <= 1e-12 * mass[a]:
                continue
            d2 = ((centroids - points[i]) ** 2).sum(1)
            remove = v * mass[a] / (mass[a] - v) * d2[a]
            add = v * mass / (mass + v) * d2
            add[a] = np.inf
            b = int(np.argmin(add))
            if add[b] < remove * (1 - 1e-12):
                centroids[a] = (mass[a] * centroids[a] - v * points[i]) / (mass[a] - v)
                centroids[b] = (mass[b] * centroids[b] + v * points[i]) / (mass[b] + v)
                mass[a] -= v
                mass[b] += v
                labels[i] = b
                moved = True
        if not moved:
            break
    return centroids, labels


def weighted_kmeans(points, weights, k: int, seed: int = 0, n_init: int = 10,
                    max_iter: int = 300, refine: Optional[bool] = None) -> KMeansResult:
    """Lloyd's algorithm with per-point weights and k-means++ seeding.

    Runs ``n_init`` seeded restarts and keeps the lowest weighted objective
    ``sum_i w_i * ||x_i - c(x_i)||^2``. With ``refine`` (default: for up to
    2000 points) each Lloyd fixpoint is polished by Hartigan transfers and
    Lloyd again; the objective never increases along the way.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(pts),) or np.any(w < 0) or not np.isfinite(w).all():
        raise DataError("weights must be finite, non-negative and one per point")
    if not w.sum() > 0:
        raise DataError("weights are all zero")
    n_distinct = len(np.unique(pts[w > 0], axis=0))
    if not 1 <= k <= n_distinct:
        raise DataError(f"k={k} exceeds the {n_distinct} distinct weighted points")
    if refine is None:
        refine = len(pts) <= 2000
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        cents, labels, hist = _lloyd(pts, w, _seed(pts, w, k, rng), max_iter)
        if refine:
            cents, labels = _hartigan(pts, w, cents, labels.copy())
            cents, labels, more = _lloyd(pts, w, cents, max_iter)
            hist = hist + more
        if best is None or hist[-1] < best.objective:
            best = KMeansResult(cents, labels, hist[-1], hist)
    return best


# ---------------------------------------------------------------------------
# initialization routines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PeriodicInit:
    psi: int
    gamma_hat: np.ndarray   # periods, seconds
    sigma2_hat: np.ndarray  # variances in [0, sigma2_max]
    cell_choices: tuple = ()  # per sampled cell: (p_s, periods, magnitudes)

    def __post_init__(self):
        object.__setattr__(self, "gamma_hat", np.asarray(self.gamma_hat, dtype=float))
        object.__setattr__(self, "sigma2_hat", np.asarray(self.sigma2_hat, dtype=float))
        if self.psi != self.gamma_hat.size or self.psi != self.sigma2_hat.size:
            raise DataError("psi must match the number of periods and variances")


def rebin(train: TrainingSet, r_s: float, tau: float) -> TrainingSet:
    """Aggregate a training set onto a coarser grid; rates become ``sum c / sum delta``."""
    g = train.grid
    nx = int(math.ceil(g.shape[0] * g.r_s / r_s - 1e-9))
    ny = int(math.ceil(g.shape[1] * g.r_s / r_s - 1e-9))
    coarse = GridSpec(r_s, tau, g.origin, g.t0, (nx, ny))
    cell = coarse.cell_index(train.X[:, 0], train.X[:, 1])
    bins = coarse.bin_index(train.X[:, 2])
    keys = bins * coarse.n_cells + cell
    uniq, inv = np.unique(keys, return_inverse=True)
    inv = inv.ravel()
    c = np.bincount(inv, weights=train.c).round().astype(np.int64)
    delta = np.bincount(inv, weights=train.delta)
    return TrainingSet.from_cells(coarse, uniq % coarse.n_cells, uniq // coarse.n_cells, c, delta)


def init_periodic_hyperparams(train: TrainingSet, periods=None, l: int = 10, psi_max: int = 10,
                              sigma2_max: float = 0.95, seed: int = 0,
                              init_r_s: float = 5.0, init_tau: float = HOUR,
                              folds: int = 5) -> PeriodicInit:
    """Data-driven periods and variances for the temporal kernel.

    Rates are re-binned to ``init_r_s x init_tau``, ``l`` spatial cells are drawn
    with probability proportional to their total counts, and every drawn cell
    picks its number of spectral components by contiguous cross-validation.
    Candidates shorter than ``2 * init_tau`` are dropped since hourly sampled
    rates cannot tell them from their aliases.
    The periodic component count is the floored mean of the per-cell choices;
    periods are weighted k-means centroids of the chosen periods (weights =
    spectral magnitudes) and variances the per-cluster weight sums scaled so
    the largest equals ``sigma2_max``.
    """
    periods = candidate_periods() if periods is None else np.asarray(periods, dtype=float)
    if train.n == 0:
        raise DataError("empty training set")
    # periods below two bin widths alias onto longer ones at equal magnitude
    periods = periods[periods >= 2 * init_tau - 1e-9]
    if periods.size == 0:
        raise DataError("no candidate period is resolvable at the init bin width")
    coarse = rebin(train, init_r_s, init_tau)
    cells, inv = np.unique(coarse.cell, return_inverse=True)
    totals = np.bincount(inv.ravel(), weights=coarse.c)
    active = np.flatnonzero(totals > 0)
    if active.size == 0:
        return PeriodicInit(0, [], [])
    rng = np.random.default_rng(seed)
    size = min(l, active.size)
    chosen = np.sort(rng.choice(active, size=size, replace=False,
                                p=totals[active] / totals[active].sum()))

    choices = []
    for j in chosen:
        mask = inv.ravel() == j
        sel = select_components(coarse.X[mask, 2], coarse.y[mask], periods, psi_max, folds)
        choices.append((sel.p, sel.periods, sel.magnitudes))

    psi = int(math.floor(np.mean([p for p, _, _ in choices])))
    pooled_p = np.concatenate([o for _, o, _ in choices]) if choices else np.empty(0)
    pooled_w = np.concatenate([a for _, _, a in choices]) if choices else np.empty(0)
    psi = min(psi, len(np.unique(pooled_p[pooled_w > 0])))
    if psi == 0:
        return PeriodicInit(0, [], [], tuple(choices))
    km = weighted_kmeans(pooled_p, pooled_w, psi, seed=seed)
    gamma = km.centroids[:, 0]
    mass = np.bincount(km.labels, weights=pooled_w, minlength=psi)
    variances = sigma2_max * mass / mass.max()
    order = np.argsort(-variances, kind="stable")
    return PeriodicInit(psi, gamma[order], variances[order], tuple(choices))


@dataclass(frozen=True)
class InducingInit:
    Z: np.ndarray  # (m, 3) meters, meters, seconds
    alpha: float


def n_inducing(n: int, alpha: float) -> int:
    """``floor(alpha * n)``, robust to binary rounding of ``alpha``."""
    if not 0 < alpha <= 1:
        raise DataError("alpha must lie in (0, 1]")
    return int(math.floor(alpha * n + 1e-9))


def init_inducing_points(train: TrainingSet, alpha: float = 0.02, seed: int = 0,
                         n_init: Optional[int] = None) -> InducingInit:
    """Observation-time weighted k-means of the training inputs (``k = floor(alpha n)``).

    Time is scaled by the training time span and space by the grid diagonal
    before clustering so both axes have comparable ranges.
    """
    if train.n == 0:
        raise DataError("empty training set")
    m = n_inducing(train.n, alpha)
    if m < 1:
        raise DataError(f"alpha={alpha} gives no inducing points for n={train.n}")
    g = train.grid
    diag = math.hypot(g.shape[0] * g.r_s, g.shape[1] * g.r_s)
    t = train.X[:, 2]
    span = float(t.max() - t.min()) or 1.0
    scale = np.array([diag, diag, span])
    shift = np.array([g.origin[0], g.origin[1], t.min()])
    pts = (train.X - shift) / scale
    if n_init is None:
        n_init = 3 if m <= 500 else 1
    km = weighted_kmeans(pts, train.delta, m, seed=seed, n_init=n_init)
    return InducingInit(km.centroids * scale + shift, alpha)
