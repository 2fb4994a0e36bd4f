"""Heteroscedastic sparse variational GP with two latent functions.

The rate latent f and the noise latent g share the inducing locations Z. The
likelihood is ``y ~ N(f, softplus(g))`` on standardized rates. Variational
parameters of q(u_f) and q(u_g) are updated by natural gradients; kernel
hyperparameters and Z by Adam, alternating on each minibatch.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
import torch

from .data import TrainingSet
from .errors import DataError, NumericalError
from .kernels import (
    DTYPE, TIME_UNIT, KernelParams, KernelSpec, kf_diag_t, kf_t, kg_diag_t, kg_t,
    inv_softplus, robust_cholesky, softplus, spec_tensors,
)
from .spectral import PeriodicInit

logger = logging.getLogger(__name__)

LOG2PI = math.log(2 * math.pi)
G_MEAN = float(inv_softplus(1.0))  # prior mean of g: unit noise variance at start
VAR_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VariationalState:
    """``q(u_f) = N(mu_f, L_f L_f^T)`` and ``q(u_g) = N(mu_g, L_g L_g^T)`` at shared ``Z``.

    ``mu_f`` and ``mu_g`` are deviations from the constant prior means
    ``f_mean`` and ``g_mean``.
    """

    Z: np.ndarray
    mu_f: np.ndarray
    L_f: np.ndarray
    mu_g: np.ndarray
    L_g: np.ndarray
    g_mean: float = G_MEAN
    f_mean: float = 0.0

    def __post_init__(self):
        for name in ("Z", "mu_f", "L_f", "mu_g", "L_g"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        m = self.Z.shape[0]
        if self.Z.shape != (m, 3) or m < 1:
            raise DataError("Z must be an (m, 3) array with m >= 1")
        for mu, L in ((self.mu_f, self.L_f), (self.mu_g, self.L_g)):
            if mu.shape != (m,) or L.shape != (m, m):
                raise DataError("variational parameters do not match the number of inducing points")
            if np.any(np.triu(L, 1) != 0) or np.any(np.diag(L) <= 0):
                raise DataError("L must be lower triangular with a positive diagonal")

    @property
    def m(self) -> int:
        return self.Z.shape[0]

    @property
    def S_f(self) -> np.ndarray:
        return self.L_f @ self.L_f.T

    @property
    def S_g(self) -> np.ndarray:
        return self.L_g @ self.L_g.T


class LatentMoments:
    """Per-point marginal means ``m`` and variances ``v`` (clamped at 1e-12)."""

    def __init__(self, m, v):
        self.m = np.asarray(m, dtype=float)
        self.v = np.maximum(np.asarray(v, dtype=float), VAR_FLOOR)

    def __iter__(self):
        return iter((self.m, self.v))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 2048
    steps: int = 2000
    lr: float = 0.01
    lr_final: float = 0.001
    lr_decay_steps: int = 100
    natgrad_step: float = 0.1
    quad_order: int = 20
    seed: int = 0
    early_stop_window: int = 100
    early_stop_tol: float = 1e-4
    train_Z: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0 or self.lr_decay_steps < 0:
            raise DataError("batch_size must be positive, steps and lr_decay_steps non-negative")
        if self.quad_order < 5:
            raise DataError("quadrature order must be at least 5")
        if not (self.lr > 0 and self.lr_final > 0 and self.natgrad_step > 0):
            raise DataError("learning rates must be positive")

    def lr_at(self, step: int) -> float:
        if self.lr_decay_steps == 0:
            return self.lr_final
        frac = min(step, self.lr_decay_steps) / self.lr_decay_steps
        return self.lr + (self.lr_final - self.lr) * frac


@dataclass
class TrainResult:
    state: VariationalState
    spec: KernelSpec
    trace: list = field(default_factory=list)  # (step, neg_elbo, lr)
    seconds: float = 0.0
    stopped_early: bool = False


# ---------------------------------------------------------------------------
# quadrature and closed forms
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def gauss_hermite(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for ``E[h(x)]``, ``x ~ N(0, 1)``."""
    x, w = np.polynomial.hermite_e.hermegauss(order)
    return x, w / w.sum()


def _gh_t(order):
    x, w = gauss_hermite(order)
    return torch.tensor(x, dtype=DTYPE), torch.tensor(w, dtype=DTYPE)


def _noise_var(g):
    return torch.clamp(softplus(g), min=VAR_FLOOR)


def ell_t(y, mf, vf, mg, vg, order: int):
    """Per-point ``E[log N(y | f, softplus(g))]``.

    The Gaussian log-density is quadratic in f, so the f integral is done in
    closed form (exactly what any Gauss-Hermite rule of order >= 2 returns);
    the g integral uses Gauss-Hermite.
    """
    x, w = _gh_t(order)
    s = _noise_var(mg[:, None] + torch.sqrt(vg)[:, None] * x)
    q = ((y - mf) ** 2 + vf)[:, None]
    return (w * (-0.5 * (LOG2PI + torch.log(s)) - 0.5 * q / s)).sum(1)


def ell_2d_t(y, mf, vf, mg, vg, order: int):
    """Same expectation by the full two-dimensional Gauss-Hermite product rule."""
    x, w = _gh_t(order)
    f = mf[:, None, None] + torch.sqrt(vf)[:, None, None] * x[None, :, None]
    s = _noise_var(mg[:, None, None] + torch.sqrt(vg)[:, None, None] * x[None, None, :])
    logp = -0.5 * (LOG2PI + torch.log(s)) - 0.5 * (y[:, None, None] - f) ** 2 / s
    return (w[:, None] * w[None, :] * logp).sum((1, 2))


def expected_log_lik(y, qf, qg, quad_order: int = 20) -> np.ndarray:
    """2D Gauss-Hermite ``E_{q(f) q(g)}[log N(y | f, softplus(g))]`` per point.

    ``qf`` and ``qg`` are ``(mean, variance)`` pairs.
    """
    t = lambda a: torch.as_tensor(np.atleast_1d(np.asarray(a, dtype=float)), dtype=DTYPE)
    y, mf, vf, mg, vg = t(y), t(qf[0]), t(qf[1]), t(qg[0]), t(qg[1])
    if torch.any(vf < 0) or torch.any(vg < 0):
        raise DataError("variances must be non-negative")
    with torch.no_grad():
        return ell_2d_t(y, mf, vf, mg, vg, quad_order).numpy()


def kl_t(Lk, mu, S):
    """``KL(N(mu, S) || N(0, Lk Lk^T))``."""
    m = mu.shape[0]
    alpha = torch.cholesky_solve(mu[:, None], Lk)
    tr = torch.diagonal(torch.cholesky_solve(S, Lk)).sum()
    logdet_k = 2 * torch.log(torch.diagonal(Lk)).sum()
    logdet_s = torch.linalg.slogdet(S)[1]
    return 0.5 * (tr + (mu[:, None] * alpha).sum() - m + logdet_k - logdet_s)


def kl_gaussian(mu, L, K, jitter: float = 0.0) -> float:
    """Closed-form ``KL(N(mu, L L^T) || N(0, K))``."""
    mu_t = torch.as_tensor(np.asarray(mu, dtype=float), dtype=DTYPE)
    L_t = torch.as_tensor(np.asarray(L, dtype=float), dtype=DTYPE)
    K_t = torch.as_tensor(np.asarray(K, dtype=float), dtype=DTYPE)
    with torch.no_grad():
        Lk, _ = robust_cholesky(K_t, jitter) if jitter else (_strict_cholesky(K_t), 0.0)
        return float(kl_t(Lk, mu_t, L_t @ L_t.T))


def _strict_cholesky(K):
    L, info = torch.linalg.cholesky_ex(K)
    if int(info) != 0:
        raise NumericalError("prior covariance is not positive definite")
    return L


# ---------------------------------------------------------------------------
# conditionals
# ---------------------------------------------------------------------------


class Prior:
    """Cholesky of K_uu and the projection ``B = K_uu^-1 K_uf`` for a batch."""

    def __init__(self, Lu, B, qdiag):
        self.Lu, self.B, self.qdiag = Lu, B, qdiag  # qdiag = diag(K_ff - Q_ff)

    @classmethod
    def build(cls, X, Z, kp: dict, which: str, spec_like) -> "Prior":
        if which == "f":
            Kuu = kf_t(Z, Z, kp, spec_like.const_variance)
            Kuf = kf_t(Z, X, kp, spec_like.const_variance)
            kdiag = kf_diag_t(X, kp, spec_like.const_variance)
        else:
            Kuu = kg_t(Z, Z, kp, spec_like.g_time_scale)
            Kuf = kg_t(Z, X, kp, spec_like.g_time_scale)
            kdiag = kg_diag_t(X, kp)
        Lu, _ = robust_cholesky(Kuu, spec_like.jitter)
        A = torch.linalg.solve_triangular(Lu, Kuf, upper=False)
        B = torch.linalg.solve_triangular(Lu.T, A, upper=True)
        return cls(Lu, B, kdiag - (A * A).sum(0))

    def detached(self) -> "Prior":
        return Prior(self.Lu.detach(), self.B.detach(), self.qdiag.detach())

    def moments(self, mu, S):
        m = self.B.T @ mu
        v = self.qdiag + (self.B * (S @ self.B)).sum(0)
        return m, torch.clamp(v, min=VAR_FLOOR)


def latent_moments(X, state: VariationalState, spec: KernelSpec, which: str = "f") -> LatentMoments:
    """Marginals of q(f) or q(g) at ``X``; only the diagonal covariance is formed."""
    if which not in ("f", "g"):
        raise DataError("which must be 'f' or 'g'")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise DataError("empty batch")
    with torch.no_grad():
        prior = Prior.build(torch.as_tensor(X, dtype=DTYPE), torch.as_tensor(state.Z, dtype=DTYPE),
                            spec_tensors(spec), which, spec)
        mu = torch.as_tensor(state.mu_f if which == "f" else state.mu_g, dtype=DTYPE)
        S = torch.as_tensor(state.S_f if which == "f" else state.S_g, dtype=DTYPE)
        m, v = prior.moments(mu, S)
    m = m + (state.f_mean if which == "f" else state.g_mean)
    return LatentMoments(m.numpy(), v.numpy())


# ---------------------------------------------------------------------------
# likelihoods
# ---------------------------------------------------------------------------


class HeteroGaussian:
    """``y ~ N(f, softplus(g))`` on standardized rates; uses both latents."""

    uses_g = True

    def __init__(self, quad_order: int = 20):
        self.quad_order = quad_order

    def targets(self, train: TrainingSet):
        return torch.as_tensor(train.y_std, dtype=DTYPE)

    def ell(self, y, mf, vf, mg, vg):
        return ell_t(y, mf, vf, mg, vg, self.quad_order)


class PinnedGaussian:
    """``y ~ N(f, noise)`` with a fixed noise variance (homoscedastic)."""

    uses_g = False

    def __init__(self, noise: float):
        if not noise > 0:
            raise DataError("pinned noise variance must be positive")
        self.noise = float(noise)

    def targets(self, train: TrainingSet):
        return torch.as_tensor(train.y_std, dtype=DTYPE)

    def ell(self, y, mf, vf, mg=None, vg=None):
        return -0.5 * (LOG2PI + math.log(self.noise)) - 0.5 * ((y - mf) ** 2 + vf) / self.noise


class Poisson:
    """Counts ``c ~ Poisson(exp(f) * delta)``; targets are ``(c, delta)`` columns."""

    uses_g = False

    def __init__(self, quad_order: int = 20):
        self.quad_order = quad_order

    def targets(self, train: TrainingSet):
        return torch.as_tensor(np.column_stack([train.c, train.delta]), dtype=DTYPE)

    def ell(self, cd, mf, vf, mg=None, vg=None):
        c, delta = cd[:, 0], cd[:, 1]
        x, w = _gh_t(self.quad_order)
        f = mf[:, None] + torch.sqrt(vf)[:, None] * x
        logp = c[:, None] * (f + torch.log(delta)[:, None]) - delta[:, None] * torch.exp(f)
        return (w * logp).sum(1) - torch.lgamma(c + 1)


def neg_elbo_t(y, pf: Prior, pg: Optional[Prior], qf, qg, lik, n_total, f_mean=0.0, g_mean=G_MEAN):
    """Minibatch estimate of -ELBO and its parts (ell sum, KL_f, KL_g)."""
    mf, vf = pf.moments(*qf)
    mf = mf + f_mean
    if lik.uses_g:
        mg, vg = pg.moments(*qg)
        ell = lik.ell(y, mf, vf, mg + g_mean, vg).sum()
        kl_g = kl_t(pg.Lu, *qg)
    else:
        ell = lik.ell(y, mf, vf).sum()
        kl_g = torch.zeros((), dtype=DTYPE)
    kl_f = kl_t(pf.Lu, *qf)
    scale = n_total / y.shape[0]
    return -(scale * ell - kl_f - kl_g), (ell, kl_f, kl_g)


def neg_elbo_params(X, y, kparams: KernelParams, Z, mu_f, L_f, mu_g=None, L_g=None, g_mean=G_MEAN,
                    n_total=None, quad_order: int = 20, likelihood=None, f_mean=0.0):
    """-ELBO as a differentiable function of every trainable tensor.

    Covariances enter through their Cholesky factors (lower triangles of
    ``L_f``, ``L_g``); ``Z`` is in meters and seconds. The likelihood defaults
    to the heteroscedastic Gaussian; with a single-latent one the g blocks are
    ignored.
    """
    lik = HeteroGaussian(quad_order) if likelihood is None else likelihood
    n_total = y.shape[0] if n_total is None else n_total
    kp = kparams.tensors()
    pf = Prior.build(X, Z, kp, "f", kparams)
    Lf = torch.tril(L_f)
    pg, qg = None, None
    if lik.uses_g:
        pg = Prior.build(X, Z, kp, "g", kparams)
        Lg = torch.tril(L_g)
        qg = (mu_g, Lg @ Lg.T)
    loss, _ = neg_elbo_t(y, pf, pg, (mu_f, Lf @ Lf.T), qg, lik, n_total, f_mean, g_mean)
    return loss


def elbo(X, y, state: VariationalState, spec: KernelSpec, n_total: Optional[int] = None,
         quad_order: int = 20, pin_noise: Optional[float] = None) -> float:
    """ELBO for a batch of standardized rates ``y``.

    The likelihood term is scaled by ``n_total / len(y)``. With ``pin_noise``
    the noise variance is that constant and q(u_g) drops out (homoscedastic).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if X.shape[0] != y.shape[0] or y.size == 0:
        raise DataError("X and y must be non-empty and aligned")
    n_total = y.size if n_total is None else n_total
    lik = HeteroGaussian(quad_order) if pin_noise is None else PinnedGaussian(pin_noise)
    with torch.no_grad():
        Xt, Zt = torch.as_tensor(X, dtype=DTYPE), torch.as_tensor(state.Z, dtype=DTYPE)
        kp = spec_tensors(spec)
        pf = Prior.build(Xt, Zt, kp, "f", spec)
        pg = Prior.build(Xt, Zt, kp, "g", spec) if lik.uses_g else None
        qf = (torch.as_tensor(state.mu_f, dtype=DTYPE), torch.as_tensor(state.S_f, dtype=DTYPE))
        qg = (torch.as_tensor(state.mu_g, dtype=DTYPE), torch.as_tensor(state.S_g, dtype=DTYPE))
        loss, _ = neg_elbo_t(torch.as_tensor(y, dtype=DTYPE), pf, pg, qf, qg, lik, n_total,
                             state.f_mean, state.g_mean)
    return -float(loss)


# ---------------------------------------------------------------------------
# natural gradients
# ---------------------------------------------------------------------------


class GaussianBlock:
    """One Gaussian q(u) kept in both mean/covariance and natural form."""

    def __init__(self, mu, S):
        self.mu = torch.as_tensor(mu, dtype=DTYPE).clone()
        self.S = torch.as_tensor(S, dtype=DTYPE).clone()
        self._sync_natural()

    def _sync_natural(self):
        L, info = torch.linalg.cholesky_ex(self.S)
        if int(info) != 0:
            raise NumericalError("variational covariance lost positive definiteness")
        P = torch.cholesky_inverse(L)
        self.theta1 = P @ self.mu
        self.theta2 = -0.5 * P

    def step(self, grad_mu, grad_S, gamma: float, max_halvings: int = 10) -> float:
        """Ascend along the natural gradient given ELBO gradients w.r.t. ``(mu, S)``.

        Returns the step size used (halved while the new precision is not
        positive definite; 0 when no step was possible).
        """
        gS = 0.5 * (grad_S + grad_S.T)
        d1 = grad_mu - 2 * gS @ self.mu
        for _ in range(max_halvings + 1):
            t1 = self.theta1 + gamma * d1
            t2 = self.theta2 + gamma * gS
            prec = -2 * t2
            prec = 0.5 * (prec + prec.T)
            Lp, info = torch.linalg.cholesky_ex(prec)
            if int(info) == 0 and torch.isfinite(Lp).all():
                S = torch.cholesky_inverse(Lp)
                self.S = 0.5 * (S + S.T)
                self.mu = self.S @ t1
                self.theta1, self.theta2 = t1, 0.5 * (t2 + t2.T)
                return gamma
            gamma *= 0.5
        return 0.0

    def cholesky(self) -> np.ndarray:
        L, info = torch.linalg.cholesky_ex(self.S)
        if int(info) != 0:
            raise NumericalError("variational covariance lost positive definiteness")
        return L.numpy().copy()


# ---------------------------------------------------------------------------
# model used during training
# ---------------------------------------------------------------------------


class SVGPModel:
    """Mutable training-time view: torch leaves for Adam, Gaussian blocks for natgrad."""

    def __init__(self, state: VariationalState, spec: KernelSpec, likelihood=None):
        self.kparams = KernelParams(spec)
        self.lik = HeteroGaussian() if likelihood is None else likelihood
        self._zscale = torch.tensor([1.0, 1.0, TIME_UNIT], dtype=DTYPE)
        self.z_raw = torch.tensor(state.Z / self._zscale.numpy(), dtype=DTYPE, requires_grad=True)
        self.qf = GaussianBlock(state.mu_f, state.S_f)
        self.qg = GaussianBlock(state.mu_g, state.S_g)
        self.f_mean, self.g_mean = state.f_mean, state.g_mean

    @property
    def Z(self):
        return self.z_raw * self._zscale

    def priors(self, X):
        kp = self.kparams.tensors()
        pf = Prior.build(X, self.Z, kp, "f", self.kparams)
        pg = Prior.build(X, self.Z, kp, "g", self.kparams) if self.lik.uses_g else None
        return pf, pg

    def _neg_elbo(self, y, pf, pg, qf, qg, n_total):
        return neg_elbo_t(y, pf, pg, qf, qg, self.lik, n_total, self.f_mean, self.g_mean)

    def natgrad(self, X, y, n_total, gamma, priors=None):
        """One natural-gradient step on the variational blocks; ``priors`` may be reused."""
        if priors is None:
            with torch.no_grad():
                pf, pg = self.priors(X)
        else:
            pf, pg = (p if p is None else p.detached() for p in priors)
        blocks = [self.qf, self.qg] if self.lik.uses_g else [self.qf]
        mus = [b.mu.clone().requires_grad_(True) for b in (self.qf, self.qg)]
        covs = [b.S.clone().requires_grad_(True) for b in (self.qf, self.qg)]
        loss, _ = self._neg_elbo(y, pf, pg, (mus[0], covs[0]), (mus[1], covs[1]), n_total)
        wrt = [t for i in range(len(blocks)) for t in (mus[i], covs[i])]
        grads = torch.autograd.grad(loss, wrt)
        used = [b.step(-grads[2 * i], -grads[2 * i + 1], gamma) for i, b in enumerate(blocks)]
        return float(loss.detach()), used

    def adam_params(self, train_Z=True):
        return self.kparams.parameters() + ([self.z_raw] if train_Z else [])

    def loss(self, X, y, n_total, priors=None):
        pf, pg = self.priors(X) if priors is None else priors
        return self._neg_elbo(y, pf, pg, (self.qf.mu, self.qf.S), (self.qg.mu, self.qg.S), n_total)

    def state(self) -> VariationalState:
        with torch.no_grad():
            Z = self.Z.numpy().copy()
        return VariationalState(Z, self.qf.mu.numpy().copy(), self.qf.cholesky(),
                                self.qg.mu.numpy().copy(), self.qg.cholesky(),
                                self.g_mean, self.f_mean)

    def spec(self) -> KernelSpec:
        return self.kparams.spec()

    def diagnose(self) -> str:
        bad = []
        for name, p in self.kparams.named_parameters() + [("Z", self.z_raw)]:
            if not torch.isfinite(p).all():
                bad.append(f"{name} (value)")
            elif p.grad is not None and not torch.isfinite(p.grad).all():
                bad.append(f"{name} (gradient)")
        for name, b in (("q(u_f)", self.qf), ("q(u_g)", self.qg)):
            if not (torch.isfinite(b.mu).all() and torch.isfinite(b.S).all()):
                bad.append(name)
        return ", ".join(bad) or "no parameter is non-finite; likely an overflow in the likelihood"


# ---------------------------------------------------------------------------
# initialization and training
# ---------------------------------------------------------------------------


def initial_spec(train: TrainingSet, periodic: PeriodicInit, l_t: float = 1.0) -> KernelSpec:
    """Kernel starting point: periodic part from the spectral init, the rest from the grid."""
    g = train.grid
    diag = math.hypot(g.shape[0] * g.r_s, g.shape[1] * g.r_s)
    t0, t1 = train.time_span
    span = (t1 - t0) or g.tau
    per = [(gam, l_t, max(s2, 2e-6)) for gam, s2 in zip(periodic.gamma_hat, periodic.sigma2_hat)]
    return KernelSpec(l_s=2 * g.r_s, sigma2_s=1.0, periodic=per, l_g=diag / 4, sigma2_g=1.0,
                      g_time_scale=span / diag)


def initial_state(Z, spec: KernelSpec, f_mean: float = 0.0) -> VariationalState:
    """q(u_f) and q(u_g) equal to their priors (zero KL)."""
    with torch.no_grad():
        Zt = torch.as_tensor(np.asarray(Z, dtype=float), dtype=DTYPE)
        kp = spec_tensors(spec)
        Lf, _ = robust_cholesky(kf_t(Zt, Zt, kp, spec.const_variance), spec.jitter)
        Lg, _ = robust_cholesky(kg_t(Zt, Zt, kp, spec.g_time_scale), spec.jitter)
    m = Zt.shape[0]
    return VariationalState(Zt.numpy().copy(), np.zeros(m), Lf.numpy().copy(), np.zeros(m),
                            Lg.numpy().copy(), G_MEAN, f_mean)


def train(train_set: TrainingSet, init: tuple, config: TrainConfig = TrainConfig(),
          spec: Optional[KernelSpec] = None, state: Optional[VariationalState] = None,
          likelihood=None, callback: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Alternate natural-gradient and Adam steps on minibatches.

    ``init`` is ``(PeriodicInit, InducingInit)``; an explicit ``spec`` or
    ``state`` overrides the corresponding starting point. The likelihood
    defaults to the heteroscedastic Gaussian. Stops after ``config.steps``
    steps or when the mean loss over the last window improves on the
    previous window by less than ``early_stop_tol`` (relative).
    """
    periodic, inducing = init
    if train_set.n == 0:
        raise DataError("empty training set")
    lik = HeteroGaussian(config.quad_order) if likelihood is None else likelihood
    spec = initial_spec(train_set, periodic) if spec is None else spec
    state = initial_state(inducing.Z, spec) if state is None else state
    if config.steps == 0:
        return TrainResult(state, spec, [])

    started = time.perf_counter()
    X = torch.as_tensor(train_set.X, dtype=DTYPE)
    y = lik.targets(train_set)
    n = train_set.n
    model = SVGPModel(state, spec, lik)
    opt = torch.optim.Adam(model.adam_params(config.train_Z), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    trace, w = [], config.early_stop_window
    stopped = False
    for step in range(config.steps):
        if n > config.batch_size:
            idx = torch.as_tensor(np.sort(rng.choice(n, config.batch_size, replace=False)))
            Xb, yb = X[idx], y[idx]
        else:
            Xb, yb = X, y
        # hyperparameters are fixed during the natgrad step, so one kernel pass serves both
        priors = model.priors(Xb)
        model.natgrad(Xb, yb, n, config.natgrad_step, priors)
        lr = config.lr_at(step)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad()
        loss, _ = model.loss(Xb, yb, n, priors)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite loss at step {step}: {model.diagnose()}")
        loss.backward()
        if not all(torch.isfinite(p.grad).all() for p in model.adam_params(config.train_Z)
                   if p.grad is not None):
            raise NumericalError(f"non-finite gradient at step {step}: {model.diagnose()}")
        opt.step()
        value = float(loss.detach())
        trace.append((step, value, lr))
        if callback is not None:
            callback(step, value)
        if w and len(trace) >= 2 * w and len(trace) % w == 0:
            prev = np.mean([t[1] for t in trace[-2 * w:-w]])
            cur = np.mean([t[1] for t in trace[-w:]])
            if (prev - cur) / max(abs(prev), 1e-300) < config.early_stop_tol:
                stopped = True
                break
    return TrainResult(model.state(), model.spec(), trace, time.perf_counter() - started, stopped)


def write_loss_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["step", "neg_elbo", "lr"])
        for step, loss, lr in trace:
            out.writerow([step, repr(float(loss)), repr(float(lr))])
