"""Covariance functions for the rate latent f and the noise latent g.

k_f is a Matérn-5/2 kernel in space times a sum of periodic kernels in time;
k_g is an RBF over space and rescaled time. Everything is float64 torch so the
same code serves training (autograd) and evaluation; the functions at the end
of the module wrap it for numpy callers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch

from .errors import DataError, NumericalError

DTYPE = torch.float64
TIME_UNIT = 3600.0  # periods are optimized in hours so Adam steps are meaningful
LENGTH_FLOOR = 1e-4
VARIANCE_FLOOR = 1e-6
SQRT5 = math.sqrt(5.0)


def _t(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=float) if not torch.is_tensor(x) else x, dtype=DTYPE)


# ---------------------------------------------------------------------------
# constrained <-> unconstrained
# ---------------------------------------------------------------------------


def softplus(x):
    # threshold 40: the linear branch is then exact to double precision
    return torch.nn.functional.softplus(x, threshold=40.0) if torch.is_tensor(x) else np.logaddexp(0.0, x)


def inv_softplus(y):
    """Inverse of softplus for ``y > 0``, stable for tiny and large ``y``."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise DataError("inverse softplus needs positive values")
    return y + np.log(-np.expm1(-y))


def to_unconstrained(value, floor: float = 0.0, scale: float = 1.0):
    value = np.asarray(value, dtype=float)
    if np.any(value <= floor):
        raise DataError(f"parameter value must exceed its floor {floor}")
    return inv_softplus((value - floor) / scale)


def to_constrained(u, floor: float = 0.0, scale: float = 1.0):
    return floor + scale * softplus(u)


# ---------------------------------------------------------------------------
# parameter container
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelSpec:
    """Constrained kernel hyperparameters.

    ``periodic`` holds ``(gamma, l_t, sigma2_t)`` triples with ``gamma`` in
    seconds. ``g_time_scale`` converts seconds to the spatial unit for k_g
    inputs and ``jitter`` is relative to the mean Gram diagonal.
    """

    l_s: float
    sigma2_s: float
    periodic: tuple = ()
    l_g: float = 1.0
    sigma2_g: float = 1.0
    g_time_scale: float = 1.0
    jitter: float = 1e-6
    const_variance: float = 1.0  # temporal kernel value when there is no periodic component

    def __post_init__(self):
        per = tuple((float(g), float(l), float(s)) for g, l, s in self.periodic)
        object.__setattr__(self, "periodic", per)
        if not (self.l_s > 0 and self.sigma2_s > 0 and self.l_g > 0 and self.sigma2_g > 0):
            raise DataError("kernel scales and variances must be positive")
        if not (self.g_time_scale > 0 and self.jitter >= 0 and self.const_variance > 0):
            raise DataError("g_time_scale and const_variance must be positive, jitter >= 0")
        for g, l, s in per:
            if not (g > 0 and l > 0 and s >= 0):
                raise DataError("periodic components need gamma > 0, l_t > 0, sigma2_t >= 0")

    @property
    def psi(self) -> int:
        return len(self.periodic)

    def with_(self, **kw) -> "KernelSpec":
        return replace(self, **kw)


class KernelParams:
    """Unconstrained torch leaves for a :class:`KernelSpec`.

    Lengthscales have floor 1e-4 and variances floor 1e-6; periods are stored
    in units of hours.
    """

    def __init__(self, spec: KernelSpec, requires_grad: bool = True):
        self.g_time_scale = spec.g_time_scale
        self.jitter = spec.jitter
        self.const_variance = spec.const_variance
        g = np.array([p[0] for p in spec.periodic], dtype=float)
        lt = np.array([p[1] for p in spec.periodic], dtype=float)
        st = np.array([p[2] for p in spec.periodic], dtype=float)
        raw = {
            "l_s": to_unconstrained(spec.l_s, LENGTH_FLOOR),
            "sigma2_s": to_unconstrained(spec.sigma2_s, VARIANCE_FLOOR),
            "gamma": to_unconstrained(g, LENGTH_FLOOR, TIME_UNIT),
            "l_t": to_unconstrained(lt, LENGTH_FLOOR),
            "sigma2_t": to_unconstrained(np.maximum(st, 2 * VARIANCE_FLOOR), VARIANCE_FLOOR),
            "l_g": to_unconstrained(spec.l_g, LENGTH_FLOOR),
            "sigma2_g": to_unconstrained(spec.sigma2_g, VARIANCE_FLOOR),
        }
        self.raw = {k: torch.tensor(np.atleast_1d(v), dtype=DTYPE, requires_grad=requires_grad)
                    for k, v in raw.items()}

    _FLOORS = {"l_s": (LENGTH_FLOOR, 1.0), "sigma2_s": (VARIANCE_FLOOR, 1.0),
               "gamma": (LENGTH_FLOOR, TIME_UNIT), "l_t": (LENGTH_FLOOR, 1.0),
               "sigma2_t": (VARIANCE_FLOOR, 1.0), "l_g": (LENGTH_FLOOR, 1.0),
               "sigma2_g": (VARIANCE_FLOOR, 1.0)}

    def __getitem__(self, name) -> torch.Tensor:
        floor, scale = self._FLOORS[name]
        return to_constrained(self.raw[name], floor, scale)

    def parameters(self) -> list[torch.Tensor]:
        return [self.raw[k] for k in self._FLOORS if self.raw[k].numel()]

    def named_parameters(self):
        return [(k, self.raw[k]) for k in self._FLOORS if self.raw[k].numel()]

    def spec(self) -> KernelSpec:
        with torch.no_grad():
            c = {k: self[k].numpy().copy() for k in self._FLOORS}
        return KernelSpec(
            l_s=float(c["l_s"][0]), sigma2_s=float(c["sigma2_s"][0]),
            periodic=tuple(zip(c["gamma"].tolist(), c["l_t"].tolist(), c["sigma2_t"].tolist())),
            l_g=float(c["l_g"][0]), sigma2_g=float(c["sigma2_g"][0]),
            g_time_scale=self.g_time_scale, jitter=self.jitter,
            const_variance=self.const_variance)

    def tensors(self) -> dict:
        """Constrained values as tensors (differentiable w.r.t. the raw leaves)."""
        return {k: self[k] for k in self._FLOORS}


def spec_tensors(spec: KernelSpec) -> dict:
    """Constrained values of a spec as constant tensors."""
    per = np.array(spec.periodic, dtype=float).reshape(-1, 3)
    return {"l_s": _t([spec.l_s]), "sigma2_s": _t([spec.sigma2_s]), "gamma": _t(per[:, 0]),
            "l_t": _t(per[:, 1]), "sigma2_t": _t(per[:, 2]), "l_g": _t([spec.l_g]),
            "sigma2_g": _t([spec.sigma2_g])}


# ---------------------------------------------------------------------------
# kernel functions (torch)
# ---------------------------------------------------------------------------


def _dist(A, B):
    # elementwise differences (no matmul expansion): exact zeros and symmetry
    return torch.cdist(A, B, compute_mode="donot_use_mm_for_euclid_dist")


def matern52_t(r, l_s, sigma2_s):
    a = r * (SQRT5 / l_s)
    return sigma2_s * (1 + a * (1 + a / 3)) * torch.exp(-a)


def periodic_sum_t(dt, gamma, l_t, sigma2_t, const_variance=1.0):
    """Sum of periodic components at signed time differences ``dt``."""
    if gamma.numel() == 0:
        return torch.full_like(dt, float(const_variance))
    s = torch.sin(dt.unsqueeze(-1) * (math.pi / gamma))
    return torch.exp((s * s) * (-0.5 / (l_t * l_t))) @ sigma2_t


def kf_t(A, B, p: dict, const_variance=1.0):
    """k_f Gram block between (n, 3) and (m, 3) inputs."""
    r = _dist(A[:, :2], B[:, :2])
    dt = A[:, None, 2] - B[None, :, 2]
    return matern52_t(r, p["l_s"], p["sigma2_s"]) * periodic_sum_t(
        dt, p["gamma"], p["l_t"], p["sigma2_t"], const_variance)


def kf_diag_t(A, p: dict, const_variance=1.0):
    var_t = p["sigma2_t"].sum() if p["gamma"].numel() else torch.tensor(float(const_variance), dtype=DTYPE)
    return (p["sigma2_s"] * var_t).expand(A.shape[0]).clone()


def kg_t(A, B, p: dict, g_time_scale: float):
    scale = torch.tensor([1.0, 1.0, 1.0 / g_time_scale], dtype=DTYPE)
    r = _dist(A * scale, B * scale)
    return p["sigma2_g"] * torch.exp((r * r) * (-0.5 / (p["l_g"] ** 2)))


def kg_diag_t(A, p: dict):
    return p["sigma2_g"].expand(A.shape[0]).clone()


def jittered(K: torch.Tensor, rel: float) -> torch.Tensor:
    return K + rel * K.diagonal().mean() * torch.eye(K.shape[0], dtype=K.dtype)


def robust_cholesky(K: torch.Tensor, rel_jitter: float = 1e-6, max_jitter: float = 1e-2):
    """Cholesky of ``K + j * mean(diag) * I``, escalating ``j`` by 10 up to ``max_jitter``."""
    j = rel_jitter
    scale = K.diagonal().mean()
    eye = torch.eye(K.shape[0], dtype=K.dtype)
    while True:
        L, info = torch.linalg.cholesky_ex(K + j * scale * eye)
        if int(info) == 0 and torch.isfinite(L).all():
            return L, j
        if j >= max_jitter:
            raise NumericalError(f"Cholesky failed even with relative jitter {j:g}")
        j = min(max(j * 10, 1e-12), max_jitter)  # a zero start still escalates


# ---------------------------------------------------------------------------
# numpy-facing API
# ---------------------------------------------------------------------------


def matern52(r, l_s: float, sigma2_s: float) -> np.ndarray:
    """Matérn-5/2: ``s2 * (1 + sqrt5 r/l + 5 r^2/(3 l^2)) * exp(-sqrt5 r/l)``."""
    r = _t(r)
    if torch.any(r < 0):
        raise DataError("distances must be non-negative")
    return matern52_t(r, l_s, sigma2_s).numpy()


def periodic_sum(r, periodic: Sequence, const_variance: float = 1.0) -> np.ndarray:
    """``sum_i s2_i * exp(-0.5 * sin^2(pi r / gamma_i) / l_i^2)``; ``gamma_i`` is the period."""
    per = np.array(periodic, dtype=float).reshape(-1, 3)
    return periodic_sum_t(_t(r), _t(per[:, 0]), _t(per[:, 1]), _t(per[:, 2]), const_variance).numpy()


def k_f(x, y, spec: KernelSpec) -> float:
    """Product kernel for single inputs ``(x1, x2, t)``."""
    return float(gram(np.atleast_2d(x), np.atleast_2d(y), spec, "f")[0, 0])


def k_g(x, y, spec: KernelSpec) -> float:
    return float(gram(np.atleast_2d(x), np.atleast_2d(y), spec, "g")[0, 0])


def gram(A, B, spec: KernelSpec, which: str = "f", add_jitter: bool = False) -> np.ndarray:
    """Gram matrix of k_f or k_g; jitter (relative to the mean diagonal) only when A is B."""
    At, Bt = _t(A).reshape(-1, 3), _t(B).reshape(-1, 3)
    if not (torch.isfinite(At).all() and torch.isfinite(Bt).all()):
        raise DataError("kernel inputs must be finite")
    p = spec_tensors(spec)
    with torch.no_grad():
        K = kf_t(At, Bt, p, spec.const_variance) if which == "f" else kg_t(At, Bt, p, spec.g_time_scale)
        if add_jitter:
            if At.shape != Bt.shape or not torch.equal(At, Bt):
                raise DataError("jitter only applies to a square Gram of identical inputs")
            K = jittered(K, spec.jitter)
    return K.numpy()
