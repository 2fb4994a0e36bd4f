import math

import mpmath as mp
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from copamap.errors import DataError, NumericalError
from copamap.kernels import (
    KernelParams, KernelSpec, gram, inv_softplus, k_f, k_g, matern52, periodic_sum,
    robust_cholesky, to_constrained, to_unconstrained,
)

HOUR = 3600.0

mp.mp.dps = 50


def mp_matern(r, l, s2):
    r, l, s2 = mp.mpf(r), mp.mpf(l), mp.mpf(s2)
    a = mp.sqrt(5) * r / l
    return s2 * (1 + a + 5 * r**2 / (3 * l**2)) * mp.exp(-a)


def mp_periodic(r, comps):
    r = mp.mpf(r)
    return sum(mp.mpf(s) * mp.exp(-mp.mpf(0.5) * mp.sin(mp.pi * r / mp.mpf(g)) ** 2 / mp.mpf(l) ** 2)
               for g, l, s in comps)


def random_spec(rng, psi=None):
    psi = rng.integers(0, 4) if psi is None else psi
    per = [(rng.uniform(2, 48) * HOUR, rng.uniform(0.2, 3), rng.uniform(0, 2)) for _ in range(psi)]
    return KernelSpec(l_s=rng.uniform(0.3, 10), sigma2_s=rng.uniform(0.1, 5), periodic=per,
                      l_g=rng.uniform(0.5, 20), sigma2_g=rng.uniform(0.1, 3),
                      g_time_scale=rng.uniform(100, 5000))


def random_inputs(rng, n):
    return np.column_stack([rng.uniform(0, 20, n), rng.uniform(0, 20, n),
                            rng.uniform(0, 3 * 86400, n)])


def test_matern_at_zero():
    assert matern52(0.0, 1.7, 2.3) == pytest.approx(2.3, abs=0)


def test_matern_decay():
    assert matern52(1e6 * 2.0, 2.0, 1.0) < 1e-12


@pytest.mark.parametrize("r,l", [(1.0, 1.0), (0.37, 2.5), (12.0, 3.0)])
def test_matern_high_precision(r, l):
    assert matern52(r, l, 1.0) == pytest.approx(float(mp_matern(r, l, 1.0)), rel=1e-14)


def test_matern_negative_distance():
    with pytest.raises(DataError):
        matern52(-1.0, 1.0, 1.0)


def test_periodic_at_zero():
    comps = [(12 * HOUR, 0.9, 0.9), (6 * HOUR, 1.3, 0.42)]
    assert periodic_sum(0.0, comps) == pytest.approx(1.32, abs=1e-15)


def test_periodic_exact_period():
    comp = [(7.3 * HOUR, 0.8, 1.1)]
    assert periodic_sum(7.3 * HOUR, comp) == periodic_sum(0.0, comp)


def test_periodic_two_components_high_precision():
    comps = [(12 * HOUR, 0.9, 0.9), (6 * HOUR, 1.3, 0.42)]
    assert periodic_sum(3 * HOUR, comps) == pytest.approx(float(mp_periodic(3 * HOUR, comps)), rel=1e-14)


def test_periodic_empty_is_constant():
    assert_allclose(periodic_sum(np.array([0.0, 5.0, 1e5]), [], const_variance=1.0), 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1e6), st.floats(HOUR, 100 * HOUR), st.floats(0.1, 5), st.floats(0, 3))
def test_periodicity(r, gamma, l, s2):
    comp = [(gamma, l, s2)]
    assert periodic_sum(r + gamma, comp) == pytest.approx(periodic_sum(r, comp), abs=1e-9 * max(s2, 1e-300))


def test_kf_diagonal_value():
    spec = KernelSpec(1.5, 2.0, [(12 * HOUR, 1.0, 0.9), (6 * HOUR, 1.0, 0.42)])
    x = np.array([3.0, 4.0, 1000.0])
    assert k_f(x, x, spec) == pytest.approx(2.0 * 1.32, rel=1e-15)


def test_kf_full_period_apart():
    spec = KernelSpec(1.5, 2.0, [(24 * HOUR, 0.7, 0.6)])
    x = np.array([3.0, 4.0, 1000.0])
    assert k_f(x, x + [0, 0, 24 * HOUR], spec) == pytest.approx(k_f(x, x, spec), rel=1e-14)


def test_kf_factorizes(rng):
    spec = random_spec(rng, psi=2)
    a, b = random_inputs(rng, 2)
    r = math.hypot(*(a[:2] - b[:2]))
    expect = matern52(r, spec.l_s, spec.sigma2_s) * periodic_sum(a[2] - b[2], spec.periodic)
    assert k_f(a, b, spec) == pytest.approx(float(expect), rel=1e-14)


def test_kg_rbf(rng):
    spec = random_spec(rng)
    a, b = random_inputs(rng, 2)
    d = (a - b) / [1, 1, spec.g_time_scale]
    expect = spec.sigma2_g * math.exp(-0.5 * d @ d / spec.l_g**2)
    assert k_g(a, b, spec) == pytest.approx(expect, rel=1e-14)


def test_gram_single_point_jitter():
    spec = KernelSpec(1.0, 2.0, [(HOUR * 5, 1.0, 0.5)], jitter=1e-3)
    x = np.array([[1.0, 1.0, 0.0]])
    K = gram(x, x, spec, add_jitter=True)
    assert K.shape == (1, 1)
    assert K[0, 0] == pytest.approx(1.0 * (1 + 1e-3))


@pytest.mark.parametrize("which", ["f", "g"])
def test_gram_matches_double_loop(rng, which):
    spec = random_spec(rng, psi=2)
    A, B = random_inputs(rng, 10), random_inputs(rng, 7)
    K = gram(A, B, spec, which)
    fn = k_f if which == "f" else k_g
    loop = np.array([[fn(a, b, spec) for b in B] for a in A])
    assert np.abs(K - loop).max() <= 1e-14 * max(1.0, np.abs(loop).max())


def test_gram_jitter_requires_same_inputs(rng):
    spec = random_spec(rng)
    with pytest.raises(DataError):
        gram(random_inputs(rng, 3), random_inputs(rng, 3), spec, add_jitter=True)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("which", ["f", "g"])
def test_gram_symmetric_psd(seed, which):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng)
    A = random_inputs(rng, int(rng.integers(2, 51)))
    K = gram(A, A, spec, which)
    assert np.abs(K - K.T).max() <= 1e-14
    assert np.linalg.eigvalsh(K).min() >= -1e-8 * max(1.0, np.abs(K).max())
    np.linalg.cholesky(gram(A, A, spec, which, add_jitter=True))


def test_variance_scaling_exact(rng):
    spec = random_spec(rng, psi=2)
    A = random_inputs(rng, 12)
    K1 = gram(A, A, spec)
    K3 = gram(A, A, spec.with_(sigma2_s=spec.sigma2_s * 4.0))
    assert_allclose(K3, 4.0 * K1, rtol=1e-15, atol=0)


def test_spec_validation():
    with pytest.raises(DataError):
        KernelSpec(0.0, 1.0)
    with pytest.raises(DataError):
        KernelSpec(1.0, 1.0, [(HOUR, 1.0, -0.1)])


@settings(max_examples=100, deadline=None)
@given(st.floats(2e-6, 1e6), st.sampled_from([0.0, 1e-6, 1e-4]), st.sampled_from([1.0, 3600.0]))
def test_transform_round_trip(value, floor, scale):
    if value <= floor * 1.5:
        return
    back = float(to_constrained(to_unconstrained(value, floor, scale), floor, scale))
    assert back == pytest.approx(value, rel=1e-12, abs=1e-12)


def test_inv_softplus_rejects_nonpositive():
    with pytest.raises(DataError):
        inv_softplus(0.0)


def test_kernel_params_round_trip(rng):
    spec = random_spec(rng, psi=3)
    back = KernelParams(spec).spec()
    assert back.l_s == pytest.approx(spec.l_s, rel=1e-12)
    for (g1, l1, s1), (g2, l2, s2) in zip(spec.periodic, back.periodic):
        assert (g2, l2) == (pytest.approx(g1, rel=1e-12), pytest.approx(l1, rel=1e-12))
        assert s2 == pytest.approx(max(s1, 2e-6), rel=1e-9)


def test_kernel_gradients_finite_at_coincident_points(rng):
    spec = random_spec(rng, psi=2)
    params = KernelParams(spec)
    from copamap.kernels import kf_t
    X = torch.tensor(random_inputs(rng, 5))
    K = kf_t(X, X, params.tensors())
    K.sum().backward()
    for _, p in params.named_parameters():
        if p.grad is not None:
            assert torch.isfinite(p.grad).all()


def test_robust_cholesky_escalates():
    K = torch.tensor([[1.0, 1.0], [1.0, 1.0 - 1e-7]], dtype=torch.float64)  # slightly indefinite
    L, j = robust_cholesky(K, 1e-12)
    assert 1e-12 < j <= 1e-2
    scale = K.diagonal().mean()
    assert torch.allclose(L @ L.T, K + j * scale * torch.eye(2, dtype=torch.float64))


def test_robust_cholesky_gives_up():
    K = torch.tensor([[1.0, 0.0], [0.0, -5.0]], dtype=torch.float64)
    with pytest.raises(NumericalError):
        robust_cholesky(K)
