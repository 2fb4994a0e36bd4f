import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from copamap.data import GridSpec, Scaler, TrainingSet
from copamap.errors import DataError
from copamap.kernels import KernelSpec
from copamap.predict import (
    CopaMapModel, PredictiveField, expected_count, predict, write_field_csv, write_heatmaps,
)
from copamap.spectral import InducingInit, PeriodicInit
from copamap.svgp import TrainConfig, VariationalState, initial_spec, train

HOUR = 3600.0
SPEC = KernelSpec(l_s=2.0, sigma2_s=1.3, periodic=[(24 * HOUR, 0.8, 0.9)], l_g=4.0, sigma2_g=0.7,
                  g_time_scale=2000.0)
SCALER = Scaler(0.05, 0.02)
GRID = GridSpec(1.0, 1800.0, (0.0, 0.0), 0.0, (8, 6))


def random_state(rng, m=10, spread=0.4):
    Z = np.column_stack([rng.uniform(0, 8, m), rng.uniform(0, 6, m), rng.uniform(0, 86400, m)])
    Lf = np.tril(rng.normal(scale=0.1, size=(m, m)), -1) + np.diag(rng.uniform(0.1, spread, m))
    Lg = np.tril(rng.normal(scale=0.1, size=(m, m)), -1) + np.diag(rng.uniform(0.1, spread, m))
    return VariationalState(Z, rng.normal(size=m), Lf, rng.normal(scale=0.5, size=m), Lg)


def query(bins=range(4)):
    return GRID.query_inputs(GRID.all_cells(), np.asarray(list(bins)))


def softplus(x):
    return np.logaddexp(0.0, x)


def test_point_mass_collapse():
    # inducing inputs far apart in time so Kuu is well conditioned; query at Z itself
    Z = np.column_stack([np.arange(5.0), np.zeros(5), np.arange(5) * 7 * HOUR])
    spec = SPEC.with_(jitter=1e-12)
    tiny = 1e-9 * np.eye(5)
    mu_f = np.array([-3.0, -0.5, 0.0, 1.0, 2.5])
    mu_g = np.array([-2.0, 0.0, 0.3, 1.0, 4.0])
    st = VariationalState(Z, mu_f, tiny, mu_g, tiny, f_mean=0.0)
    field = predict(Z, st, spec, SCALER)
    assert_allclose(field.m_y, np.abs(mu_f * SCALER.std + SCALER.mean), rtol=1e-7)
    assert_allclose(field.sigma2_y, softplus(mu_g + st.g_mean) * SCALER.std ** 2, rtol=1e-6)


def test_quadrature_orders_agree(rng):
    st = random_state(rng)
    X = query()
    lo = predict(X, st, SPEC, SCALER, quad_order=10)
    hi = predict(X, st, SPEC, SCALER, quad_order=30)
    assert_allclose(lo.m_y, hi.m_y, rtol=1e-6)
    assert_allclose(lo.sigma2_y, hi.sigma2_y, rtol=1e-6)


def test_variance_positive_and_shapes(rng):
    st = random_state(rng, spread=2.0)
    X = query()
    field = predict(X, st, SPEC, SCALER, grid=GRID)
    assert field.m_y.shape == field.sigma2_y.shape == (len(X),)
    assert np.all(field.sigma2_y > 0)
    assert np.all(field.m_y >= 0)


def test_rectification_counted(rng):
    st = random_state(rng)
    st = VariationalState(st.Z, st.mu_f, st.L_f, st.mu_g, st.L_g, f_mean=-50.0)
    field = predict(query(), st, SPEC, SCALER)
    assert field.n_rectified == len(field.m_y)
    assert np.all(field.m_y > 0)


def test_predict_deterministic_and_chunk_invariant(rng):
    st = random_state(rng)
    X = query()
    a = predict(X, st, SPEC, SCALER)
    b = predict(X, st, SPEC, SCALER, chunk=7)
    assert_array_equal(a.m_y, predict(X, st, SPEC, SCALER).m_y)
    assert_allclose(a.m_y, b.m_y, rtol=1e-12)
    assert_allclose(a.sigma2_y, b.sigma2_y, rtol=1e-12)


def test_predict_rejects_bad_inputs(rng):
    with pytest.raises(DataError):
        predict(np.zeros((3, 2)), random_state(rng), SPEC, SCALER)


def test_observed_mask(rng):
    field = predict(query(), random_state(rng), SPEC, SCALER, grid=GRID, observed_cells=[0, 5])
    cells = GRID.cell_index(field.X_star[:, 0], field.X_star[:, 1])
    assert_array_equal(field.observed_mask, np.isin(cells, [0, 5]))


def test_posterior_consistency_on_noise_free_data():
    grid = GridSpec(1.0, 1800.0, (0.0, 0.0), 0.0, (6, 4))
    bins = np.arange(96)
    cc, bb = np.meshgrid(np.arange(grid.n_cells), bins)
    cc, bb = cc.ravel(), bb.ravel()
    x1, x2 = grid.cell_center(cc)
    t = grid.bin_center(bb)
    rate = 0.02 * (1.5 + np.cos(2 * np.pi * t / 86400)) * (1 + 0.3 * np.sin(x1 / 2))
    X = np.column_stack([x1, x2, t])
    ts = TrainingSet(X, rate, np.zeros(rate.size, np.int64), np.full(rate.size, 1800.0), grid, cc, bb)
    rng = np.random.default_rng(0)
    init = (PeriodicInit(1, [86400.0], [0.95]), InducingInit(X[rng.choice(len(X), 40, replace=False)], 0.02))
    res = train(ts, init, TrainConfig(steps=400, batch_size=4096, early_stop_window=0),
                spec=initial_spec(ts, init[0]))
    model = CopaMapModel.from_training(ts, res.state, res.spec)
    field = model.predict(X)
    assert np.all(np.abs(field.m_y - rate) <= 2 * np.sqrt(field.sigma2_y))
    assert_array_equal(model.predict_rates(X), field.m_y)


# -- expected counts ------------------------------------------------------------------


def constant_field(rho, bins=range(3)):
    X = query(bins)
    return PredictiveField(X, np.full(len(X), rho), np.ones(len(X)), GRID)


def test_expected_count_constant_field():
    field = constant_field(0.02)
    region = [0, 1, 2, 9]
    assert expected_count(field, region, (0.0, 1800.0)) == pytest.approx(0.02 * 4 * 1800.0, rel=1e-12)


def test_expected_count_empty_span():
    assert expected_count(constant_field(0.02), [3], (900.0, 900.0)) == 0.0


def test_expected_count_errors():
    field = constant_field(0.02)
    with pytest.raises(DataError):
        expected_count(field, [], (0.0, 10.0))
    with pytest.raises(DataError):
        expected_count(field, [1], (10.0, 0.0))
    with pytest.raises(DataError):
        expected_count(field, [999], (0.0, 10.0))
    with pytest.raises(DataError):
        expected_count(PredictiveField(np.zeros((1, 3)), [1.0], [1.0]), [0], (0, 1))


def oversampled_count(field, region, t_span, factor=100):
    # the field is piecewise constant per (cell, bin): sample each bin at `factor` midpoints
    g = field.grid
    total = 0.0
    dt = g.tau / factor
    for (x1, x2, t), m in zip(field.X_star, field.m_y):
        if int(g.cell_index(x1, x2)) not in region:
            continue
        start = g.t0 + g.bin_index(t) * g.tau
        mids = start + (np.arange(factor) + 0.5) * dt
        total += m * dt * np.count_nonzero((mids >= t_span[0]) & (mids < t_span[1]))
    return total


def test_expected_count_matches_oversampled_oracle(rng):
    X = query(range(10))
    field = PredictiveField(X, rng.gamma(2.0, 0.01, len(X)), np.ones(len(X)), GRID)
    for _ in range(10):
        region = set(rng.choice(GRID.n_cells, 6, replace=False).tolist())
        # spans of at least four bins keep the oracle's edge quantization below the tolerance
        a = rng.uniform(0, 6 * 1800.0)
        b = rng.uniform(a + 4 * 1800.0, 10 * 1800.0)
        want = oversampled_count(field, region, (a, b))
        got = expected_count(field, region, (a, b))
        assert got == pytest.approx(want, rel=5e-3, abs=1e-9)


def test_expected_count_additive(rng):
    X = query(range(4))
    field = PredictiveField(X, rng.gamma(2.0, 0.01, len(X)), np.ones(len(X)), GRID)
    r1, r2 = [0, 3, 7], [1, 20, 33]
    span = (100.0, 5000.0)
    assert expected_count(field, r1 + r2, span) == pytest.approx(
        expected_count(field, r1, span) + expected_count(field, r2, span), rel=1e-12)
    assert expected_count(field, r1, (100.0, 7000.0)) == pytest.approx(
        expected_count(field, r1, (100.0, 2500.0)) + expected_count(field, r1, (2500.0, 7000.0)), rel=1e-12)


# -- export ---------------------------------------------------------------------------


def test_field_csv_round_trip(tmp_path, rng):
    field = predict(query(range(2)), random_state(rng), SPEC, SCALER, grid=GRID, observed_cells=[4])
    path = tmp_path / "field.csv"
    write_field_csv(field, path)
    rows = np.genfromtxt(path, delimiter=",", names=True)
    assert rows.dtype.names == ("x1", "x2", "t", "mean", "var", "observed")
    assert_array_equal(rows["mean"], field.m_y)
    assert_array_equal(rows["var"], field.sigma2_y)
    assert_array_equal(rows["observed"].astype(bool), field.observed_mask)


def test_heatmaps(tmp_path, rng):
    from copamap.data import _read_pgm

    field = predict(query(range(2)), random_state(rng), SPEC, SCALER, grid=GRID, observed_cells=[0, 1])
    paths = write_heatmaps(field, tmp_path, "mean")
    assert [p.name for p in paths] == ["mean_000000.pgm", "mean_000001.pgm"]
    img, _ = _read_pgm(paths[0])
    assert img.shape == (6, 8)
    img = np.flipud(img)  # row 0 is the bottom row of the grid
    assert img[0, 0] < 255 and img[0, 1] < 255
    assert np.count_nonzero(img == 255) == 46
    scale = paths[0].with_suffix(".scale").read_text()
    assert f"vmax: {float(field.m_y.max())!r}" in scale
