import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import integrate

from copamap.data import GridSpec
from copamap.errors import DataError
from copamap.fov import bin_observations
from copamap.spectral import fourier_periods, nudft
from copamap.synth import (
    DAY, HOUR, SCENARIOS, Component, Source, World, make_dataset, patrol, room_map, world_from_truth,
    write_dataset,
)


def test_profile_integral_matches_quadrature():
    s = Source((0.0, 0.0), (1.0, 1.0), 1.0, (Component(DAY, 0.6, 13 * HOUR), Component(8 * HOUR, 0.3, 2 * HOUR)))
    for t_a, t_b in [(0.0, HOUR), (5000.0, 91000.0), (123.0, 124.0)]:
        ref, _ = integrate.quad(s.profile, t_a, t_b, limit=200)
        assert_allclose(s.profile_integral(t_a, t_b), ref, rtol=1e-10)


def test_mass_matches_quadrature():
    s = Source((2.0, 1.0), (0.7, 1.3), 1.0)
    ref, _ = integrate.dblquad(lambda y, x: s.density(x, y), 1.5, 3.0, 0.0, 2.5, epsabs=1e-13)
    assert_allclose(s.mass(1.5, 3.0, 0.0, 2.5), ref, rtol=1e-9)


def test_invalid_source_rejected():
    with pytest.raises(DataError):
        Source((0, 0), (1, 1), 1.0, (Component(DAY, 0.8), Component(HOUR, 0.4)))
    with pytest.raises(DataError):
        Source((0, 0), (0, 1), 1.0)


def open_world(components=()):
    occ = room_map(10.0, 10.0)
    return World(occ, (Source((5.0, 5.0), (1.0, 1.0), 0.05, components),), base_rate=1e-4)


def test_expected_counts_match_sample_means():
    world = open_world((Component(DAY, 0.8, 6 * HOUR),))
    grid = GridSpec.for_map(world.occ, 1.0, 2 * HOUR)
    cells = np.array([44, 45, 55, 33, 66])  # interior, away from the walls
    bins = np.arange(12)
    cc, bb = np.meshgrid(cells, bins)
    expect = world.expected_counts(grid, cc.ravel(), bb.ravel())
    rng = np.random.default_rng(3)
    reps = 60
    keys = cc.ravel() * 1000 + bb.ravel()
    total = np.zeros(expect.size)
    for _ in range(reps):
        log = world.sample(0.0, DAY, rng)
        det = grid.cell_index(log.x1, log.x2) * 1000 + grid.bin_index(log.t)
        total += (det[:, None] == keys[None, :]).sum(0)
    mean = total / reps
    # the Poisson standard error of a mean of reps draws is sqrt(lambda / reps)
    z = (mean - expect) / np.sqrt(expect / reps)
    assert np.all(np.abs(z) < 4.5)
    assert abs(z.mean()) < 4.5 / np.sqrt(z.size)


def test_constant_world_is_homogeneous_in_time():
    world = open_world()
    log = world.sample(0.0, 2 * DAY, np.random.default_rng(0))
    counts = np.bincount((log.t // HOUR).astype(int), minlength=48)
    # Poisson index of dispersion stays near 1 without a temporal cycle
    assert 0.6 < counts.var(ddof=1) / counts.mean() < 1.5
    assert np.all(np.diff(log.t) >= 0)


def test_sampling_respects_occupied_space():
    occ = room_map(10.0, 10.0, blocks=[(4.0, 4.0, 6.0, 6.0)])
    world = World(occ, (Source((5.0, 5.0), (1.5, 1.5), 0.2),), base_rate=1e-3)
    log = world.sample(0.0, HOUR, np.random.default_rng(1))
    assert len(log) > 100
    assert not np.any(occ.occupied_at(log.x1, log.x2))


def test_planted_daily_cycle_dominates_spectrum():
    ds = make_dataset("periodic", seed=2, days=7, amplitudes=(0.8,), periods=(DAY,))
    counts = np.bincount((ds.log.t // HOUR).astype(int), minlength=7 * 24).astype(float)
    t = (np.arange(counts.size) + 0.5) * HOUR
    spec = nudft(t, counts, fourier_periods(7 * DAY, 2 * HOUR))
    assert spec.periods[np.argmax(np.abs(spec.coeffs))] == pytest.approx(DAY)


def test_periodic_without_components_is_flat():
    ds = make_dataset("periodic", seed=0, days=2, amplitudes=(), periods=())
    assert all(not s.components for s in ds.world.sources)


@pytest.mark.parametrize("name", sorted(SCENARIOS))
def test_robot_stays_on_free_space(name):
    ds = make_dataset(name, seed=0, **({"days": 2} if name == "periodic" else {}))
    traj = ds.trajectory
    t = np.linspace(traj.t[0], traj.t[-1], 20000)
    x1, x2 = traj.position(t)
    assert not np.any(ds.world.occ.occupied_at(x1, x2))


def test_patrol_schedule():
    wps = [(8.0, 2.0, 60.0)]
    traj = patrol(wps, dock=(2.0, 2.0), days=2, active=(8 * HOUR, 12 * HOUR), every=HOUR)
    x1, _ = traj.position(np.array([3 * HOUR, 8 * HOUR + 30.0, DAY + 8 * HOUR + 30.0, 8.5 * HOUR]))
    assert_allclose(x1[[0, 3]], 2.0)  # docked at night and between loops
    assert x1[1] == pytest.approx(8.0) and x1[2] == x1[1]  # identical daily schedule
    with pytest.raises(DataError):
        patrol(wps, (2.0, 2.0), 1, active=(0.0, 10.0))
    with pytest.raises(DataError):
        patrol(wps, (2.0, 2.0), 1, every=1.0)


def test_benchmark_has_unseen_room_and_full_cells():
    ds = make_dataset("benchmark", seed=0)
    g = ds.grid()
    ts = bin_observations(ds.train_log, ds.trajectory, ds.world.occ, g, ds.fov_radius, ds.time_step)
    assert 4000 < ts.n < 6000
    assert np.any(ts.delta == g.tau)
    x1, _ = g.cell_center(np.unique(ts.cell))
    assert np.all(x1 < 18.0)  # the side room behind the wall is never seen


def test_write_dataset_is_deterministic(tmp_path):
    a = write_dataset(make_dataset("corridor", seed=5, train_days=1), tmp_path / "a")
    b = write_dataset(make_dataset("corridor", seed=5, train_days=1), tmp_path / "b")
    c = write_dataset(make_dataset("corridor", seed=6, train_days=1), tmp_path / "c")
    for key in a:
        assert open(a[key], "rb").read() == open(b[key], "rb").read()
    assert open(a["detections"], "rb").read() != open(c["detections"], "rb").read()


def test_world_from_truth_round_trip():
    ds = make_dataset("benchmark", seed=0, train_days=1, test_days=1)
    world = world_from_truth(ds.truth(), ds.world.occ)
    x1, x2, t = np.random.default_rng(0).uniform([0, 0, 0], [24, 16, DAY], (200, 3)).T
    assert_allclose(world.intensity(x1, x2, t), ds.world.intensity(x1, x2, t), rtol=0, atol=0)


def test_unknown_scenario():
    with pytest.raises(DataError, match="unknown scenario"):
        make_dataset("nope")
