import numpy as np
import pytest

from aquinv.errors import DomainError, LayoutError
from aquinv.grid import Grid3
from aquinv.observations import (NoiseModel, ObservationSet, WellNetwork, add_noise, observe, observe_batch,
                                 perturb_observations)

TIMES = tuple(1460.0 * (i + 1) for i in range(10))


def test_paper_network_size():
    wells = WellNetwork.lattice([10, 22, 34, 46, 58, 70], [8, 16, 24, 32], range(6), TIMES)
    assert wells.n_sensors == 144
    assert wells.n_data == 144 * (10 + 1) == 1584
    wells.validate(Grid3(81, 41, 6, 2500, 1250, 300))


def test_desk_network_size():
    wells = WellNetwork.lattice([5, 9, 13, 17, 22, 28], [4, 8, 12, 16], [2], TIMES)
    assert wells.n_data == 24 * 11 == 264


def test_duplicate_and_out_of_grid_sensors():
    with pytest.raises(LayoutError):
        WellNetwork(((1, 1, 1), (1, 1, 1)), TIMES)
    with pytest.raises(LayoutError):
        WellNetwork(((9, 1, 1),), TIMES).validate(Grid3(4, 4, 4, 1, 1, 1))


def test_observe_order():
    shape = (4, 3, 2)
    wells = WellNetwork(((0, 0, 0), (3, 2, 1), (1, 2, 0)), (1.0, 2.0))
    snaps = np.arange(2 * 24, dtype=float).reshape((2,) + shape)
    h = -np.arange(24, dtype=float).reshape(shape)
    d = observe(snaps, h, wells).d
    expect = [snaps[t][s] for t in range(2) for s in wells.sensors] + [h[s] for s in wells.sensors]
    assert np.array_equal(d, expect)
    assert not observe(np.zeros_like(snaps), np.zeros(shape), wells).d.any()


def test_observe_errors():
    wells = WellNetwork(((0, 0, 0),), (1.0, 2.0))
    with pytest.raises(LayoutError):
        observe(np.zeros((3, 2, 2, 2)), np.zeros((2, 2, 2)), wells)
    with pytest.raises(LayoutError):
        observe(np.zeros((2, 2, 2, 2)), np.zeros((2, 2, 2)), WellNetwork(((5, 0, 0),), (1.0, 2.0)))


def test_permuting_wells_permutes_data(rng):
    shape = (5, 4, 3)
    sensors = [(0, 0, 0), (4, 3, 2), (2, 1, 1), (3, 0, 2)]
    snaps, h = rng.normal(size=(3,) + shape), rng.normal(size=shape)
    perm = [2, 0, 3, 1]
    d = observe(snaps, h, WellNetwork(tuple(sensors), (1, 2, 3))).d.reshape(4, 4)
    dp = observe(snaps, h, WellNetwork(tuple(sensors[p] for p in perm), (1, 2, 3))).d.reshape(4, 4)
    assert np.array_equal(dp, d[:, perm])


def test_observe_batch_matches_loop(rng):
    shape = (5, 4, 3)
    wells = WellNetwork(((0, 0, 0), (4, 3, 2), (2, 1, 1)), (1, 2))
    snaps, h = rng.normal(size=(6, 2) + shape), rng.normal(size=(6,) + shape)
    D = observe_batch(snaps, h, wells)
    assert D.shape == (wells.n_data, 6)
    for n in range(6):
        assert np.array_equal(D[:, n], observe(snaps[n], h[n], wells).d)


def test_noise_model_covariance():
    wells = WellNetwork(((0, 0, 0), (1, 1, 1)), (1.0, 2.0, 3.0))
    var = NoiseModel(0.5, 0.2).variances(wells)
    assert np.allclose(var, [0.25] * 6 + [0.04] * 2)
    with pytest.raises(DomainError):
        NoiseModel(-1.0, 0.1)
    full = NoiseModel(0.5, 0.5, cov=np.eye(wells.n_data))
    assert np.array_equal(full.covariance(wells), np.eye(8))
    with pytest.raises(LayoutError):
        NoiseModel(0.5, 0.5, cov=np.eye(3)).covariance(wells)


def test_add_noise_identity_and_determinism():
    d = np.linspace(0, 1, 11)
    assert np.array_equal(add_noise(ObservationSet(d), np.zeros(11), 3).d, d)
    a = add_noise(d, np.full(11, 0.25), 7).d
    b = add_noise(d, np.full(11, 0.25), 7).d
    assert np.array_equal(a, b) and not np.array_equal(a, d)


def test_add_noise_statistics():
    draws = np.array([add_noise(np.zeros(1), np.array([0.25]), s).d[0] for s in range(100_000)])
    assert abs(draws.mean()) <= 0.01
    assert draws.std() == pytest.approx(0.5, rel=0.02)


def test_add_noise_full_covariance_statistics():
    cov = np.array([[1.0, 0.6], [0.6, 2.0]])
    draws = np.array([add_noise(np.zeros(2), cov, s).d for s in range(20_000)])
    assert np.allclose(np.cov(draws.T), cov, atol=0.06)


def test_perturbation_variance():
    d = np.array([1.0, -2.0, 3.0])
    D = perturb_observations(d, 4.0, np.full(3, 0.25), 10_000, np.random.default_rng(0))
    assert D.shape == (3, 10_000)
    assert np.allclose(D.var(axis=1, ddof=1), 4.0 * 0.25, rtol=0.05)
    assert np.allclose(D.mean(axis=1), d, atol=0.05)


def test_perturbation_without_noise():
    d = np.array([1.0, 2.0])
    D = perturb_observations(d, 1e-9, np.zeros(2), 5, 0)
    assert np.array_equal(D, np.repeat(d[:, None], 5, axis=1))
    with pytest.raises(DomainError):
        perturb_observations(d, 0.0, np.zeros(2), 5, 0)


def test_well_csv_round_trip(tmp_path):
    wells = WellNetwork(((0, 1, 2), (3, 4, 5)), TIMES)
    wells.write_csv(tmp_path / "w.csv")
    assert WellNetwork.read_csv(tmp_path / "w.csv", TIMES) == wells
