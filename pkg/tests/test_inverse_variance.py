import numpy as np
import pytest
from pydantic import ValidationError

from src.domain_fields import FieldOnGrid, GridSpec, MediumScene, fourier_transform_hat
from src.exceptions import CoverageGapError, InsufficientSeedsError, MixedSeedError
from src.farfield_dataset import FarFieldDataset, synthesize_requests
from src.forward_solver import FarFieldRecord, create_forward_solver
from src.frequency_gridding import PolarSamples, fibonacci_directions
from src.inverse_variance import (
    RECOVERY_CONSTANT, BandSchedule, band_correlogram, band_k_points, band_nodes, band_requests, born_correlogram,
    reconstruct_sigma2, recover_sigma2_hat, recover_sigma2_polar, variance_expectation_path,
    variance_statistical_stability,
)
from src.phantoms import ball, build_preset

XHAT = (0.0, 0.0, 1.0)


def _phase_dataset(K, n_k, tau, seed=1, offset=0.0):
    """u(k) = e^{ik} + offset 的人造数据"""
    ks = band_k_points(K, n_k, [tau])
    records = [FarFieldRecord(xhat=XHAT, k=k, seed=seed, value=np.exp(1j * k) + offset) for k in ks]
    return FarFieldDataset(records=records)


def _synthesize(scene, K_list, n_k, taus, seeds, xhats=(XHAT,)):
    requests = [
        req
        for xhat in xhats
        for K in K_list
        for seed in seeds
        for req in band_requests(xhat, K, n_k, taus, seed)
    ]
    return synthesize_requests(create_forward_solver(scene), requests, threads=2)


def test_band_schedule_validation():
    schedule = BandSchedule(gamma=0.1, c=1.0, j_list=[1, 2, 4], n_k=8)
    np.testing.assert_allclose(schedule.bands, [1.0, 2.0 ** 2.1, 4.0 ** 2.1])
    with pytest.raises(ValidationError):
        BandSchedule(j_list=[2, 1])
    with pytest.raises(ValidationError):
        BandSchedule(j_list=[1], n_k=4)
    with pytest.raises(ValidationError):
        BandSchedule(j_list=[1, 3], k_values=[10.0, 5.0])
    with pytest.raises(ValidationError):
        BandSchedule(j_list=[10], k_values=[20.0])


def test_band_nodes_are_midpoints():
    nodes = band_nodes(8.0, 4)
    np.testing.assert_allclose(nodes, [9.0, 11.0, 13.0, 15.0])
    assert len(band_k_points(8.0, 4, [0.0, 2.0])) == 5


def test_correlogram_of_pure_phase():
    data = _phase_dataset(10.0, 16, 1.5)
    sample = band_correlogram(data, XHAT, 1.5, 10.0, 16)
    assert sample.value == pytest.approx(np.exp(1.5j), rel=1e-12)
    assert sample.seed == 1


def test_centered_correlogram_removes_mean():
    K, n_k, tau = 10.0, 8, 1.0
    noisy = _phase_dataset(K, n_k, tau, offset=3.0)
    mean = [FarFieldRecord(xhat=XHAT, k=k, seed=None, value=3.0) for k in band_k_points(K, n_k, [tau])]
    data = FarFieldDataset(records=noisy.records + mean)
    centered = band_correlogram(data, XHAT, tau, K, n_k, variant='centered')
    assert centered.value == pytest.approx(np.exp(1j * tau), rel=1e-12)


def test_correlogram_coverage_and_seed_errors():
    data = _phase_dataset(10.0, 8, 0.0)
    with pytest.raises(CoverageGapError):
        band_correlogram(data, XHAT, 1.0, 10.0, 8)
    mixed = FarFieldDataset(records=data.records + _phase_dataset(10.0, 8, 0.0, seed=2).records)
    with pytest.raises(MixedSeedError):
        band_correlogram(mixed, XHAT, 0.0, 10.0, 8)
    assert band_correlogram(mixed, XHAT, 0.0, 10.0, 8, seed=2).seed == 2


def test_recover_uses_last_band():
    schedule = BandSchedule(j_list=[1, 2], k_values=[10.0, 20.0], n_k=8)
    records = []
    for K in schedule.bands:
        records += _phase_dataset(K, 8, 0.5).records
    data = FarFieldDataset(records=records)
    estimate, trend = recover_sigma2_hat(data, XHAT, 0.5, schedule)
    assert estimate == pytest.approx(RECOVERY_CONSTANT * np.exp(0.5j))
    assert list(trend['K']) == [10.0, 20.0]
    assert trend['abs_change'].iloc[-1] == 0.0


def test_raw_correlogram_equals_leading_component(noise_scene):
    data = _synthesize(noise_scene, [10.0], 8, [1.0], [5])
    raw = band_correlogram(data, XHAT, 1.0, 10.0, 8)
    born = born_correlogram(create_forward_solver(noise_scene), XHAT, 1.0, 10.0, 8, seed=5, p=0, q=0)
    assert born.value == pytest.approx(raw.value, rel=1e-10)
    with pytest.raises(ValueError):
        born_correlogram(create_forward_solver(noise_scene), XHAT, 1.0, 10.0, 8, seed=5, p=2, q=0)


def test_expectation_path_matches_transform(noise_scene):
    solver = create_forward_solver(noise_scene)
    tau = 1.0
    mean, stderr = variance_expectation_path(solver, XHAT, tau, 10.0, 16, seeds=range(1, 61))
    sigma2 = FieldOnGrid.real(noise_scene.grid, noise_scene.sigma ** 2)
    expected = fourier_transform_hat(sigma2, tau * np.asarray(XHAT))
    assert abs(mean - expected) < 5.0 * stderr
    with pytest.raises(InsufficientSeedsError):
        variance_expectation_path(solver, XHAT, tau, 10.0, 16, seeds=[1])


def test_stability_requires_enough_seeds(noise_scene):
    data = _synthesize(noise_scene, [10.0, 20.0, 40.0], 8, [0.0], [1, 2, 3])
    with pytest.raises(InsufficientSeedsError):
        variance_statistical_stability(data, XHAT, 0.0, [10.0, 20.0, 40.0], n_k=8)
    table, fit = variance_statistical_stability(data, XHAT, 0.0, [10.0, 20.0, 40.0], n_k=8, min_seeds=3)
    assert list(table['n_seeds']) == [3, 3, 3]
    assert fit.n_points == 3


def test_polar_recovery_shape(noise_scene):
    directions = np.array([XHAT, (1.0, 0.0, 0.0)])
    schedule = BandSchedule(j_list=[1], k_values=[10.0], n_k=8)
    data = _synthesize(noise_scene, [10.0], 8, [0.0, 1.0], [3], xhats=[tuple(d) for d in directions])
    samples, table = recover_sigma2_polar(data, [1.0, 0.0], directions, schedule)
    assert samples.values.shape == (2, 2)
    np.testing.assert_allclose(samples.radii, [0.0, 1.0])
    direct, _ = recover_sigma2_hat(data, (1.0, 0.0, 0.0), 1.0, schedule)
    assert samples.values[1, 1] == pytest.approx(direct)
    assert set(table['direction']) == {0, 1}


def test_reconstruct_sigma2_of_zero_samples():
    grid = GridSpec.centered(1.0, 8)
    samples = PolarSamples(radii=[0.0, 1.0], directions=fibonacci_directions(16), values=np.zeros((2, 16)))
    result = reconstruct_sigma2(samples, grid)
    assert not np.any(result.sigma2_field.values)
    assert not result.flagged
    assert len(result.sample_list()) == 32


@pytest.mark.slow
def test_single_realization_recovers_variance_transform():
    scene = build_preset('variance-ball', 16)
    K, n_k, taus = 16000.0, 2048, [0.0, 1.0, 2.0]
    data = _synthesize(scene, [K], n_k, taus, [7])
    schedule = BandSchedule(j_list=[1], k_values=[K], n_k=n_k)
    sigma2 = FieldOnGrid.real(scene.grid, scene.sigma ** 2)
    for tau in taus:
        estimate, _ = recover_sigma2_hat(data, XHAT, tau, schedule)
        expected = fourier_transform_hat(sigma2, tau * np.asarray(XHAT))
        assert abs(estimate - expected) < 0.15 * abs(expected)


@pytest.mark.slow
def test_correlogram_variance_decays_with_band():
    grid = GridSpec.centered(1.0, 12)
    scene = MediumScene.from_fields(grid, sigma=ball(grid, 0.25))
    K_list = [10.0, 20.0, 40.0, 80.0]
    data = _synthesize(scene, K_list, 32, [0.0], range(1, 301))
    table, fit = variance_statistical_stability(data, XHAT, 0.0, K_list, n_k=32)
    assert len(table) == 4
    assert -1.0 <= fit.slope <= -0.25


@pytest.mark.slow
def test_variance_estimate_is_blind_to_source_and_potential():
    K, n_k = 2000.0, 256
    schedule = BandSchedule(j_list=[1], k_values=[K], n_k=n_k)
    estimates = []
    for name in ('variance-ball', 'blind-variance'):
        data = _synthesize(build_preset(name, 16), [K], n_k, [0.0], [7])
        estimates.append(recover_sigma2_hat(data, XHAT, 0.0, schedule)[0])
    clean, blind = estimates
    assert abs(blind - clean) < 0.1 * abs(clean)
