import numpy as np
import pytest
from pydantic import ValidationError

from src.domain_fields import GridSpec
from src.frequency_gridding import PolarSamples, fibonacci_directions, reconstruct_from_polar, symmetrize


def _gaussian_samples(width, radii, directions, sign=1.0):
    """exp(−|x|²/2w²) 的变换 w³·exp(−w²p²/2), 各方向相同"""
    profile = sign * width ** 3 * np.exp(-0.5 * (width * radii) ** 2)
    values = np.repeat(profile[:, None], directions.shape[0], axis=1)
    return PolarSamples(radii=radii, directions=directions, values=values)


def test_fibonacci_directions_are_unit_and_spread():
    dirs = fibonacci_directions(64)
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0)
    assert np.linalg.norm(dirs.mean(axis=0)) < 0.05
    with pytest.raises(ValueError):
        fibonacci_directions(0)


def test_polar_samples_validation():
    dirs = fibonacci_directions(4)
    with pytest.raises(ValidationError):
        PolarSamples(radii=[1.0, 0.5], directions=dirs, values=np.zeros((2, 4)))
    with pytest.raises(ValidationError):
        PolarSamples(radii=[0.0, 1.0], directions=2 * dirs, values=np.zeros((2, 4)))
    with pytest.raises(ValidationError):
        PolarSamples(radii=[0.0, 1.0], directions=dirs, values=np.zeros((3, 4)))


def test_symmetrize_adds_antipodes():
    dirs = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    samples = PolarSamples(radii=[1.0], directions=dirs, values=[[1 + 1j, 2 - 1j]])
    sym = symmetrize(samples)
    assert sym.direction_count == 4
    np.testing.assert_allclose(sym.values[0, 2:], [1 - 1j, 2 + 1j])


def test_symmetrize_averages_existing_pairs():
    dirs = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
    samples = PolarSamples(radii=[1.0], directions=dirs, values=[[1 + 1j, 3 + 1j]])
    sym = symmetrize(samples)
    assert sym.direction_count == 2
    np.testing.assert_allclose(sym.values[0], [2.0, 2.0])


def test_reconstruct_gaussian():
    grid = GridSpec.centered(2.0, 16)
    width = 0.25
    p_max = np.pi / float(grid.h[0])
    samples = _gaussian_samples(width, np.linspace(0.0, p_max, 64), fibonacci_directions(32))
    result = reconstruct_from_polar(samples, grid)
    expected = np.exp(-0.5 * (grid.radius() / width) ** 2)
    np.testing.assert_allclose(result.values, expected, atol=0.02)
    assert result.imag_residual < 1e-6
    assert not result.flagged


def test_reconstruct_rejects_unresolvable_frequencies():
    grid = GridSpec.centered(2.0, 16)
    samples = _gaussian_samples(0.25, np.array([0.0, 40.0]), fibonacci_directions(16))
    with pytest.raises(ValueError):
        reconstruct_from_polar(samples, grid)


def test_reconstruct_zero_and_sparse_coverage():
    grid = GridSpec.centered(2.0, 8)
    samples = PolarSamples(radii=[0.0, 1.0], directions=fibonacci_directions(4), values=np.zeros((2, 4)))
    result = reconstruct_from_polar(samples, grid, min_directions=16)
    assert not np.any(result.values)
    assert result.warnings


def test_clamping_flags_negative_mass():
    grid = GridSpec.centered(2.0, 16)
    p_max = np.pi / float(grid.h[0])
    samples = _gaussian_samples(0.25, np.linspace(0.0, p_max, 64), fibonacci_directions(32), sign=-1.0)
    result = reconstruct_from_polar(samples, grid, clamp=True, clamp_mass_limit=0.1)
    assert np.all(result.values >= 0)
    assert result.clamp_mass > 0.9
    assert result.flagged
