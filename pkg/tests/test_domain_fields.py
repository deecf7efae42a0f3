import numpy as np
import pytest
from pydantic import ValidationError

from src.domain_fields import (
    FOURIER_NORMALIZATION, FieldOnGrid, GridSpec, MediumScene, WeightedNormSpec, fourier_transform_grid,
    fourier_transform_hat, fourier_transform_hat_many, frequency_cell_volume, inverse_fourier_grid,
    l2_norm_on_support, laplacian_7pt, load_scene, masked_laplacian_matrix, save_scene, weighted_norm,
)
from src.exceptions import ChecksumMismatchError, GridMismatchError
from src.phantoms import PRESETS, ball, build_preset, gaussian_bump
from src.volume_io import read_volume, write_volume


# ============================================
# GridSpec / FieldOnGrid / MediumScene
# ============================================

def test_grid_rejects_too_few_voxels():
    with pytest.raises(ValidationError):
        GridSpec.centered(1.0, 3)


def test_grid_must_contain_origin():
    with pytest.raises(ValidationError):
        GridSpec(origin=(0.5, 0.5, 0.5), extent=(1.0, 1.0, 1.0), n=8)


def test_grid_derived_quantities():
    grid = GridSpec.centered((1.0, 2.0, 4.0), (4, 8, 16))
    np.testing.assert_allclose(grid.h, [0.25, 0.25, 0.25])
    assert grid.voxel_volume == pytest.approx(0.25 ** 3)
    assert grid.shape == (4, 8, 16)
    assert grid.size == 4 * 8 * 16
    X, _, _ = grid.coordinates()
    assert X[0, 0, 0] == pytest.approx(-0.5 + 0.125)


def test_field_flat_values_are_x_fastest(small_grid):
    flat = np.arange(small_grid.size, dtype=np.float64)
    field = FieldOnGrid.real(small_grid, flat)
    assert field.values[1, 0, 0] == 1.0
    assert field.values[0, 1, 0] == small_grid.n[0]
    assert not field.values.flags.writeable


def test_real_field_rejects_imaginary_part(small_grid):
    values = np.zeros(small_grid.shape, dtype=np.complex128)
    values[3, 3, 3] = 1j
    with pytest.raises(ValidationError):
        FieldOnGrid.real(small_grid, values)


def test_scene_support_needs_padding(small_grid):
    sigma = np.zeros(small_grid.shape)
    sigma[1, 5, 5] = 1.0
    with pytest.raises(ValidationError):
        MediumScene.from_fields(small_grid, sigma=sigma)


def test_scene_rejects_negative_sigma(small_grid):
    sigma = -ball(small_grid, 0.2)
    with pytest.raises(ValidationError):
        MediumScene.from_fields(small_grid, sigma=sigma)


def test_scene_flags_and_mask(full_scene):
    assert full_scene.has_noise and full_scene.has_potential and full_scene.has_source
    assert full_scene.support_mask.sum() > 0
    assert full_scene.support_diameter() > 0


def test_presets_build():
    for name in PRESETS:
        scene = build_preset(name, 16)
        assert scene.grid.n == (16, 16, 16)
        assert scene.name == name
    with pytest.raises(ValueError):
        build_preset('no-such-scene')


# ============================================
# Fourier 变换
# ============================================

def test_transform_of_zero_field(small_grid):
    field = FieldOnGrid.zeros(small_grid)
    assert fourier_transform_hat(field, (1.0, -2.0, 0.5)) == 0


def test_transform_of_ball_at_origin():
    grid = GridSpec.centered(1.4, 48)
    field = FieldOnGrid.real(grid, ball(grid, 0.5))
    expected = FOURIER_NORMALIZATION * 4.0 / 3.0 * np.pi * 0.5 ** 3
    assert expected == pytest.approx(0.033246, rel=1e-4)
    assert fourier_transform_hat(field, (0.0, 0.0, 0.0)).real == pytest.approx(expected, rel=0.03)


def test_transform_even_real_field_is_real(small_grid):
    field = FieldOnGrid.real(small_grid, gaussian_bump(small_grid, 0.1, cutoff=3.0))
    value = fourier_transform_hat(field, (3.0, -1.0, 2.0))
    assert abs(value.imag) < 1e-12 * abs(value)


def test_transform_conjugate_symmetry(small_grid, rng):
    values = np.where(small_grid.interior_mask(), rng.standard_normal(small_grid.shape), 0.0)
    field = FieldOnGrid.real(small_grid, values)
    p = np.array([1.3, -0.4, 2.2])
    assert fourier_transform_hat(field, -p) == pytest.approx(np.conj(fourier_transform_hat(field, p)), rel=1e-12)


def test_transform_rejects_non_finite(small_grid):
    field = FieldOnGrid.zeros(small_grid)
    with pytest.raises(ValueError):
        fourier_transform_hat(field, (np.nan, 0.0, 0.0))


def test_transform_many_matches_single(small_grid, rng):
    field = FieldOnGrid.real(small_grid, gaussian_bump(small_grid, 0.12, center=(0.05, 0.0, -0.02)))
    ps = rng.uniform(-8.0, 8.0, size=(7, 3))
    many = fourier_transform_hat_many(field, ps)
    single = np.array([fourier_transform_hat(field, p) for p in ps])
    np.testing.assert_allclose(many, single, rtol=1e-10, atol=1e-14)


def test_plancherel_consistency():
    grid = GridSpec.centered(2.0, 48)
    phi = gaussian_bump(grid, 6.0 * float(grid.h[0]), cutoff=4.0)
    spectrum = fourier_transform_grid(FieldOnGrid.real(grid, phi))
    space = np.sum(phi ** 2) * grid.voxel_volume
    freq = np.sum(np.abs(spectrum) ** 2) * frequency_cell_volume(grid)
    assert freq == pytest.approx(space, rel=0.01)


def test_fft_grid_matches_direct_transform(small_grid):
    field = FieldOnGrid.real(small_grid, gaussian_bump(small_grid, 0.1, center=(0.05, 0.0, 0.0)))
    spectrum = fourier_transform_grid(field)
    freqs = [2.0 * np.pi * np.fft.fftfreq(n, d=h) for n, h in zip(small_grid.n, small_grid.h)]
    p = (freqs[0][2], freqs[1][1], freqs[2][-3])
    assert spectrum[2, 1, -3] == pytest.approx(fourier_transform_hat(field, p), rel=1e-10)


def test_inverse_fft_grid_round_trip(small_grid, rng):
    values = rng.standard_normal(small_grid.shape)
    back = inverse_fourier_grid(small_grid, fourier_transform_grid(values, small_grid))
    np.testing.assert_allclose(back.real, values, atol=1e-12)


# ============================================
# 范数
# ============================================

def test_weighted_norm_zero_and_plain(small_grid, rng):
    assert weighted_norm(FieldOnGrid.zeros(small_grid), WeightedNormSpec(s=-0.6)) == 0.0
    field = FieldOnGrid.real(small_grid, rng.standard_normal(small_grid.shape))
    full = np.ones(small_grid.shape, dtype=bool)
    assert weighted_norm(field, WeightedNormSpec(s=0.0)) == pytest.approx(l2_norm_on_support(field, full))


def test_weighted_norm_decreases_with_negative_exponent():
    grid = GridSpec.centered(1.0, 10)
    field = FieldOnGrid.real(grid, np.ones(grid.shape))
    assert weighted_norm(field, WeightedNormSpec(s=-1.0)) < weighted_norm(field, WeightedNormSpec(s=0.0))
    assert WeightedNormSpec.agmon(0.1).s == pytest.approx(-0.6)


def test_l2_norm_on_support(small_grid, rng):
    mask = small_grid.interior_mask()
    indicator = FieldOnGrid.real(small_grid, mask.astype(np.float64))
    assert l2_norm_on_support(indicator, mask) == pytest.approx(np.sqrt(mask.sum() * small_grid.voxel_volume))

    values = rng.standard_normal(small_grid.shape)
    brute = np.sqrt(sum(values[idx] ** 2 for idx in zip(*np.nonzero(mask))) * small_grid.voxel_volume)
    assert l2_norm_on_support(values, mask, small_grid) == pytest.approx(brute, rel=1e-12)


def test_l2_norm_rejects_mismatched_mask(small_grid):
    with pytest.raises(GridMismatchError):
        l2_norm_on_support(np.zeros(small_grid.shape), np.ones((4, 4, 4), dtype=bool), small_grid)


def test_masked_laplacian_matches_stencil(small_grid, rng):
    mask = small_grid.interior_mask()
    values = np.where(mask, rng.standard_normal(small_grid.shape), 0.0)
    L, idx = masked_laplacian_matrix(small_grid, mask)
    np.testing.assert_allclose(L @ values.ravel()[idx], laplacian_7pt(values, small_grid.h).ravel()[idx],
                               rtol=1e-12, atol=1e-9)


# ============================================
# 场景文件
# ============================================

def test_scene_file_round_trip(tmp_path, full_scene):
    scene_hash = save_scene(full_scene, tmp_path / 'scene.json')
    loaded = load_scene(tmp_path / 'scene.json')
    assert scene_hash == full_scene.digest() == loaded.digest()
    np.testing.assert_array_equal(loaded.V, full_scene.V)
    assert loaded.name == 'full'


def test_scene_file_detects_tampering(tmp_path, full_scene):
    save_scene(full_scene, tmp_path / 'scene.json')
    raw = tmp_path / "scene.V.f64"
    values = read_volume(raw, full_scene.grid.shape)
    values[6, 6, 6] += 0.01
    write_volume(raw, values)
    with pytest.raises(ChecksumMismatchError):
        load_scene(tmp_path / 'scene.json')
