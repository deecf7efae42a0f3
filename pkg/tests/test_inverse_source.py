import numpy as np
import pytest
from pydantic import ValidationError

from src.domain_fields import FieldOnGrid, GridSpec, MediumScene, fourier_transform_hat_many, inner_product
from src.exceptions import InsufficientSeedsError, SmallnessGateError
from src.farfield_dataset import FarFieldDataset, synthesize_dataset
from src.forward_solver import FarFieldRecord, create_forward_solver
from src.inverse_source import (
    EnsembleSpec, SourceRecovery, dirichlet_eigenpairs, eigen_completeness, eigen_residual_check,
    eigen_residual_table, ensemble_mean_farfield, smallness_gate, source_hat_estimate,
)
from src.phantoms import ball

D = (0.0, 0.0, 1.0)
XHATS = [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), (-1.0, 0.0, 0.0)]


def _zero_potential(grid):
    return FieldOnGrid.real(grid, np.zeros(grid.shape))


def test_ensemble_spec():
    spec = EnsembleSpec(seeds=[1, 2, 3], d_fixed=D, k_list=[2.0, 4.0], xhat_list=XHATS[:2])
    assert len(spec.requests()) == 12
    assert all(r.d == D for r in spec.requests())
    with pytest.raises(ValidationError):
        EnsembleSpec(seeds=[1, 1], d_fixed=D, k_list=[2.0], xhat_list=XHATS[:1])


def test_ensemble_mean_farfield():
    records = [FarFieldRecord(xhat=XHATS[0], k=2.0, d=D, seed=s, value=v) for s, v in [(1, 1.0), (2, 3.0)]]
    data = FarFieldDataset(records=records)
    mean, stderr = ensemble_mean_farfield(data, XHATS[0], 2.0, D)
    assert mean == pytest.approx(2.0)
    assert stderr == pytest.approx(1.0)
    with pytest.raises(InsufficientSeedsError):
        ensemble_mean_farfield(data, XHATS[0], 2.0, D, seeds=[1])


def test_source_hat_estimate_without_potential(source_scene):
    solver = create_forward_solver(source_scene)
    k = 3.0
    mean = solver.expected_far_field(k, XHATS[1])
    f_hat = fourier_transform_hat_many(FieldOnGrid.real(source_scene.grid, source_scene.f), [k * np.asarray(XHATS[1])])
    assert source_hat_estimate(mean, solver, k, XHATS[1], D) == pytest.approx(f_hat[0], rel=1e-10)


def test_smallness_gate(small_grid, full_scene):
    report = smallness_gate(full_scene, [2.0, 4.0])
    assert report.passed
    assert report.lowest_eigenvalue > 0
    strong = MediumScene.from_fields(small_grid, V=ball(small_grid, 0.3, amplitude=2.0))
    with pytest.raises(SmallnessGateError):
        smallness_gate(strong, [2.0])


def test_source_recovery_without_potential_is_exact_born(source_scene):
    ks = [2.0, 4.0, 6.0]
    data = synthesize_dataset(source_scene, ks, XHATS, d_list=[D], mode='active')
    recovery = SourceRecovery(source_scene, ks, XHATS, D)
    result = recovery.recover(data)
    f_field = FieldOnGrid.real(source_scene.grid, source_scene.f)
    points = np.array([k * np.asarray(x) for k in ks for x in XHATS])
    expected = fourier_transform_hat_many(f_field, points).reshape(len(ks), len(XHATS))
    np.testing.assert_allclose(result.f_hat_samples.values, expected, rtol=1e-6, atol=1e-12)
    assert result.iterations == 0
    assert result.f_field.grid == source_scene.grid


def test_source_recovery_with_potential_converges(full_scene):
    ks = [2.0, 4.0]
    scene = full_scene.replace(sigma=np.zeros(full_scene.grid.shape))
    data = synthesize_dataset(scene, ks, XHATS, d_list=[D], mode='active')
    recovery = SourceRecovery(full_scene, ks, XHATS, D, fixed_point_tol=1e-10)
    result = recovery.recover(data)
    assert 1 <= result.iterations <= 5
    assert result.history == sorted(result.history, reverse=True)


def test_source_recovery_ensemble_average(full_scene):
    ks = [2.0, 4.0]
    data = synthesize_dataset(full_scene, ks, XHATS, d_list=[D], seeds=[1, 2, 3, 4], mode='active')
    recovery = SourceRecovery(full_scene, ks, XHATS, D)
    mean, stderr, per_seed = recovery.mean_table(data)
    assert per_seed.shape == (4, 2, 4)
    np.testing.assert_allclose(mean, per_seed.mean(axis=0))
    assert np.all(stderr > 0)


def test_fixed_point_iteration_bounds(source_scene):
    with pytest.raises(ValueError):
        SourceRecovery(source_scene, [2.0], XHATS, D, fixed_point_iters=6)


def test_projection_stderr_shape(source_scene):
    ks = [2.0, 4.0]
    recovery = SourceRecovery(source_scene, ks, XHATS, D)
    pairs = dirichlet_eigenpairs(_zero_potential(source_scene.grid), source_scene.domain_mask, 3)
    per_seed = np.random.default_rng(0).standard_normal((8, 2, 4)) * 1e-3
    stderr = recovery.projection_stderr(per_seed, pairs, n_batches=4)
    assert stderr.shape == (3,)
    assert np.all(np.isfinite(stderr))


# ============================================
# Dirichlet 本征系统
# ============================================

def test_unit_cube_ground_state():
    grid = GridSpec.centered(32.0 / 29.0, 32)
    pairs = dirichlet_eigenpairs(_zero_potential(grid), grid.interior_mask(2), 1)
    assert pairs[0].eigenvalue == pytest.approx(3.0 * np.pi ** 2, rel=0.02)
    assert pairs[0].residual < 1e-6


def test_eigenvectors_are_orthonormal(small_grid):
    mask = small_grid.interior_mask()
    pairs = dirichlet_eigenpairs(_zero_potential(small_grid), mask, 5)
    values = [p.eigenvalue for p in pairs]
    assert values == sorted(values)
    assert values[0] > 0
    gram = np.array([[inner_product(a.v.values, b.v.values, small_grid).real for b in pairs] for a in pairs])
    np.testing.assert_allclose(gram, np.eye(5), atol=1e-8)
    for pair in pairs:
        assert not np.any(pair.v.values[~mask])


def test_eigen_rejects_large_potential(small_grid):
    V = FieldOnGrid.real(small_grid, ball(small_grid, 0.3, amplitude=3.0))
    with pytest.raises(SmallnessGateError):
        dirichlet_eigenpairs(V, small_grid.interior_mask(), 2)
    with pytest.raises(ValueError):
        dirichlet_eigenpairs(_zero_potential(small_grid), small_grid.interior_mask(), 0)


def test_eigen_projection_and_completeness(small_grid):
    mask = small_grid.interior_mask()
    pairs = dirichlet_eigenpairs(_zero_potential(small_grid), mask, 4)
    f = FieldOnGrid.real(small_grid, pairs[0].v.values + 0.5 * pairs[2].v.values)

    projections = eigen_residual_check(f, None, pairs, mask)
    np.testing.assert_allclose([p.value for p in projections], [1.0, 0.0, 0.5, 0.0], atol=1e-8)
    zero = eigen_residual_check(f, f, pairs, mask)
    assert all(p.value == 0.0 for p in zero)

    table = eigen_completeness(f, pairs, mask)
    errors = table['error'].to_numpy()
    assert np.all(np.diff(errors) <= 1e-12)
    assert table['relative_error'].iloc[-1] < 1e-8

    residuals = eigen_residual_table(projections, stderr=[0.1, 0.1, 0.1, 0.1])
    assert residuals['z'].iloc[0] == pytest.approx(10.0)
    assert np.isnan(eigen_residual_table(projections)['z']).all()
