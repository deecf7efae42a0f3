import math

import numpy as np
import pytest

from src.diagnostics import (
    batch_means, checks_to_frame, isserlis_check, ito_isometry_check, loglog_slope,
    mean_stderr, seed_independence,
)
from src.domain_fields import GridSpec
from src.phantoms import ball, gaussian_bump


def test_mean_stderr():
    mean, se = mean_stderr([1.0, 2.0, 3.0, 4.0])
    assert mean == pytest.approx(2.5)
    assert se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2.0)
    _, single = mean_stderr([5.0])
    assert math.isnan(single)
    with pytest.raises(ValueError):
        mean_stderr([])


def test_batch_means_drops_tail():
    means = batch_means(np.arange(10.0), 3)
    np.testing.assert_allclose(means, [1.0, 4.0, 7.0])
    with pytest.raises(ValueError):
        batch_means(np.arange(10.0), 1)
    with pytest.raises(ValueError):
        batch_means(np.arange(2.0), 4)


def test_loglog_slope_recovers_power_law(rng):
    x = np.geomspace(1.0, 100.0, 20)
    y = 3.0 * x ** -2.0 * np.exp(0.01 * rng.standard_normal(20))
    fit = loglog_slope(x, y)
    assert abs(fit.slope + 2.0) < 0.02
    assert fit.ci_low < fit.slope < fit.ci_high
    assert fit.n_points == 20


def test_loglog_slope_input_checks():
    with pytest.raises(ValueError):
        loglog_slope([1.0, 2.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        loglog_slope([1.0, 2.0, 3.0], [1.0, -2.0, 3.0])


def test_ito_isometry():
    grid = GridSpec.centered(1.0, 10)
    phi = ball(grid, 0.3)
    result = ito_isometry_check(grid, phi, range(1, 2001))
    # 方差估计的相对标准差约 √(2/2000) ≈ 3%
    assert result['relative_error'] < 0.15
    assert result['n_seeds'] == 2000


def test_isserlis_fourth_moment():
    grid = GridSpec.centered(1.0, 10)
    phis = [
        ball(grid, 0.3),
        gaussian_bump(grid, 0.12, cutoff=3.0),
        ball(grid, 0.25, center=(0.05, 0.0, 0.0)),
        gaussian_bump(grid, 0.1, center=(0.0, 0.05, 0.0), cutoff=3.0),
    ]
    result = isserlis_check(grid, phis, range(100, 4100))
    assert result['z_fourth'] < 5.0
    assert result['z_third'] < 5.0
    with pytest.raises(ValueError):
        isserlis_check(grid, phis[:3], range(10))


def test_seed_independence():
    grid = GridSpec.centered(1.0, 10)
    phi = ball(grid, 0.3)
    result = seed_independence(grid, phi, range(0, 500), range(500, 1000))
    assert result['z'] < 5.0
    with pytest.raises(ValueError):
        seed_independence(grid, phi, [1, 2, 3], [3, 4, 5])


def test_checks_to_frame():
    frame = checks_to_frame([{'check': 'a', 'passed': True}, {'check': 'b', 'passed': False}])
    assert list(frame['check']) == ['a', 'b']
