"""
验证套件

对白噪声、预解算子与正向求解器做桌面规模的性质检验，
每项检验输出 [check, metric, value, expected, tolerance, passed] 行。
"""

import logging
from typing import Callable, Dict, List, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from src.diagnostics import checks_to_frame, isserlis_check, ito_isometry_check, seed_independence
from src.domain_fields import FOURIER_NORMALIZATION, FieldOnGrid, GridSpec, MediumScene, fourier_transform_hat, laplacian_7pt
from src.forward_solver import IncidentConfig, create_forward_solver, normalize
from src.frequency_gridding import fibonacci_directions
from src.greens_resolvent import ResolventOperator, estimate_contraction, green_eval
from src.phantoms import ball, gaussian_bump

logger = logging.getLogger(__name__)

# 无理方向, 避免与网格轴对齐
PROBE_DIRECTION = normalize((1.0, np.sqrt(2.0), np.pi))


class ValidationSettings(BaseModel):
    """验证套件规模"""

    noise_n: int = Field(24, ge=4, description="白噪声检验的网格")
    noise_seeds: int = Field(10000, ge=10, description="白噪声检验的种子数")
    small_n: int = Field(16, ge=8, description="预解算子检验的网格")
    refine_n: List[int] = Field(default_factory=lambda: [16, 32], min_length=2)
    contraction_n: int = Field(32, ge=8)
    contraction_k: List[float] = Field(default_factory=lambda: [10.0, 20.0, 40.0, 80.0], min_length=2)
    z_tolerance: float = Field(3.0, gt=0.0, description="统计检验的门限 (标准误差倍数)")

    @classmethod
    def quick(cls) -> "ValidationSettings":
        return cls(noise_n=12, noise_seeds=400, small_n=10, refine_n=[12, 24], contraction_n=16,
                   contraction_k=[5.0, 10.0, 20.0])


def _row(check: str, metric: str, value: float, expected: float, tolerance: float, passed: bool) -> Dict:
    return {'check': check, 'metric': metric, 'value': float(value), 'expected': float(expected),
            'tolerance': float(tolerance), 'passed': bool(passed)}


# ============================================
# 白噪声
# ============================================

def check_ito_isometry(settings: ValidationSettings) -> List[Dict]:
    grid = GridSpec.centered(1.0, settings.noise_n)
    phi = gaussian_bump(grid, 0.15, cutoff=3.0)
    result = ito_isometry_check(grid, phi, list(range(settings.noise_seeds)))
    # 方差估计的相对标准误差约为 √(2/N)
    tol = max(0.05, 4.0 * np.sqrt(2.0 / settings.noise_seeds))
    return [_row('ito_isometry', 'relative_error', result['relative_error'], 0.0, tol,
                 result['relative_error'] <= tol)]


def check_isserlis(settings: ValidationSettings) -> List[Dict]:
    grid = GridSpec.centered(1.0, settings.noise_n)
    centers = [(0.0, 0.0, 0.0), (0.1, 0.0, 0.0), (0.0, 0.1, 0.0), (0.0, 0.0, 0.1)]
    phis = [gaussian_bump(grid, 0.15, center=c, cutoff=3.0) for c in centers]
    result = isserlis_check(grid, phis, list(range(settings.noise_seeds)))
    tol = settings.z_tolerance
    return [
        _row('isserlis', 'z_fourth', result['z_fourth'], 0.0, tol, result['z_fourth'] <= tol),
        _row('isserlis', 'z_third', result['z_third'], 0.0, tol, result['z_third'] <= tol),
    ]


def check_seed_independence(settings: ValidationSettings) -> List[Dict]:
    grid = GridSpec.centered(1.0, settings.noise_n)
    phi = gaussian_bump(grid, 0.15, cutoff=3.0)
    half = settings.noise_seeds // 2
    result = seed_independence(grid, phi, list(range(half)), list(range(half, 2 * half)))
    tol = settings.z_tolerance
    return [_row('seed_independence', 'z', result['z'], 0.0, tol, result['z'] <= tol)]


# ============================================
# 预解算子
# ============================================

def check_point_source(settings: ValidationSettings, k: float = 5.0) -> List[Dict]:
    """单体素源的响应 vs Φ_k (距离 ≥ 4h)"""
    grid = GridSpec.centered(1.0, settings.small_n)
    src = tuple(n // 2 for n in grid.n)
    density = np.zeros(grid.shape)
    density[src] = 1.0 / grid.voxel_volume
    u = ResolventOperator(grid, k).apply(density)

    X, Y, Z = grid.coordinates()
    y = np.array([X[src], Y[src], Z[src]])
    r = np.sqrt((X - y[0]) ** 2 + (Y - y[1]) ** 2 + (Z - y[2]) ** 2)
    far = r >= 4.0 * float(np.max(grid.h))
    exact = green_eval(k, r[far])
    err = float(np.max(np.abs(u[far] - exact) / np.abs(exact)))
    return [_row('point_source', 'max_relative_error', err, 0.0, 0.02, err <= 0.02)]


def check_method_equivalence(settings: ValidationSettings, k: float = 5.0) -> List[Dict]:
    """直接求和 vs 倍增网格 FFT"""
    grid = GridSpec.centered(1.0, settings.small_n)
    rng = np.random.default_rng(7)
    phi = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    fast = ResolventOperator(grid, k, method='fast-convolution').apply(phi)
    direct = ResolventOperator(grid, k, method='direct-sum').apply(phi)
    err = float(np.max(np.abs(fast - direct)) / np.max(np.abs(direct)))
    return [_row('method_equivalence', 'max_relative_difference', err, 0.0, 1e-10, err <= 1e-10)]


def helmholtz_residual(n: int, k: float = 2.0, extent: float = 2.0, width: float = 0.15) -> float:
    """
    ‖Δ_h u + k²u + φ‖_∞ (内部 |x| ≤ extent/4), u = R_k φ

    Args:
        n: 每轴体素数
        k: 波数
        extent: 网格盒长
        width: 高斯包宽度

    Returns:
        残差的最大模
    """
    grid = GridSpec.centered(extent, n)
    phi = gaussian_bump(grid, width, cutoff=4.0)
    u = ResolventOperator(grid, k).apply(phi)
    residual = laplacian_7pt(u, grid.h) + k ** 2 * u + phi
    inner = grid.radius() <= extent / 4.0
    return float(np.max(np.abs(residual[inner])))


def check_helmholtz_order(settings: ValidationSettings) -> List[Dict]:
    coarse, fine = settings.refine_n[0], settings.refine_n[-1]
    e_coarse = helmholtz_residual(coarse)
    e_fine = helmholtz_residual(fine)
    order = float(np.log(e_coarse / e_fine) / np.log(fine / coarse))
    return [_row('helmholtz_residual', 'order', order, 2.0, 1.5, order >= 1.5)]


def check_contraction_law(settings: ValidationSettings) -> List[Dict]:
    """0.1 幅值球势: ‖R_k V‖·k 在各 k 间有界 (最大/最小 ≤ 2)"""
    grid = GridSpec.centered(0.8, settings.contraction_n)
    V = ball(grid, 0.3, amplitude=0.1)
    scaled = []
    rows = []
    for k in settings.contraction_k:
        report = estimate_contraction(ResolventOperator(grid, k), V, trials=2, seed=0, iterations=12)
        scaled.append(report.norm_estimate * k)
        rows.append(_row('contraction', f'norm_times_k@{k:g}', report.norm_estimate * k, 0.0, 0.0,
                         report.converged))
    ratio = max(scaled) / min(scaled)
    rows.append(_row('contraction', 'max_over_min', ratio, 1.0, 2.0, ratio <= 2.0))
    return rows


# ============================================
# 正向求解器
# ============================================

def check_born_farfield(settings: ValidationSettings, k: float = 4.0) -> List[Dict]:
    """σ = V = 0: u∞ = −(1/4π)(2π)^{3/2} f̂(kx̂)"""
    grid = GridSpec.centered(1.0, settings.small_n)
    f = gaussian_bump(grid, 0.1, cutoff=3.0)
    scene = MediumScene.from_fields(grid, f=f)
    solver = create_forward_solver(scene)
    value = solver.far_field(k, PROBE_DIRECTION, IncidentConfig.passive())
    f_hat = fourier_transform_hat(FieldOnGrid.real(grid, f), k * np.asarray(PROBE_DIRECTION))
    expected = -f_hat / (4.0 * np.pi * FOURIER_NORMALIZATION)
    rel = abs(value - expected) / abs(expected)
    return [_row('born_farfield', 'relative_error', rel, 0.0, 1e-8, rel <= 1e-8)]


def check_farfield_asymptotics(settings: ValidationSettings, k: float = 4.0) -> List[Dict]:
    """r = 8·diam 的环上 r e^{−ikr} u^sc vs u∞"""
    grid = GridSpec.centered(1.0, settings.small_n)
    scene = MediumScene.from_fields(
        grid,
        V=ball(grid, 0.2, amplitude=0.05),
        f=gaussian_bump(grid, 0.1, cutoff=3.0),
    )
    solver = create_forward_solver(scene)
    xhats = fibonacci_directions(12)
    r = 8.0 * scene.support_diameter()
    inc = IncidentConfig.passive()
    ring = solver.scattered_field_at(k, r * xhats, inc) * r * np.exp(-1j * k * r)
    u_inf = solver.far_field_many(k, xhats, inc)
    err = float(np.max(np.abs(ring - u_inf)) / np.max(np.abs(u_inf)))
    return [_row('farfield_asymptotics', 'max_relative_error', err, 0.0, 0.05, err <= 0.05)]


def check_expected_decay(settings: ValidationSettings, k_low: float = 10.0, k_high: float = 40.0) -> List[Dict]:
    """光滑 f: |E u∞(x̂, k_high)| < |E u∞(x̂, k_low)|"""
    grid = GridSpec.centered(1.0, settings.small_n)
    scene = MediumScene.from_fields(grid, f=gaussian_bump(grid, 0.15, cutoff=3.0))
    solver = create_forward_solver(scene)
    xhats = fibonacci_directions(8)
    low = np.abs(solver.far_field_many(k_low, xhats, IncidentConfig.passive()))
    high = np.abs(solver.far_field_many(k_high, xhats, IncidentConfig.passive()))
    ratio = float(np.max(high / low))
    return [_row('expected_decay', 'max_ratio', ratio, 0.0, 1.0, ratio < 1.0)]


CHECKS: Dict[str, Callable[[ValidationSettings], List[Dict]]] = {
    'ito_isometry': check_ito_isometry,
    'isserlis': check_isserlis,
    'seed_independence': check_seed_independence,
    'point_source': check_point_source,
    'method_equivalence': check_method_equivalence,
    'helmholtz_residual': check_helmholtz_order,
    'contraction': check_contraction_law,
    'born_farfield': check_born_farfield,
    'farfield_asymptotics': check_farfield_asymptotics,
    'expected_decay': check_expected_decay,
}


def run_validation_suite(settings: ValidationSettings = None, only: Sequence[str] = ()) -> pd.DataFrame:
    """
    运行验证套件

    Args:
        settings: 规模设置 (默认桌面验收规模)
        only: 只运行指定的检验

    Returns:
        表 [check, metric, value, expected, tolerance, passed]
    """
    settings = settings or ValidationSettings()
    unknown = set(only) - set(CHECKS)
    if unknown:
        raise ValueError(f"未知的检验: {sorted(unknown)}")
    rows: List[Dict] = []
    for name, check in CHECKS.items():
        if only and name not in only:
            continue
        logger.info(f"运行检验 {name} ...")
        results = check(settings)
        for row in results:
            mark = '✅' if row['passed'] else '⚠️'
            logger.info(f"{mark} {row['check']}.{row['metric']} = {row['value']:.4g}")
        rows.extend(results)
    frame = checks_to_frame(rows)
    return frame.reindex(columns=['check', 'metric', 'value', 'expected', 'tolerance', 'passed'])
