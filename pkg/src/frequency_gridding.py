"""
频率样本网格化与逆变换

极坐标频率样本 (半径 × 方向) → 共轭对称化 → 插值到 FFT 频率网格 → (2π)^{-3/2} 约定的逆变换。
方向上用反距离加权 (IDW)，半径上线性插值。
"""

import logging
from typing import List, Optional

import numpy as np
from scipy.spatial import cKDTree
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.domain_fields import GridSpec, frequency_axes, inverse_fourier_grid

logger = logging.getLogger(__name__)

IDW_NEIGHBORS = 4
IDW_POWER = 2.0


def fibonacci_directions(count: int) -> np.ndarray:
    """
    球面上近似均匀的 count 个单位向量 (Fibonacci 格点)

    Args:
        count: 方向数 (≥ 1)

    Returns:
        (count, 3) 数组, 各行范数为 1
    """
    if count < 1:
        raise ValueError("方向数必须 ≥ 1")
    i = np.arange(count, dtype=np.float64) + 0.5
    z = 1.0 - 2.0 * i / count
    rho = np.sqrt(np.clip(1.0 - z ** 2, 0.0, None))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    dirs = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


class PolarSamples(BaseModel):
    """
    极坐标频率样本: values[i, m] ≈ ĝ(radii[i]·directions[m])
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    radii: np.ndarray = Field(..., description="递增的非负半径 (R,)")
    directions: np.ndarray = Field(..., description="单位方向 (M, 3)")
    values: np.ndarray = Field(..., description="复数样本 (R, M)")

    @model_validator(mode='before')
    @classmethod
    def _check_shapes(cls, data):
        if not isinstance(data, dict):
            return data
        radii = np.asarray(data.get('radii'), dtype=np.float64)
        dirs = np.asarray(data.get('directions'), dtype=np.float64)
        values = np.asarray(data.get('values'), dtype=np.complex128)
        if radii.ndim != 1 or radii.size < 1 or np.any(radii < 0) or np.any(np.diff(radii) <= 0):
            raise ValueError("radii 必须是严格递增的非负一维数组")
        if dirs.ndim != 2 or dirs.shape[1] != 3:
            raise ValueError("directions 形状必须为 (M, 3)")
        if np.any(np.abs(np.linalg.norm(dirs, axis=1) - 1.0) > 1e-10):
            raise ValueError("directions 必须是单位向量")
        if values.shape != (radii.size, dirs.shape[0]):
            raise ValueError(f"values 形状 {values.shape} ≠ ({radii.size}, {dirs.shape[0]})")
        if not np.all(np.isfinite(values)):
            raise ValueError("样本含非有限值")
        return {**data, 'radii': radii, 'directions': dirs, 'values': values}

    @property
    def p_max(self) -> float:
        return float(self.radii[-1])

    @property
    def direction_count(self) -> int:
        return int(self.directions.shape[0])

    def points(self) -> np.ndarray:
        """(R·M, 3) 频率点, 与 values.ravel() 对应"""
        return (self.radii[:, None, None] * self.directions[None, :, :]).reshape(-1, 3)


class GriddingResult(BaseModel):
    """逆变换结果与诊断"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    values: np.ndarray
    clamp_mass: float = 0.0
    imag_residual: float = 0.0
    warnings: List[str] = Field(default_factory=list)
    flagged: bool = False


def symmetrize(samples: PolarSamples) -> PolarSamples:
    """
    共轭对称化: 把 (−p, conj(ĝ(p))) 并入样本

    已包含反向方向的样本集不会重复添加；反向对上的两个值取平均。
    """
    dirs = samples.directions
    values = samples.values
    tree = cKDTree(dirs)
    dist, idx = tree.query(-dirs, k=1)
    paired = dist < 1e-9
    if np.all(paired):
        sym = 0.5 * (values + np.conj(values[:, idx]))
        return PolarSamples(radii=samples.radii, directions=dirs, values=sym)
    new_dirs = np.concatenate([dirs, -dirs[~paired]], axis=0)
    sym = values.copy()
    sym[:, paired] = 0.5 * (values[:, paired] + np.conj(values[:, idx[paired]]))
    new_values = np.concatenate([sym, np.conj(values[:, ~paired])], axis=1)
    return PolarSamples(radii=samples.radii, directions=new_dirs, values=new_values)


def grid_polar_samples(samples: PolarSamples, grid: GridSpec) -> np.ndarray:
    """
    把 (已对称化的) 极坐标样本插值到 FFT 频率网格

    |ξ| > p_max 处与 Nyquist 面上取零。

    Returns:
        形状 grid.shape 的复数频谱 (fftfreq 下标顺序)
    """
    fx, fy, fz = frequency_axes(grid)
    FX, FY, FZ = np.meshgrid(fx, fy, fz, indexing='ij')
    xi = np.stack([FX.ravel(), FY.ravel(), FZ.ravel()], axis=1)
    r = np.linalg.norm(xi, axis=1)
    spectrum = np.zeros(xi.shape[0], dtype=np.complex128)
    inside = r <= samples.p_max * (1.0 + 1e-12)

    radii = samples.radii
    values = samples.values
    # 原点: 各方向在最小半径处的平均
    at_origin = inside & (r == 0)
    spectrum[at_origin] = np.mean(values[0])

    target = np.flatnonzero(inside & (r > 0))
    if target.size:
        rt = r[target]
        ut = xi[target] / rt[:, None]
        kn = min(IDW_NEIGHBORS, samples.direction_count)
        dist, idx = cKDTree(samples.directions).query(ut, k=kn)
        dist = np.asarray(dist).reshape(target.size, kn)
        idx = np.asarray(idx).reshape(target.size, kn)

        if radii.size == 1:
            along = values[0][idx]
        else:
            i0 = np.clip(np.searchsorted(radii, rt) - 1, 0, radii.size - 2)
            span = radii[i0 + 1] - radii[i0]
            frac = np.clip((rt - radii[i0]) / span, 0.0, 1.0)[:, None]
            along = (1.0 - frac) * values[i0[:, None], idx] + frac * values[i0[:, None] + 1, idx]

        exact = dist < 1e-12
        weights = 1.0 / np.maximum(dist, 1e-12) ** IDW_POWER
        weights = np.where(exact.any(axis=1, keepdims=True), exact.astype(np.float64), weights)
        spectrum[target] = np.sum(weights * along, axis=1) / np.sum(weights, axis=1)

    spectrum = spectrum.reshape(grid.shape)
    # 偶数 n 的 Nyquist 面没有对称伙伴
    for axis, n in enumerate(grid.n):
        if n % 2 == 0:
            sl = [slice(None)] * 3
            sl[axis] = n // 2
            spectrum[tuple(sl)] = 0.0
    return spectrum


def reconstruct_from_polar(samples: PolarSamples, target: GridSpec, clamp: bool = False,
                           min_directions: Optional[int] = None,
                           clamp_mass_limit: Optional[float] = None) -> GriddingResult:
    """
    由极坐标频率样本重建实值场

    Args:
        samples: 极坐标样本
        target: 目标网格
        clamp: 是否把负值钳为 0 (σ² 需要, V 不需要)
        min_directions: 方向覆盖下限 (低于时写入警告)
        clamp_mass_limit: 钳位质量占比上限 (超过时标旗)

    Returns:
        GriddingResult
    """
    from config import VarianceConfig
    min_directions = VarianceConfig.MIN_DIRECTIONS if min_directions is None else min_directions
    clamp_mass_limit = VarianceConfig.CLAMP_MASS_LIMIT if clamp_mass_limit is None else clamp_mass_limit

    h_max = float(np.max(target.h))
    if samples.p_max * h_max > np.pi * (1.0 + 1e-12):
        raise ValueError(f"p_max·h = {samples.p_max * h_max:.4f} > π, 频率样本超出网格可分辨范围")

    warnings: List[str] = []
    flagged = False
    if samples.direction_count < min_directions:
        msg = f"方向覆盖不足: {samples.direction_count} < {min_directions}"
        warnings.append(msg)
        logger.warning(f"⚠️ {msg}")

    if not np.any(samples.values):
        return GriddingResult(values=np.zeros(target.shape), warnings=warnings)

    spectrum = grid_polar_samples(symmetrize(samples), target)
    field = inverse_fourier_grid(target, spectrum)
    scale = float(np.max(np.abs(field))) or 1.0
    imag_residual = float(np.max(np.abs(field.imag)) / scale)
    values = np.ascontiguousarray(field.real)

    clamp_mass = 0.0
    if clamp:
        total = float(np.sum(np.abs(values)))
        negative = values < 0
        clamp_mass = float(np.sum(-values[negative]) / total) if total > 0 else 0.0
        values = np.where(negative, 0.0, values)
        if clamp_mass > clamp_mass_limit:
            flagged = True
            msg = f"钳位质量 {clamp_mass:.1%} 超过上限 {clamp_mass_limit:.0%}"
            warnings.append(msg)
            logger.warning(f"⚠️ {msg}")

    logger.debug(f"频率网格逆变换完成 (p_max={samples.p_max:.3g}, 虚部残差 {imag_residual:.1e})")
    return GriddingResult(values=values, clamp_mass=clamp_mass, imag_residual=imag_residual,
                          warnings=warnings, flagged=flagged)
