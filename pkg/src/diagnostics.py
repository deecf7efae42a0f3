"""
统计诊断工具

负责:
1. 均值 / 标准误差 / 批均值标准误差
2. log-log 斜率拟合 (t 分位数置信区间)
3. 白噪声的 Itô 等距、Isserlis 四阶矩与种子独立性的 Monte Carlo 检验
"""

import logging
from typing import Dict, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats
from pydantic import BaseModel, ConfigDict, Field

from src.domain_fields import GridSpec, field_values
from src.white_noise import draw_noise

logger = logging.getLogger(__name__)

ArrayLike = Union[Sequence[complex], np.ndarray]


def mean_stderr(values: ArrayLike) -> Tuple[complex, float]:
    """
    样本均值与标准误差 (复数样本取 E|X − mean|²)

    Returns:
        (均值, 标准误差); 只有一个样本时标准误差为 nan
    """
    arr = np.asarray(values)
    if arr.size == 0:
        raise ValueError("空样本")
    mean = arr.mean(axis=0)
    if arr.shape[0] < 2:
        return mean, float('nan')
    var = np.sum(np.abs(arr - mean) ** 2, axis=0) / (arr.shape[0] - 1)
    return mean, np.sqrt(var / arr.shape[0])


def batch_means(values: ArrayLike, n_batches: int) -> np.ndarray:
    """按顺序分成 n_batches 批并取各批均值 (尾部不足一批的样本丢弃)"""
    arr = np.asarray(values)
    if n_batches < 2:
        raise ValueError("批数必须 ≥ 2")
    size = arr.shape[0] // n_batches
    if size < 1:
        raise ValueError(f"样本数 {arr.shape[0]} 少于批数 {n_batches}")
    trimmed = arr[:size * n_batches]
    return trimmed.reshape((n_batches, size) + arr.shape[1:]).mean(axis=1)


class SlopeFit(BaseModel):
    """log-log 线性拟合结果"""
    model_config = ConfigDict(frozen=True)

    slope: float
    intercept: float
    stderr: float = Field(..., ge=0.0, description="斜率标准误差")
    ci_low: float
    ci_high: float
    r_value: float
    n_points: int

    @property
    def ci_width(self) -> float:
        return self.ci_high - self.ci_low


def loglog_slope(x: ArrayLike, y: ArrayLike, confidence: float = 0.95) -> SlopeFit:
    """
    拟合 log y = a + b log x

    Args:
        x: 自变量 (> 0)
        y: 因变量 (> 0)
        confidence: 置信水平

    Returns:
        SlopeFit (置信区间使用自由度 n−2 的 t 分位数)
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size or x.size < 3:
        raise ValueError("斜率拟合至少需要 3 个点")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log 拟合要求正值")
    fit = stats.linregress(np.log(x), np.log(y))
    t = stats.t.ppf(0.5 + confidence / 2.0, x.size - 2)
    return SlopeFit(
        slope=float(fit.slope),
        intercept=float(fit.intercept),
        stderr=float(fit.stderr),
        ci_low=float(fit.slope - t * fit.stderr),
        ci_high=float(fit.slope + t * fit.stderr),
        r_value=float(fit.rvalue),
        n_points=int(x.size),
    )


# ============================================
# 白噪声 Monte Carlo 检验
# ============================================

def _pairings(grid: GridSpec, phis: Sequence[np.ndarray], seeds: Sequence[int]) -> np.ndarray:
    stack = np.stack([field_values(phi, grid) for phi in phis])
    out = np.empty((len(seeds), len(phis)))
    for i, seed in enumerate(seeds):
        W = draw_noise(grid, seed).W
        out[i] = np.tensordot(stack, W, axes=3)
    return out


def ito_isometry_check(grid: GridSpec, phi: np.ndarray, seeds: Sequence[int]) -> Dict[str, float]:
    """
    Var⟨Ẇ, φ⟩ 的 Monte Carlo 估计 vs Σφ²h³

    Returns:
        {'empirical', 'expected', 'relative_error', 'n_seeds'}
    """
    X = _pairings(grid, [phi], seeds)[:, 0]
    expected = float(np.sum(np.asarray(phi) ** 2) * grid.voxel_volume)
    empirical = float(np.mean(X ** 2))
    rel = abs(empirical - expected) / expected if expected > 0 else abs(empirical)
    logger.debug(f"Itô 等距: 经验 {empirical:.5e} vs 理论 {expected:.5e} (相对误差 {rel:.2%})")
    return {'empirical': empirical, 'expected': expected, 'relative_error': rel, 'n_seeds': len(seeds)}


def isserlis_check(grid: GridSpec, phis: Sequence[np.ndarray], seeds: Sequence[int]) -> Dict[str, float]:
    """
    四个线性高斯泛函的四阶矩 vs 成对协方差展开

    Returns:
        {'fourth_moment', 'expected', 'z_fourth', 'third_moment', 'z_third', 'n_seeds'}
    """
    if len(phis) != 4:
        raise ValueError("Isserlis 检验需要 4 个测试函数")
    X = _pairings(grid, phis, seeds)
    h3 = grid.voxel_volume
    vals = [np.asarray(p, dtype=np.float64) for p in phis]

    def cov(a, b):
        return float(np.sum(vals[a] * vals[b]) * h3)

    expected = cov(0, 1) * cov(2, 3) + cov(0, 2) * cov(1, 3) + cov(0, 3) * cov(1, 2)
    prod4 = X[:, 0] * X[:, 1] * X[:, 2] * X[:, 3]
    m4, se4 = mean_stderr(prod4)
    prod3 = X[:, 0] * X[:, 1] * X[:, 2]
    m3, se3 = mean_stderr(prod3)
    return {
        'fourth_moment': float(m4),
        'expected': expected,
        'z_fourth': float(abs(m4 - expected) / se4),
        'third_moment': float(m3),
        'z_third': float(abs(m3) / se3),
        'n_seeds': len(seeds),
    }


def seed_independence(grid: GridSpec, phi: np.ndarray, seeds_a: Sequence[int],
                      seeds_b: Sequence[int]) -> Dict[str, float]:
    """
    两组不同种子下 ⟨Ẇ, φ⟩ 的经验相关系数

    Returns:
        {'correlation', 'stderr', 'z'}, 独立时 stderr ≈ 1/√n
    """
    if len(seeds_a) != len(seeds_b):
        raise ValueError("两组种子数必须相同")
    if set(seeds_a) & set(seeds_b):
        raise ValueError("两组种子不能重叠")
    a = _pairings(grid, [phi], seeds_a)[:, 0]
    b = _pairings(grid, [phi], seeds_b)[:, 0]
    corr = float(np.corrcoef(a, b)[0, 1])
    se = 1.0 / np.sqrt(len(seeds_a))
    return {'correlation': corr, 'stderr': se, 'z': abs(corr) / se}


def checks_to_frame(rows: Sequence[Dict[str, object]]) -> pd.DataFrame:
    """把检验结果行整理成 DataFrame"""
    return pd.DataFrame(list(rows))
