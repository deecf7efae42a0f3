"""
势恢复 (Inverse Potential)

单次实现的主动远场差分:
    V̂(p) ≈ √(2/π)·(u∞(x̂, k, d₁) − u∞(x̂, k, d₂)),  k(x̂ − d₁) = p
噪声项与入射方向无关，在差分中精确抵消；余项按 a/k 模型两点外推。
"""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.diagnostics import loglog_slope
from src.domain_fields import FieldOnGrid, GridSpec, as_frequency
from src.farfield_dataset import FarFieldDataset, MeasurementRequest, record_key
from src.forward_solver import unit_vector
from src.frequency_gridding import PolarSamples, reconstruct_from_polar
from src.greens_resolvent import as_wavenumber

logger = logging.getLogger(__name__)

# √(2/π): 远场 Born 项 √(π/2)·V̂ 的倒数
POTENTIAL_CONSTANT = np.sqrt(2.0 / np.pi)

UNIT_TOL = 1e-12


class DirectionTriple(BaseModel):
    """频率 p 与波数 k 对应的观测/入射方向三元组"""
    model_config = ConfigDict(frozen=True)

    p: Tuple[float, float, float]
    k: float = Field(..., gt=0.0)
    xhat: Tuple[float, float, float]
    d1: Tuple[float, float, float]
    d2: Tuple[float, float, float]

    @model_validator(mode='after')
    def _check(self):
        for name in ('xhat', 'd1', 'd2'):
            unit_vector(getattr(self, name), name)
        p = np.asarray(self.p)
        if self.k <= np.linalg.norm(p) / 2.0:
            raise ValueError(f"要求 k > |p|/2: k={self.k}, |p|={np.linalg.norm(p):.6g}")
        gap = self.k * (np.asarray(self.xhat) - np.asarray(self.d1)) - p
        if np.max(np.abs(gap)) > 1e-10 * max(1.0, self.k):
            raise ValueError(f"k(x̂ − d₁) ≠ p (偏差 {np.max(np.abs(gap)):.2e})")
        return self

    @property
    def d2_gap(self) -> float:
        """|k(x̂ − d₂)|"""
        return float(self.k * np.linalg.norm(np.asarray(self.xhat) - np.asarray(self.d2)))


def perpendicular(p: np.ndarray) -> np.ndarray:
    """
    与 p 垂直的确定性向量: 交换 |p| 最大的两个分量并取反其一

    退化时 (数值上为零向量) 改用与 p 最不平行的坐标轴做叉积。
    """
    order = np.argsort(-np.abs(p), kind='stable')
    i, j = int(order[0]), int(order[1])
    perp = np.zeros(3)
    perp[i] = p[j]
    perp[j] = -p[i]
    if np.linalg.norm(perp) <= 1e-14 * np.linalg.norm(p):
        axis = np.zeros(3)
        axis[int(order[-1])] = 1.0
        perp = np.cross(p, axis)
    return perp


def make_direction_triple(p, k: float, min_gap: Optional[float] = None) -> DirectionTriple:
    """
    构造 (x̂, d₁, d₂)

    p ≠ 0: e = p⊥/|p⊥|, x̂ = √(1 − |p|²/4k²)·e + p/(2k), d₁ = √(1 − |p|²/4k²)·e − p/(2k), d₂ = p/|p|
    p = 0: x̂ = d₁ = (1,0,0), d₂ = (0,1,0)

    Args:
        p: 目标频率
        k: 波数 (> |p|/2)
        min_gap: 要求 |x̂ − d₂| ≥ min_gap (默认取配置)

    Returns:
        DirectionTriple
    """
    from config import PotentialConfig
    min_gap = PotentialConfig.MIN_GAP if min_gap is None else min_gap
    p = as_frequency(p)
    k = as_wavenumber(k)
    norm_p = float(np.linalg.norm(p))
    if k <= norm_p / 2.0:
        raise ValueError(f"k = {k:g} ≤ |p|/2 = {norm_p / 2.0:g}, 该频率在此波数下不可达")

    if norm_p == 0.0:
        xhat = (1.0, 0.0, 0.0)
        d1 = (1.0, 0.0, 0.0)
        d2 = (0.0, 1.0, 0.0)
    else:
        perp = perpendicular(p)
        e = perp / np.linalg.norm(perp)
        s = np.sqrt(1.0 - norm_p ** 2 / (4.0 * k ** 2))
        half = p / (2.0 * k)
        xhat = tuple(float(c) for c in s * e + half)
        d1 = tuple(float(c) for c in s * e - half)
        d2 = tuple(float(c) for c in p / norm_p)

    triple = DirectionTriple(p=tuple(float(c) for c in p), k=k, xhat=xhat, d1=d1, d2=d2)
    if triple.d2_gap < k * min_gap:
        raise ValueError(f"|x̂ − d₂| = {triple.d2_gap / k:.4f} < 最小间隔 {min_gap:g} (k={k:g}, |p|={norm_p:g})")
    return triple


def plan_potential_requests(p_list: Sequence, k_list: Sequence[float], seed: Optional[int]) -> List[MeasurementRequest]:
    """每个 (p, k) 两条主动请求: (x̂, k, d₁) 与 (x̂, k, d₂)"""
    requests = []
    for p in p_list:
        for k in k_list:
            t = make_direction_triple(p, k)
            requests.append(MeasurementRequest(xhat=t.xhat, k=t.k, d=t.d1, seed=seed))
            requests.append(MeasurementRequest(xhat=t.xhat, k=t.k, d=t.d2, seed=seed))
    return requests


def potential_hat_estimate(data: FarFieldDataset, p, k_list: Sequence[float],
                           seed: Optional[int] = None) -> Tuple[complex, pd.DataFrame]:
    """
    V̂(p) 的单实现估计

    Args:
        data: 主动数据集 (单一种子)
        p: 目标频率
        k_list: 波数列表
        seed: 指定种子

    Returns:
        (估计值, 趋势表 [k, raw, abs_change])；趋势表 attrs 中记录是否外推
    """
    if len(k_list) == 0:
        raise ValueError("k 列表为空")
    seed = data.single_seed(seed)
    ks = sorted(float(k) for k in k_list)
    rows = []
    keys = []
    for k in ks:
        t = make_direction_triple(p, k)
        keys.append(record_key(t.xhat, t.k, t.d1, seed))
        keys.append(record_key(t.xhat, t.k, t.d2, seed))
    values = data.lookup_many(keys)
    for i, k in enumerate(ks):
        raw = POTENTIAL_CONSTANT * (values[2 * i] - values[2 * i + 1])
        rows.append({'k': k, 'raw': complex(raw)})

    if len(ks) >= 2:
        (k1, e1), (k2, e2) = (ks[-2], rows[-2]['raw']), (ks[-1], rows[-1]['raw'])
        estimate = complex((k2 * e2 - k1 * e1) / (k2 - k1))
        extrapolated = True
    else:
        estimate = rows[-1]['raw']
        extrapolated = False
        logger.warning(f"⚠️ p={tuple(np.round(as_frequency(p), 4))}: 只有一个 k, 返回未外推的原始值")

    for row in rows:
        row['abs_change'] = abs(row['raw'] - estimate)
    trend = pd.DataFrame(rows, columns=['k', 'raw', 'abs_change'])
    trend.attrs['extrapolated'] = extrapolated
    trend.attrs['flag'] = '' if extrapolated else 'single-k'
    return estimate, trend


def remainder_exponent(k_list: Sequence[float], raw: Sequence[complex], reference) -> float:
    """
    拟合 |raw(k) − 参考(k)| ∝ k^a 的指数 a

    Args:
        k_list: 波数
        raw: 各 k 的原始估计
        reference: 标量参考值 (例如 V̂(p))，或与 k_list 等长的逐 k 参考

    Returns:
        指数 a (两点时为对数差商, 多点时为最小二乘斜率)
    """
    ks = np.asarray(k_list, dtype=np.float64)
    ref = np.broadcast_to(np.asarray(reference, dtype=np.complex128), ks.shape)
    err = np.abs(np.asarray(raw, dtype=np.complex128) - ref)
    if ks.size < 2:
        raise ValueError("拟合指数至少需要 2 个 k")
    if np.any(err <= 0):
        raise ValueError("余项为零, 指数无定义")
    if ks.size == 2:
        return float(np.log(err[1] / err[0]) / np.log(ks[1] / ks[0]))
    return loglog_slope(ks, err).slope


def reconstruct_potential(samples: PolarSamples, target: GridSpec) -> FieldOnGrid:
    """
    极坐标 V̂ 样本 → 网格上的 V (不钳位, V 可正可负)

    Returns:
        实值 FieldOnGrid
    """
    result = reconstruct_from_polar(samples, target, clamp=False)
    return FieldOnGrid.real(target, result.values)


def recover_potential_polar(data: FarFieldDataset, radii: Sequence[float], directions: np.ndarray,
                            k_list: Sequence[float], seed: Optional[int] = None
                            ) -> Tuple[PolarSamples, pd.DataFrame]:
    """
    在 |p| 半径 × 方向的极坐标网格上逐点估计 V̂(p)

    Returns:
        (PolarSamples, 合并趋势表 [k, raw, abs_change, radius, direction, estimate])
    """
    radii = sorted(float(r) for r in radii)
    if not radii:
        raise ValueError("|p| 网格为空")
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    values = np.zeros((len(radii), directions.shape[0]), dtype=np.complex128)
    trends = []
    for m, direction in enumerate(directions):
        for i, radius in enumerate(radii):
            estimate, trend = potential_hat_estimate(data, radius * direction, k_list, seed=seed)
            values[i, m] = estimate
            trends.append(trend.assign(radius=radius, direction=m, estimate=estimate))
    table = pd.concat(trends, ignore_index=True)
    return PolarSamples(radii=np.asarray(radii), directions=directions, values=values), table
