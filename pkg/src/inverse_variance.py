"""
方差恢复 (Inverse Variance)

由单次实现的被动远场数据恢复 σ²:
1. 频带相关图 X(K, τ, x̂) = (1/K)∫_K^{2K} conj(u∞(x̂,k)) u∞(x̂,k+τ) dk (中点规则)
2. P(2+γ) 调度 K_j = c·j^{2+γ} 上的末带值乘以 4√(2π) 得到 σ̂²(τx̂)
3. 跨种子统计稳定性 (方差随 K 的 log-log 斜率)
4. 极坐标频率样本 → 网格上的 σ²
"""

import logging
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.diagnostics import SlopeFit, loglog_slope, mean_stderr
from src.domain_fields import FieldOnGrid, GridSpec
from src.exceptions import InsufficientSeedsError
from src.farfield_dataset import FarFieldDataset, MeasurementRequest, record_key
from src.forward_solver import ForwardSolver, IncidentConfig, unit_vector
from src.frequency_gridding import PolarSamples, reconstruct_from_polar
from src.white_noise import draw_noise

logger = logging.getLogger(__name__)

# 16π² / (2π)^{3/2}
RECOVERY_CONSTANT = 4.0 * np.sqrt(2.0 * np.pi)

CorrelogramVariant = Literal['raw', 'centered', 'F00', 'F01', 'F10', 'F11']


class BandSchedule(BaseModel):
    """
    频带调度 K_j = c·j^{2+γ}

    k_values 可显式给出 (例如 10, 20, 40, 80)，但必须满足 K_j ≥ c·j^{2+γ} 且严格递增。
    """
    model_config = ConfigDict(frozen=True)

    gamma: float = Field(0.1, gt=0.0, description="γ")
    c: float = Field(1.0, gt=0.0, description="调度常数")
    j_list: List[int] = Field(..., min_length=1, description="递增的带序号")
    n_k: int = Field(32, ge=8, description="每带的中点节点数")
    k_values: Optional[List[float]] = Field(None, description="显式的 K_j")

    @field_validator('j_list')
    @classmethod
    def _increasing(cls, v):
        if any(j < 1 for j in v) or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError(f"j_list 必须是严格递增的正整数: {v}")
        return v

    @model_validator(mode='after')
    def _check_bands(self):
        if self.k_values is not None:
            if len(self.k_values) != len(self.j_list):
                raise ValueError("k_values 与 j_list 长度不一致")
            for j, K in zip(self.j_list, self.k_values):
                if K < self.c * j ** (2.0 + self.gamma) * (1.0 - 1e-12):
                    raise ValueError(f"K_{j} = {K} 小于 c·j^(2+γ) = {self.c * j ** (2.0 + self.gamma):.4g}")
            if any(b <= a for a, b in zip(self.k_values, self.k_values[1:])):
                raise ValueError("K_j 必须严格递增")
        return self

    @property
    def bands(self) -> List[float]:
        if self.k_values is not None:
            return [float(K) for K in self.k_values]
        return [float(self.c * j ** (2.0 + self.gamma)) for j in self.j_list]

    @classmethod
    def from_config(cls, j_list: Sequence[int], n_k: Optional[int] = None) -> "BandSchedule":
        from config import VarianceConfig
        return cls(gamma=VarianceConfig.BAND_GAMMA, c=VarianceConfig.BAND_C, j_list=list(j_list),
                   n_k=n_k or VarianceConfig.BAND_NODES)


def band_nodes(K: float, n_k: int) -> np.ndarray:
    """[K, 2K] 上的 n_k 个中点节点"""
    if K <= 0 or n_k < 1:
        raise ValueError("K 必须 > 0, n_k 必须 ≥ 1")
    return K + (np.arange(n_k) + 0.5) * K / n_k


def band_k_points(K: float, n_k: int, taus: Sequence[float]) -> List[float]:
    """相关图需要的全部波数 {k_i} ∪ {k_i + τ}"""
    nodes = band_nodes(K, n_k)
    points = set(float(k) for k in nodes)
    for tau in taus:
        points.update(float(k + tau) for k in nodes)
    return sorted(points)


def band_requests(xhat, K: float, n_k: int, taus: Sequence[float], seed: Optional[int]) -> List[MeasurementRequest]:
    """单个 (x̂, K) 频带的被动测量请求"""
    return [MeasurementRequest(xhat=tuple(xhat), k=k, seed=seed) for k in band_k_points(K, n_k, taus)]


class CorrelogramSample(BaseModel):
    """一个频带相关图值"""
    model_config = ConfigDict(frozen=True)

    tau: float = Field(..., ge=0.0)
    xhat: Tuple[float, float, float]
    K: float = Field(..., gt=0.0)
    value: complex
    variant: CorrelogramVariant = 'raw'
    n_k: int = 32
    seed: Optional[int] = None

    @field_validator('value', mode='before')
    @classmethod
    def _finite(cls, v):
        v = complex(v)
        if not np.isfinite(v.real) or not np.isfinite(v.imag):
            raise ValueError("相关图值必须有限")
        return v


def band_correlogram(data: FarFieldDataset, xhat, tau: float, K: float, n_k: int,
                     variant: Literal['raw', 'centered'] = 'raw', seed: Optional[int] = None) -> CorrelogramSample:
    """
    单次实现的频带相关图

    Args:
        data: 被动远场数据集 (只含一个随机种子; centered 变体还需同一节点上的确定性记录)
        xhat: 观测方向
        tau: 频移 τ ≥ 0
        K: 频带起点
        n_k: 中点节点数
        variant: raw 用 u∞, centered 用 u∞ − E u∞
        seed: 指定种子 (用于多种子数据集的逐种子分析)

    Returns:
        CorrelogramSample

    Raises:
        CoverageGapError: 缺少节点记录
        MixedSeedError: 数据集含多个种子而未指定 seed
    """
    if tau < 0:
        raise ValueError("tau 必须 ≥ 0")
    xhat = unit_vector(xhat, "xhat")
    seed = data.single_seed(seed)
    nodes = band_nodes(K, n_k)
    lo = data.lookup_many([record_key(xhat, k, None, seed) for k in nodes])
    hi = data.lookup_many([record_key(xhat, k + tau, None, seed) for k in nodes])
    if variant == 'centered':
        lo = lo - data.lookup_many([record_key(xhat, k, None, None) for k in nodes])
        hi = hi - data.lookup_many([record_key(xhat, k + tau, None, None) for k in nodes])
    elif variant != 'raw':
        raise ValueError(f"未知的相关图变体: {variant}")
    value = np.mean(np.conj(lo) * hi)
    return CorrelogramSample(tau=tau, xhat=xhat, K=K, value=value, variant=variant, n_k=n_k, seed=seed)


def born_correlogram(solver: ForwardSolver, xhat, tau: float, K: float, n_k: int, seed: int,
                     p: int, q: int, jmax: int = 8) -> CorrelogramSample:
    """
    F 分量相关图 X_{p,q} = (1/16π²)·(1/K)∫ conj(F_p(k)) F_q(k+τ) dk

    X_{0,0} 与 raw 相关图同一归一化 (σ 项主导时两者一致)。
    """
    if p not in (0, 1) or q not in (0, 1):
        raise ValueError("p, q 只能取 0 或 1")
    xhat = unit_vector(xhat, "xhat")
    noise = draw_noise(solver.grid, seed)
    nodes = band_nodes(K, n_k)
    lo = np.array([solver.born_components(k, xhat, noise, jmax)[p] for k in nodes])
    hi = np.array([solver.born_components(k + tau, xhat, noise, jmax)[q] for k in nodes])
    value = np.mean(np.conj(lo) * hi) / (16.0 * np.pi ** 2)
    return CorrelogramSample(tau=tau, xhat=xhat, K=K, value=value, variant=f"F{p}{q}", n_k=n_k, seed=seed)


def recover_sigma2_hat(data: FarFieldDataset, xhat, tau: float, schedule: BandSchedule,
                       variant: Literal['raw', 'centered'] = 'raw',
                       seed: Optional[int] = None) -> Tuple[complex, pd.DataFrame]:
    """
    σ̂²(τx̂) ≈ 4√(2π)·X(K_last)

    Returns:
        (估计值, 趋势表 [j, K, value, estimate, abs_change])
    """
    rows = []
    for j, K in zip(schedule.j_list, schedule.bands):
        sample = band_correlogram(data, xhat, tau, K, schedule.n_k, variant=variant, seed=seed)
        rows.append({'j': j, 'K': K, 'value': sample.value})
    last = rows[-1]['value']
    for row in rows:
        row['estimate'] = RECOVERY_CONSTANT * row['value']
        row['abs_change'] = abs(row['value'] - last)
    trend = pd.DataFrame(rows, columns=['j', 'K', 'value', 'estimate', 'abs_change'])
    trend['tau'] = tau
    estimate = complex(RECOVERY_CONSTANT * last)
    logger.debug(f"σ̂²(τ={tau:g}) ≈ {estimate:.5g} (末带 K={schedule.bands[-1]:g})")
    return estimate, trend


def variance_statistical_stability(data: FarFieldDataset, xhat, tau: float, K_list: Sequence[float],
                                   n_k: int = 32, min_seeds: Optional[int] = None,
                                   variant: Literal['raw', 'centered'] = 'raw') -> Tuple[pd.DataFrame, SlopeFit]:
    """
    相关图的跨种子方差随 K 的变化

    Args:
        data: 多种子被动数据集
        xhat, tau: 观测方向与频移
        K_list: 频带起点列表 (≥ 3 个)
        n_k: 中点节点数
        min_seeds: 最少种子数 (默认取配置, 50)

    Returns:
        (表 [K, variance, stderr, n_seeds], log-log 斜率拟合)

    Raises:
        InsufficientSeedsError: 种子不足
    """
    from config import VarianceConfig
    min_seeds = VarianceConfig.MIN_STABILITY_SEEDS if min_seeds is None else min_seeds
    seeds = [s for s in data.seeds() if s is not None]
    if len(seeds) < min_seeds:
        raise InsufficientSeedsError(f"统计稳定性至少需要 {min_seeds} 个种子, 实际 {len(seeds)}")

    rows = []
    for K in K_list:
        values = np.array([
            band_correlogram(data, xhat, tau, K, n_k, variant=variant, seed=s).value for s in seeds
        ])
        dev2 = np.abs(values - values.mean()) ** 2
        variance = float(np.sum(dev2) / (len(values) - 1))
        _, stderr = mean_stderr(dev2)
        rows.append({'K': float(K), 'variance': variance, 'stderr': float(stderr), 'n_seeds': len(seeds)})
    table = pd.DataFrame(rows, columns=['K', 'variance', 'stderr', 'n_seeds'])
    fit = loglog_slope(table['K'].to_numpy(), table['variance'].to_numpy())
    logger.info(f"统计稳定性: 斜率 {fit.slope:.3f} (95% CI [{fit.ci_low:.3f}, {fit.ci_high:.3f}], {len(seeds)} 个种子)")
    return table, fit


def variance_expectation_path(solver: ForwardSolver, xhat, tau: float, K: float, n_k: int,
                              seeds: Sequence[int]) -> Tuple[complex, float]:
    """
    4√(2π)·E[(1/K)∫ conj(u₁∞(k)) u₁∞(k+τ) dk] 的 Monte Carlo 估计, u₁∞ = u∞ − E u∞

    Returns:
        (均值, 标准误差)
    """
    if len(seeds) < 2:
        raise InsufficientSeedsError("期望路径至少需要 2 个种子")
    xhat = unit_vector(xhat, "xhat")
    passive = IncidentConfig.passive()
    nodes = band_nodes(K, n_k)
    ks = np.concatenate([nodes, nodes + tau])
    mean_part = np.array([solver.expected_far_field(k, xhat) for k in ks])
    values = []
    for seed in seeds:
        noise = draw_noise(solver.grid, seed)
        u = np.array([solver.far_field(k, xhat, passive, noise) for k in ks]) - mean_part
        values.append(np.mean(np.conj(u[:n_k]) * u[n_k:]))
    mean, stderr = mean_stderr(np.asarray(values))
    return complex(RECOVERY_CONSTANT * mean), float(RECOVERY_CONSTANT * stderr)


class VarianceReconstruction(BaseModel):
    """σ² 重建结果"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    sigma2_hat_samples: PolarSamples
    sigma2_field: FieldOnGrid
    diagnostics: pd.DataFrame
    clamp_mass: float = 0.0
    warnings: List[str] = Field(default_factory=list)
    flagged: bool = False

    def sample_list(self) -> List[Tuple[Tuple[float, float, float], complex]]:
        """(p, σ̂²(p)) 列表"""
        points = self.sigma2_hat_samples.points()
        values = self.sigma2_hat_samples.values.ravel()
        return [(tuple(p), complex(v)) for p, v in zip(points, values)]


def reconstruct_sigma2(samples: PolarSamples, target: GridSpec,
                       trend: Optional[pd.DataFrame] = None) -> VarianceReconstruction:
    """
    极坐标 σ̂² 样本 → 网格上的 σ² (非负钳位)

    Args:
        samples: 极坐标样本 (p_max·h ≤ π)
        target: 目标网格
        trend: 误差-K 趋势表 (并入诊断)

    Returns:
        VarianceReconstruction
    """
    result = reconstruct_from_polar(samples, target, clamp=True)
    diagnostics = trend if trend is not None else pd.DataFrame(columns=['j', 'K', 'value', 'estimate', 'abs_change', 'tau'])
    if result.flagged:
        logger.warning("⚠️ σ² 重建带旗标")
    return VarianceReconstruction(
        sigma2_hat_samples=samples,
        sigma2_field=FieldOnGrid.real(target, result.values),
        diagnostics=diagnostics,
        clamp_mass=result.clamp_mass,
        warnings=result.warnings,
        flagged=result.flagged,
    )


def recover_sigma2_polar(data: FarFieldDataset, taus: Sequence[float], directions: np.ndarray,
                         schedule: BandSchedule, variant: Literal['raw', 'centered'] = 'raw',
                         seed: Optional[int] = None) -> Tuple[PolarSamples, pd.DataFrame]:
    """
    在 τ 半径 × 方向的极坐标网格上逐点恢复 σ̂²

    Returns:
        (PolarSamples, 合并后的趋势表 [..., direction])
    """
    taus = sorted(float(t) for t in taus)
    if not taus:
        raise ValueError("τ 网格为空")
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    values = np.zeros((len(taus), directions.shape[0]), dtype=np.complex128)
    trends = []
    for m, xhat in enumerate(directions):
        for i, tau in enumerate(taus):
            estimate, trend = recover_sigma2_hat(data, xhat, tau, schedule, variant=variant, seed=seed)
            values[i, m] = estimate
            trends.append(trend.assign(direction=m))
    table = pd.concat(trends, ignore_index=True)
    return PolarSamples(radii=np.asarray(taus), directions=directions, values=values), table
