"""
源期望恢复 (Inverse Source)

已知 V，由多次实现的主动远场 (固定 d) 恢复 f:
1. 跨种子平均远场 (均值与标准误差)
2. 扣除已知 V 的确定性入射贡献，Born 反演 f̂(kx̂) ≈ −4π(2π)^{-3/2}·m
3. 不动点修正 f_{i+1} = B(m) − B(T(f_i))，T 为 j ≥ 1 的多次散射远场
4. Dirichlet 本征对与本征投影残差检验
"""

import logging
from itertools import product
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, eigsh
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.diagnostics import batch_means, mean_stderr
from src.domain_fields import (
    FOURIER_NORMALIZATION, FieldOnGrid, MediumScene, field_values, inner_product, l2_norm_on_support,
    masked_laplacian_matrix,
)
from src.exceptions import (
    EigenSolverError, FixedPointDivergenceError, InsufficientSeedsError, SmallnessGateError,
)
from src.farfield_dataset import FarFieldDataset, MeasurementRequest, record_key
from src.forward_solver import ForwardSolver, create_forward_solver, unit_vector
from src.frequency_gridding import PolarSamples, reconstruct_from_polar

logger = logging.getLogger(__name__)

# f̂ = BORN_SOURCE_CONSTANT · (E u∞ − 入射部分)
BORN_SOURCE_CONSTANT = -4.0 * np.pi * FOURIER_NORMALIZATION


class EnsembleSpec(BaseModel):
    """M₃ 型测量: 多个种子, 固定入射方向"""
    model_config = ConfigDict(frozen=True)

    seeds: List[int] = Field(..., min_length=1)
    d_fixed: Tuple[float, float, float]
    k_list: List[float] = Field(..., min_length=1)
    xhat_list: List[Tuple[float, float, float]] = Field(..., min_length=1)

    @field_validator('seeds')
    @classmethod
    def _distinct(cls, v):
        if len(set(v)) != len(v):
            raise ValueError("种子必须互不相同")
        return v

    @field_validator('d_fixed')
    @classmethod
    def _unit_d(cls, v):
        return unit_vector(v, "d_fixed")

    @field_validator('xhat_list')
    @classmethod
    def _unit_xhats(cls, v):
        return [unit_vector(x, "xhat") for x in v]

    def requests(self) -> List[MeasurementRequest]:
        return [
            MeasurementRequest(xhat=x, k=k, d=self.d_fixed, seed=s)
            for k, x, s in product(self.k_list, self.xhat_list, self.seeds)
        ]


class EigenPair(BaseModel):
    """−Δ_h − V 在 D 上的 Dirichlet 本征对"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    eigenvalue: float
    v: FieldOnGrid
    residual: float = Field(0.0, ge=0.0, description="‖(−Δ_h − V)v − λv‖ / |λ|")


class GateReport(BaseModel):
    """源恢复的小性门控结果"""
    model_config = ConfigDict(frozen=True)

    v_norm: float
    threshold: float
    lowest_eigenvalue: Optional[float] = None
    contraction_ok: bool = True
    passed: bool


def ensemble_mean_farfield(data: FarFieldDataset, xhat, k: float, d,
                           seeds: Optional[Sequence[int]] = None) -> Tuple[complex, float]:
    """
    固定 (x̂, k, d) 的跨种子均值与标准误差

    Raises:
        InsufficientSeedsError: 少于 2 个种子
        CoverageGapError: 某个种子缺少记录
    """
    seeds = [s for s in data.seeds() if s is not None] if seeds is None else list(seeds)
    if len(seeds) < 2:
        raise InsufficientSeedsError(f"集合平均至少需要 2 个种子, 实际 {len(seeds)}")
    values = data.lookup_many([record_key(xhat, k, d, s) for s in seeds])
    mean, stderr = mean_stderr(values)
    return complex(mean), float(stderr)


def source_hat_estimate(mean_value: complex, solver_v: ForwardSolver, k: float, xhat, d) -> complex:
    """
    单点 Born 反演: f̂(kx̂) ≈ −4π(2π)^{-3/2}·(E u∞ − 入射贡献)

    Args:
        mean_value: 集合平均远场
        solver_v: 已知 V 的求解器 (其场景的 f 与 σ 不参与)
        k, xhat, d: 测量元组

    Returns:
        f̂(kx̂) 的 j = 0 估计
    """
    incident = solver_v.incident_far_field(k, xhat, d)
    return complex(BORN_SOURCE_CONSTANT * (mean_value - incident))


def smallness_gate(scene: MediumScene, k_list: Sequence[float], v_limit: Optional[float] = None,
                   check_eigen: bool = True, solver: Optional[ForwardSolver] = None) -> GateReport:
    """
    ‖V‖∞ ≤ 门限, 且 −Δ_h − V 的最低本征值为正, 且各 k 的收缩门控通过

    Raises:
        SmallnessGateError: 任一条件不满足
    """
    from config import SourceConfig
    threshold = SourceConfig.V_LIMIT if v_limit is None else v_limit
    v_norm = float(np.max(np.abs(scene.V)))
    if v_norm > threshold:
        raise SmallnessGateError(v_norm, threshold)

    lowest = None
    if check_eigen:
        pairs = dirichlet_eigenpairs(FieldOnGrid.real(scene.grid, scene.V), scene.domain_mask, 1,
                                     v_limit=threshold)
        lowest = pairs[0].eigenvalue

    solver = solver or create_forward_solver(scene)
    contraction_ok = all(solver.contraction(k).converged for k in k_list)
    if not contraction_ok:
        raise SmallnessGateError(v_norm, threshold, "收缩门控未通过")
    logger.info(f"✅ 小性门控通过: ‖V‖∞ = {v_norm:.4g} ≤ {threshold:.4g}")
    return GateReport(v_norm=v_norm, threshold=threshold, lowest_eigenvalue=lowest,
                      contraction_ok=contraction_ok, passed=True)


class SourceReconstruction(BaseModel):
    """f 的重建结果"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    f_field: FieldOnGrid
    f_hat_samples: PolarSamples
    history: List[float] = Field(default_factory=list, description="不动点相对更新历史")
    iterations: int = 0
    warnings: List[str] = Field(default_factory=list)


class SourceRecovery:
    """
    已知 V 的源恢复

    测量频率 p = k·x̂ 构成极坐标网格: 半径 = k_list, 方向 = xhat_list。
    """

    def __init__(self, scene_v: MediumScene, k_list: Sequence[float], xhat_list: Sequence,
                 d_fixed, fixed_point_iters: Optional[int] = None, fixed_point_tol: Optional[float] = None,
                 v_limit: Optional[float] = None, solver: Optional[ForwardSolver] = None):
        """
        初始化源恢复

        Args:
            scene_v: 含已知 V 的场景 (f 与 σ 被置零)
            k_list: 波数 (即 |p| 半径)
            xhat_list: 观测方向
            d_fixed: 固定入射方向
            fixed_point_iters: 不动点迭代上限 (≤ 5)
            fixed_point_tol: 不动点相对更新容差
            v_limit: ‖V‖∞ 门限
            solver: 复用的求解器 (须绑定到置零后的场景)
        """
        from config import SourceConfig
        self.scene = scene_v.replace(sigma=np.zeros(scene_v.grid.shape), f=np.zeros(scene_v.grid.shape))
        self.grid = self.scene.grid
        self.k_list = sorted(float(k) for k in k_list)
        self.xhats = np.array([unit_vector(x, "xhat") for x in xhat_list])
        self.d_fixed = unit_vector(d_fixed, "d_fixed")
        self.fixed_point_iters = fixed_point_iters or SourceConfig.FIXED_POINT_ITERS
        self.fixed_point_tol = fixed_point_tol or SourceConfig.FIXED_POINT_TOL
        self.v_limit = SourceConfig.V_LIMIT if v_limit is None else v_limit
        if not 1 <= self.fixed_point_iters <= 5:
            raise ValueError("不动点迭代次数必须在 1..5 之间")
        self.solver = solver or create_forward_solver(self.scene)
        self._incident: Optional[np.ndarray] = None

    def gate(self, check_eigen: bool = True) -> GateReport:
        return smallness_gate(self.scene, self.k_list, self.v_limit, check_eigen=check_eigen, solver=self.solver)

    def incident_table(self) -> np.ndarray:
        """(R, M) 已知 V 的确定性入射远场"""
        if self._incident is None:
            table = np.zeros((len(self.k_list), len(self.xhats)), dtype=np.complex128)
            for i, k in enumerate(self.k_list):
                for m, xhat in enumerate(self.xhats):
                    table[i, m] = self.solver.incident_far_field(k, xhat, self.d_fixed)
            self._incident = table
        return self._incident

    def mean_table(self, data: FarFieldDataset, seeds: Optional[Sequence[int]] = None
                   ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        从数据集取出 (R, M) 的均值、标准误差, 以及 (S, R, M) 的逐种子值

        种子为空时使用确定性记录 (单个 "集合成员")。
        """
        if seeds is None:
            seeds = [s for s in data.seeds() if s is not None] or [None]
        keys = [
            record_key(xhat, k, self.d_fixed, s)
            for s in seeds for k in self.k_list for xhat in self.xhats
        ]
        per_seed = data.lookup_many(keys).reshape(len(seeds), len(self.k_list), len(self.xhats))
        if per_seed.shape[0] == 1:
            return per_seed[0], np.zeros(per_seed.shape[1:]), per_seed
        mean, stderr = mean_stderr(per_seed)
        return mean, np.asarray(stderr), per_seed

    def born_invert(self, m_table: np.ndarray) -> Tuple[np.ndarray, PolarSamples, List[str]]:
        """B(m): f̂ 样本 → 网格上的 f"""
        samples = PolarSamples(radii=np.asarray(self.k_list), directions=self.xhats,
                               values=BORN_SOURCE_CONSTANT * np.asarray(m_table))
        result = reconstruct_from_polar(samples, self.grid, clamp=False)
        return result.values, samples, result.warnings

    def tail_table(self, f_values: np.ndarray) -> np.ndarray:
        """T(f): (R, M) 多次散射远场"""
        return np.stack([self.solver.source_tail_far_field(k, f_values, self.xhats) for k in self.k_list])

    def reconstruct(self, mean_table: np.ndarray) -> SourceReconstruction:
        """
        由 (R, M) 的集合平均远场重建 f

        Raises:
            FixedPointDivergenceError: 相对更新不再下降
        """
        m = np.asarray(mean_table) - self.incident_table()
        base, samples, warnings = self.born_invert(m)
        f = base
        history: List[float] = []
        mask = self.scene.domain_mask
        iterations = 0
        if self.scene.has_potential:
            for iterations in range(1, self.fixed_point_iters + 1):
                correction, _, _ = self.born_invert(self.tail_table(f))
                f_next = base - correction
                norm = l2_norm_on_support(f_next, mask, self.grid)
                rel = l2_norm_on_support(f_next - f, mask, self.grid) / norm if norm > 0 else 0.0
                history.append(float(rel))
                f = f_next
                if not np.isfinite(rel) or (len(history) > 1 and rel > history[-2] and rel > self.fixed_point_tol):
                    raise FixedPointDivergenceError(history)
                if rel < self.fixed_point_tol:
                    break
        logger.info(f"源重建完成: {iterations} 次不动点迭代, 历史 {[f'{r:.2e}' for r in history]}")
        return SourceReconstruction(f_field=FieldOnGrid.real(self.grid, f), f_hat_samples=samples,
                                    history=history, iterations=iterations, warnings=warnings)

    def recover(self, data: FarFieldDataset, seeds: Optional[Sequence[int]] = None) -> SourceReconstruction:
        """门控 → 集合平均 → 重建"""
        self.gate()
        mean, _, _ = self.mean_table(data, seeds)
        return self.reconstruct(mean)

    def projection_stderr(self, per_seed: np.ndarray, eigenpairs: Sequence[EigenPair],
                          n_batches: int = 32) -> np.ndarray:
        """
        本征投影的传播标准误差 (批均值法)

        每批种子的平均远场各自重建, 投影到本征向量上, 取批间标准差 / √批数。
        """
        batches = batch_means(per_seed, n_batches)
        projections = np.array([
            [mode.value for mode in eigen_residual_check(self.reconstruct(b).f_field, None, eigenpairs,
                                                         self.scene.domain_mask)]
            for b in batches
        ])
        _, stderr = mean_stderr(projections)
        return np.asarray(stderr)


# ============================================
# Dirichlet 本征系统
# ============================================

def dirichlet_eigenpairs(V: FieldOnGrid, mask: np.ndarray, count: int,
                         v_limit: Optional[float] = None) -> List[EigenPair]:
    """
    −Δ_h − V 在掩码区域上的最低 count 个 Dirichlet 本征对

    Args:
        V: 实势场
        mask: 区域 D (掩码外取零边值)
        count: 本征对个数 (≥ 1)
        v_limit: ‖V‖∞ 门限 (默认取配置)

    Returns:
        按本征值递增排列的 EigenPair, 本征向量在离散 L²(D) 中单位正交

    Raises:
        SmallnessGateError: ‖V‖∞ 超过门限或最低本征值非正
        EigenSolverError: ARPACK 未收敛
    """
    from config import SourceConfig
    threshold = SourceConfig.V_LIMIT if v_limit is None else v_limit
    if count < 1:
        raise ValueError("count 必须 ≥ 1")
    grid = V.grid
    mask = np.asarray(mask, dtype=bool)
    v_values = np.asarray(V.values, dtype=np.float64)
    v_norm = float(np.max(np.abs(v_values)))
    if v_norm > threshold:
        raise SmallnessGateError(v_norm, threshold)

    L, idx = masked_laplacian_matrix(grid, mask)
    size = idx.size
    if count >= size:
        raise ValueError(f"count = {count} 超过区域自由度 {size}")
    A = (-L - sparse.diags(v_values.ravel()[idx])).tocsc()
    try:
        eigenvalues, vectors = eigsh(A, k=count, sigma=0.0, which='LM')
    except (ArpackNoConvergence, ArpackError) as exc:
        raise EigenSolverError(f"本征求解未收敛: {exc}") from exc

    order = np.argsort(eigenvalues)
    eigenvalues = eigenvalues[order]
    vectors = vectors[:, order]
    if eigenvalues[0] <= 0:
        raise SmallnessGateError(v_norm, threshold, f"最低本征值 {eigenvalues[0]:.4g} ≤ 0")

    scale = 1.0 / np.sqrt(grid.voxel_volume)
    pairs = []
    for lam, vec in zip(eigenvalues, vectors.T):
        vec = vec if vec[np.argmax(np.abs(vec))] > 0 else -vec
        residual = float(np.linalg.norm(A @ vec - lam * vec) / abs(lam))
        full = np.zeros(grid.size)
        full[idx] = vec * scale
        pairs.append(EigenPair(eigenvalue=float(lam), v=FieldOnGrid.real(grid, full.reshape(grid.shape)),
                               residual=residual))
    logger.debug(f"Dirichlet 本征值: {[round(p.eigenvalue, 4) for p in pairs]}")
    return pairs


class EigenProjection(BaseModel):
    """一个本征投影 ⟨f₁ − f₂, v_m⟩"""
    model_config = ConfigDict(frozen=True)

    mode: int
    eigenvalue: float
    value: float


def eigen_residual_check(f_rec: FieldOnGrid, f_ref: Optional[FieldOnGrid], eigenpairs: Sequence[EigenPair],
                         mask: Optional[np.ndarray] = None) -> List[EigenProjection]:
    """
    ⟨f₁ − f₂, v_m⟩_{L²(D)}

    Args:
        f_rec: 重建场
        f_ref: 真值或第二次重建 (None 表示只投影 f_rec)
        eigenpairs: 本征对
        mask: 区域 D (默认整个网格; 本征向量在 D 外为零)

    Returns:
        每个本征对一个 EigenProjection
    """
    diff = np.asarray(f_rec.values, dtype=np.float64)
    if f_ref is not None:
        diff = diff - field_values(f_ref, f_rec.grid)
    out = []
    for m, pair in enumerate(eigenpairs, start=1):
        value = inner_product(diff, pair.v.values, f_rec.grid, mask).real
        out.append(EigenProjection(mode=m, eigenvalue=pair.eigenvalue, value=float(value)))
    return out


def eigen_completeness(f: FieldOnGrid, eigenpairs: Sequence[EigenPair], mask: np.ndarray) -> pd.DataFrame:
    """
    前 m 个本征投影重建 f 的 L²(D) 误差 (随 m 单调不增)

    Returns:
        表 [m, error, relative_error]
    """
    grid = f.grid
    values = np.where(mask, np.asarray(f.values, dtype=np.float64), 0.0)
    norm = l2_norm_on_support(values, mask, grid)
    partial = np.zeros(grid.shape)
    rows = []
    for m, pair in enumerate(eigenpairs, start=1):
        coeff = inner_product(values, pair.v.values, grid, mask).real
        partial = partial + coeff * pair.v.values
        err = l2_norm_on_support(values - partial, mask, grid)
        rows.append({'m': m, 'error': err, 'relative_error': err / norm if norm > 0 else 0.0})
    return pd.DataFrame(rows, columns=['m', 'error', 'relative_error'])


def eigen_residual_table(projections: Sequence[EigenProjection],
                         stderr: Optional[Sequence[float]] = None) -> pd.DataFrame:
    """本征残差表 [mode, eigenvalue, projection, stderr, z]"""
    rows = []
    for i, proj in enumerate(projections):
        se = float(stderr[i]) if stderr is not None else float('nan')
        z = abs(proj.value) / se if stderr is not None and se > 0 else float('nan')
        rows.append({'mode': proj.mode, 'eigenvalue': proj.eigenvalue, 'projection': proj.value,
                     'stderr': se, 'z': z})
    return pd.DataFrame(rows, columns=['mode', 'eigenvalue', 'projection', 'stderr', 'z'])
