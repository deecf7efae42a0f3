"""
正向求解器 (Forward Solver)

负责:
1. Lippmann–Schwinger 方程 (I − R_k V) u^sc = αR_k V u^i − R_k f − R_k(σẆ) 的 Neumann 级数解
2. 远场模式 u∞ = (1/4π) Σ_y e^{−ikx̂·y} (I − VR_k)^{−1}(αVu^i − f − σẆ) h³
3. Born 分解 F₀ / F₁、确定性期望远场、远场点值
"""

import logging
import threading
from collections import OrderedDict
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.domain_fields import FieldOnGrid, MediumScene, l2_norm_on_support, riemann_quadrature, riemann_quadrature_many
from src.exceptions import BelowThresholdWavenumberError, SeriesTruncationError
from src.greens_resolvent import (
    ContractionReport, ResolventOperator, as_wavenumber, estimate_contraction, green_eval,
)
from src.white_noise import NoiseRealization, noise_density, pair_plane_wave

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-12
MAX_KH = 1.0
RESOLUTION_FLAG = 'resolution:kh>1'


def unit_vector(v, name: str = "方向") -> Tuple[float, float, float]:
    """校验单位向量 (|v| = 1 误差 ≤ 1e-12)"""
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.size != 3 or not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} 必须是有限的三维向量: {v}")
    if abs(np.linalg.norm(arr) - 1.0) > UNIT_TOL:
        raise ValueError(f"{name} 不是单位向量: |{name}| = {np.linalg.norm(arr):.15f}")
    return (float(arr[0]), float(arr[1]), float(arr[2]))


def normalize(v) -> Tuple[float, float, float]:
    """归一化为单位向量"""
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    norm = np.linalg.norm(arr)
    if arr.size != 3 or norm == 0 or not np.isfinite(norm):
        raise ValueError(f"无法归一化: {v}")
    arr = arr / norm
    return (float(arr[0]), float(arr[1]), float(arr[2]))


class IncidentConfig(BaseModel):
    """入射配置: α = 0 被动, α = 1 主动 (平面波 e^{ik d·x})"""
    model_config = ConfigDict(frozen=True)

    alpha: Literal[0, 1] = Field(0, description="入射开关")
    d: Optional[Tuple[float, float, float]] = Field(None, description="入射方向")

    @model_validator(mode='after')
    def _check_direction(self):
        if self.alpha == 1:
            if self.d is None:
                raise ValueError("主动配置必须给出入射方向 d")
            unit_vector(self.d, "d")
        return self

    @classmethod
    def passive(cls) -> "IncidentConfig":
        return cls(alpha=0)

    @classmethod
    def active(cls, d) -> "IncidentConfig":
        return cls(alpha=1, d=unit_vector(d, "d"))


class FarFieldRecord(BaseModel):
    """一条远场样本 u∞(x̂, k, d, seed)"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    xhat: Tuple[float, float, float]
    k: float = Field(..., gt=0.0)
    d: Optional[Tuple[float, float, float]] = None
    seed: Optional[int] = Field(None, description="None 表示无噪声 (确定性)")
    value: complex

    @field_validator('xhat')
    @classmethod
    def _unit_xhat(cls, v):
        return unit_vector(v, "xhat")

    @field_validator('d')
    @classmethod
    def _unit_d(cls, v):
        return None if v is None else unit_vector(v, "d")

    @field_validator('value', mode='before')
    @classmethod
    def _finite_value(cls, v):
        v = complex(v)
        if not (np.isfinite(v.real) and np.isfinite(v.imag)):
            raise ValueError("远场值必须有限")
        return v


class ForwardSolveResult(BaseModel):
    """solve_mild 的结果"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    u_sc: FieldOnGrid
    series_terms: int = Field(..., ge=1)
    residual: float = Field(..., ge=0.0, description="最后一项的相对 L²(D) 更新")
    contraction: ContractionReport
    history: List[float] = Field(default_factory=list)


class ForwardSolver:
    """
    绑定到单个场景的正向求解器

    按 k 缓存预解算子与收缩报告 (LRU)，对不同 (k, x̂, d, seed) 的求值线程安全。
    """

    def __init__(self, scene: MediumScene, tol: float = 1e-8, max_terms: int = 25,
                 method: str = 'fast-convolution', contraction_trials: int = 2,
                 contraction_iterations: int = 12, contraction_seed: int = 0,
                 cache_dir: Optional[str] = None, cache_size: int = 8):
        """
        初始化正向求解器

        Args:
            scene: 介质场景
            tol: 级数相对更新容差
            max_terms: 最大级数项数
            method: 预解算子方法
            contraction_trials: 收缩估计随机起点数
            contraction_iterations: 收缩估计迭代次数
            contraction_seed: 收缩估计种子
            cache_dir: 核表磁盘缓存
            cache_size: 每种缓存保留的 k 个数
        """
        if tol <= 0:
            raise ValueError("tol 必须 > 0")
        if max_terms < 1:
            raise ValueError("max_terms 必须 ≥ 1")
        self.scene = scene
        self.grid = scene.grid
        self.tol = float(tol)
        self.max_terms = int(max_terms)
        self.method = method
        self.contraction_trials = contraction_trials
        self.contraction_iterations = contraction_iterations
        self.contraction_seed = contraction_seed
        self.cache_dir = cache_dir
        self.cache_size = cache_size

        self._domain = scene.domain_mask
        self._V = np.asarray(scene.V, dtype=np.float64)
        self._lock = threading.Lock()
        self._resolvents: "OrderedDict[float, ResolventOperator]" = OrderedDict()
        self._contractions: Dict[float, ContractionReport] = {}
        self._source_parts: "OrderedDict[float, np.ndarray]" = OrderedDict()
        self._under_resolved: Dict[float, float] = {}

        logger.debug(f"正向求解器初始化 (scene={scene.name or scene.digest()[:12]}, tol={tol:g}, max_terms={max_terms})")

    # ------------------------------------------------------------------
    # 缓存
    # ------------------------------------------------------------------

    def config_snapshot(self) -> Dict[str, object]:
        """写入数据集的求解器设置"""
        return {
            'tol': self.tol,
            'max_terms': self.max_terms,
            'method': self.method,
            'contraction_trials': self.contraction_trials,
            'contraction_iterations': self.contraction_iterations,
            'contraction_seed': self.contraction_seed,
        }

    def _lru_get(self, cache: OrderedDict, key):
        with self._lock:
            value = cache.get(key)
            if value is not None:
                cache.move_to_end(key)
            return value

    def _lru_put(self, cache: OrderedDict, key, value):
        with self._lock:
            cache[key] = value
            while len(cache) > self.cache_size:
                cache.popitem(last=False)

    def resolvent(self, k: float) -> ResolventOperator:
        """k 对应的预解算子"""
        k = as_wavenumber(k)
        R = self._lru_get(self._resolvents, k)
        if R is None:
            R = ResolventOperator(self.grid, k, method=self.method, cache_dir=self.cache_dir)
            self._lru_put(self._resolvents, k, R)
        return R

    def contraction(self, k: float) -> ContractionReport:
        """k 对应的收缩报告 (缓存)"""
        k = as_wavenumber(k)
        with self._lock:
            report = self._contractions.get(k)
        if report is not None:
            return report
        if not self.scene.has_potential:
            report = ContractionReport(k=k, norm_estimate=0.0, iterations=0,
                                       trials=self.contraction_trials, converged=True)
        else:
            report = estimate_contraction(
                self.resolvent(k), self._V,
                trials=self.contraction_trials,
                seed=self.contraction_seed,
                iterations=self.contraction_iterations,
                mask=self._domain,
            )
        with self._lock:
            self._contractions[k] = report
        return report

    def check_resolution(self, k: float) -> bool:
        """
        远场求积的相位分辨率 k·max(h) ≤ 1

        超出时记录该 k 并警告一次, 求解照常进行。
        """
        k = as_wavenumber(k)
        kh = float(k * np.max(self.grid.h))
        if kh <= MAX_KH:
            return True
        with self._lock:
            first = k not in self._under_resolved
            self._under_resolved[k] = kh
        if first:
            logger.warning(f"⚠️ k={k:g} 时 kh={kh:.2f} > {MAX_KH:g}, 网格对远场相位分辨不足")
        return False

    def resolution_flags(self) -> List[str]:
        """已求值的 k 中有分辨不足时返回 [RESOLUTION_FLAG]"""
        with self._lock:
            return [RESOLUTION_FLAG] if self._under_resolved else []

    def gate(self, k: float) -> ContractionReport:
        """收缩门控: norm ≥ 1 时拒绝求解"""
        self.check_resolution(k)
        report = self.contraction(k)
        if not report.converged:
            logger.error(f"❌ k={report.k:g} 收缩门控失败 (‖R_k V‖ ≈ {report.norm_estimate:.3f})")
            raise BelowThresholdWavenumberError(report)
        return report

    # ------------------------------------------------------------------
    # 级数
    # ------------------------------------------------------------------

    def _domain_norm(self, values: np.ndarray) -> float:
        return l2_norm_on_support(values, self._domain, self.grid)

    def _neumann(self, k: float, first: np.ndarray, step: Callable[[np.ndarray], np.ndarray]
                 ) -> Tuple[np.ndarray, int, float, List[float]]:
        """
        Σ_{j≥0} step^j(first)，相对 L²(D) 更新 < tol 时停止

        Returns:
            (和, 项数, 最后相对更新, 相对更新历史)
        """
        total = np.array(first, dtype=np.complex128)
        if not self.scene.has_potential or not np.any(total):
            return total, 1, 0.0, []
        term = total
        history: List[float] = []
        for j in range(1, self.max_terms):
            term = step(term)
            total_norm = self._domain_norm(total)
            term_norm = self._domain_norm(term)
            rel = term_norm / total_norm if total_norm > 0 else (0.0 if term_norm == 0 else np.inf)
            history.append(float(rel))
            total = total + term
            if rel < self.tol:
                return total, j + 1, float(rel), history
        raise SeriesTruncationError(k, self.max_terms, history)

    def _tail(self, k: float, density: np.ndarray) -> np.ndarray:
        """Σ_{j≥1} (V R_k)^j s"""
        if not self.scene.has_potential or not np.any(density):
            return np.zeros(self.grid.shape, dtype=np.complex128)
        R = self.resolvent(k)
        V = self._V
        first = V * R.apply(density)
        total, _, _, _ = self._neumann(k, first, lambda t: V * R.apply(t))
        return total

    # ------------------------------------------------------------------
    # 体密度
    # ------------------------------------------------------------------

    def plane_wave(self, k: float, d) -> np.ndarray:
        """u^i = e^{ik d·x} 在体素中心"""
        X, Y, Z = self.grid.coordinates()
        d = np.asarray(d, dtype=np.float64)
        return np.exp(1j * k * (d[0] * X + d[1] * Y + d[2] * Z))

    def _source_part(self, k: float) -> np.ndarray:
        """−f + T(−f)，按 k 缓存"""
        cached = self._lru_get(self._source_parts, k)
        if cached is not None:
            return cached
        s = -np.asarray(self.scene.f, dtype=np.complex128)
        part = s + self._tail(k, s)
        part.flags.writeable = False
        self._lru_put(self._source_parts, k, part)
        return part

    def _incident_part(self, k: float, d) -> np.ndarray:
        """V u^i + T(V u^i)"""
        s = self._V * self.plane_wave(k, d)
        return s + self._tail(k, s)

    def _noise_tail(self, k: float, noise: Optional[NoiseRealization]) -> Optional[np.ndarray]:
        """T(−σW/h³)"""
        if noise is None or not self.scene.has_noise:
            return None
        self.grid.require_same(noise.grid, "场景与噪声")
        return self._tail(k, -noise_density(self.scene.sigma, noise))

    # ------------------------------------------------------------------
    # 公开接口
    # ------------------------------------------------------------------

    def solve_mild(self, k: float, inc: IncidentConfig, noise: Optional[NoiseRealization] = None
                   ) -> ForwardSolveResult:
        """
        网格上的散射场 u^sc

        Args:
            k: 波数
            inc: 入射配置
            noise: 噪声实现 (None 表示不含随机项)

        Returns:
            ForwardSolveResult
        """
        k = as_wavenumber(k)
        report = self.gate(k)
        density = -np.asarray(self.scene.f, dtype=np.complex128)
        if inc.alpha == 1:
            density = density + self._V * self.plane_wave(k, inc.d)
        if noise is not None:
            self.grid.require_same(noise.grid, "场景与噪声")
            density = density - noise_density(self.scene.sigma, noise)

        if not np.any(density):
            u = np.zeros(self.grid.shape, dtype=np.complex128)
            return ForwardSolveResult(u_sc=FieldOnGrid.complex(self.grid, u), series_terms=1,
                                      residual=0.0, contraction=report)

        R = self.resolvent(k)
        V = self._V
        total, terms, residual, history = self._neumann(k, R.apply(density), lambda t: R.apply(V * t))
        logger.debug(f"solve_mild k={k:g}: {terms} 项, 残差 {residual:.2e}")
        return ForwardSolveResult(
            u_sc=FieldOnGrid.complex(self.grid, total),
            series_terms=terms,
            residual=residual,
            contraction=report,
            history=history,
        )

    def evaluate(self, k: float, items: Sequence[Tuple[Sequence[float], Optional[Sequence[float]]]],
                 noise: Optional[NoiseRealization] = None) -> List[complex]:
        """
        同一 (k, 噪声) 下批量求远场

        Args:
            k: 波数
            items: (x̂, d) 列表, d 为 None 表示被动
            noise: 噪声实现

        Returns:
            与 items 同序的远场值
        """
        k = as_wavenumber(k)
        self.gate(k)
        source = self._source_part(k) if self.scene.has_source else None
        noise_tail = self._noise_tail(k, noise)
        incident: Dict[Tuple[float, float, float], np.ndarray] = {}
        sigma = self.scene.sigma

        values = []
        for xhat, d in items:
            q = k * np.asarray(xhat, dtype=np.float64)
            v_det = riemann_quadrature(self.grid, source, q) if source is not None else 0j
            v_noise = 0j
            if noise is not None and self.scene.has_noise:
                v_noise = riemann_quadrature(self.grid, noise_tail, q) - pair_plane_wave(noise, sigma, q)
            v_inc = 0j
            if d is not None and self.scene.has_potential:
                key = tuple(float(c) for c in d)
                if key not in incident:
                    incident[key] = self._incident_part(k, key)
                v_inc = riemann_quadrature(self.grid, incident[key], q)
            values.append(((v_det + v_noise) + v_inc) / (4.0 * np.pi))
        return values

    def far_field(self, k: float, xhat, inc: IncidentConfig, noise: Optional[NoiseRealization] = None) -> complex:
        """u∞(x̂, k, d, ω)"""
        xhat = unit_vector(xhat, "xhat")
        d = inc.d if inc.alpha == 1 else None
        return self.evaluate(k, [(xhat, d)], noise)[0]

    def far_field_many(self, k: float, xhats, inc: IncidentConfig,
                       noise: Optional[NoiseRealization] = None) -> np.ndarray:
        """多个观测方向的 u∞"""
        d = inc.d if inc.alpha == 1 else None
        items = [(unit_vector(x, "xhat"), d) for x in np.atleast_2d(xhats)]
        return np.asarray(self.evaluate(k, items, noise), dtype=np.complex128)

    def expected_far_field(self, k: float, xhat) -> complex:
        """无噪声、无入射的确定性远场 E u∞ (只含 f 项)"""
        return self.far_field(k, xhat, IncidentConfig.passive(), None)

    def incident_far_field(self, k: float, xhat, d) -> complex:
        """只含入射项 (V u^i) 的远场贡献"""
        k = as_wavenumber(k)
        self.gate(k)
        if not self.scene.has_potential:
            return 0j
        q = k * np.asarray(unit_vector(xhat, "xhat"))
        return riemann_quadrature(self.grid, self._incident_part(k, unit_vector(d, "d")), q) / (4.0 * np.pi)

    def source_tail_far_field(self, k: float, f_values: np.ndarray, xhats) -> np.ndarray:
        """
        任意源 f 的多次散射远场 −(1/4π) Σ_y e^{−ikx̂·y} Σ_{j≥1}(VR_k)^j f h³

        Args:
            k: 波数
            f_values: 网格上的源
            xhats: (M, 3) 观测方向

        Returns:
            (M,) 复数组; V ≡ 0 时为零
        """
        k = as_wavenumber(k)
        self.gate(k)
        xhats = np.atleast_2d(np.asarray(xhats, dtype=np.float64))
        density = np.asarray(f_values, dtype=np.complex128)
        if density.shape != self.grid.shape:
            raise ValueError(f"源形状 {density.shape} ≠ 网格形状 {self.grid.shape}")
        if not self.scene.has_potential:
            return np.zeros(xhats.shape[0], dtype=np.complex128)
        tail = self._tail(k, density)
        return -riemann_quadrature_many(self.grid, tail, k * xhats) / (4.0 * np.pi)

    def born_components(self, k: float, xhat, noise: NoiseRealization, jmax: int) -> Tuple[complex, complex]:
        """
        F₀ = ⟨Ẇ, e^{−ikx̂·y}σ⟩, F₁ = Σ_{j=1..jmax} Σ_y e^{−ikx̂·y} (VR_k)^j(σẆ) h³

        Args:
            k: 波数
            xhat: 观测方向
            noise: 噪声实现
            jmax: F₁ 的截断项数 (不用容差)

        Returns:
            (F0, F1)
        """
        k = as_wavenumber(k)
        self.gate(k)
        self.grid.require_same(noise.grid, "场景与噪声")
        q = k * np.asarray(unit_vector(xhat, "xhat"))
        F0 = pair_plane_wave(noise, self.scene.sigma, q)
        if not self.scene.has_potential or not self.scene.has_noise or jmax < 1:
            return F0, 0j
        R = self.resolvent(k)
        V = self._V
        term = noise_density(self.scene.sigma, noise).astype(np.complex128)
        acc = np.zeros(self.grid.shape, dtype=np.complex128)
        for _ in range(jmax):
            term = V * R.apply(term)
            acc = acc + term
        return F0, riemann_quadrature(self.grid, acc, q)

    def scattered_field_at(self, k: float, points, inc: IncidentConfig,
                           noise: Optional[NoiseRealization] = None, chunk: int = 64) -> np.ndarray:
        """
        表示公式 u^sc(x) = Σ_y Φ_k(x, y) g(y) h³ 在任意网格外点求值

        Args:
            k: 波数
            points: (P, 3) 观测点 (不得与体素中心重合)
            inc: 入射配置
            noise: 噪声实现

        Returns:
            (P,) 复数组
        """
        k = as_wavenumber(k)
        self.gate(k)
        g = np.zeros(self.grid.shape, dtype=np.complex128)
        if self.scene.has_source:
            g = g + self._source_part(k)
        if noise is not None and self.scene.has_noise:
            g = g - noise_density(self.scene.sigma, noise) + self._noise_tail(k, noise)
        if inc.alpha == 1 and self.scene.has_potential:
            g = g + self._incident_part(k, inc.d)

        support = g != 0
        X, Y, Z = self.grid.coordinates()
        ys = np.stack([X[support], Y[support], Z[support]], axis=1)
        weights = g[support] * self.grid.voxel_volume
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.zeros(points.shape[0], dtype=np.complex128)
        for start in range(0, points.shape[0], chunk):
            block = points[start:start + chunk]
            r = np.linalg.norm(block[:, None, :] - ys[None, :, :], axis=2)
            out[start:start + chunk] = green_eval(k, r) @ weights
        return out


def create_forward_solver(scene: MediumScene, **overrides) -> ForwardSolver:
    """
    根据配置创建正向求解器

    Returns:
        ForwardSolver实例
    """
    from config import SolverConfig
    settings = {
        'tol': SolverConfig.TOL,
        'max_terms': SolverConfig.MAX_TERMS,
        'method': SolverConfig.RESOLVENT_METHOD,
        'contraction_trials': SolverConfig.CONTRACTION_TRIALS,
        'contraction_iterations': SolverConfig.CONTRACTION_ITERATIONS,
        'contraction_seed': SolverConfig.CONTRACTION_SEED,
        'cache_dir': SolverConfig.KERNEL_CACHE_DIR or None,
    }
    settings.update({key: value for key, value in overrides.items() if value is not None})
    return ForwardSolver(scene, **settings)


def solve_mild(scene: MediumScene, k: float, inc: IncidentConfig, noise: Optional[NoiseRealization] = None,
               tol: Optional[float] = None, max_terms: Optional[int] = None) -> ForwardSolveResult:
    """单次 solve_mild (内部创建求解器)"""
    return create_forward_solver(scene, tol=tol, max_terms=max_terms).solve_mild(k, inc, noise)


def far_field(scene: MediumScene, k: float, xhat, inc: IncidentConfig,
              noise: Optional[NoiseRealization] = None, tol: Optional[float] = None) -> complex:
    """单次 far_field (内部创建求解器)"""
    return create_forward_solver(scene, tol=tol).far_field(k, xhat, inc, noise)


def born_components(scene: MediumScene, k: float, xhat, noise: NoiseRealization, jmax: int) -> Tuple[complex, complex]:
    """单次 born_components (内部创建求解器)"""
    return create_forward_solver(scene).born_components(k, xhat, noise, jmax)
