"""
Green 函数与预解算子 (Greens / Resolvent)

负责:
1. 出射基本解 Φ_k(r) = e^{ikr}/(4πr) 及奇异体素的等体积球平均
2. 预解算子 R_k φ = Σ_y Φ_k(x−y) φ(y) h³ (倍增网格循环卷积 / 直接求和)
3. ‖R_k V‖ 的幂迭代估计 (收缩门控)
"""

import logging
import threading
from collections import OrderedDict
from pathlib import Path
from typing import Literal, Optional, Tuple, Union

import numpy as np
from scipy import fft as sfft
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.domain_fields import FieldOnGrid, GridSpec, field_values
from src.exceptions import GridMismatchError
from src.volume_io import read_volume, write_volume

logger = logging.getLogger(__name__)

ResolventMethod = Literal['fast-convolution', 'direct-sum']


class WaveNumber(BaseModel):
    """波数 k = √E"""
    model_config = ConfigDict(frozen=True)

    k: float = Field(..., gt=0.0, description="波数 (长度倒数)")

    @field_validator('k')
    @classmethod
    def _finite(cls, v):
        if not np.isfinite(v):
            raise ValueError("k 必须有限")
        return float(v)


def as_wavenumber(k: Union[float, WaveNumber]) -> float:
    """接受 float 或 WaveNumber, 返回校验过的 float"""
    if isinstance(k, WaveNumber):
        return k.k
    return WaveNumber(k=k).k


def green_eval(k: Union[float, WaveNumber], r: Union[float, np.ndarray]) -> Union[complex, np.ndarray]:
    """
    出射基本解 e^{ikr}/(4πr)

    Args:
        k: 波数 (允许 k = 0 作为静态极限)
        r: 距离 (必须 > 0)

    Returns:
        复数或复数组
    """
    k = k.k if isinstance(k, WaveNumber) else float(k)
    if not np.isfinite(k) or k < 0:
        raise ValueError(f"k 必须是非负有限数: {k}")
    r_arr = np.asarray(r, dtype=np.float64)
    if np.any(r_arr <= 0) or not np.all(np.isfinite(r_arr)):
        raise ValueError("green_eval 要求 r > 0 (r = 0 请使用 self_cell_average)")
    value = np.exp(1j * k * r_arr) / (4.0 * np.pi * r_arr)
    return complex(value) if value.ndim == 0 else value


def equal_volume_radius(voxel_volume: float) -> float:
    """与体素等体积的球半径"""
    return (3.0 * voxel_volume / (4.0 * np.pi)) ** (1.0 / 3.0)


def self_cell_average(k: Union[float, WaveNumber], voxel_volume: float) -> complex:
    """
    Φ_k 在等体积球上的平均值

    ∫_{|y|<a} e^{ik|y|}/(4π|y|) dy = ∫₀^a r e^{ikr} dr = (e^{ika}(1 − ika) − 1)/k²，
    ka 很小时改用级数 a²/2 + ika³/3 − k²a⁴/8 以避免相消。

    Args:
        k: 波数 (≥ 0)
        voxel_volume: 体素体积 (> 0)

    Returns:
        平均值 (积分除以体素体积)
    """
    k = k.k if isinstance(k, WaveNumber) else float(k)
    if voxel_volume <= 0:
        raise ValueError("voxel_volume 必须 > 0")
    a = equal_volume_radius(voxel_volume)
    ka = k * a
    if ka < 1e-3:
        integral = a ** 2 / 2.0 + 1j * k * a ** 3 / 3.0 - k ** 2 * a ** 4 / 8.0
    else:
        integral = (np.exp(1j * ka) * (1.0 - 1j * ka) - 1.0) / k ** 2
    return complex(integral / voxel_volume)


def build_kernel_table(grid: GridSpec, k: float) -> np.ndarray:
    """
    倍增网格 (2n₁, 2n₂, 2n₃) 上的卷积核, 下标按循环位移解释

    Args:
        grid: 网格
        k: 波数

    Returns:
        复数核表, 原点处为自单元平均
    """
    h = grid.h
    disp = []
    for a in range(3):
        m = np.arange(2 * grid.n[a], dtype=np.float64)
        disp.append(h[a] * np.where(m < grid.n[a], m, m - 2 * grid.n[a]))
    X, Y, Z = np.meshgrid(*disp, indexing='ij', sparse=True)
    r = np.sqrt(X ** 2 + Y ** 2 + Z ** 2)
    r[0, 0, 0] = 1.0
    table = np.exp(1j * k * r) / (4.0 * np.pi * r)
    table[0, 0, 0] = self_cell_average(k, grid.voxel_volume)
    return table


# 进程内核表缓存 {(grid digest, k): table}，LRU
_KERNEL_CACHE: "OrderedDict[Tuple[str, float], np.ndarray]" = OrderedDict()
_KERNEL_CACHE_SIZE = 8
_KERNEL_LOCK = threading.Lock()


def _cache_paths(cache_dir: Path, grid: GridSpec, k: float) -> Tuple[Path, Path]:
    stem = f"kernel_{grid.digest()[:16]}_k{k!r}"
    return cache_dir / f"{stem}.re.f64", cache_dir / f"{stem}.im.f64"


def load_kernel_table(grid: GridSpec, k: float, cache_dir: Optional[Union[str, Path]] = None) -> np.ndarray:
    """从进程缓存、磁盘缓存或现场计算获得核表"""
    key = (grid.digest(), k)
    with _KERNEL_LOCK:
        cached = _KERNEL_CACHE.get(key)
        if cached is not None:
            _KERNEL_CACHE.move_to_end(key)
    if cached is not None:
        return cached

    doubled = tuple(2 * n for n in grid.n)
    table = None
    if cache_dir:
        re_path, im_path = _cache_paths(Path(cache_dir), grid, k)
        if re_path.exists() and im_path.exists():
            try:
                table = read_volume(re_path, doubled) + 1j * read_volume(im_path, doubled)
                logger.debug(f"从磁盘缓存加载核表 k={k:g}")
            except ValueError as e:
                logger.warning(f"⚠️  核表缓存损坏, 重新计算: {e}")
                table = None
    if table is None:
        table = build_kernel_table(grid, k)
        if cache_dir:
            re_path, im_path = _cache_paths(Path(cache_dir), grid, k)
            write_volume(re_path, table.real)
            write_volume(im_path, table.imag)

    table.flags.writeable = False
    with _KERNEL_LOCK:
        _KERNEL_CACHE[key] = table
        while len(_KERNEL_CACHE) > _KERNEL_CACHE_SIZE:
            _KERNEL_CACHE.popitem(last=False)
    return table


def clear_kernel_cache():
    """清空进程内核表缓存"""
    with _KERNEL_LOCK:
        _KERNEL_CACHE.clear()


class ResolventOperator:
    """
    预解算子 R_k

    核表在构造时计算并只读，apply 为纯函数，可被多个线程同时调用。
    """

    def __init__(self, grid: GridSpec, k: Union[float, WaveNumber], method: ResolventMethod = 'fast-convolution',
                 cache_dir: Optional[Union[str, Path]] = None):
        """
        初始化预解算子

        Args:
            grid: 网格
            k: 波数
            method: fast-convolution 或 direct-sum
            cache_dir: 核表磁盘缓存目录 (可选)
        """
        if method not in ('fast-convolution', 'direct-sum'):
            raise ValueError(f"未知的预解算子方法: {method}")
        self.grid = grid
        self.k = as_wavenumber(k)
        self.method = method
        self.kernel_table = load_kernel_table(grid, self.k, cache_dir)
        self._kernel_hat = None
        if method == 'fast-convolution':
            kernel_hat = sfft.fftn(self.kernel_table)
            kernel_hat.flags.writeable = False
            self._kernel_hat = kernel_hat

        logger.debug(f"预解算子就绪 (k={self.k:g}, n={grid.n}, method={method})")

    @property
    def wavenumber(self) -> WaveNumber:
        return WaveNumber(k=self.k)

    def kernel(self, offset: Tuple[int, int, int]) -> complex:
        """位移 (体素数) 对应的核值"""
        idx = tuple(int(o) % (2 * n) for o, n in zip(offset, self.grid.n))
        return complex(self.kernel_table[idx])

    def apply(self, values: np.ndarray) -> np.ndarray:
        """
        计算 Σ_y K(x−y) φ(y) h³

        Args:
            values: 形状 grid.shape 的数组

        Returns:
            复数组 (同形状)
        """
        values = np.asarray(values)
        if values.shape != self.grid.shape:
            raise GridMismatchError(f"输入形状 {values.shape} ≠ 网格形状 {self.grid.shape}")
        if not np.any(values):
            return np.zeros(self.grid.shape, dtype=np.complex128)
        if self.method == 'fast-convolution':
            out = self._apply_fft(values)
        else:
            out = self._apply_direct(values)
        return out * self.grid.voxel_volume

    def apply_adjoint(self, values: np.ndarray) -> np.ndarray:
        """R^H ψ = conj(R conj ψ)，核对称"""
        return np.conj(self.apply(np.conj(np.asarray(values))))

    def _apply_fft(self, values: np.ndarray) -> np.ndarray:
        n1, n2, n3 = self.grid.n
        spectrum = sfft.fftn(values.astype(np.complex128), s=self.kernel_table.shape)
        full = sfft.ifftn(self._kernel_hat * spectrum)
        return full[:n1, :n2, :n3]

    def _apply_direct(self, values: np.ndarray) -> np.ndarray:
        n = self.grid.n
        out = np.zeros(n, dtype=np.complex128)
        ranges = [np.arange(m) for m in n]
        for src in np.argwhere(values != 0):
            rows = [(ranges[a] - src[a]) % (2 * n[a]) for a in range(3)]
            out += values[tuple(src)] * self.kernel_table[np.ix_(*rows)]
        return out

    def dense_matrix(self) -> np.ndarray:
        """稠密矩阵 (N×N, C 顺序展平, 含 h³)，仅用于小网格校验"""
        n = self.grid.n
        idx = np.indices(n).reshape(3, -1)
        diff = [(idx[a][:, None] - idx[a][None, :]) % (2 * n[a]) for a in range(3)]
        return self.kernel_table[diff[0], diff[1], diff[2]] * self.grid.voxel_volume


def apply_resolvent(R: ResolventOperator, field: FieldOnGrid) -> FieldOnGrid:
    """
    对网格场应用 R_k

    Args:
        R: 预解算子
        field: 输入场 (网格必须一致)

    Returns:
        复数场
    """
    values = field_values(field, R.grid)
    return FieldOnGrid.complex(R.grid, R.apply(values))


class ContractionReport(BaseModel):
    """‖R_k V‖_{L²(D)} 的估计结果"""
    model_config = ConfigDict(frozen=True)

    k: float = Field(..., gt=0.0, description="波数")
    norm_estimate: float = Field(..., ge=0.0, description="算子范数估计")
    iterations: int = Field(..., ge=0, description="幂迭代次数")
    trials: int = Field(1, ge=1, description="随机起点数")
    converged: bool = Field(..., description="norm_estimate < 1")


def estimate_contraction(R: ResolventOperator, V: np.ndarray, trials: int = 2, seed: int = 0,
                         iterations: int = 12, mask: Optional[np.ndarray] = None) -> ContractionReport:
    """
    幂迭代估计 φ ↦ R_k(Vφ) 在 L²(D) 上的算子范数

    对 A = P_D R V 迭代 A^H A，取各随机起点的 ‖A x‖/‖x‖ 最大值。

    Args:
        R: 预解算子
        V: 势场 (网格形状)
        trials: 随机起点数 (≥ 1)
        seed: 随机种子 (结果由种子决定)
        iterations: 每个起点的迭代次数
        mask: 输出范数的区域 D (默认整个网格)

    Returns:
        ContractionReport
    """
    if trials < 1:
        raise ValueError("trials 必须 ≥ 1")
    V = field_values(V, R.grid).astype(np.float64)
    out_mask = np.ones(R.grid.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    support = V != 0
    if not np.any(support):
        return ContractionReport(k=R.k, norm_estimate=0.0, iterations=0, trials=trials, converged=True)

    def forward(x):
        return np.where(out_mask, R.apply(V * x), 0.0)

    def adjoint(y):
        return V * R.apply_adjoint(np.where(out_mask, y, 0.0))

    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(trials):
        x = np.where(support, rng.standard_normal(R.grid.shape) + 1j * rng.standard_normal(R.grid.shape), 0.0)
        x /= np.linalg.norm(x)
        estimate = 0.0
        for _ in range(iterations):
            y = forward(x)
            estimate = float(np.linalg.norm(y))
            z = adjoint(y)
            z_norm = np.linalg.norm(z)
            if z_norm == 0:
                break
            x = z / z_norm
        best = max(best, float(np.linalg.norm(forward(x))), estimate)

    report = ContractionReport(k=R.k, norm_estimate=best, iterations=iterations, trials=trials,
                               converged=best < 1.0)
    logger.debug(f"收缩估计 k={R.k:g}: ‖R_k V‖ ≈ {best:.4e}")
    return report


def create_resolvent_operator(grid: GridSpec, k: Union[float, WaveNumber],
                              method: Optional[str] = None) -> ResolventOperator:
    """
    根据配置创建预解算子

    Returns:
        ResolventOperator实例
    """
    from config import SolverConfig
    return ResolventOperator(
        grid, k,
        method=method or SolverConfig.RESOLVENT_METHOD,
        cache_dir=SolverConfig.KERNEL_CACHE_DIR or None,
    )
