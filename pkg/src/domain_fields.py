"""
计算区域与网格场 (Domain Fields)

负责:
1. 规则网格 GridSpec 与网格场 FieldOnGrid
2. 介质场景 MediumScene (σ, V, f 及支撑掩码)
3. Fourier 变换约定 φ̂(ξ) = (2π)^{-3/2} ∫ e^{-ix·ξ} φ dx 的 Riemann 和实现
4. 加权范数、掩码 L² 范数、7 点离散 Laplace
5. 场景文件读写
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.exceptions import ChecksumMismatchError, GridMismatchError
from src.volume_io import (
    atomic_write_text, dumps_canonical, read_volume, sha256_bytes, volume_bytes, write_volume,
)

logger = logging.getLogger(__name__)

# φ̂ 的归一化常数，恢复公式中的 4√(2π) 与 √(2/π) 依赖于它
FOURIER_NORMALIZATION = (2.0 * np.pi) ** -1.5

# 支撑集到网格边界的最少空体素层数
SUPPORT_PADDING = 2

SCENE_FORMAT_VERSION = 1


def _vec3(v: Any, name: str) -> Tuple[float, float, float]:
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.size != 3:
        raise ValueError(f"{name} 必须是三维向量")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} 含非有限值: {arr}")
    return (float(arr[0]), float(arr[1]), float(arr[2]))


def as_frequency(p: Any) -> np.ndarray:
    """把频率向量规范为 float64 (3,)，拒绝非有限值"""
    arr = np.asarray(p, dtype=np.float64).reshape(-1)
    if arr.size != 3:
        raise ValueError(f"频率必须是三维向量, 实际长度 {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"频率含非有限值: {arr}")
    return arr


class GridSpec(BaseModel):
    """规则体素网格 (体素中心 = origin + (i + ½)h)"""
    model_config = ConfigDict(frozen=True)

    origin: Tuple[float, float, float] = Field(..., description="网格盒下角坐标")
    extent: Tuple[float, float, float] = Field(..., description="各轴盒长")
    n: Tuple[int, int, int] = Field(..., description="各轴体素数")

    @field_validator('origin', 'extent', mode='before')
    @classmethod
    def _coerce_vec(cls, v, info):
        return _vec3(v, info.field_name)

    @field_validator('extent')
    @classmethod
    def _positive_extent(cls, v):
        if min(v) <= 0:
            raise ValueError(f"extent 各分量必须 > 0: {v}")
        return v

    @field_validator('n', mode='before')
    @classmethod
    def _coerce_n(cls, v):
        if isinstance(v, (int, np.integer)):
            v = (int(v),) * 3
        v = tuple(int(x) for x in v)
        if len(v) != 3:
            raise ValueError("n 必须有三个分量")
        if min(v) < 4:
            raise ValueError(f"每轴至少 4 个体素: {v}")
        return v

    @model_validator(mode='after')
    def _contains_origin(self):
        for lo, ext in zip(self.origin, self.extent):
            if not (lo <= 0.0 <= lo + ext):
                raise ValueError(f"网格盒必须包含原点: origin={self.origin}, extent={self.extent}")
        return self

    @classmethod
    def centered(cls, extent: Union[float, Sequence[float]], n: Union[int, Sequence[int]]) -> "GridSpec":
        """以原点为中心的网格"""
        ext = np.broadcast_to(np.asarray(extent, dtype=np.float64), (3,))
        return cls(origin=tuple(-ext / 2.0), extent=tuple(ext), n=n)

    @property
    def h(self) -> np.ndarray:
        return np.asarray(self.extent) / np.asarray(self.n)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.h))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.n

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    @property
    def diam(self) -> float:
        """网格盒对角线长度"""
        return float(np.linalg.norm(self.extent))

    @property
    def first_center(self) -> np.ndarray:
        return np.asarray(self.origin) + 0.5 * self.h

    def axes(self) -> List[np.ndarray]:
        """三个轴上的体素中心坐标"""
        x0 = self.first_center
        return [x0[a] + self.h[a] * np.arange(self.n[a]) for a in range(3)]

    def coordinates(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """体素中心坐标网格 (indexing='ij')"""
        return tuple(np.meshgrid(*self.axes(), indexing='ij'))

    def radius(self, center: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
        """各体素中心到 center 的距离"""
        X, Y, Z = self.coordinates()
        c = _vec3(center, 'center')
        return np.sqrt((X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2)

    def interior_mask(self, padding: int = SUPPORT_PADDING) -> np.ndarray:
        """去掉每个面 padding 层体素后的盒 (默认的 D)"""
        mask = np.zeros(self.shape, dtype=bool)
        p = padding
        mask[p:self.n[0] - p, p:self.n[1] - p, p:self.n[2] - p] = True
        return mask

    def to_dict(self) -> Dict[str, Any]:
        return {'origin': list(self.origin), 'extent': list(self.extent), 'n': list(self.n)}

    def digest(self) -> str:
        """网格的内容摘要"""
        return sha256_bytes(json.dumps(self.to_dict(), sort_keys=True).encode('utf-8'))

    def require_same(self, other: "GridSpec", what: str = "场") -> None:
        """网格不一致时报错"""
        if self != other:
            raise GridMismatchError(f"{what}的网格不一致: {self.n}/{self.extent} vs {other.n}/{other.extent}")


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


class FieldOnGrid(BaseModel):
    """
    网格上的标量场

    values 以形状 (n1, n2, n3) 存储；传入一维数组时按 x 最快的体素顺序解释。
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    grid: GridSpec
    values: np.ndarray
    kind: Literal['real', 'complex'] = 'complex'

    @model_validator(mode='before')
    @classmethod
    def _coerce_values(cls, data):
        if not isinstance(data, dict):
            return data
        grid = data.get('grid')
        kind = data.get('kind', 'complex')
        values = np.asarray(data.get('values'))
        if isinstance(grid, GridSpec):
            if values.ndim == 1:
                if values.size != grid.size:
                    raise ValueError(f"值数组长度 {values.size} ≠ 网格体素数 {grid.size}")
                values = values.reshape(grid.shape, order='F')
            elif values.shape != grid.shape:
                raise ValueError(f"值数组形状 {values.shape} ≠ 网格形状 {grid.shape}")
        if kind == 'real':
            if np.iscomplexobj(values):
                if np.any(values.imag != 0):
                    raise ValueError("real 类型的场虚部必须为零")
                values = values.real
            values = values.astype(np.float64)
        else:
            values = values.astype(np.complex128)
        return {**data, 'values': _readonly(values)}

    @classmethod
    def real(cls, grid: GridSpec, values: np.ndarray) -> "FieldOnGrid":
        return cls(grid=grid, values=values, kind='real')

    @classmethod
    def complex(cls, grid: GridSpec, values: np.ndarray) -> "FieldOnGrid":
        return cls(grid=grid, values=values, kind='complex')

    @classmethod
    def zeros(cls, grid: GridSpec, kind: str = 'complex') -> "FieldOnGrid":
        return cls(grid=grid, values=np.zeros(grid.shape), kind=kind)

    @property
    def is_real(self) -> bool:
        return self.kind == 'real'


def field_values(field: Union[FieldOnGrid, np.ndarray], grid: Optional[GridSpec] = None) -> np.ndarray:
    """取出场的值数组，必要时校验网格"""
    if isinstance(field, FieldOnGrid):
        if grid is not None:
            grid.require_same(field.grid)
        return field.values
    arr = np.asarray(field)
    if grid is not None and arr.shape != grid.shape:
        raise GridMismatchError(f"数组形状 {arr.shape} 与网格形状 {grid.shape} 不一致")
    return arr


class WeightedNormSpec(BaseModel):
    """加权 L² 范数 ‖φ‖ = (∫ ⟨x⟩^{2s} |φ|² dx)^{1/2}, ⟨x⟩ = (1 + |x|²)^{1/2}"""
    model_config = ConfigDict(frozen=True)

    s: float = Field(..., description="权重指数")
    epsilon: float = Field(0.1, gt=0.0, description="Agmon 指数中的 ε")

    @classmethod
    def agmon(cls, epsilon: float) -> "WeightedNormSpec":
        """s = −1/2 − ε"""
        return cls(s=-0.5 - epsilon, epsilon=epsilon)


class MediumScene(BaseModel):
    """
    介质场景: σ (源标准差), V (势), f (源期望) 与它们的支撑掩码

    三个场都在支撑掩码外为零，且掩码距网格每个面至少 SUPPORT_PADDING 层体素。
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    grid: GridSpec
    sigma: np.ndarray
    V: np.ndarray
    f: np.ndarray
    support_mask: Optional[np.ndarray] = None
    name: str = Field('', description="场景名称 (预设名或文件名)")

    @model_validator(mode='before')
    @classmethod
    def _coerce_fields(cls, data):
        if not isinstance(data, dict):
            return data
        grid = data.get('grid')
        out = dict(data)
        for key in ('sigma', 'V', 'f'):
            arr = np.asarray(data.get(key), dtype=np.float64)
            if isinstance(grid, GridSpec) and arr.shape != grid.shape:
                raise ValueError(f"{key} 形状 {arr.shape} ≠ 网格形状 {grid.shape}")
            out[key] = _readonly(arr)
        mask = data.get('support_mask')
        if mask is None:
            mask = (out['sigma'] != 0) | (out['V'] != 0) | (out['f'] != 0)
        out['support_mask'] = _readonly(np.asarray(mask, dtype=bool))
        return out

    @model_validator(mode='after')
    def _check_invariants(self):
        for key in ('sigma', 'V', 'f'):
            arr = getattr(self, key)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{key} 含非有限值")
            if np.any(arr[~self.support_mask] != 0):
                raise ValueError(f"{key} 在支撑掩码外非零")
        if np.any(self.sigma < 0):
            raise ValueError("sigma 必须非负")
        if self.support_mask.shape != self.grid.shape:
            raise ValueError("support_mask 形状与网格不一致")
        if np.any(self.support_mask & ~self.grid.interior_mask(SUPPORT_PADDING)):
            raise ValueError(f"支撑集距网格边界不足 {SUPPORT_PADDING} 个体素")
        return self

    @classmethod
    def from_fields(cls, grid: GridSpec, sigma=None, V=None, f=None, name: str = '') -> "MediumScene":
        """缺省的场取零"""
        zeros = np.zeros(grid.shape)
        return cls(
            grid=grid,
            sigma=zeros if sigma is None else sigma,
            V=zeros if V is None else V,
            f=zeros if f is None else f,
            name=name,
        )

    def replace(self, **changes) -> "MediumScene":
        """返回替换了部分场的新场景 (支撑掩码重新计算)"""
        data = {
            'grid': self.grid, 'sigma': self.sigma, 'V': self.V, 'f': self.f, 'name': self.name,
        }
        data.update(changes)
        return MediumScene(**data)

    @property
    def domain_mask(self) -> np.ndarray:
        """D: 网格盒去掉填充层"""
        return self.grid.interior_mask(SUPPORT_PADDING)

    @property
    def has_potential(self) -> bool:
        return bool(np.any(self.V != 0))

    @property
    def has_noise(self) -> bool:
        return bool(np.any(self.sigma != 0))

    @property
    def has_source(self) -> bool:
        return bool(np.any(self.f != 0))

    def support_diameter(self) -> float:
        """支撑集包围盒的对角线长度 (空支撑时返回 0)"""
        if not np.any(self.support_mask):
            return 0.0
        idx = np.argwhere(self.support_mask)
        span = (idx.max(axis=0) - idx.min(axis=0) + 1) * self.grid.h
        return float(np.linalg.norm(span))

    def digest(self) -> str:
        """场景哈希 = SHA-256(网格 JSON ‖ σ ‖ V ‖ f)"""
        head = json.dumps(self.grid.to_dict(), sort_keys=True).encode('utf-8')
        return sha256_bytes(head + volume_bytes(self.sigma) + volume_bytes(self.V) + volume_bytes(self.f))


# ============================================
# Fourier 变换
# ============================================

def _axis_phases(grid: GridSpec, q: np.ndarray) -> List[np.ndarray]:
    return [np.exp(-1j * ax * q[a]) for a, ax in enumerate(grid.axes())]


def riemann_quadrature(grid: GridSpec, values: np.ndarray, q: Any) -> complex:
    """
    Σ_j e^{-i x_j·q} φ(x_j) h³ (可分离相位, 不含 (2π)^{-3/2})

    Args:
        grid: 网格
        values: 形状 (n1, n2, n3) 的数组
        q: 频率向量

    Returns:
        复数积分值
    """
    q = as_frequency(q)
    ex, ey, ez = _axis_phases(grid, q)
    s = ((np.asarray(values) @ ez) @ ey) @ ex
    return complex(s * grid.voxel_volume)


def riemann_quadrature_many(grid: GridSpec, values: np.ndarray, qs: np.ndarray, chunk: int = 256) -> np.ndarray:
    """对多个频率同时计算 riemann_quadrature"""
    qs = np.atleast_2d(np.asarray(qs, dtype=np.float64))
    if qs.shape[1] != 3 or not np.all(np.isfinite(qs)):
        raise ValueError("频率数组必须是有限的 (M, 3)")
    ax, ay, az = grid.axes()
    values = np.asarray(values, dtype=np.complex128)
    out = np.empty(qs.shape[0], dtype=np.complex128)
    for start in range(0, qs.shape[0], chunk):
        block = qs[start:start + chunk]
        ez = np.exp(-1j * np.outer(block[:, 2], az))
        ey = np.exp(-1j * np.outer(block[:, 1], ay))
        ex = np.exp(-1j * np.outer(block[:, 0], ax))
        t = np.einsum('ijk,mk->mij', values, ez)
        t = np.einsum('mij,mj->mi', t, ey)
        out[start:start + chunk] = np.einsum('mi,mi->m', t, ex)
    return out * grid.voxel_volume


def fourier_transform_hat(field: FieldOnGrid, p: Any) -> complex:
    """
    φ̂(p) = (2π)^{-3/2} Σ_j e^{-i x_j·p} φ(x_j) h³

    Args:
        field: 网格场
        p: 频率向量 (非有限值被拒绝)

    Returns:
        复数变换值
    """
    return FOURIER_NORMALIZATION * riemann_quadrature(field.grid, field.values, p)


def fourier_transform_hat_many(field: FieldOnGrid, ps: np.ndarray) -> np.ndarray:
    """对一组频率求 φ̂"""
    return FOURIER_NORMALIZATION * riemann_quadrature_many(field.grid, field.values, ps)


def frequency_axes(grid: GridSpec) -> List[np.ndarray]:
    """FFT 频率轴 ξ_a = 2π·fftfreq(n_a, h_a)"""
    return [2.0 * np.pi * np.fft.fftfreq(grid.n[a], d=grid.h[a]) for a in range(3)]


def frequency_cell_volume(grid: GridSpec) -> float:
    """频率网格单元体积 Π 2π/(n_a h_a)"""
    return float(np.prod(2.0 * np.pi / np.asarray(grid.extent)))


def _origin_phase(grid: GridSpec, sign: float) -> np.ndarray:
    x0 = grid.first_center
    fx, fy, fz = frequency_axes(grid)
    return (np.exp(sign * 1j * x0[0] * fx)[:, None, None]
            * np.exp(sign * 1j * x0[1] * fy)[None, :, None]
            * np.exp(sign * 1j * x0[2] * fz)[None, None, :])


def fourier_transform_grid(field: Union[FieldOnGrid, np.ndarray], grid: Optional[GridSpec] = None) -> np.ndarray:
    """
    在 FFT 频率网格上计算 φ̂ (与 fourier_transform_hat 同一约定)

    Returns:
        形状 grid.shape 的复数组, 下标按 numpy fftfreq 顺序
    """
    if isinstance(field, FieldOnGrid):
        grid = field.grid
    if grid is None:
        raise ValueError("传入数组时必须给出 grid")
    values = field_values(field, grid)
    return FOURIER_NORMALIZATION * grid.voxel_volume * _origin_phase(grid, -1.0) * np.fft.fftn(values)


def inverse_fourier_grid(grid: GridSpec, spectrum: np.ndarray) -> np.ndarray:
    """fourier_transform_grid 的逆变换，返回复数组"""
    spectrum = np.asarray(spectrum)
    if spectrum.shape != grid.shape:
        raise GridMismatchError(f"频谱形状 {spectrum.shape} ≠ 网格形状 {grid.shape}")
    return np.fft.ifftn(spectrum * _origin_phase(grid, 1.0)) / (FOURIER_NORMALIZATION * grid.voxel_volume)


# ============================================
# 范数与离散算子
# ============================================

def weighted_norm(field: FieldOnGrid, spec: WeightedNormSpec) -> float:
    """(Σ ⟨x_j⟩^{2s} |φ(x_j)|² h³)^{1/2}"""
    r2 = field.grid.radius() ** 2
    weight = (1.0 + r2) ** spec.s
    return float(np.sqrt(np.sum(weight * np.abs(field.values) ** 2) * field.grid.voxel_volume))


def l2_norm_on_support(field: Union[FieldOnGrid, np.ndarray], mask: np.ndarray,
                       grid: Optional[GridSpec] = None) -> float:
    """掩码内的离散 L² 范数"""
    if isinstance(field, FieldOnGrid):
        grid = field.grid
    values = field_values(field, grid)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != values.shape:
        raise GridMismatchError(f"掩码形状 {mask.shape} ≠ 场形状 {values.shape}")
    return float(np.sqrt(np.sum(np.abs(values[mask]) ** 2) * grid.voxel_volume))


def inner_product(a: np.ndarray, b: np.ndarray, grid: GridSpec, mask: Optional[np.ndarray] = None) -> complex:
    """离散 L² 内积 Σ a·conj(b) h³ (可限制在掩码内)"""
    prod = np.asarray(a) * np.conj(np.asarray(b))
    if mask is not None:
        prod = prod[np.asarray(mask, dtype=bool)]
    return complex(np.sum(prod) * grid.voxel_volume)


def laplacian_7pt(values: np.ndarray, h: Sequence[float]) -> np.ndarray:
    """7 点离散 Laplace (网格外按零延拓)"""
    values = np.asarray(values)
    padded = np.pad(values, 1)
    core = padded[1:-1, 1:-1, 1:-1]
    out = np.zeros_like(values)
    out = out + (padded[2:, 1:-1, 1:-1] - 2 * core + padded[:-2, 1:-1, 1:-1]) / h[0] ** 2
    out = out + (padded[1:-1, 2:, 1:-1] - 2 * core + padded[1:-1, :-2, 1:-1]) / h[1] ** 2
    out = out + (padded[1:-1, 1:-1, 2:] - 2 * core + padded[1:-1, 1:-1, :-2]) / h[2] ** 2
    return out


def _lap1d(n: int, h: float) -> sparse.spmatrix:
    v = np.ones(n)
    return sparse.spdiags([v, -2 * v, v], [-1, 0, 1], n, n) / h ** 2


def masked_laplacian_matrix(grid: GridSpec, mask: np.ndarray) -> Tuple[sparse.csr_matrix, np.ndarray]:
    """
    掩码区域上的 7 点 Laplace 稀疏矩阵 (掩码外取 Dirichlet 零值)

    Args:
        grid: 网格
        mask: 区域掩码

    Returns:
        (矩阵, 掩码内体素在 C 顺序展平中的下标)
    """
    nx, ny, nz = grid.n
    hx, hy, hz = grid.h
    Ix, Iy, Iz = sparse.eye(nx), sparse.eye(ny), sparse.eye(nz)
    L3 = (sparse.kron(sparse.kron(_lap1d(nx, hx), Iy), Iz)
          + sparse.kron(sparse.kron(Ix, _lap1d(ny, hy)), Iz)
          + sparse.kron(sparse.kron(Ix, Iy), _lap1d(nz, hz)))
    idx = np.flatnonzero(np.asarray(mask, dtype=bool).ravel())
    L3 = sparse.csr_matrix(L3)
    return sparse.csr_matrix(L3[idx][:, idx]), idx


# ============================================
# 场景文件
# ============================================

def save_scene(scene: MediumScene, manifest_path: Union[str, Path]) -> str:
    """
    保存场景: JSON 清单 + σ/V/f 三个原始体文件

    Args:
        scene: 场景
        manifest_path: 清单路径 (体文件写在同一目录)

    Returns:
        场景哈希
    """
    manifest_path = Path(manifest_path)
    stem = manifest_path.name.removesuffix('.json')
    volumes = {}
    checksums = {}
    for key in ('sigma', 'V', 'f'):
        name = f"{stem}.{key}.f64"
        checksums[key] = write_volume(manifest_path.parent / name, getattr(scene, key))
        volumes[key] = name
    scene_hash = scene.digest()
    payload = {
        'format_version': SCENE_FORMAT_VERSION,
        'name': scene.name,
        'grid': scene.grid.to_dict(),
        'volumes': volumes,
        'checksums': checksums,
        'scene_hash': scene_hash,
    }
    atomic_write_text(manifest_path, dumps_canonical(payload))
    logger.info(f"✅ 场景已保存: {manifest_path} (hash={scene_hash[:12]})")
    return scene_hash


def load_scene(manifest_path: Union[str, Path]) -> MediumScene:
    """读取场景并校验哈希"""
    manifest_path = Path(manifest_path)
    with open(manifest_path, 'r', encoding='utf-8') as fh:
        payload = json.load(fh)
    grid = GridSpec(**payload['grid'])
    fields = {
        key: read_volume(manifest_path.parent / name, grid.shape)
        for key, name in payload['volumes'].items()
    }
    scene = MediumScene(grid=grid, name=payload.get('name', ''), **fields)
    expected = payload.get('scene_hash')
    if expected:
        actual = scene.digest()
        if actual != expected:
            raise ChecksumMismatchError(str(manifest_path), expected, actual)
    logger.debug(f"加载场景 {manifest_path}")
    return scene
