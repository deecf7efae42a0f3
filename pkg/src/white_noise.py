"""
离散白噪声 (White Noise)

每个体素一个 N(0, h³) 质量，使离散 Itô 等距 Var⟨Ẇ, φ⟩ = Σφ²h³ 精确成立。
随机数由以种子为密钥的 Philox 计数器生成器产生，第 j 个体素 (x 最快顺序)
的取值只由 (seed, j) 决定，与线程数和调用顺序无关。
"""

import logging
from functools import lru_cache
from pathlib import Path
from typing import Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.domain_fields import FieldOnGrid, GridSpec, field_values, riemann_quadrature
from src.greens_resolvent import ResolventOperator
from src.volume_io import atomic_write_text, dumps_canonical, write_volume

logger = logging.getLogger(__name__)

SEED_LIMIT = 2 ** 64


class NoiseRealization(BaseModel):
    """一次白噪声实现 (ω 的离散替身)"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    grid: GridSpec
    seed: int = Field(..., ge=0, lt=SEED_LIMIT, description="64 位种子")
    W: np.ndarray

    @model_validator(mode='after')
    def _check_shape(self):
        if self.W.shape != self.grid.shape:
            raise ValueError(f"W 形状 {self.W.shape} ≠ 网格形状 {self.grid.shape}")
        return self


def _generate(grid: GridSpec, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=seed))
    flat = rng.standard_normal(grid.size) * np.sqrt(grid.voxel_volume)
    W = np.ascontiguousarray(flat.reshape(grid.shape, order='F'))
    W.flags.writeable = False
    return W


@lru_cache(maxsize=16)
def _cached_noise(grid: GridSpec, seed: int) -> NoiseRealization:
    return NoiseRealization(grid=grid, seed=seed, W=_generate(grid, seed))


def draw_noise(grid: GridSpec, seed: int) -> NoiseRealization:
    """
    生成白噪声实现

    Args:
        grid: 网格
        seed: 种子 (0 ≤ seed < 2^64)

    Returns:
        NoiseRealization, 相同 (grid, seed) 逐位相同
    """
    seed = int(seed)
    if not 0 <= seed < SEED_LIMIT:
        raise ValueError(f"种子超出 64 位范围: {seed}")
    return _cached_noise(grid, seed)


def pair(noise: NoiseRealization, phi: Union[FieldOnGrid, np.ndarray]) -> complex:
    """
    ⟨Ẇ, φ⟩ = Σ_j φ(x_j) W_j (W 已含 √h³, 不再乘 h³)

    Args:
        noise: 噪声实现
        phi: 测试函数 (实或复)

    Returns:
        复数配对值
    """
    values = field_values(phi, noise.grid)
    return complex(np.sum(values * noise.W))


def pair_plane_wave(noise: NoiseRealization, sigma: np.ndarray, q: np.ndarray) -> complex:
    """
    pair(noise, σ·e^{−iq·y}) 的可分离求值

    Args:
        noise: 噪声实现
        sigma: 实数权重场
        q: 频率向量

    Returns:
        Σ_j σ_j W_j e^{−iq·y_j}
    """
    sigma = field_values(sigma, noise.grid)
    return riemann_quadrature(noise.grid, sigma * noise.W, q) / noise.grid.voxel_volume


def noise_density(sigma: np.ndarray, noise: NoiseRealization) -> np.ndarray:
    """体素密度 σW/h³ (供预解算子的 h³ 求积抵消)"""
    sigma = field_values(sigma, noise.grid)
    return sigma * noise.W / noise.grid.voxel_volume


def resolvent_of_noise(R: ResolventOperator, sigma: Union[FieldOnGrid, np.ndarray],
                       noise: NoiseRealization) -> FieldOnGrid:
    """
    R_k(σẆ)(x) = Σ_j Φ_k(x, y_j) σ(y_j) W_j

    Args:
        R: 预解算子
        sigma: 源标准差场
        noise: 噪声实现

    Returns:
        复数场
    """
    R.grid.require_same(noise.grid, "预解算子与噪声")
    return FieldOnGrid.complex(R.grid, R.apply(noise_density(field_values(sigma, R.grid), noise)))


def dump_noise(noise: NoiseRealization, manifest_path: Union[str, Path]) -> Path:
    """把 W 写成原始体文件, 种子记录在 JSON 清单中"""
    manifest_path = Path(manifest_path)
    volume_name = manifest_path.name.removesuffix('.json') + '.W.f64'
    checksum = write_volume(manifest_path.parent / volume_name, noise.W)
    payload = {
        'seed': noise.seed,
        'grid': noise.grid.to_dict(),
        'volume': volume_name,
        'checksum': checksum,
        'generator': 'Philox',
    }
    atomic_write_text(manifest_path, dumps_canonical(payload))
    logger.info(f"噪声实现已导出: {manifest_path} (seed={noise.seed})")
    return manifest_path
