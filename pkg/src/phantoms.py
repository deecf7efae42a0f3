"""
内置解析幻影与命名场景预设
"""

import logging
from typing import Callable, Dict, Sequence

import numpy as np

from src.domain_fields import GridSpec, MediumScene

logger = logging.getLogger(__name__)


def ball(grid: GridSpec, radius: float, center: Sequence[float] = (0.0, 0.0, 0.0),
         amplitude: float = 1.0) -> np.ndarray:
    """球指示函数 (体素中心在球内取 amplitude)"""
    return np.where(grid.radius(center) < radius, float(amplitude), 0.0)


def cube(grid: GridSpec, half_width: float, center: Sequence[float] = (0.0, 0.0, 0.0),
         amplitude: float = 1.0) -> np.ndarray:
    """轴对齐立方体指示函数"""
    X, Y, Z = grid.coordinates()
    inside = ((np.abs(X - center[0]) < half_width)
              & (np.abs(Y - center[1]) < half_width)
              & (np.abs(Z - center[2]) < half_width))
    return np.where(inside, float(amplitude), 0.0)


def gaussian_bump(grid: GridSpec, width: float, center: Sequence[float] = (0.0, 0.0, 0.0),
                  amplitude: float = 1.0, cutoff: float = 4.0) -> np.ndarray:
    """
    截断高斯包 amplitude·exp(−|x−c|²/(2w²))

    Args:
        grid: 网格
        width: 宽度 w
        center: 中心
        amplitude: 幅值
        cutoff: 在 |x−c| ≥ cutoff·w 处截断为零 (保证紧支撑)
    """
    r = grid.radius(center)
    bump = amplitude * np.exp(-0.5 * (r / width) ** 2)
    return np.where(r < cutoff * width, bump, 0.0)


def _variance_ball(n: int) -> MediumScene:
    grid = GridSpec.centered(1.4, n)
    return MediumScene.from_fields(grid, sigma=ball(grid, 0.5), name='variance-ball')


def _blind_variance(n: int) -> MediumScene:
    grid = GridSpec.centered(1.4, n)
    return MediumScene.from_fields(
        grid,
        sigma=ball(grid, 0.5),
        V=ball(grid, 0.3, amplitude=0.05),
        f=gaussian_bump(grid, 0.12, center=(0.1, 0.0, 0.0), cutoff=3.5),
        name='blind-variance',
    )


def _potential_ball(n: int) -> MediumScene:
    grid = GridSpec.centered(0.8, n)
    return MediumScene.from_fields(
        grid,
        sigma=ball(grid, 0.25, amplitude=0.5),
        V=ball(grid, 0.3, amplitude=0.1),
        f=gaussian_bump(grid, 0.08, cutoff=3.5),
        name='potential-ball',
    )


def _source_bump(n: int) -> MediumScene:
    grid = GridSpec.centered(2.2, n)
    return MediumScene.from_fields(
        grid,
        sigma=ball(grid, 0.3, amplitude=0.5),
        V=ball(grid, 0.3, amplitude=0.05),
        f=gaussian_bump(grid, 0.25, cutoff=3.5),
        name='source-bump',
    )


PRESETS: Dict[str, Callable[[int], MediumScene]] = {
    'variance-ball': _variance_ball,
    'blind-variance': _blind_variance,
    'potential-ball': _potential_ball,
    'source-bump': _source_bump,
}

DEFAULT_RESOLUTION = {
    'variance-ball': 32,
    'blind-variance': 32,
    'potential-ball': 32,
    'source-bump': 24,
}


def build_preset(name: str, n: int = 0) -> MediumScene:
    """
    构建命名预设场景

    Args:
        name: 预设名 (见 PRESETS)
        n: 每轴体素数, 0 表示预设默认值

    Returns:
        MediumScene
    """
    if name not in PRESETS:
        raise ValueError(f"未知的预设场景: {name} (可选: {', '.join(sorted(PRESETS))})")
    resolution = n or DEFAULT_RESOLUTION[name]
    scene = PRESETS[name](resolution)
    logger.info(f"构建预设场景 {name} (n={resolution})")
    return scene
