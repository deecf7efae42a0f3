"""
pytest 公共 fixture

与 src/main.py 相同的方式把项目根目录加入 sys.path
"""

import sys
from pathlib import Path

import numpy as np
import pytest

_project_root = Path(__file__).resolve().parent.parent
if str(_project_root) not in sys.path:
    sys.path.insert(0, str(_project_root))

from src.domain_fields import GridSpec, MediumScene
from src.phantoms import ball, gaussian_bump


@pytest.fixture
def small_grid() -> GridSpec:
    """12³ 网格, 盒长 1"""
    return GridSpec.centered(1.0, 12)


@pytest.fixture
def tiny_grid() -> GridSpec:
    """8³ 网格, 用于稠密矩阵对照"""
    return GridSpec.centered(1.0, 8)


@pytest.fixture
def noise_scene(small_grid) -> MediumScene:
    """只有 σ (球) 的场景"""
    return MediumScene.from_fields(small_grid, sigma=ball(small_grid, 0.3), name='noise-only')


@pytest.fixture
def full_scene(small_grid) -> MediumScene:
    """σ, V, f 都非零的小场景"""
    return MediumScene.from_fields(
        small_grid,
        sigma=ball(small_grid, 0.25, amplitude=0.5),
        V=ball(small_grid, 0.3, amplitude=0.1),
        f=gaussian_bump(small_grid, 0.1, cutoff=3.0),
        name='full',
    )


@pytest.fixture
def source_scene(small_grid) -> MediumScene:
    """只有 f 的确定性场景"""
    return MediumScene.from_fields(small_grid, f=gaussian_bump(small_grid, 0.1, cutoff=3.0), name='source-only')


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _isolated_runtime(monkeypatch):
    """测试不受 LAB_OUTPUT_DIR / LAB_THREADS 环境覆盖影响"""
    from config import RuntimeConfig
    monkeypatch.setattr(RuntimeConfig, 'OUTPUT_DIR', '')
    monkeypatch.setattr(RuntimeConfig, 'THREADS', None)
