"""
远场数据集 (Far-Field Dataset)

负责:
1. 测量请求与远场记录的集合 (按 (x̂, k, d, seed) 唯一索引)
2. 数据集文件: JSON 清单 + 小端二进制记录块
3. 按 (k, seed) 分组的并行合成, 输出顺序确定
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from itertools import product
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, field_validator, model_validator

from src.domain_fields import MediumScene
from src.exceptions import ChecksumMismatchError, CoverageGapError, LabError, MixedSeedError, SynthesisError
from src.forward_solver import FarFieldRecord, ForwardSolver, create_forward_solver, unit_vector
from src.volume_io import atomic_write_bytes, atomic_write_text, dumps_canonical, sha256_bytes, sha256_file
from src.white_noise import draw_noise

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1

# 记录块的二进制布局
RECORD_DTYPE = np.dtype([
    ('xhat', '<f8', (3,)),
    ('k', '<f8'),
    ('d', '<f8', (3,)),
    ('seed', '<i8'),
    ('re', '<f8'),
    ('im', '<f8'),
])

KEY_DECIMALS = 10
INT64_LIMIT = 2 ** 63

RecordKey = Tuple[Tuple[float, float, float], float, Optional[Tuple[float, float, float]], Optional[int]]


def _round3(v) -> Tuple[float, float, float]:
    return tuple(round(float(c), KEY_DECIMALS) + 0.0 for c in v)


def record_key(xhat, k: float, d=None, seed: Optional[int] = None) -> RecordKey:
    """(x̂, k, d, seed) 的规范键 (坐标取 10 位小数)"""
    return (_round3(xhat), round(float(k), KEY_DECIMALS), None if d is None else _round3(d),
            None if seed is None else int(seed))


def _sort_key(key: RecordKey):
    xhat, k, d, seed = key
    return (k, -1 if seed is None else seed, xhat, () if d is None else d)


class MeasurementRequest(BaseModel):
    """一个待合成的远场元组"""
    model_config = ConfigDict(frozen=True)

    xhat: Tuple[float, float, float]
    k: float = Field(..., gt=0.0)
    d: Optional[Tuple[float, float, float]] = None
    seed: Optional[int] = Field(None, ge=0)

    @field_validator('xhat')
    @classmethod
    def _unit_xhat(cls, v):
        return unit_vector(v, "xhat")

    @field_validator('d')
    @classmethod
    def _unit_d(cls, v):
        return None if v is None else unit_vector(v, "d")

    @property
    def key(self) -> RecordKey:
        return record_key(self.xhat, self.k, self.d, self.seed)

    def to_dict(self) -> Dict[str, Any]:
        return {'xhat': list(self.xhat), 'k': self.k, 'd': None if self.d is None else list(self.d),
                'seed': self.seed}


class FarFieldDataset(BaseModel):
    """
    远场数据集

    records 中不允许重复的 (x̂, k, d, seed) 键；scene_hash 标识生成它的场景。
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    records: List[FarFieldRecord] = Field(default_factory=list)
    scene_hash: str = Field('', description="生成场景的 SHA-256")
    config: Dict[str, Any] = Field(default_factory=dict, description="求解器设置快照")
    format_version: int = DATASET_FORMAT_VERSION

    _index: Dict[RecordKey, int] = PrivateAttr(default_factory=dict)

    @model_validator(mode='after')
    def _build_index(self):
        index: Dict[RecordKey, int] = {}
        for i, rec in enumerate(self.records):
            key = record_key(rec.xhat, rec.k, rec.d, rec.seed)
            if key in index:
                raise ValueError(f"数据集含重复记录: {key}")
            index[key] = i
        self._index = index
        return self

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, key) -> bool:
        return key in self._index

    def lookup(self, xhat, k: float, d=None, seed: Optional[int] = None) -> complex:
        """按键取值，缺失时抛 CoverageGapError"""
        key = record_key(xhat, k, d, seed)
        i = self._index.get(key)
        if i is None:
            raise CoverageGapError([key])
        return self.records[i].value

    def lookup_many(self, keys: Sequence[RecordKey]) -> np.ndarray:
        """批量取值，一次性报告所有缺失的键"""
        missing = [key for key in keys if key not in self._index]
        if missing:
            raise CoverageGapError(missing)
        return np.array([self.records[self._index[key]].value for key in keys], dtype=np.complex128)

    def find_missing(self, requests: Iterable[MeasurementRequest]) -> List[RecordKey]:
        return [req.key for req in requests if req.key not in self._index]

    def seeds(self) -> List[Optional[int]]:
        """数据集中出现的种子 (None 表示确定性记录)"""
        found = {rec.seed for rec in self.records}
        return sorted(found, key=lambda s: -1 if s is None else s)

    def single_seed(self, seed: Optional[int] = None) -> Optional[int]:
        """
        单实现估计器使用的种子

        Args:
            seed: 显式指定的种子 (优先)

        Returns:
            唯一的随机种子; 数据集只含确定性记录时为 None

        Raises:
            MixedSeedError: 未指定 seed 而数据集含多个随机种子
        """
        if seed is not None:
            return seed
        random_seeds = [s for s in self.seeds() if s is not None]
        if len(random_seeds) > 1:
            raise MixedSeedError(f"单实现估计器收到 {len(random_seeds)} 个种子: {random_seeds[:5]}")
        return random_seeds[0] if random_seeds else None

    def with_records(self, records: List[FarFieldRecord]) -> "FarFieldDataset":
        return FarFieldDataset(records=records, scene_hash=self.scene_hash, config=dict(self.config),
                               format_version=self.format_version)

    def sorted(self) -> "FarFieldDataset":
        """按 (k, seed, x̂, d) 排序后的副本"""
        order = sorted(self.records, key=lambda r: _sort_key(record_key(r.xhat, r.k, r.d, r.seed)))
        return self.with_records(order)

    def k_values(self) -> List[float]:
        return sorted({rec.k for rec in self.records})


def merge_datasets(datasets: Sequence[FarFieldDataset]) -> FarFieldDataset:
    """
    合并来自同一场景的多个数据集 (例如按种子分开保存的集合)

    Raises:
        ValueError: 场景哈希不一致或出现重复记录
    """
    if not datasets:
        raise ValueError("没有可合并的数据集")
    hashes = {ds.scene_hash for ds in datasets}
    if len(hashes) > 1:
        raise ValueError(f"数据集来自不同场景: {sorted(h[:12] for h in hashes)}")
    records = [rec for ds in datasets for rec in ds.records]
    return FarFieldDataset(records=records, scene_hash=datasets[0].scene_hash,
                           config=dict(datasets[0].config)).sorted()


# ============================================
# 文件格式
# ============================================

def _records_to_array(records: Sequence[FarFieldRecord]) -> np.ndarray:
    for rec in records:
        if rec.seed is not None and rec.seed >= INT64_LIMIT:
            raise ValueError(f"种子 {rec.seed} 超出数据集文件的 int64 范围")
    nan3 = (np.nan, np.nan, np.nan)
    table = np.zeros(len(records), dtype=RECORD_DTYPE)
    if not records:
        return table
    table['xhat'] = [rec.xhat for rec in records]
    table['k'] = [rec.k for rec in records]
    table['d'] = [nan3 if rec.d is None else rec.d for rec in records]
    table['seed'] = [-1 if rec.seed is None else rec.seed for rec in records]
    table['re'] = [rec.value.real for rec in records]
    table['im'] = [rec.value.imag for rec in records]
    return table


def _array_to_records(table: np.ndarray) -> List[FarFieldRecord]:
    records = []
    for row in table:
        d = row['d']
        records.append(FarFieldRecord(
            xhat=tuple(float(c) for c in row['xhat']),
            k=float(row['k']),
            d=None if np.all(np.isnan(d)) else tuple(float(c) for c in d),
            seed=None if int(row['seed']) < 0 else int(row['seed']),
            value=complex(float(row['re']), float(row['im'])),
        ))
    return records


def save_dataset(dataset: FarFieldDataset, manifest_path: Union[str, Path]) -> str:
    """
    保存数据集 (清单 + 二进制记录块)

    Args:
        dataset: 数据集
        manifest_path: 清单路径, 记录块写在同目录 <stem>.records.bin

    Returns:
        记录块的 SHA-256
    """
    manifest_path = Path(manifest_path)
    ordered = dataset.sorted()
    data = _records_to_array(ordered.records).tobytes()
    block_name = manifest_path.name.removesuffix('.json') + '.records.bin'
    atomic_write_bytes(manifest_path.parent / block_name, data)
    checksum = sha256_bytes(data)
    payload = {
        'format_version': dataset.format_version,
        'scene_hash': dataset.scene_hash,
        'solver_config': dataset.config,
        'record_count': len(ordered),
        'records_file': block_name,
        'checksum': checksum,
        'axes': {
            'k': ordered.k_values(),
            'seeds': [s for s in ordered.seeds() if s is not None],
            'deterministic': any(rec.seed is None for rec in ordered.records),
        },
        'record_layout': [[name, str(RECORD_DTYPE.fields[name][0])] for name in RECORD_DTYPE.names],
    }
    atomic_write_text(manifest_path, dumps_canonical(payload))
    logger.info(f"✅ 远场数据集已保存: {manifest_path} ({len(ordered)} 条记录)")
    return checksum


def load_dataset(manifest_path: Union[str, Path], expected_scene_hash: Optional[str] = None) -> FarFieldDataset:
    """
    读取数据集并校验记录块的校验和

    Raises:
        ChecksumMismatchError: 记录块被改动, 或场景哈希与期望不符
    """
    manifest_path = Path(manifest_path)
    with open(manifest_path, 'r', encoding='utf-8') as fh:
        payload = json.load(fh)
    block_path = manifest_path.parent / payload['records_file']
    actual = sha256_file(block_path)
    if actual != payload['checksum']:
        raise ChecksumMismatchError(str(block_path), payload['checksum'], actual)
    if expected_scene_hash and payload['scene_hash'] != expected_scene_hash:
        raise ChecksumMismatchError(str(manifest_path), expected_scene_hash, payload['scene_hash'])
    table = np.fromfile(block_path, dtype=RECORD_DTYPE)
    if table.size != payload['record_count']:
        raise ValueError(f"{block_path}: 记录数 {table.size} ≠ 清单中的 {payload['record_count']}")
    dataset = FarFieldDataset(
        records=_array_to_records(table),
        scene_hash=payload['scene_hash'],
        config=payload.get('solver_config', {}),
        format_version=payload['format_version'],
    )
    logger.debug(f"加载远场数据集 {manifest_path} ({len(dataset)} 条)")
    return dataset


# ============================================
# 合成
# ============================================

def _evaluate_group(solver: ForwardSolver, k: float, seed: Optional[int],
                    group: List[MeasurementRequest]) -> List[FarFieldRecord]:
    noise = draw_noise(solver.grid, seed) if seed is not None else None
    try:
        values = solver.evaluate(k, [(req.xhat, req.d) for req in group], noise)
    except (LabError, ValueError, ArithmeticError) as exc:
        raise SynthesisError(group[0].to_dict(), exc) from exc
    return [
        FarFieldRecord(xhat=req.xhat, k=req.k, d=req.d, seed=req.seed, value=value)
        for req, value in zip(group, values)
    ]


def synthesize_requests(solver: ForwardSolver, requests: Sequence[MeasurementRequest],
                        threads: int = 1) -> FarFieldDataset:
    """
    合成一组请求

    请求按 (k, seed) 分组，每组共享一次噪声与多次散射求和；组间并行，合并顺序固定。

    Args:
        solver: 正向求解器
        requests: 请求列表 (重复项被合并)
        threads: 工作线程数

    Returns:
        排好序的 FarFieldDataset
    """
    if not requests:
        raise ValueError("请求列表为空")
    unique: Dict[RecordKey, MeasurementRequest] = {}
    for req in requests:
        unique.setdefault(req.key, req)
    ordered = [unique[key] for key in sorted(unique, key=_sort_key)]

    groups: Dict[Tuple[float, Optional[int]], List[MeasurementRequest]] = {}
    for req in ordered:
        groups.setdefault((req.key[1], req.seed), []).append(req)
    jobs = list(groups.items())
    logger.info(f"开始合成 {len(ordered)} 条远场记录 ({len(jobs)} 组, {threads} 线程)")

    if threads <= 1 or len(jobs) == 1:
        results = [_evaluate_group(solver, group[0].k, seed, group) for (_, seed), group in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_evaluate_group, solver, group[0].k, seed, group) for (_, seed), group in jobs]
            results = [future.result() for future in futures]

    records = [rec for chunk in results for rec in chunk]
    dataset = FarFieldDataset(records=records, scene_hash=solver.scene.digest(),
                              config=solver.config_snapshot())
    logger.info(f"✅ 合成完成: {len(dataset)} 条记录")
    return dataset


def build_requests(k_list: Sequence[float], xhat_list: Sequence, d_list: Optional[Sequence] = None,
                   seeds: Optional[Sequence[int]] = None,
                   mode: Literal['passive', 'active'] = 'passive') -> List[MeasurementRequest]:
    """k × x̂ × d × seed 的笛卡尔积请求"""
    if len(k_list) == 0 or len(xhat_list) == 0:
        raise ValueError("k 列表与 x̂ 列表不能为空")
    if mode == 'active':
        if d_list is None or len(d_list) == 0:
            raise ValueError("主动模式需要入射方向列表")
        directions = [tuple(d) for d in d_list]
    elif mode == 'passive':
        directions = [None]
    else:
        raise ValueError(f"未知模式: {mode}")
    seed_list: List[Optional[int]] = [int(s) for s in seeds] if seeds is not None and len(seeds) else [None]
    return [
        MeasurementRequest(xhat=tuple(x), k=k, d=d, seed=s)
        for k, x, d, s in product(k_list, xhat_list, directions, seed_list)
    ]


def synthesize_dataset(scene: MediumScene, k_list: Sequence[float], xhat_list: Sequence,
                       d_list: Optional[Sequence] = None, seeds: Optional[Sequence[int]] = None,
                       mode: Literal['passive', 'active'] = 'passive', tol: Optional[float] = None,
                       threads: int = 1, solver: Optional[ForwardSolver] = None) -> FarFieldDataset:
    """
    按 k × x̂ × d × seed 合成数据集

    Args:
        scene: 场景
        k_list: 波数列表
        xhat_list: 观测方向列表
        d_list: 入射方向列表 (仅主动模式)
        seeds: 种子列表 (空表示确定性记录)
        mode: passive | active
        tol: 级数容差 (None 取配置)
        threads: 工作线程数
        solver: 复用已有求解器

    Returns:
        FarFieldDataset
    """
    requests = build_requests(k_list, xhat_list, d_list, seeds, mode)
    if solver is None:
        solver = create_forward_solver(scene, tol=tol)
    elif solver.scene.digest() != scene.digest():
        raise ValueError("求解器绑定的场景与给定场景不一致")
    return synthesize_requests(solver, requests, threads=threads)


def requests_to_payload(requests: Sequence[MeasurementRequest]) -> List[Dict[str, Any]]:
    """请求列表的 JSON 表示 (按规范顺序)"""
    ordered = sorted({req.key: req for req in requests}.values(), key=lambda r: _sort_key(r.key))
    return [req.to_dict() for req in ordered]


def requests_from_payload(items: Sequence[Dict[str, Any]]) -> List[MeasurementRequest]:
    return [MeasurementRequest(**item) for item in items]
