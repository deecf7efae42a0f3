"""
实验流水线 (Experiment Pipeline)

负责:
1. 实验配置 ExperimentConfig (YAML + 版本化 schema)
2. 测量计划: 把三类数据集 (被动频带 / 方向三元组 / 多种子固定 d) 展开为请求文件
3. 阶段编排: scene → plan → synthesize → recover → report, 按输入哈希跳过已完成阶段
"""

import json
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.domain_fields import FieldOnGrid, MediumScene, fourier_transform_hat_many, l2_norm_on_support, load_scene, save_scene
from src.exceptions import ConfigError, LabError
from src.farfield_dataset import (
    FarFieldDataset, MeasurementRequest, load_dataset, requests_from_payload, requests_to_payload, save_dataset,
    synthesize_requests,
)
from src.forward_solver import create_forward_solver, normalize
from src.frequency_gridding import fibonacci_directions
from src.inverse_potential import plan_potential_requests, reconstruct_potential, recover_potential_polar
from src.inverse_source import (
    EnsembleSpec, SourceRecovery, dirichlet_eigenpairs, eigen_completeness, eigen_residual_check,
    eigen_residual_table,
)
from src.inverse_variance import (
    RECOVERY_CONSTANT, BandSchedule, band_requests, reconstruct_sigma2, recover_sigma2_polar,
    variance_statistical_stability,
)
from src.phantoms import PRESETS, build_preset
from src.report import RECOVERY_FILE, emit_report, write_recovery
from src.run_manifest import ManifestStore, RunManifest, create_manifest_store
from src.validation import ValidationSettings, run_validation_suite
from src.volume_io import atomic_write_text, dumps_canonical, sha256_bytes, write_volume

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

Mode = Literal['variance', 'potential', 'source', 'validate']

Vec3 = Tuple[float, float, float]


# ============================================
# 实验配置
# ============================================

class SceneSection(BaseModel):
    """场景来源: 预设名或场景清单路径 (二选一)"""
    model_config = ConfigDict(extra='forbid')

    preset: Optional[str] = None
    path: Optional[str] = None
    n: int = Field(0, ge=0, description="预设分辨率, 0 表示默认")

    @model_validator(mode='after')
    def _one_source(self):
        if (self.preset is None) == (self.path is None):
            raise ValueError("scene 必须且只能给出 preset 或 path 之一")
        if self.preset is not None and self.preset not in PRESETS:
            raise ValueError(f"未知的预设场景: {self.preset}")
        if self.path is not None and not Path(self.path).exists():
            raise ValueError(f"场景文件不存在: {self.path}")
        return self

    def load(self) -> MediumScene:
        if self.preset is not None:
            return build_preset(self.preset, self.n)
        return load_scene(self.path)


class SeedPolicy(BaseModel):
    """种子策略: 显式列表, 或从 base 起连续 count 个"""
    model_config = ConfigDict(extra='forbid')

    base: int = Field(1, ge=0)
    count: int = Field(1, ge=1)
    explicit: Optional[List[int]] = None

    @field_validator('explicit')
    @classmethod
    def _distinct(cls, v):
        if v is not None:
            if not v or len(set(v)) != len(v) or min(v) < 0:
                raise ValueError("explicit 种子必须非空、互不相同且非负")
        return v

    def seeds(self) -> List[int]:
        if self.explicit is not None:
            return list(self.explicit)
        return list(range(self.base, self.base + self.count))


class SolverSection(BaseModel):
    model_config = ConfigDict(extra='forbid')

    tol: Optional[float] = Field(None, gt=0.0)
    max_terms: Optional[int] = Field(None, ge=1)
    method: Optional[Literal['fast-convolution', 'direct-sum']] = None


def _directions(count: int, explicit: Optional[List[Vec3]]) -> np.ndarray:
    if explicit:
        return np.array([normalize(x) for x in explicit])
    return fibonacci_directions(count)


class VarianceSection(BaseModel):
    """被动频带测量与 σ² 恢复"""
    model_config = ConfigDict(extra='forbid')

    j_list: List[int] = Field(default_factory=lambda: [1, 2, 3, 4])
    k_values: Optional[List[float]] = None
    gamma: Optional[float] = Field(None, gt=0.0)
    c: Optional[float] = Field(None, gt=0.0)
    n_k: Optional[int] = Field(None, ge=8)
    taus: List[float] = Field(..., description="τ 网格 (σ̂² 的径向样本)")
    directions: int = Field(16, ge=1)
    xhats: Optional[List[Vec3]] = None
    variant: Literal['raw', 'centered'] = 'raw'
    stability_K: Optional[List[float]] = Field(None, description="统计稳定性的频带起点")
    stability_tau: float = Field(0.0, ge=0.0)

    @field_validator('taus')
    @classmethod
    def _taus(cls, v):
        if not v:
            raise ValueError("τ 网格不能为空")
        if min(v) < 0:
            raise ValueError("τ 必须 ≥ 0")
        return v

    def schedule(self) -> BandSchedule:
        from config import VarianceConfig
        return BandSchedule(
            gamma=self.gamma or VarianceConfig.BAND_GAMMA,
            c=self.c or VarianceConfig.BAND_C,
            j_list=self.j_list,
            n_k=self.n_k or VarianceConfig.BAND_NODES,
            k_values=self.k_values,
        )

    def direction_array(self) -> np.ndarray:
        return _directions(self.directions, self.xhats)


class PotentialSection(BaseModel):
    """方向三元组测量与 V 恢复"""
    model_config = ConfigDict(extra='forbid')

    radii: List[float] = Field(..., min_length=1, description="|p| 网格")
    directions: int = Field(16, ge=1)
    xhats: Optional[List[Vec3]] = None
    k_list: List[float] = Field(..., min_length=1)

    @field_validator('radii')
    @classmethod
    def _radii(cls, v):
        if min(v) < 0:
            raise ValueError("|p| 必须 ≥ 0")
        return v

    def direction_array(self) -> np.ndarray:
        return _directions(self.directions, self.xhats)


class SourceSection(BaseModel):
    """多种子固定 d 测量与 f 恢复"""
    model_config = ConfigDict(extra='forbid')

    k_list: List[float] = Field(..., min_length=1)
    directions: int = Field(16, ge=1)
    xhats: Optional[List[Vec3]] = None
    d_fixed: Vec3 = (0.0, 0.0, 1.0)
    eigen_count: int = Field(10, ge=1)
    n_batches: int = Field(32, ge=2)

    def direction_array(self) -> np.ndarray:
        return _directions(self.directions, self.xhats)


class ExperimentConfig(BaseModel):
    """单次实验的完整配置"""
    model_config = ConfigDict(extra='forbid', populate_by_name=True)

    schema_version: Literal[1] = SCHEMA_VERSION
    name: str = ''
    mode: Mode
    scene: Optional[SceneSection] = None
    output_dir: str = 'runs/default'
    seeds: SeedPolicy = Field(default_factory=SeedPolicy)
    threads: Optional[int] = Field(None, ge=1)
    solver: SolverSection = Field(default_factory=SolverSection)
    variance: Optional[VarianceSection] = None
    potential: Optional[PotentialSection] = None
    source: Optional[SourceSection] = None
    validate_settings: Optional[ValidationSettings] = Field(None, alias='validate')

    @model_validator(mode='after')
    def _mode_sections(self):
        if self.mode != 'validate' and self.scene is None:
            raise ValueError(f"{self.mode} 模式需要 scene 段")
        if self.mode in ('variance', 'potential', 'source') and getattr(self, self.mode) is None:
            raise ValueError(f"{self.mode} 模式需要 {self.mode} 段")
        if self.mode == 'source' and len(self.seeds.seeds()) < 2:
            raise ValueError("source 模式至少需要 2 个种子")
        return self

    def payload(self) -> Dict[str, Any]:
        return self.model_dump(mode='json', by_alias=True, exclude_none=True)

    def config_hash(self) -> str:
        return sha256_bytes(dumps_canonical(self.payload()).encode('utf-8'))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.payload(), sort_keys=True, allow_unicode=True)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        """
        解析 YAML 配置

        Raises:
            ConfigError: YAML 语法或 schema 校验失败
        """
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"YAML 解析失败: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("实验配置必须是映射")
        version = data.get('schema_version', SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"不支持的 schema_version: {version} (当前 {SCHEMA_VERSION})")
        try:
            return cls.model_validate(data)
        except ValidationError as exc:
            raise ConfigError(f"实验配置无效:\n{exc}") from exc

    def resolved_output_dir(self) -> Path:
        from config import RuntimeConfig
        return RuntimeConfig.resolve_output_dir(self.output_dir)

    def resolved_threads(self) -> int:
        from config import RuntimeConfig
        if RuntimeConfig.THREADS:
            return RuntimeConfig.resolve_threads()
        return self.threads or RuntimeConfig.resolve_threads()


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"配置文件不存在: {path}")
    return ExperimentConfig.from_yaml(path.read_text(encoding='utf-8'))


# ============================================
# 测量计划
# ============================================

def plan_measurements(config: ExperimentConfig) -> List[MeasurementRequest]:
    """
    把实验配置展开为去重后的测量请求

    Args:
        config: 实验配置

    Returns:
        规范顺序的请求列表

    Raises:
        ConfigError: 模式不产生测量 (validate)
    """
    seeds = config.seeds.seeds()
    requests: List[MeasurementRequest] = []
    if config.mode == 'variance':
        section = config.variance
        schedule = section.schedule()
        # 恢复只用第一个种子; 其余种子服务于统计稳定性
        seed_sets = [seeds[0]] + ([None] if section.variant == 'centered' else [])
        for xhat in section.direction_array():
            for K in schedule.bands:
                for seed in seed_sets:
                    requests.extend(band_requests(xhat, K, schedule.n_k, section.taus, seed))
        if section.stability_K:
            xhat = section.direction_array()[0]
            for K in section.stability_K:
                for seed in seeds + ([None] if section.variant == 'centered' else []):
                    requests.extend(band_requests(xhat, K, schedule.n_k, [section.stability_tau], seed))
    elif config.mode == 'potential':
        section = config.potential
        p_list = [r * d for d in section.direction_array() for r in section.radii]
        requests = plan_potential_requests(p_list, section.k_list, seeds[0])
    elif config.mode == 'source':
        section = config.source
        spec = EnsembleSpec(seeds=seeds, d_fixed=normalize(section.d_fixed), k_list=section.k_list,
                            xhat_list=[tuple(x) for x in section.direction_array()])
        requests = spec.requests()
    else:
        raise ConfigError(f"{config.mode} 模式不产生测量计划")
    return requests_from_payload(requests_to_payload(requests))


def write_plan(config: ExperimentConfig, path: Union[str, Path]) -> Path:
    """写出请求文件 (同一配置得到相同字节)"""
    requests = plan_measurements(config)
    payload = {
        'schema_version': SCHEMA_VERSION,
        'mode': config.mode,
        'config_hash': config.config_hash(),
        'request_count': len(requests),
        'requests': requests_to_payload(requests),
    }
    logger.info(f"测量计划: {len(requests)} 条请求")
    return atomic_write_text(path, dumps_canonical(payload))


def read_plan(path: Union[str, Path]) -> List[MeasurementRequest]:
    with open(path, 'r', encoding='utf-8') as fh:
        payload = json.load(fh)
    return requests_from_payload(payload['requests'])


# ============================================
# 恢复
# ============================================

class RecoveryOutcome(BaseModel):
    """恢复阶段的产物"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    volumes: Dict[str, np.ndarray] = Field(default_factory=dict)
    tables: Dict[str, Any] = Field(default_factory=dict)
    flags: List[str] = Field(default_factory=list)
    warnings: List[str] = Field(default_factory=list)


def _samples_table(series: str, samples, oracle_field: FieldOnGrid) -> pd.DataFrame:
    """极坐标样本与真值变换的对照表"""
    points = samples.points()
    oracle = fourier_transform_hat_many(oracle_field, points)
    R, M = samples.values.shape
    estimate = samples.values.ravel()
    return pd.DataFrame({
        'series': series,
        'direction': np.tile(np.arange(M), R),
        'radius': np.repeat(samples.radii, M),
        'estimate': estimate,
        'oracle': oracle,
        'abs_error': np.abs(estimate - oracle),
    })


def recover_variance(config: ExperimentConfig, scene: MediumScene, data: FarFieldDataset) -> RecoveryOutcome:
    section = config.variance
    seeds = config.seeds.seeds()
    schedule = section.schedule()
    samples, trend = recover_sigma2_polar(data, section.taus, section.direction_array(), schedule,
                                          variant=section.variant, seed=seeds[0])
    result = reconstruct_sigma2(samples, scene.grid, trend)
    error_vs_K = pd.DataFrame({
        'series': 'sigma2',
        'direction': trend['direction'],
        'radius': trend['tau'],
        'K': trend['K'],
        'estimate': trend['estimate'],
        'abs_change': RECOVERY_CONSTANT * trend['abs_change'],
    })
    tables: Dict[str, Any] = {
        'error_vs_K': error_vs_K,
        'samples': _samples_table('sigma2', samples, FieldOnGrid.real(scene.grid, scene.sigma ** 2)),
    }
    flags = ['sigma2-reconstruction'] if result.flagged else []
    if section.stability_K and len(seeds) > 1:
        stability, fit = variance_statistical_stability(
            data, section.direction_array()[0], section.stability_tau, section.stability_K,
            n_k=schedule.n_k, variant=section.variant)
        tables['stability'] = stability
        tables['slope_fits'] = [dict(series='variance_stability', **fit.model_dump())]
    truth = scene.sigma ** 2
    rel = l2_norm_on_support(result.sigma2_field.values - truth, scene.domain_mask, scene.grid)
    norm = l2_norm_on_support(truth, scene.domain_mask, scene.grid)
    tables['summary'] = [
        {'key': 'relative_l2_error', 'value': rel / norm if norm > 0 else None},
        {'key': 'clamp_mass', 'value': result.clamp_mass},
    ]
    return RecoveryOutcome(volumes={'sigma2': result.sigma2_field.values}, tables=tables,
                           flags=flags, warnings=result.warnings)


def recover_potential(config: ExperimentConfig, scene: MediumScene, data: FarFieldDataset) -> RecoveryOutcome:
    section = config.potential
    seed = config.seeds.seeds()[0]
    samples, trend = recover_potential_polar(data, section.radii, section.direction_array(),
                                             section.k_list, seed=seed)
    V_rec = reconstruct_potential(samples, scene.grid)
    error_vs_K = pd.DataFrame({
        'series': 'potential',
        'direction': trend['direction'],
        'radius': trend['radius'],
        'K': trend['k'],
        'estimate': trend['raw'],
        'abs_change': trend['abs_change'],
    })
    flags = ['single-k'] if len(section.k_list) < 2 else []
    rel = l2_norm_on_support(V_rec.values - scene.V, scene.domain_mask, scene.grid)
    norm = l2_norm_on_support(scene.V, scene.domain_mask, scene.grid)
    tables = {
        'error_vs_K': error_vs_K,
        'samples': _samples_table('potential', samples, FieldOnGrid.real(scene.grid, scene.V)),
        'summary': [{'key': 'relative_l2_error', 'value': rel / norm if norm > 0 else None}],
    }
    return RecoveryOutcome(volumes={'V': V_rec.values}, tables=tables, flags=flags)


def recover_source(config: ExperimentConfig, scene: MediumScene, data: FarFieldDataset) -> RecoveryOutcome:
    from config import SourceConfig
    section = config.source
    seeds = config.seeds.seeds()
    count = min(section.eigen_count, SourceConfig.EIGEN_MAX_COUNT)
    recovery = SourceRecovery(scene, section.k_list, section.direction_array(), normalize(section.d_fixed))
    gate = recovery.gate()
    mean, _, per_seed = recovery.mean_table(data, seeds)
    result = recovery.reconstruct(mean)

    mask = scene.domain_mask
    truth = FieldOnGrid.real(scene.grid, scene.f)
    eigenpairs = dirichlet_eigenpairs(FieldOnGrid.real(scene.grid, scene.V), mask, count)
    projections = eigen_residual_check(result.f_field, truth, eigenpairs, mask)
    stderr = recovery.projection_stderr(per_seed, eigenpairs, n_batches=min(section.n_batches, len(seeds)))
    # 真值的投影不含统计误差, 差值的标准误差即重建的标准误差
    residuals = eigen_residual_table(projections, stderr)
    flags = ['eigen-residual'] if int(np.sum(residuals['z'] > 3.0)) > max(1, count // 10) else []

    rel = l2_norm_on_support(result.f_field.values - scene.f, mask, scene.grid)
    norm = l2_norm_on_support(scene.f, mask, scene.grid)
    tables = {
        'eigen_residuals': residuals,
        'eigen_completeness': eigen_completeness(truth, eigenpairs, mask),
        'fixed_point': [{'iteration': i + 1, 'relative_update': r} for i, r in enumerate(result.history)],
        'summary': [
            {'key': 'relative_l2_error', 'value': rel / norm if norm > 0 else None},
            {'key': 'v_norm', 'value': gate.v_norm},
            {'key': 'v_threshold', 'value': gate.threshold},
            {'key': 'lowest_eigenvalue', 'value': gate.lowest_eigenvalue},
            {'key': 'fixed_point_iterations', 'value': result.iterations},
        ],
    }
    return RecoveryOutcome(volumes={'f': result.f_field.values}, tables=tables, flags=flags,
                           warnings=result.warnings)


def write_recovery_outputs(outcome: RecoveryOutcome, output_dir: Union[str, Path]) -> List[Path]:
    """体数据写到 volumes/<name>.f64, 表写到 recovery.json"""
    output_dir = Path(output_dir)
    outputs = []
    for name, values in sorted(outcome.volumes.items()):
        path = output_dir / 'volumes' / f"{name}.f64"
        write_volume(path, values)
        outputs.append(path)
    outputs.append(write_recovery(output_dir / RECOVERY_FILE, outcome.tables, outcome.flags, outcome.warnings))
    return outputs


RECOVERERS: Dict[str, Callable[[ExperimentConfig, MediumScene, FarFieldDataset], RecoveryOutcome]] = {
    'variance': recover_variance,
    'potential': recover_potential,
    'source': recover_source,
}


# ============================================
# 编排
# ============================================

SCENE_FILE = 'scene/scene.json'
PLAN_FILE = 'plan/requests.json'
DATASET_FILE = 'data/farfield.json'


def _scene_outputs(out: Path) -> List[Path]:
    base = out / SCENE_FILE
    stem = base.name.removesuffix('.json')
    return [base] + [base.parent / f"{stem}.{key}.f64" for key in ('sigma', 'V', 'f')]


def _dataset_outputs(out: Path) -> List[Path]:
    base = out / DATASET_FILE
    return [base, base.parent / (base.name.removesuffix('.json') + '.records.bin')]


def _section_hash(payload: Any) -> str:
    return sha256_bytes(dumps_canonical({'v': payload}).encode('utf-8'))


class Pipeline:
    """
    单次实验的阶段编排

    每个阶段只读取已声明的输入文件; 输入哈希与输出校验和一致时跳过。
    """

    def __init__(self, config: ExperimentConfig, store: Optional[ManifestStore] = None):
        from config import Config
        self.config = config
        self.output_dir = config.resolved_output_dir()
        self.store = store or create_manifest_store(str(self.output_dir), config.config_hash())
        self.store.manifest.mode = config.mode
        self.store.manifest.settings = Config.to_dict()

    def _run_stage(self, name: str, input_hash: str, body: Callable[[], Tuple[List[Path], List[str]]]):
        # 已完成阶段的输出被修改时 is_complete 抛出 ChecksumMismatchError, 阶段保持 completed
        if self.store.is_complete(name, input_hash):
            self.store.skip(name)
            return
        self.store.start(name, input_hash)
        try:
            outputs, flags = body()
        except (LabError, ValueError, OSError, ArithmeticError) as exc:
            self.store.fail(name, exc)
            raise
        self.store.complete(name, outputs, flags)

    # ------------------------------------------------------------------

    def stage_scene(self) -> Tuple[List[Path], List[str]]:
        scene = self.config.scene.load()
        self.store.manifest.scene_hash = save_scene(scene, self.output_dir / SCENE_FILE)
        return _scene_outputs(self.output_dir), []

    def stage_plan(self) -> Tuple[List[Path], List[str]]:
        return [write_plan(self.config, self.output_dir / PLAN_FILE)], []

    def stage_synthesize(self) -> Tuple[List[Path], List[str]]:
        scene = load_scene(self.output_dir / SCENE_FILE)
        requests = read_plan(self.output_dir / PLAN_FILE)
        solver = create_forward_solver(scene, tol=self.config.solver.tol, max_terms=self.config.solver.max_terms,
                                       method=self.config.solver.method)
        dataset = synthesize_requests(solver, requests, threads=self.config.resolved_threads())
        save_dataset(dataset, self.output_dir / DATASET_FILE)
        return _dataset_outputs(self.output_dir), solver.resolution_flags()

    def stage_recover(self) -> Tuple[List[Path], List[str]]:
        scene = load_scene(self.output_dir / SCENE_FILE)
        data = load_dataset(self.output_dir / DATASET_FILE, expected_scene_hash=scene.digest())
        outcome = RECOVERERS[self.config.mode](self.config, scene, data)
        return write_recovery_outputs(outcome, self.output_dir), outcome.flags

    def stage_validate(self) -> Tuple[List[Path], List[str]]:
        settings = self.config.validate_settings or ValidationSettings()
        table = run_validation_suite(settings)
        failed = sorted(set(table.loc[~table['passed'].astype(bool), 'check']))
        path = write_recovery(self.output_dir / RECOVERY_FILE, {'validation': table})
        return [path], [f"validation:{name}" for name in failed]

    def stage_report(self) -> Tuple[List[Path], List[str]]:
        return emit_report(self.store.manifest, self.output_dir), []

    # ------------------------------------------------------------------

    def run(self) -> RunManifest:
        """
        执行全部阶段

        Returns:
            RunManifest

        Raises:
            LabError / ValueError: 某阶段失败 (已记录到清单)
        """
        cfg = self.config.payload()
        logger.info(f"运行实验 {self.config.name or self.config.mode} → {self.output_dir}")
        if self.config.mode == 'validate':
            self._run_stage('validate', _section_hash(cfg.get('validate')), self.stage_validate)
        else:
            scene_hash = _section_hash(cfg['scene'])
            self._run_stage('scene', scene_hash, self.stage_scene)
            scene_sum = self.store.output_hash(SCENE_FILE)
            self._run_stage('plan', _section_hash([cfg]), self.stage_plan)
            plan_sum = self.store.output_hash(PLAN_FILE)
            self._run_stage('synthesize', _section_hash([scene_sum, plan_sum, cfg['solver']]),
                            self.stage_synthesize)
            data_sum = self.store.output_hash(DATASET_FILE)
            self._run_stage('recover', _section_hash([scene_sum, data_sum, cfg]), self.stage_recover)
        recovery_sum = self.store.output_hash(RECOVERY_FILE)
        self._run_stage('report', _section_hash([recovery_sum]), self.stage_report)
        self.store.save()
        if self.store.manifest.flagged:
            logger.warning(f"⚠️ 恢复诊断带旗标: {[f for s in self.store.manifest.stages.values() for f in s.flags]}")
        else:
            logger.info("✅ 实验完成")
        return self.store.manifest


def run_pipeline(config: ExperimentConfig) -> RunManifest:
    """端到端运行 (可恢复)"""
    return Pipeline(config).run()

