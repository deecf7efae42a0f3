import numpy as np
import pytest
from pydantic import ValidationError

from config import ManifestConfig
from src.exceptions import ChecksumMismatchError, ConfigError
from src.forward_solver import RESOLUTION_FLAG
from src.pipeline import (
    DATASET_FILE, PLAN_FILE, SCENE_FILE, ExperimentConfig, Pipeline, SceneSection, SeedPolicy,
    load_experiment_config, plan_measurements, read_plan, run_pipeline, write_plan,
)
from src.report import RECOVERY_FILE, REPORT_DIR, REPORT_TABLES, read_recovery_tables
from src.run_manifest import load_manifest

POTENTIAL_YAML = """
schema_version: 1
name: potential-smoke
mode: potential
scene:
  preset: potential-ball
  n: 16
output_dir: {out}
seeds:
  explicit: [4]
threads: 2
potential:
  radii: [0.0, 2.0]
  xhats: [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]
  k_list: [6.0, 9.0]
"""


def _potential_config(tmp_path, **overrides) -> ExperimentConfig:
    config = ExperimentConfig.from_yaml(POTENTIAL_YAML.format(out=(tmp_path / 'run').as_posix()))
    return config.model_copy(update=overrides)


VARIANCE_YAML = """
schema_version: 1
name: variance-smoke
mode: variance
scene:
  preset: variance-ball
  n: 16
output_dir: {out}
seeds:
  explicit: [1, 2]
threads: 2
variance:
  j_list: [1, 2]
  k_values: [10.0, 20.0]
  n_k: 8
  taus: [0.0, 1.0, 2.0]
  xhats: [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]
  stability_K: [10.0, 20.0, 40.0]
"""


# ============================================
# 配置
# ============================================

def test_scene_section_requires_exactly_one_source(tmp_path):
    with pytest.raises(ValidationError):
        SceneSection()
    with pytest.raises(ValidationError):
        SceneSection(preset='variance-ball', path=str(tmp_path / 'scene.json'))
    with pytest.raises(ValidationError):
        SceneSection(preset='no-such-preset')
    with pytest.raises(ValidationError):
        SceneSection(path=str(tmp_path / 'missing.json'))
    assert SceneSection(preset='potential-ball', n=16).load().grid.n == (16, 16, 16)


def test_seed_policy():
    assert SeedPolicy(base=5, count=3).seeds() == [5, 6, 7]
    assert SeedPolicy(explicit=[9, 2]).seeds() == [9, 2]
    for bad in ([], [1, 1], [-1]):
        with pytest.raises(ValidationError):
            SeedPolicy(explicit=bad)


def test_mode_requires_its_section():
    with pytest.raises(ValidationError):
        ExperimentConfig(mode='potential', scene=SceneSection(preset='potential-ball'))
    with pytest.raises(ValidationError):
        ExperimentConfig(mode='variance', variance={'taus': [0.0]})
    with pytest.raises(ValidationError):
        ExperimentConfig(mode='source', scene=SceneSection(preset='source-bump'), source={'k_list': [2.0]},
                         seeds=SeedPolicy(explicit=[1]))
    assert ExperimentConfig(mode='validate').scene is None


def test_from_yaml_errors():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_yaml("mode: [unclosed")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_yaml("- a\n- b\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_yaml("schema_version: 2\nmode: validate\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_yaml("mode: validate\nunexpected: 1\n")
    with pytest.raises(ConfigError):
        load_experiment_config('/nonexistent/experiment.yaml')


def test_yaml_round_trip_keeps_hash(tmp_path):
    config = _potential_config(tmp_path)
    again = ExperimentConfig.from_yaml(config.to_yaml())
    assert again.config_hash() == config.config_hash()
    changed = ExperimentConfig.from_yaml(config.to_yaml().replace('9.0', '10.0'))
    assert changed.config_hash() != config.config_hash()

    path = tmp_path / 'experiment.yaml'
    path.write_text(config.to_yaml(), encoding='utf-8')
    assert load_experiment_config(path) == config


def test_validate_alias():
    config = ExperimentConfig.from_yaml("mode: validate\nvalidate:\n  noise_seeds: 20\n")
    assert config.validate_settings.noise_seeds == 20
    assert config.payload()['validate']['noise_seeds'] == 20


def test_runtime_overrides(tmp_path, monkeypatch):
    from config import RuntimeConfig
    config = _potential_config(tmp_path)
    assert config.resolved_output_dir() == tmp_path / 'run'
    assert config.resolved_threads() == 2
    monkeypatch.setattr(RuntimeConfig, 'OUTPUT_DIR', str(tmp_path / 'elsewhere'))
    monkeypatch.setattr(RuntimeConfig, 'THREADS', 3)
    assert config.resolved_output_dir() == tmp_path / 'elsewhere'
    assert config.resolved_threads() == 3


# ============================================
# 测量计划
# ============================================

def test_potential_plan_is_deduplicated(tmp_path):
    requests = plan_measurements(_potential_config(tmp_path))
    keys = [r.key for r in requests]
    assert len(keys) == len(set(keys))
    # |p| = 0 在两个方向上给出相同的三元组
    assert len(requests) == 12
    assert all(r.seed == 4 and r.d is not None for r in requests)


def test_variance_plan():
    config = ExperimentConfig(
        mode='variance', scene=SceneSection(preset='variance-ball', n=8), seeds=SeedPolicy(explicit=[3, 4]),
        variance={'j_list': [1, 2], 'k_values': [10.0, 20.0], 'n_k': 8, 'taus': [0.0, 1.0],
                  'xhats': [(0.0, 0.0, 1.0)], 'stability_K': [10.0, 20.0]},
    )
    requests = plan_measurements(config)
    assert {r.seed for r in requests} == {3, 4}
    assert all(r.d is None for r in requests)
    recovery = [r for r in requests if r.seed == 3]
    assert max(r.k for r in recovery) > 20.0


def test_centered_variance_plan_adds_mean_requests():
    config = ExperimentConfig(
        mode='variance', scene=SceneSection(preset='variance-ball', n=8), seeds=SeedPolicy(explicit=[3]),
        variance={'j_list': [1], 'k_values': [10.0], 'n_k': 8, 'taus': [0.0], 'xhats': [(0.0, 0.0, 1.0)],
                  'variant': 'centered'},
    )
    seeds = [r.seed for r in plan_measurements(config)]
    assert seeds.count(None) == seeds.count(3) == 8


def test_source_plan():
    config = ExperimentConfig(
        mode='source', scene=SceneSection(preset='source-bump', n=8), seeds=SeedPolicy(base=1, count=3),
        source={'k_list': [2.0, 4.0], 'xhats': [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0)], 'd_fixed': (0.0, 0.0, 2.0)},
    )
    requests = plan_measurements(config)
    assert len(requests) == 12
    assert {r.d for r in requests} == {(0.0, 0.0, 1.0)}


def test_validate_mode_has_no_plan():
    with pytest.raises(ConfigError):
        plan_measurements(ExperimentConfig(mode='validate'))


def test_plan_file_is_byte_stable(tmp_path):
    config = _potential_config(tmp_path)
    a = write_plan(config, tmp_path / 'a.json')
    b = write_plan(config, tmp_path / 'b.json')
    assert a.read_bytes() == b.read_bytes()
    assert [r.key for r in read_plan(a)] == [r.key for r in plan_measurements(config)]


# ============================================
# 编排
# ============================================

def test_run_pipeline_end_to_end(tmp_path):
    config = _potential_config(tmp_path)
    manifest = run_pipeline(config)
    out = tmp_path / 'run'

    assert not manifest.failed
    assert set(manifest.stages) == {'scene', 'plan', 'synthesize', 'recover', 'report'}
    assert all(stage.status == 'completed' for stage in manifest.stages.values())
    for name in (SCENE_FILE, PLAN_FILE, DATASET_FILE, RECOVERY_FILE, 'volumes/V.f64'):
        assert (out / name).exists()
        assert name in manifest.outputs
    for table in REPORT_TABLES:
        assert (out / REPORT_DIR / f"{table}.csv").exists()
    assert manifest.scene_hash
    assert manifest.stages['synthesize'].flags == []
    assert manifest.settings['solver']['method']
    assert load_manifest(str(out / ManifestConfig.MANIFEST_NAME)).comparable() == manifest.comparable()


def test_second_run_skips_completed_stages(tmp_path):
    config = _potential_config(tmp_path)
    first = run_pipeline(config)
    data_path = tmp_path / 'run' / DATASET_FILE
    mtime = data_path.stat().st_mtime_ns
    second = run_pipeline(config)
    assert second.comparable() == first.comparable()
    assert data_path.stat().st_mtime_ns == mtime


def test_missing_output_is_recomputed(tmp_path):
    config = _potential_config(tmp_path)
    first = run_pipeline(config)
    data_path = tmp_path / 'run' / DATASET_FILE
    data_path.unlink()
    second = run_pipeline(config)
    assert data_path.exists()
    assert not second.failed
    assert second.outputs[DATASET_FILE] == first.outputs[DATASET_FILE]


def test_failed_stage_is_recorded(tmp_path):
    config = _potential_config(tmp_path)
    bad = config.model_copy(update={'potential': config.potential.model_copy(update={'radii': [30.0]})})
    with pytest.raises(ValueError):
        Pipeline(bad).run()
    manifest = load_manifest(str(tmp_path / 'run' / ManifestConfig.MANIFEST_NAME))
    assert manifest.stages['scene'].status == 'completed'
    assert manifest.stages['plan'].status == 'failed'
    assert 'ValueError' in manifest.stages['plan'].error
    assert manifest.failed


def test_recovered_potential_volume(tmp_path):
    from src.volume_io import read_volume
    config = _potential_config(tmp_path)
    run_pipeline(config)
    V = read_volume(tmp_path / 'run' / 'volumes' / 'V.f64', (16, 16, 16))
    assert V.shape == (16, 16, 16)
    assert np.all(np.isfinite(V))


def test_identical_configs_give_identical_volumes(tmp_path):
    a = _potential_config(tmp_path, output_dir=(tmp_path / 'a').as_posix())
    b = _potential_config(tmp_path, output_dir=(tmp_path / 'b').as_posix())
    run_pipeline(a)
    run_pipeline(b)
    for name in ('volumes/V.f64', RECOVERY_FILE, DATASET_FILE):
        assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()


def test_modified_output_is_rejected(tmp_path):
    config = _potential_config(tmp_path)
    first = run_pipeline(config)
    data_path = tmp_path / 'run' / DATASET_FILE
    raw = bytearray(data_path.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    data_path.write_bytes(bytes(raw))

    with pytest.raises(ChecksumMismatchError) as excinfo:
        run_pipeline(config)
    assert 'farfield.json' in str(excinfo.value)
    # 被修改的文件不会被覆盖
    assert data_path.read_bytes() == bytes(raw)
    manifest = load_manifest(str(tmp_path / 'run' / ManifestConfig.MANIFEST_NAME))
    assert manifest.outputs[DATASET_FILE] == first.outputs[DATASET_FILE]


def test_under_resolved_wavenumber_is_flagged(tmp_path):
    config = _potential_config(tmp_path)
    # h = 0.05, k = 24 → kh = 1.2
    coarse = config.model_copy(update={'potential': config.potential.model_copy(update={'k_list': [6.0, 24.0]})})
    manifest = run_pipeline(coarse)
    assert not manifest.failed
    assert manifest.stages['synthesize'].flags == [RESOLUTION_FLAG]
    assert manifest.flagged


def test_variance_runs_are_byte_identical(tmp_path, monkeypatch):
    from config import VarianceConfig
    monkeypatch.setattr(VarianceConfig, 'MIN_STABILITY_SEEDS', 2)
    manifests = {}
    for name in ('a', 'b'):
        config = ExperimentConfig.from_yaml(VARIANCE_YAML.format(out=(tmp_path / name).as_posix()))
        manifests[name] = run_pipeline(config)

    a, b = manifests['a'], manifests['b']
    assert not a.failed
    assert all(stage.status == 'completed' for stage in a.stages.values())
    for name in (DATASET_FILE, RECOVERY_FILE, 'volumes/sigma2.f64'):
        assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()
        assert a.outputs[name] == b.outputs[name]
    # 频带上限 2K + τ 远超 1/h
    assert RESOLUTION_FLAG in a.stages['synthesize'].flags

    tables = read_recovery_tables(tmp_path / 'a' / RECOVERY_FILE)
    assert len(tables['stability']) == 3
    assert tables['samples']
    assert (tmp_path / 'a' / REPORT_DIR / 'stability.csv').exists()
