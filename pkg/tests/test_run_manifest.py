import json

import pytest

from src.exceptions import ChecksumMismatchError
from src.run_manifest import ManifestStore, RunManifest, StageRecord, create_manifest_store, load_manifest


def _store(tmp_path, config_hash='cfg-1', **kwargs) -> ManifestStore:
    return ManifestStore(str(tmp_path), config_hash, '0.3.0', **kwargs)


def test_new_manifest_is_empty(tmp_path):
    store = _store(tmp_path)
    assert store.manifest.config_hash == 'cfg-1'
    assert store.manifest.stages == {}
    assert not store.manifest.flagged
    assert not store.manifest.failed


def test_stage_bookkeeping(tmp_path):
    store = _store(tmp_path)
    out = tmp_path / 'plan' / 'requests.json'
    out.parent.mkdir()
    out.write_text('{}', encoding='utf-8')

    store.start('plan', 'hash-a')
    assert store.manifest.stages['plan'].status == 'running'
    store.complete('plan', [out], flags=['single-k'])

    record = store.manifest.stages['plan']
    assert record.status == 'completed'
    assert record.outputs == ['plan/requests.json']
    assert store.output_hash('plan/requests.json')
    assert store.manifest.flagged
    assert store.is_complete('plan', 'hash-a')
    assert not store.is_complete('plan', 'hash-b')
    assert not store.is_complete('recover', 'hash-a')


def test_changed_output_is_rejected(tmp_path):
    store = _store(tmp_path)
    out = tmp_path / 'data.json'
    out.write_text('a', encoding='utf-8')
    store.start('synthesize', 'h')
    store.complete('synthesize', [out])
    store.verify()

    out.write_text('b', encoding='utf-8')
    with pytest.raises(ChecksumMismatchError) as excinfo:
        store.is_complete('synthesize', 'h')
    assert excinfo.value.path == str(out)
    with pytest.raises(ChecksumMismatchError):
        store.verify()
    # 输入变化时照常重算
    assert not store.is_complete('synthesize', 'other')


def test_missing_output_invalidates_stage(tmp_path):
    store = _store(tmp_path)
    out = tmp_path / 'data.json'
    out.write_text('a', encoding='utf-8')
    store.start('synthesize', 'h')
    store.complete('synthesize', [out])
    out.unlink()
    assert not store.is_complete('synthesize', 'h')
    with pytest.raises(ChecksumMismatchError):
        store.verify()


def test_fail_records_error(tmp_path):
    store = _store(tmp_path)
    store.start('recover', 'h')
    store.fail('recover', ValueError('bad radius'))
    record = store.manifest.stages['recover']
    assert record.status == 'failed'
    assert record.error == 'ValueError: bad radius'
    assert store.manifest.failed


def test_reload_resumes_with_same_config(tmp_path):
    store = _store(tmp_path)
    store.start('scene', 'h')
    store.complete('scene', [])
    resumed = _store(tmp_path)
    assert resumed.manifest.stages['scene'].status == 'completed'
    assert resumed.manifest.comparable() == store.manifest.comparable()


def test_changed_config_starts_over(tmp_path):
    store = _store(tmp_path)
    store.start('scene', 'h')
    store.complete('scene', [])
    fresh = _store(tmp_path, config_hash='cfg-2')
    assert fresh.manifest.stages == {}
    assert fresh.manifest.config_hash == 'cfg-2'


def test_corrupt_manifest_is_replaced(tmp_path):
    (tmp_path / 'run_manifest.json').write_text('{not json', encoding='utf-8')
    store = _store(tmp_path)
    assert store.manifest.stages == {}


def test_save_keeps_backup(tmp_path):
    store = _store(tmp_path)
    store.save()
    store.save()
    assert (tmp_path / 'run_manifest.json.backup').exists()
    no_backup = tmp_path / 'plain'
    plain = _store(no_backup, backup_enabled=False)
    plain.save()
    plain.save()
    assert not (no_backup / 'run_manifest.json.backup').exists()


def test_comparable_drops_timestamps():
    a = RunManifest(config_hash='c', artifact_version='v', created_at='t1', updated_at='t1',
                    stages={'scene': StageRecord(status='completed', started_at='t1', finished_at='t2')})
    b = RunManifest(config_hash='c', artifact_version='v', created_at='t3', updated_at='t4',
                    stages={'scene': StageRecord(status='completed', started_at='t5', finished_at='t6')})
    assert a.comparable() == b.comparable()
    assert 'created_at' not in a.comparable()


def test_load_manifest_and_factory(tmp_path):
    from config import ManifestConfig
    store = create_manifest_store(str(tmp_path), 'cfg-x')
    store.save()
    path = tmp_path / ManifestConfig.MANIFEST_NAME
    assert load_manifest(str(path)).config_hash == 'cfg-x'
    assert json.loads(path.read_text(encoding='utf-8'))['artifact_version'] == ManifestConfig.ARTIFACT_VERSION
