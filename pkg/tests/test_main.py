import json

import pandas as pd
import pytest

from src.main import EXIT_ERROR, EXIT_FLAGGED, EXIT_OK, build_parser, main

EXPERIMENT = """
mode: potential
scene:
  preset: potential-ball
  n: 16
seeds:
  explicit: [2]
potential:
  radii: [0.0, 1.5]
  directions: 1
  k_list: [6.0]
"""


@pytest.fixture(autouse=True)
def _log_dir(tmp_path, monkeypatch):
    """日志文件写到临时目录"""
    from config import LoggingConfig
    monkeypatch.setattr(LoggingConfig, 'LOG_FILE', str(tmp_path / 'logs' / 'lab.log'))


def test_parser_knows_every_subcommand():
    parser = build_parser()
    for command in ('plan-measurements', 'run', 'simulate-forward', 'synthesize-farfield', 'recover-variance',
                    'recover-potential', 'recover-source', 'validate', 'report'):
        with pytest.raises(SystemExit) as excinfo:
            parser.parse_args([command, '--help'])
        assert excinfo.value.code == 0
    with pytest.raises(SystemExit):
        parser.parse_args(['recover-variance', '--scene', 'variance-ball'])


def test_plan_measurements(tmp_path):
    config = tmp_path / 'experiment.yaml'
    config.write_text(EXPERIMENT, encoding='utf-8')
    out = tmp_path / 'requests.json'
    assert main(['plan-measurements', '--config', str(config), '--out', str(out)]) == EXIT_OK
    payload = json.loads(out.read_text(encoding='utf-8'))
    assert payload['mode'] == 'potential'
    assert payload['request_count'] == len(payload['requests']) == 4


def test_invalid_config_exits_with_error(tmp_path):
    config = tmp_path / 'experiment.yaml'
    config.write_text("mode: potential\n", encoding='utf-8')
    assert main(['plan-measurements', '--config', str(config), '--out', str(tmp_path / 'r.json')]) == EXIT_ERROR
    assert main(['plan-measurements', '--config', str(tmp_path / 'missing.yaml'),
                 '--out', str(tmp_path / 'r.json')]) == EXIT_ERROR


def test_validate_subset(tmp_path):
    code = main(['validate', '--quick', '--only', 'born_farfield', 'method_equivalence', '--out', str(tmp_path)])
    assert code == EXIT_OK
    table = pd.read_csv(tmp_path / 'validation.csv')
    assert set(table['check']) == {'born_farfield', 'method_equivalence'}


def test_validate_unknown_check(tmp_path):
    assert main(['validate', '--quick', '--only', 'nope', '--out', str(tmp_path)]) == EXIT_ERROR


def test_synthesize_then_recover_potential(tmp_path):
    config = tmp_path / 'experiment.yaml'
    config.write_text(EXPERIMENT, encoding='utf-8')
    requests = tmp_path / 'requests.json'
    dataset = tmp_path / 'data' / 'seed2.json'
    out = tmp_path / 'recovery'
    assert main(['plan-measurements', '--config', str(config), '--out', str(requests)]) == EXIT_OK

    from src.domain_fields import save_scene
    from src.phantoms import build_preset
    scene_path = tmp_path / 'scene' / 'scene.json'
    save_scene(build_preset('potential-ball', 16), scene_path)
    assert main(['synthesize-farfield', '--scene', str(scene_path), '--requests', str(requests),
                 '--threads', '2', '--out', str(dataset)]) == EXIT_OK
    code = main(['recover-potential', '--datasets', str(tmp_path / 'data' / '*.json'), '--scene', str(scene_path),
                 '--radii', '0,1.5', '--k-list', '6', '--directions', '1', '--seed', '2', '--out', str(out)])
    # 单一波数没有外推, 结果带旗标
    assert code == 2
    assert (out / 'volumes' / 'V.f64').exists()
    assert (out / 'report' / 'samples.csv').exists()


def test_report_requires_manifest(tmp_path):
    assert main(['report', '--run-dir', str(tmp_path)]) == EXIT_ERROR


def test_run_then_report_checks_outputs(tmp_path):
    config = tmp_path / 'experiment.yaml'
    run_dir = tmp_path / 'run'
    config.write_text(EXPERIMENT + f"output_dir: {run_dir.as_posix()}\n", encoding='utf-8')
    # 单一波数, 结果带旗标
    assert main(['run', '--config', str(config)]) == EXIT_FLAGGED
    assert main(['report', '--run-dir', str(run_dir)]) == EXIT_FLAGGED

    recovery = run_dir / 'recovery.json'
    recovery.write_text(recovery.read_text(encoding='utf-8') + '\n', encoding='utf-8')
    assert main(['report', '--run-dir', str(run_dir)]) == EXIT_ERROR
