"""
Schrödinger Lab 命令行入口

子命令:
1. plan-measurements / run: 实验配置 → 请求文件 / 完整流水线
2. simulate-forward / synthesize-farfield: 正向求解与远场数据集合成
3. recover-variance / recover-potential / recover-source: 三类反问题
4. validate / report: 验证套件与报告表

返回码: 0 成功, 2 恢复诊断带旗标, 1 出错
"""

import glob
import os
import sys
import logging
from datetime import datetime
from pathlib import Path
from typing import List, Optional

# 统一项目根目录路径解析 (避免不同执行路径导致的问题)
_current_file = Path(__file__).resolve()
_project_root = _current_file.parent.parent
if str(_project_root) not in sys.path:
    sys.path.insert(0, str(_project_root))

# 导入配置 (会自动加载环境变量)
from config import Config, ManifestConfig, RuntimeConfig

from src.domain_fields import MediumScene, load_scene
from src.exceptions import LabError
from src.farfield_dataset import load_dataset, merge_datasets, save_dataset, synthesize_requests
from src.forward_solver import IncidentConfig, create_forward_solver, normalize
from src.phantoms import PRESETS, build_preset
from src.pipeline import (
    ExperimentConfig, PotentialSection, SceneSection, SeedPolicy, SourceSection, VarianceSection,
    load_experiment_config, read_plan, recover_potential, recover_source, recover_variance, run_pipeline,
    write_plan, write_recovery_outputs,
)
from src.report import RECOVERY_FILE, REPORT_DIR, emit_report, read_recovery_tables, write_csv, write_report_tables
from src.run_manifest import ManifestStore, load_manifest
from src.validation import ValidationSettings, run_validation_suite
from src.volume_io import atomic_write_text, dumps_canonical, write_volume
from src.white_noise import draw_noise

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FLAGGED = 2


# 配置日志
def setup_logging():
    """设置日志系统，按时间戳创建不同的日志文件"""
    log_level = Config.logging.LEVEL
    base_log_file = Config.logging.LOG_FILE

    # 生成带时间戳的日志文件名
    log_dir = os.path.dirname(base_log_file)
    log_name, log_ext = os.path.splitext(os.path.basename(base_log_file))
    timestamp = datetime.now().strftime('%Y%m%d_%H%M%S')
    timestamped_log_file = os.path.join(log_dir, f"{log_name}_{timestamp}{log_ext}")
    os.makedirs(log_dir, exist_ok=True)

    valid_levels = ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']
    if log_level not in valid_levels:
        print(f"警告: 无效的日志级别 '{log_level}'，使用默认级别 INFO")
        log_level = 'INFO'

    logging.basicConfig(
        level=getattr(logging, log_level),
        format=Config.logging.FORMAT,
        datefmt=Config.logging.DATE_FORMAT,
        handlers=[
            logging.FileHandler(timestamped_log_file, encoding='utf-8'),
            logging.StreamHandler(sys.stdout)
        ],
        force=True  # 强制重新配置，避免其他模块的配置影响
    )

    logger = logging.getLogger(__name__)
    logger.info("=" * 80)
    logger.info("Schrödinger Lab 启动")
    logger.info(f"日志级别: {log_level}")
    logger.info(f"日志文件: {timestamped_log_file}")
    logger.info("=" * 80)
    return logger


logger = logging.getLogger(__name__)


def _scene_arg(value: str) -> MediumScene:
    """预设名或场景清单路径"""
    if value in PRESETS:
        return build_preset(value)
    return load_scene(value)


def _scene_section(value: str) -> SceneSection:
    return SceneSection(preset=value) if value in PRESETS else SceneSection(path=value)


def _floats(text: str) -> List[float]:
    return [float(x) for x in text.split(',') if x.strip()]


def _ints(text: str) -> List[int]:
    return [int(x) for x in text.split(',') if x.strip()]


def _exit_code(flags: List[str]) -> int:
    if flags:
        logger.warning(f"⚠️ 恢复诊断带旗标: {flags}")
        return EXIT_FLAGGED
    return EXIT_OK


def _finish_recovery(outcome, out: Path) -> int:
    write_recovery_outputs(outcome, out)
    write_report_tables(read_recovery_tables(out / RECOVERY_FILE), out / REPORT_DIR)
    return _exit_code(outcome.flags)


# ============================================
# 子命令
# ============================================

def cmd_plan(args) -> int:
    config = load_experiment_config(args.config)
    path = write_plan(config, args.out)
    logger.info(f"✅ 请求文件: {path}")
    return EXIT_OK


def cmd_run(args) -> int:
    Config.print_summary()
    manifest = run_pipeline(load_experiment_config(args.config))
    return EXIT_FLAGGED if manifest.flagged else EXIT_OK


def cmd_simulate(args) -> int:
    scene = _scene_arg(args.scene)
    solver = create_forward_solver(scene, tol=args.tol)
    inc = IncidentConfig.active(normalize(_floats(args.d))) if args.d else IncidentConfig.passive()
    noise = draw_noise(scene.grid, args.seed) if args.seed is not None else None
    result = solver.solve_mild(args.k, inc, noise)
    out = Path(args.out)
    write_volume(out / 'u_sc.re.f64', result.u_sc.values.real)
    write_volume(out / 'u_sc.im.f64', result.u_sc.values.imag)
    summary = {
        'k': args.k,
        'alpha': inc.alpha,
        'd': None if inc.d is None else list(inc.d),
        'seed': args.seed,
        'series_terms': result.series_terms,
        'residual': result.residual,
        'history': result.history,
        'contraction': result.contraction.model_dump(),
        'grid': scene.grid.to_dict(),
        'scene_hash': scene.digest(),
    }
    atomic_write_text(out / 'solve.json', dumps_canonical(summary))
    logger.info(f"✅ solve_mild 完成: {result.series_terms} 项, 残差 {result.residual:.2e}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    scene = _scene_arg(args.scene)
    solver = create_forward_solver(scene, tol=args.tol)
    threads = args.threads or RuntimeConfig.resolve_threads()
    dataset = synthesize_requests(solver, read_plan(args.requests), threads=threads)
    save_dataset(dataset, args.out)
    return _exit_code(solver.resolution_flags())


def _load_datasets(patterns: List[str]):
    paths = sorted({p for pattern in patterns for p in glob.glob(pattern)})
    if not paths:
        raise LabError(f"没有匹配的数据集: {patterns}")
    return merge_datasets([load_dataset(p) for p in paths])


def cmd_recover_variance(args) -> int:
    scene = _scene_arg(args.scene)
    section = VarianceSection(
        j_list=_ints(args.j_list),
        k_values=_floats(args.k_values) if args.k_values else None,
        n_k=args.n_k,
        taus=_floats(args.taus),
        directions=args.directions,
        variant=args.variant,
    )
    config = ExperimentConfig(mode='variance', scene=_scene_section(args.scene), variance=section,
                              seeds=SeedPolicy(explicit=[args.seed]))
    data = _load_datasets(args.datasets)
    return _finish_recovery(recover_variance(config, scene, data), Path(args.out))


def cmd_recover_potential(args) -> int:
    scene = _scene_arg(args.scene)
    section = PotentialSection(radii=_floats(args.radii), directions=args.directions, k_list=_floats(args.k_list))
    config = ExperimentConfig(mode='potential', scene=_scene_section(args.scene), potential=section,
                              seeds=SeedPolicy(explicit=[args.seed]))
    data = _load_datasets(args.datasets)
    return _finish_recovery(recover_potential(config, scene, data), Path(args.out))


def cmd_recover_source(args) -> int:
    scene = _scene_arg(args.potential)
    data = _load_datasets(args.datasets)
    seeds = [s for s in data.seeds() if s is not None]
    section = SourceSection(k_list=_floats(args.k_list), directions=args.directions,
                            d_fixed=tuple(normalize(_floats(args.d))), eigen_count=args.eigen_count)
    config = ExperimentConfig(mode='source', scene=_scene_section(args.potential), source=section,
                              seeds=SeedPolicy(explicit=seeds))
    return _finish_recovery(recover_source(config, scene, data), Path(args.out))


def cmd_validate(args) -> int:
    settings = ValidationSettings.quick() if args.quick else ValidationSettings()
    table = run_validation_suite(settings, only=args.only or ())
    path = write_csv(Path(args.out) / 'validation.csv', table)
    failed = table.loc[~table['passed'].astype(bool)]
    logger.info(f"验证结果: {len(table) - len(failed)}/{len(table)} 通过 → {path}")
    return _exit_code([f"{r.check}.{r.metric}" for r in failed.itertuples()])


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    manifest = load_manifest(str(run_dir / ManifestConfig.MANIFEST_NAME))
    store = ManifestStore(str(run_dir), manifest.config_hash, manifest.artifact_version,
                          manifest_name=ManifestConfig.MANIFEST_NAME, backup_enabled=False)
    store.verify()
    emit_report(store.manifest, run_dir)
    return EXIT_FLAGGED if store.manifest.flagged else EXIT_OK


def build_parser():
    import argparse

    parser = argparse.ArgumentParser(description='Schrödinger Lab - 随机薛定谔方程反散射数值实验室')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('plan-measurements', help='实验配置 → 请求文件')
    p.add_argument('--config', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_plan)

    p = sub.add_parser('run', help='运行完整流水线 (可恢复)')
    p.add_argument('--config', required=True)
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser('simulate-forward', help='网格上的散射场')
    p.add_argument('--scene', required=True, help='预设名或场景清单')
    p.add_argument('--k', type=float, required=True)
    p.add_argument('--d', default='', help='入射方向 "x,y,z" (省略为被动)')
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--tol', type=float, default=None)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser('synthesize-farfield', help='请求文件 → 远场数据集')
    p.add_argument('--scene', required=True)
    p.add_argument('--requests', required=True)
    p.add_argument('--threads', type=int, default=None)
    p.add_argument('--tol', type=float, default=None)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_synthesize)

    p = sub.add_parser('recover-variance', help='单实现被动数据 → σ²')
    p.add_argument('--datasets', nargs='+', required=True)
    p.add_argument('--scene', required=True, help='提供目标网格 (及真值对照)')
    p.add_argument('--taus', required=True)
    p.add_argument('--j-list', default='1,2,3,4')
    p.add_argument('--k-values', default='')
    p.add_argument('--n-k', type=int, default=None)
    p.add_argument('--directions', type=int, default=16)
    p.add_argument('--variant', choices=['raw', 'centered'], default='raw')
    p.add_argument('--seed', type=int, required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_recover_variance)

    p = sub.add_parser('recover-potential', help='单实现主动数据 → V')
    p.add_argument('--datasets', nargs='+', required=True)
    p.add_argument('--scene', required=True)
    p.add_argument('--radii', required=True)
    p.add_argument('--k-list', required=True)
    p.add_argument('--directions', type=int, default=16)
    p.add_argument('--seed', type=int, required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_recover_potential)

    p = sub.add_parser('recover-source', help='多种子主动数据 + 已知 V → f')
    p.add_argument('--datasets', nargs='+', required=True, help='按种子保存的数据集 (可用通配符)')
    p.add_argument('--potential', required=True, help='含已知 V 的场景')
    p.add_argument('--k-list', required=True)
    p.add_argument('--directions', type=int, default=16)
    p.add_argument('--d', default='0,0,1')
    p.add_argument('--eigen-count', type=int, default=10)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_recover_source)

    p = sub.add_parser('validate', help='验证套件 → validation.csv')
    p.add_argument('--quick', action='store_true', help='小规模快速检验')
    p.add_argument('--only', nargs='*', default=None)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser('report', help='由运行清单输出报告表')
    p.add_argument('--run-dir', required=True)
    p.set_defaults(handler=cmd_report)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """主入口函数"""
    args = build_parser().parse_args(argv)

    is_valid, errors = Config.validate_all()
    if not is_valid:
        print("配置验证失败:\n  - " + "\n  - ".join(errors))
        return EXIT_ERROR

    setup_logging()
    try:
        return args.handler(args)
    except (LabError, ValueError, OSError) as e:
        logger.error(f"❌ {args.command} 失败: {e}", exc_info=Config.logging.LEVEL == 'DEBUG')
        return EXIT_ERROR


if __name__ == '__main__':
    sys.exit(main())
