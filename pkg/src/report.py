"""
报告输出

把恢复阶段写下的 recovery.json 展开为固定表头的 CSV (供外部绘图)。
复数列拆成 _re / _im 两列; 缺失或为空的表只写表头。
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence, Union

import numpy as np
import pandas as pd

from src.exceptions import ChecksumMismatchError
from src.run_manifest import RunManifest
from src.volume_io import atomic_write_text, dumps_canonical, sha256_file

logger = logging.getLogger(__name__)

RECOVERY_FILE = 'recovery.json'
REPORT_DIR = 'report'

# 表名 → 表头 (文档化的 CSV 格式)
REPORT_TABLES: Dict[str, List[str]] = {
    'error_vs_K': ['series', 'direction', 'radius', 'K', 'estimate_re', 'estimate_im', 'abs_change'],
    'samples': ['series', 'direction', 'radius', 'estimate_re', 'estimate_im', 'oracle_re', 'oracle_im',
                'abs_error'],
    'stability': ['K', 'variance', 'stderr', 'n_seeds'],
    'slope_fits': ['series', 'slope', 'intercept', 'stderr', 'ci_low', 'ci_high', 'r_value', 'n_points'],
    'eigen_residuals': ['mode', 'eigenvalue', 'projection', 'stderr', 'z'],
    'eigen_completeness': ['m', 'error', 'relative_error'],
    'fixed_point': ['iteration', 'relative_update'],
    'validation': ['check', 'metric', 'value', 'expected', 'tolerance', 'passed'],
    'summary': ['key', 'value'],
}


def _native(value: Any) -> Any:
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def frame_to_rows(frame: pd.DataFrame) -> List[Dict[str, Any]]:
    """
    DataFrame → JSON 可序列化的行 (复数列拆分为 _re / _im)

    Args:
        frame: 任意表

    Returns:
        行字典列表, 数值为 Python 原生类型, nan 记为 None
    """
    frame = frame.copy()
    for column in list(frame.columns):
        if np.iscomplexobj(frame[column].to_numpy()):
            values = frame[column].to_numpy().astype(np.complex128)
            position = frame.columns.get_loc(column)
            frame = frame.drop(columns=[column])
            frame.insert(position, f"{column}_re", values.real)
            frame.insert(position + 1, f"{column}_im", values.imag)
    return [
        {str(key): _native(value) for key, value in row.items()}
        for row in frame.to_dict(orient='records')
    ]


def write_recovery(path: Union[str, Path], tables: Mapping[str, Union[pd.DataFrame, Sequence[Dict[str, Any]]]],
                   flags: Sequence[str] = (), warnings: Sequence[str] = ()) -> Path:
    """把恢复阶段的表写成规范 JSON"""
    payload = {
        'tables': {
            name: frame_to_rows(table) if isinstance(table, pd.DataFrame) else [
                {key: _native(value) for key, value in row.items()} for row in table
            ]
            for name, table in tables.items()
        },
        'flags': list(flags),
        'warnings': list(warnings),
    }
    return atomic_write_text(path, dumps_canonical(payload))


def table_frame(name: str, rows: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    """按文档化表头整理一张表 (多余的列被丢弃, 缺失的列为空)"""
    columns = REPORT_TABLES[name]
    if not rows:
        return pd.DataFrame(columns=columns)
    frame = pd.DataFrame(list(rows))
    return frame.reindex(columns=columns)


def write_csv(path: Union[str, Path], frame: pd.DataFrame) -> Path:
    text = frame.to_csv(index=False, lineterminator='\n', float_format='%.17g')
    return atomic_write_text(path, text)


def emit_report(manifest: RunManifest, output_dir: Union[str, Path]) -> List[Path]:
    """
    输出全部报告表

    Args:
        manifest: 运行清单 (recovery.json 的校验和从中读取)
        output_dir: 运行输出目录

    Returns:
        写出的 CSV 路径 (按 REPORT_TABLES 顺序)

    Raises:
        ChecksumMismatchError: recovery.json 与清单记录不一致
    """
    output_dir = Path(output_dir)
    recovery = output_dir / RECOVERY_FILE
    tables: Dict[str, List[Dict[str, Any]]] = {}
    if RECOVERY_FILE in manifest.outputs:
        expected = manifest.outputs[RECOVERY_FILE]
        actual = sha256_file(recovery) if recovery.exists() else 'missing'
        if actual != expected:
            raise ChecksumMismatchError(str(recovery), expected, actual)
        tables = read_recovery_tables(recovery)
    else:
        logger.warning("⚠️ 清单中没有恢复结果, 只输出表头")

    return write_report_tables(tables, output_dir / REPORT_DIR)


def read_recovery_tables(path: Union[str, Path]) -> Dict[str, List[Dict[str, Any]]]:
    with open(path, 'r', encoding='utf-8') as fh:
        return json.load(fh).get('tables', {})


def write_report_tables(tables: Mapping[str, Sequence[Dict[str, Any]]], report_dir: Union[str, Path]) -> List[Path]:
    """每张文档化的表写一个 CSV (缺失的表只写表头)"""
    report_dir = Path(report_dir)
    paths = []
    for name in REPORT_TABLES:
        paths.append(write_csv(report_dir / f"{name}.csv", table_frame(name, tables.get(name, []))))
    logger.info(f"✅ 报告已输出到 {report_dir} ({len(paths)} 张表)")
    return paths
