"""
原始体数据读写

体数据格式: 小端 float64，x 下标变化最快 (Fortran 顺序)，无文件头。
所有写入都先写临时文件再 os.replace，保证读者不会看到半个文件。
"""

import hashlib
import json
import os
import logging
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

VOLUME_DTYPE = '<f8'


def sha256_bytes(data: bytes) -> str:
    """计算字节串的 SHA-256 十六进制摘要"""
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: PathLike, chunk_size: int = 1 << 20) -> str:
    """
    计算文件的 SHA-256

    Args:
        path: 文件路径
        chunk_size: 分块读取大小

    Returns:
        十六进制摘要
    """
    digest = hashlib.sha256()
    with open(path, 'rb') as fh:
        while True:
            block = fh.read(chunk_size)
            if not block:
                break
            digest.update(block)
    return digest.hexdigest()


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """写临时文件后原子替换"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + '.tmp')
    with open(tmp, 'wb') as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    """以 UTF-8 原子写入文本"""
    return atomic_write_bytes(path, text.encode('utf-8'))


def dumps_canonical(payload: Dict[str, Any]) -> str:
    """规范化 JSON (键排序, 固定缩进)，重复写入得到相同字节"""
    return json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def volume_bytes(values: np.ndarray) -> bytes:
    """把三维实数组编码为原始体字节 (x 最快)"""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3:
        raise ValueError(f"体数据必须是三维数组, 实际维数 {values.ndim}")
    return values.ravel(order='F').astype(VOLUME_DTYPE).tobytes()


def write_volume(path: PathLike, values: np.ndarray) -> str:
    """
    写出原始体文件

    Args:
        path: 目标路径
        values: 形状 (n1, n2, n3) 的实数组

    Returns:
        写入内容的 SHA-256
    """
    data = volume_bytes(values)
    atomic_write_bytes(path, data)
    logger.debug(f"体数据已写入 {path} ({len(data)} 字节)")
    return sha256_bytes(data)


def read_volume(path: PathLike, shape: Tuple[int, int, int]) -> np.ndarray:
    """
    读取原始体文件

    Args:
        path: 文件路径
        shape: 期望形状 (n1, n2, n3)

    Returns:
        float64 数组 (C 内存布局, 下标 [ix, iy, iz])
    """
    flat = np.fromfile(path, dtype=VOLUME_DTYPE)
    expected = int(np.prod(shape))
    if flat.size != expected:
        raise ValueError(f"体文件 {path} 含 {flat.size} 个体素, 期望 {expected}")
    return np.ascontiguousarray(flat.reshape(shape, order='F').astype(np.float64))
