"""
运行清单模块

负责在多次运行之间持久化流水线状态:
配置哈希、场景哈希、阶段状态、按 SHA-256 索引的输出文件表
"""

import json
import os
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, Field

from src.exceptions import ChecksumMismatchError
from src.volume_io import atomic_write_text, sha256_file

logger = logging.getLogger(__name__)

StageStatus = Literal['pending', 'running', 'completed', 'failed', 'skipped']


class StageRecord(BaseModel):
    """单个阶段的状态"""

    status: StageStatus = 'pending'
    input_hash: str = ''
    outputs: List[str] = Field(default_factory=list, description="相对输出目录的文件名")
    started_at: Optional[str] = None
    finished_at: Optional[str] = None
    error: Optional[str] = None
    flags: List[str] = Field(default_factory=list, description="恢复诊断旗标")


class RunManifest(BaseModel):
    """运行清单"""

    config_hash: str
    scene_hash: str = ''
    artifact_version: str
    mode: str = ''
    created_at: str = Field(default_factory=lambda: datetime.now().isoformat())
    updated_at: str = Field(default_factory=lambda: datetime.now().isoformat())
    stages: Dict[str, StageRecord] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict, description="文件名 → SHA-256")
    settings: Dict[str, Any] = Field(default_factory=dict, description="全局配置快照 (Config.to_dict)")

    @property
    def flagged(self) -> bool:
        return any(stage.flags for stage in self.stages.values())

    @property
    def failed(self) -> bool:
        return any(stage.status == 'failed' for stage in self.stages.values())

    def comparable(self) -> Dict[str, Any]:
        """去掉时间戳后的内容 (用于比较两次运行)"""
        payload = self.model_dump()
        payload.pop('created_at')
        payload.pop('updated_at')
        for stage in payload['stages'].values():
            stage.pop('started_at')
            stage.pop('finished_at')
        return payload


class ManifestStore:
    """运行清单的读写与阶段记账"""

    def __init__(self, output_dir: str, config_hash: str, artifact_version: str,
                 manifest_name: str = 'run_manifest.json', backup_enabled: bool = True):
        """
        初始化运行清单

        Args:
            output_dir: 输出目录
            config_hash: 实验配置哈希
            artifact_version: 产物版本
            manifest_name: 清单文件名
            backup_enabled: 是否保留 .backup
        """
        self.output_dir = Path(output_dir)
        self.path = self.output_dir / manifest_name
        self.backup_enabled = backup_enabled
        self.manifest = self._load_or_initialize(config_hash, artifact_version)
        logger.info(f"运行清单初始化完成 ({self.path})")

    def _load_or_initialize(self, config_hash: str, artifact_version: str) -> RunManifest:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        if self.path.exists():
            try:
                with open(self.path, 'r', encoding='utf-8') as fh:
                    manifest = RunManifest(**json.load(fh))
            except (OSError, ValueError) as e:
                logger.error(f"加载运行清单失败: {e}, 将创建新清单")
            else:
                if manifest.config_hash == config_hash:
                    logger.info(f"从 {self.path} 恢复运行清单")
                    return manifest
                logger.warning("⚠️ 实验配置已变化, 重新开始")
        return RunManifest(config_hash=config_hash, artifact_version=artifact_version)

    # ------------------------------------------------------------------
    # 阶段记账
    # ------------------------------------------------------------------

    def stage(self, name: str) -> StageRecord:
        return self.manifest.stages.setdefault(name, StageRecord())

    def _output_present(self, filename: str) -> bool:
        """
        输出文件存在且与索引一致

        Returns:
            文件缺失时 False

        Raises:
            ChecksumMismatchError: 文件存在但内容已变化
        """
        path = self.output_dir / filename
        if not path.exists():
            return False
        expected = self.manifest.outputs.get(filename, '')
        actual = sha256_file(path)
        if actual != expected:
            logger.error(f"❌ 输出 {filename} 的校验和与运行清单不一致")
            raise ChecksumMismatchError(str(path), expected, actual)
        return True

    def is_complete(self, name: str, input_hash: str) -> bool:
        """
        阶段已完成, 输入哈希一致, 且每个输出都存在

        Raises:
            ChecksumMismatchError: 已完成阶段的某个输出被修改
        """
        record = self.manifest.stages.get(name)
        if record is None or record.status != 'completed' or record.input_hash != input_hash:
            return False
        for filename in record.outputs:
            if not self._output_present(filename):
                logger.warning(f"⚠️ 阶段 {name} 的输出 {filename} 缺失, 重新计算")
                return False
        return True

    def start(self, name: str, input_hash: str):
        record = self.stage(name)
        record.status = 'running'
        record.input_hash = input_hash
        record.error = None
        record.flags = []
        record.started_at = datetime.now().isoformat()
        self.save()

    def complete(self, name: str, outputs: List[Path], flags: Optional[List[str]] = None):
        """记录阶段完成及其输出文件的校验和"""
        record = self.stage(name)
        record.status = 'completed'
        record.outputs = []
        for path in outputs:
            filename = Path(path).relative_to(self.output_dir).as_posix()
            self.manifest.outputs[filename] = sha256_file(path)
            record.outputs.append(filename)
        record.flags = list(flags or [])
        record.finished_at = datetime.now().isoformat()
        self.save()
        logger.info(f"✅ 阶段 {name} 完成 ({len(outputs)} 个输出)")

    def fail(self, name: str, error: BaseException):
        record = self.stage(name)
        record.status = 'failed'
        record.error = f"{type(error).__name__}: {error}"
        record.finished_at = datetime.now().isoformat()
        self.save()
        logger.error(f"❌ 阶段 {name} 失败: {record.error}")

    def skip(self, name: str):
        self.stage(name).status = 'completed'
        logger.info(f"阶段 {name} 已是最新, 跳过")

    def output_hash(self, filename: str) -> str:
        return self.manifest.outputs.get(filename, '')

    # ------------------------------------------------------------------
    # 持久化
    # ------------------------------------------------------------------

    def verify(self) -> None:
        """
        校验输出索引

        Raises:
            ChecksumMismatchError: 某个输出文件缺失或内容已变化
        """
        for filename, expected in self.manifest.outputs.items():
            if not self._output_present(filename):
                raise ChecksumMismatchError(str(self.output_dir / filename), expected, 'missing')

    def save(self):
        """原子写入清单; 启用备份时保留上一版为 .backup"""
        self.manifest.updated_at = datetime.now().isoformat()
        if self.backup_enabled and self.path.exists():
            os.replace(self.path, self.path.with_name(self.path.name + '.backup'))
        text = json.dumps(self.manifest.model_dump(), indent=2, sort_keys=True, ensure_ascii=False)
        atomic_write_text(self.path, text)
        logger.debug(f"运行清单已保存到 {self.path}")


def load_manifest(path: str) -> RunManifest:
    with open(path, 'r', encoding='utf-8') as fh:
        return RunManifest(**json.load(fh))


def create_manifest_store(output_dir: str, config_hash: str) -> ManifestStore:
    """
    根据配置创建运行清单

    Returns:
        ManifestStore实例
    """
    from config import ManifestConfig
    return ManifestStore(output_dir, config_hash, ManifestConfig.ARTIFACT_VERSION,
                         ManifestConfig.MANIFEST_NAME, ManifestConfig.BACKUP_ENABLED)
