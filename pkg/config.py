"""
Schrödinger Lab 配置模块

从环境变量加载配置并提供给其他模块使用
"""

import os
from pathlib import Path
from typing import List, Dict, Any, Optional
from dotenv import load_dotenv

# 项目根目录
PROJECT_ROOT = Path(__file__).parent

# 加载环境变量 (.env 可选)
env_file = PROJECT_ROOT / '.env'
if env_file.exists():
    load_dotenv(env_file)


def _env_int(name: str, default: Optional[int]) -> Optional[int]:
    """读取整数环境变量，空字符串视为未设置"""
    raw = os.getenv(name, '')
    if raw.strip() == '':
        return default
    return int(raw)


# ============================================
# 正向求解器配置
# ============================================
class SolverConfig:
    """正向求解器配置 (Neumann 级数与收缩门控)"""

    # 级数截断: 相对 L²(D) 更新小于 TOL 或达到 MAX_TERMS 时停止
    TOL = float(os.getenv('SOLVER_TOL', '1e-8'))
    MAX_TERMS = int(os.getenv('SOLVER_MAX_TERMS', '25'))

    # 预解算子实现: fast-convolution (倍增网格 FFT) 或 direct-sum
    RESOLVENT_METHOD = os.getenv('RESOLVENT_METHOD', 'fast-convolution')

    # 收缩估计 (幂迭代)
    CONTRACTION_TRIALS = int(os.getenv('CONTRACTION_TRIALS', '2'))
    CONTRACTION_ITERATIONS = int(os.getenv('CONTRACTION_ITERATIONS', '12'))
    CONTRACTION_SEED = int(os.getenv('CONTRACTION_SEED', '20240601'))

    # 核表缓存目录，留空则不落盘
    KERNEL_CACHE_DIR = os.getenv('KERNEL_CACHE_DIR', '')

    @classmethod
    def validate(cls) -> bool:
        """验证配置是否有效"""
        if cls.TOL <= 0 or cls.MAX_TERMS < 1:
            return False
        if cls.RESOLVENT_METHOD not in ('fast-convolution', 'direct-sum'):
            return False
        if cls.CONTRACTION_TRIALS < 1 or cls.CONTRACTION_ITERATIONS < 1:
            return False
        return True


# ============================================
# 方差恢复配置
# ============================================
class VarianceConfig:
    """方差恢复配置 (频带相关图)"""

    BAND_GAMMA = float(os.getenv('BAND_GAMMA', '0.1'))
    BAND_C = float(os.getenv('BAND_C', '1.0'))
    BAND_NODES = int(os.getenv('BAND_NODES', '32'))

    # 统计稳定性最少种子数
    MIN_STABILITY_SEEDS = int(os.getenv('MIN_STABILITY_SEEDS', '50'))

    # 重建诊断阈值
    MIN_DIRECTIONS = int(os.getenv('MIN_DIRECTIONS', '16'))
    CLAMP_MASS_LIMIT = float(os.getenv('CLAMP_MASS_LIMIT', '0.10'))

    @classmethod
    def validate(cls) -> bool:
        """验证配置是否有效"""
        return cls.BAND_GAMMA > 0 and cls.BAND_C > 0 and cls.BAND_NODES >= 8


# ============================================
# 势恢复配置
# ============================================
class PotentialConfig:
    """势恢复配置"""

    # |k(x̂ − d₂)| ≥ k·MIN_GAP
    MIN_GAP = float(os.getenv('POTENTIAL_MIN_GAP', '0.5'))


# ============================================
# 源恢复配置
# ============================================
class SourceConfig:
    """源期望恢复配置"""

    # ‖V‖∞ 小性门限
    V_LIMIT = float(os.getenv('SOURCE_V_LIMIT', '1.0'))

    FIXED_POINT_ITERS = int(os.getenv('SOURCE_FIXED_POINT_ITERS', '5'))
    FIXED_POINT_TOL = float(os.getenv('SOURCE_FIXED_POINT_TOL', '1e-10'))

    EIGEN_MAX_COUNT = int(os.getenv('EIGEN_MAX_COUNT', '20'))

    @classmethod
    def validate(cls) -> bool:
        """验证配置是否有效"""
        return cls.V_LIMIT > 0 and 1 <= cls.FIXED_POINT_ITERS <= 5


# ============================================
# 运行时配置
# ============================================
class RuntimeConfig:
    """运行时配置 (输出目录与线程数覆盖)"""

    OUTPUT_DIR = os.getenv('LAB_OUTPUT_DIR', '')
    THREADS = _env_int('LAB_THREADS', None)

    @classmethod
    def resolve_output_dir(cls, configured: str) -> Path:
        """环境变量覆盖优先于实验配置中的输出目录"""
        return Path(cls.OUTPUT_DIR or configured)

    @classmethod
    def resolve_threads(cls) -> int:
        """线程数: 环境覆盖，否则取 CPU 数 (至少 1)"""
        if cls.THREADS is not None and cls.THREADS > 0:
            return cls.THREADS
        return max(1, os.cpu_count() or 1)


# ============================================
# 日志配置
# ============================================
class LoggingConfig:
    """日志配置"""

    # 可设置为: DEBUG, INFO, WARNING, ERROR, CRITICAL
    LEVEL = os.getenv('LOG_LEVEL', 'INFO').upper()
    LOG_FILE = str(PROJECT_ROOT / 'logs' / 'schrodinger_lab.log')

    # 日志格式
    FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


# ============================================
# 运行清单配置
# ============================================
class ManifestConfig:
    """运行清单持久化配置"""

    MANIFEST_NAME = 'run_manifest.json'
    BACKUP_ENABLED = True
    ARTIFACT_VERSION = '0.3.0'


# ============================================
# 统一配置对象
# ============================================
class Config:
    """统一配置对象 - 提供给其他模块使用"""

    # 项目信息
    PROJECT_ROOT = PROJECT_ROOT
    VERSION = '0.3.1'

    # 各子配置
    solver = SolverConfig
    variance = VarianceConfig
    potential = PotentialConfig
    source = SourceConfig
    runtime = RuntimeConfig
    logging = LoggingConfig
    manifest = ManifestConfig

    @classmethod
    def validate_all(cls) -> tuple[bool, List[str]]:
        """
        验证所有配置

        Returns:
            (是否全部有效, 错误信息列表)
        """
        errors = []

        if not cls.solver.validate():
            errors.append("求解器配置无效 (SOLVER_TOL / SOLVER_MAX_TERMS / RESOLVENT_METHOD)")

        if not cls.variance.validate():
            errors.append("频带调度配置无效 (BAND_GAMMA / BAND_C 需 > 0, BAND_NODES ≥ 8)")

        if not cls.source.validate():
            errors.append("源恢复配置无效 (SOURCE_V_LIMIT > 0, 不动点迭代 1..5)")

        if cls.logging.LEVEL not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            errors.append(f"无效的日志级别: {cls.logging.LEVEL}")

        return len(errors) == 0, errors

    @classmethod
    def to_dict(cls) -> Dict[str, Any]:
        """
        转换为字典格式 (写入运行清单的 settings 快照)

        Returns:
            配置字典
        """
        return {
            'solver': {
                'tol': cls.solver.TOL,
                'max_terms': cls.solver.MAX_TERMS,
                'method': cls.solver.RESOLVENT_METHOD,
                'contraction_trials': cls.solver.CONTRACTION_TRIALS,
                'contraction_iterations': cls.solver.CONTRACTION_ITERATIONS,
                'contraction_seed': cls.solver.CONTRACTION_SEED,
            },
            'variance': {
                'gamma': cls.variance.BAND_GAMMA,
                'c': cls.variance.BAND_C,
                'n_k': cls.variance.BAND_NODES,
                'min_stability_seeds': cls.variance.MIN_STABILITY_SEEDS,
            },
            'potential': {
                'min_gap': cls.potential.MIN_GAP,
            },
            'source': {
                'v_limit': cls.source.V_LIMIT,
                'fixed_point_iters': cls.source.FIXED_POINT_ITERS,
                'eigen_max_count': cls.source.EIGEN_MAX_COUNT,
            },
            'logging': {
                'level': cls.logging.LEVEL,
                'log_file': cls.logging.LOG_FILE,
            },
        }

    @classmethod
    def print_summary(cls):
        """打印配置摘要"""
        print("\n" + "=" * 60)
        print("Schrödinger Lab 配置摘要")
        print("=" * 60)

        print(f"\n📦 项目版本: {cls.VERSION}")
        print(f"📁 项目根目录: {cls.PROJECT_ROOT}")

        print(f"\n🧮 正向求解器:")
        print(f"  - 级数容差: {cls.solver.TOL:g}")
        print(f"  - 最大项数: {cls.solver.MAX_TERMS}")
        print(f"  - 预解算子: {cls.solver.RESOLVENT_METHOD}")
        print(f"  - 收缩估计: {cls.solver.CONTRACTION_TRIALS} 次试验 × {cls.solver.CONTRACTION_ITERATIONS} 次迭代")
        print(f"  - 核表缓存: {cls.solver.KERNEL_CACHE_DIR or '✗ 未启用'}")

        print(f"\n📈 方差恢复:")
        print(f"  - 调度: K_j = {cls.variance.BAND_C:g}·j^(2+{cls.variance.BAND_GAMMA:g})")
        print(f"  - 每带节点数: {cls.variance.BAND_NODES}")

        print(f"\n🛡️ 源恢复:")
        print(f"  - ‖V‖∞ 门限: {cls.source.V_LIMIT:g}")
        print(f"  - 不动点迭代上限: {cls.source.FIXED_POINT_ITERS}")

        print(f"\n⚙️ 运行时:")
        print(f"  - 输出目录覆盖: {cls.runtime.OUTPUT_DIR or '✗ 未设置'}")
        print(f"  - 线程数: {cls.runtime.resolve_threads()}")

        print(f"\n📝 日志配置:")
        print(f"  - 日志级别: {cls.logging.LEVEL}")
        print(f"  - 日志文件: {cls.logging.LOG_FILE}")

        print("\n" + "=" * 60 + "\n")


# 如果直接运行此文件,打印配置摘要
if __name__ == '__main__':
    Config.print_summary()

    is_valid, errors = Config.validate_all()
    if is_valid:
        print("✅ 配置验证通过!\n")
    else:
        print("\n❌ 配置验证失败:\n  - " + "\n  - ".join(errors))
