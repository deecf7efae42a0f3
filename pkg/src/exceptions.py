"""
异常定义

所有实验室异常都继承自 LabError，便于 CLI 统一捕获并记录到运行清单
"""

from typing import Any, List, Optional, Sequence, Tuple


class LabError(Exception):
    """实验室异常基类"""


class GridMismatchError(LabError, ValueError):
    """两个对象定义在不同网格上"""


class BelowThresholdWavenumberError(LabError):
    """收缩门控失败: ‖R_k V‖ 估计值 ≥ 1"""

    def __init__(self, report: Any):
        self.report = report
        super().__init__(
            f"波数 k={report.k:g} 低于收缩阈值: ‖R_k V‖ 估计 {report.norm_estimate:.4f} ≥ 1"
        )


class SeriesTruncationError(LabError):
    """Neumann 级数在 max_terms 项内未达到容差"""

    def __init__(self, k: float, max_terms: int, history: Sequence[float]):
        self.k = k
        self.max_terms = max_terms
        self.history = list(history)
        last = self.history[-1] if self.history else float('nan')
        super().__init__(
            f"k={k:g}: Neumann 级数 {max_terms} 项后相对更新仍为 {last:.3e}"
        )


class CoverageGapError(LabError, KeyError):
    """数据集缺少估计所需的记录"""

    def __init__(self, missing: List[Tuple], what: str = "记录"):
        self.missing = list(missing)
        preview = ", ".join(str(m) for m in self.missing[:5])
        more = f" 等共 {len(self.missing)} 项" if len(self.missing) > 5 else ""
        super().__init__(f"覆盖缺口: 缺少{what} {preview}{more}")

    def __str__(self) -> str:
        # KeyError 默认会给消息加引号
        return str(self.args[0])


class MixedSeedError(LabError, ValueError):
    """单实现估计器收到了多个种子的数据"""


class InsufficientSeedsError(LabError, ValueError):
    """种子数不足以给出有意义的统计量"""


class SmallnessGateError(LabError):
    """源恢复的小性门控失败"""

    def __init__(self, v_norm: float, threshold: float, detail: str = ""):
        self.v_norm = v_norm
        self.threshold = threshold
        msg = f"小性门控失败: ‖V‖∞ = {v_norm:.4g}, 门限 = {threshold:.4g}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class FixedPointDivergenceError(LabError):
    """源恢复不动点迭代发散"""

    def __init__(self, history: Sequence[float]):
        self.history = list(history)
        super().__init__(f"不动点迭代发散, 残差历史: {[f'{r:.3e}' for r in self.history]}")


class EigenSolverError(LabError):
    """本征求解器未收敛"""


class ChecksumMismatchError(LabError):
    """文件内容与记录的校验和不一致"""

    def __init__(self, path: str, expected: str, actual: str):
        self.path = path
        super().__init__(f"校验和不一致: {path} (期望 {expected[:12]}…, 实际 {actual[:12]}…)")


class SynthesisError(LabError):
    """数据集合成时某个请求元组失败"""

    def __init__(self, request: Any, cause: Optional[BaseException] = None):
        self.request = request
        self.cause = cause
        super().__init__(f"合成失败 {request}: {cause}")


class ConfigError(LabError, ValueError):
    """实验配置无效"""
