"""错误类型

hypolab的异常层次。配置类错误以退出码2结束命令，数值类错误以退出码3结束命令。
"""
# -*- coding: utf-8 -*-

from typing import Any, Dict, List, Optional

import numpy as np


def _jsonable(value: Any) -> Any:
    """把细节字段转换为可JSON序列化的值"""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    if isinstance(value, dict):
        return {str(key): _jsonable(item) for key, item in value.items()}
    return value


class HypolabError(Exception):
    """hypolab所有异常的基类

    Attributes:
        message: 中文错误描述
        details: 附加的诊断数据（见证点、残差等）
    """

    exit_code = 1

    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    def to_dict(self) -> Dict[str, Any]:
        """序列化为字典，写入report.json"""
        return {
            "error": type(self).__name__,
            "message": self.message,
            "details": _jsonable(self.details),
        }


class ConfigError(HypolabError, ValueError):
    """输入或配置不合法"""

    exit_code = 2


class NumericalError(HypolabError, RuntimeError):
    """数值计算失败"""

    exit_code = 3


# 配置与输入
class UnknownGallery(ConfigError):
    pass


class InvalidProfile(ConfigError):
    pass


class ExpressionError(ConfigError):
    pass


class GridTooSmall(ConfigError):
    pass


class GridTooLarge(ConfigError):
    pass


class EmptyDomain(ConfigError):
    pass


class DisconnectedDomain(ConfigError):
    pass


class ConfigValidationError(ConfigError):
    """配置文件校验失败，携带全部诊断信息"""

    def __init__(self, diagnostics: List[str], source: Optional[str] = None) -> None:
        super().__init__(
            f"配置校验失败（{len(diagnostics)}处问题）",
            diagnostics=list(diagnostics),
            source=source,
        )
        self.diagnostics = list(diagnostics)


# 数值
class InvalidOperator(NumericalError):
    pass


class TotallyDegeneratePoint(NumericalError):
    pass


class CoefficientError(NumericalError):
    pass


class NoExteriorBall(NumericalError):
    pass


class OutsideBallOfValidity(NumericalError):
    pass


class SingularSystem(NumericalError):
    pass


class SolverDiverged(NumericalError):
    pass


class PreconditionViolated(NumericalError):
    pass


class DegenerateBasepoint(NumericalError):
    pass


class CollarViolation(NumericalError):
    pass


class ChainFailure(NumericalError):
    pass


class CharacteristicDirection(NumericalError):
    pass


class LeftDomain(NumericalError):
    """积分曲线离开了包围盒"""

    def __init__(self, t: float, point: Any) -> None:
        super().__init__(f"积分曲线在 t={t:.6g} 离开包围盒", t=t, point=point)
        self.t = t
        self.point = np.asarray(point, dtype=float)
