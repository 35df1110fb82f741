"""系数表达式

用户自定义算子的系数以小型表达式字符串给出。语法（Python表达式的子集）::

    expr    := number | name | expr op expr | -expr | +expr | call | (expr)
    op      := + | - | * | / | **
    call    := exp(e) | sin(e) | cos(e) | abs(e) | pow(e, e) | min(e, e) | max(e, e)
    name    := x1 ... xN    （剖面表达式中为 x）

求值直接在numpy数组上进行，不调用eval。
"""
# -*- coding: utf-8 -*-

import ast
from dataclasses import dataclass, field
from typing import Callable, Dict, Sequence, Tuple

import numpy as np

from .errors import ExpressionError

_FUNCTIONS: Dict[str, Tuple[int, Callable[..., np.ndarray]]] = {
    "exp": (1, np.exp),
    "sin": (1, np.sin),
    "cos": (1, np.cos),
    "abs": (1, np.abs),
    "pow": (2, np.power),
    "min": (2, np.minimum),
    "max": (2, np.maximum),
}

_BINARY = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}

_UNARY = {ast.USub: np.negative, ast.UAdd: np.positive}


def coordinate_names(dim: int) -> Tuple[str, ...]:
    """返回 x1..xN"""
    return tuple(f"x{i + 1}" for i in range(dim))


@dataclass(frozen=True)
class Expression:
    """已校验的表达式

    Attributes:
        source: 原始字符串
        variables: 变量名，按points的列顺序
    """

    source: str
    variables: Tuple[str, ...]
    tree: ast.Expression = field(repr=False, compare=False)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """在 (n, k) 点阵上求值，返回 (n,)"""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != len(self.variables):
            raise ExpressionError(
                f"表达式 '{self.source}' 需要 {len(self.variables)} 个坐标，得到 {pts.shape[1]}"
            )
        env = {name: pts[:, k] for k, name in enumerate(self.variables)}
        with np.errstate(all="ignore"):
            value = _evaluate(self.tree.body, env)
        out = np.broadcast_to(np.asarray(value, dtype=float), (pts.shape[0],))
        return np.array(out, dtype=float)


def _evaluate(node: ast.AST, env: Dict[str, np.ndarray]) -> np.ndarray:
    if isinstance(node, ast.Constant):
        return np.asarray(float(node.value))
    if isinstance(node, ast.Name):
        return env[node.id]
    if isinstance(node, ast.BinOp):
        return _BINARY[type(node.op)](_evaluate(node.left, env), _evaluate(node.right, env))
    if isinstance(node, ast.UnaryOp):
        return _UNARY[type(node.op)](_evaluate(node.operand, env))
    if isinstance(node, ast.Call):
        _, fn = _FUNCTIONS[node.func.id]  # type: ignore[attr-defined]
        return fn(*[_evaluate(arg, env) for arg in node.args])
    raise ExpressionError(f"无法求值的节点: {type(node).__name__}")


def _validate(node: ast.AST, variables: Sequence[str], source: str) -> None:
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ExpressionError(f"'{source}' 中只允许数值常量", token=repr(node.value))
        return
    if isinstance(node, ast.Name):
        if node.id not in variables:
            raise ExpressionError(
                f"'{source}' 中出现未知变量 '{node.id}'", allowed=list(variables)
            )
        return
    if isinstance(node, ast.BinOp):
        if type(node.op) not in _BINARY:
            raise ExpressionError(f"'{source}' 中出现不支持的运算符", op=type(node.op).__name__)
        _validate(node.left, variables, source)
        _validate(node.right, variables, source)
        return
    if isinstance(node, ast.UnaryOp):
        if type(node.op) not in _UNARY:
            raise ExpressionError(f"'{source}' 中出现不支持的一元运算符")
        _validate(node.operand, variables, source)
        return
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCTIONS:
            raise ExpressionError(f"'{source}' 中出现不支持的函数", allowed=sorted(_FUNCTIONS))
        arity, _ = _FUNCTIONS[node.func.id]
        if node.keywords or len(node.args) != arity:
            raise ExpressionError(f"函数 {node.func.id} 需要 {arity} 个位置参数")
        for arg in node.args:
            _validate(arg, variables, source)
        return
    raise ExpressionError(f"'{source}' 含有不允许的语法: {type(node).__name__}")


def compile_expression(source: str, variables: Sequence[str]) -> Expression:
    """解析并校验表达式

    Args:
        source: 表达式字符串，数值也可直接传入
        variables: 允许出现的变量名

    Returns:
        可在点阵上求值的Expression

    Raises:
        ExpressionError: 语法不合法或使用了白名单之外的名称
    """
    if isinstance(source, (int, float)) and not isinstance(source, bool):
        source = repr(float(source))
    if not isinstance(source, str) or not source.strip():
        raise ExpressionError("表达式必须是非空字符串")
    try:
        tree = ast.parse(source.strip(), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"表达式语法错误: '{source}'", position=exc.offset) from exc
    _validate(tree.body, tuple(variables), source)
    return Expression(source=source.strip(), variables=tuple(variables), tree=tree)
