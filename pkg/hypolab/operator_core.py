"""算子核心

散度型（可能退化的）椭圆算子

    L u = (1/V) Σ ∂ᵢ(V aᵢⱼ ∂ⱼ u) − (c + ε) u

的定义、示例库、非完全退化检查、向量场 X₀,…,X_N 与切向性常数。
所有系数均为向量化的纯函数：输入 (n, N) 点阵，输出按点堆叠的数组。
"""
# -*- coding: utf-8 -*-

import dataclasses
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import qmc

from .errors import (
    CoefficientError,
    ConfigError,
    InvalidOperator,
    InvalidProfile,
    TotallyDegeneratePoint,
    UnknownGallery,
)
from .expressions import compile_expression, coordinate_names

logger = logging.getLogger(__name__)

ArrayFn = Callable[[np.ndarray], np.ndarray]

DEFAULT_SEED = 0x5EED

SYMMETRY_RTOL = 1e-12
PSD_TOL = 1e-10
SPAN_RTOL = 1e-8
FD_STEP_SCALE = 1e-5


class HypoellipticStatus(Enum):
    """亚椭圆性来源"""

    CERTIFIED = "certified"  # 文献证书（示例库）
    ASSERTED = "asserted-by-user"  # 用户声明


def _as_points(points: np.ndarray, dim: int) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != dim:
        raise ValueError(f"点的维数应为 {dim}，得到 {pts.shape[1]}")
    return pts


def _zeros(points: np.ndarray) -> np.ndarray:
    return np.zeros(np.atleast_2d(points).shape[0])


def _ones(points: np.ndarray) -> np.ndarray:
    return np.ones(np.atleast_2d(points).shape[0])


def _constant(value: float) -> ArrayFn:
    def fn(points: np.ndarray) -> np.ndarray:
        return np.full(np.atleast_2d(points).shape[0], float(value))

    return fn


@dataclass(frozen=True)
class Box:
    """轴对齐的有界区域"""

    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.lower) != len(self.upper) or not self.lower:
            raise ValueError("Box的上下界维数不一致")
        if any(not lo < hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("Box的每个轴都需要 lo < hi")

    @classmethod
    def from_bounds(cls, bounds: Sequence[Sequence[float]]) -> "Box":
        return cls(tuple(float(b[0]) for b in bounds), tuple(float(b[1]) for b in bounds))

    @property
    def dim(self) -> int:
        return len(self.lower)

    def vertices(self) -> np.ndarray:
        corners = np.array(np.meshgrid(*zip(self.lower, self.upper), indexing="ij"))
        return corners.reshape(self.dim, -1).T

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        pts = np.atleast_2d(points)
        lo = np.asarray(self.lower) - tol
        hi = np.asarray(self.upper) + tol
        return np.all((pts >= lo) & (pts <= hi), axis=1)


@dataclass(frozen=True, eq=False)
class OperatorSpec:
    """散度型算子

    Attributes:
        dim: 空间维数 N
        a: 系数矩阵场，(n, N) -> (n, N, N)
        v: 测度密度 V，(n, N) -> (n,)
        c: 零阶项，(n, N) -> (n,)
        epsilon: 谱平移 ε ≥ 0
        grad_v: V 的解析梯度，(n, N) -> (n, N)
        grad_a: aᵢⱼ 的解析导数，(n, N) -> (n, N, N, N)，下标 [k, i, j] 表示 ∂ₖaᵢⱼ
        name: 名称
        params: 构造参数
        hypoelliptic: 亚椭圆性来源
        citation: 文献出处
    """

    dim: int
    a: ArrayFn
    v: ArrayFn = _ones
    c: ArrayFn = _zeros
    epsilon: float = 0.0
    grad_v: Optional[ArrayFn] = None
    grad_a: Optional[ArrayFn] = None
    name: str = "custom"
    params: Dict[str, Any] = field(default_factory=dict)
    hypoelliptic: HypoellipticStatus = HypoellipticStatus.ASSERTED
    citation: str = ""
    zero_order: str = "0"

    def __post_init__(self) -> None:
        if not isinstance(self.dim, int) or self.dim < 1:
            raise InvalidOperator("维数必须是正整数", dim=self.dim)
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise InvalidOperator("谱平移 ε 必须是非负有限数", epsilon=self.epsilon)

    def evaluate(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """在点阵上求 (a, v, c)"""
        pts = _as_points(points, self.dim)
        n = pts.shape[0]
        with np.errstate(all="ignore"):
            a = np.asarray(self.a(pts), dtype=float).reshape(n, self.dim, self.dim)
            v = np.asarray(self.v(pts), dtype=float).reshape(n)
            c = np.asarray(self.c(pts), dtype=float).reshape(n)
        return a, v, c

    def matrix_at(self, x: Sequence[float]) -> np.ndarray:
        return self.evaluate(np.asarray(x, dtype=float)[None, :])[0][0]

    def with_shift(self, epsilon: float) -> "OperatorSpec":
        return dataclasses.replace(self, epsilon=float(epsilon))

    def with_zero_order(self, c: Union[float, str, ArrayFn]) -> "OperatorSpec":
        """替换零阶项 c，可为常数、表达式或函数"""
        if isinstance(c, (int, float, str)):
            expr = compile_expression(c, coordinate_names(self.dim))
            return dataclasses.replace(self, c=expr, zero_order=expr.source)
        label = getattr(c, "source", getattr(c, "__name__", "callable"))
        return dataclasses.replace(self, c=c, zero_order=str(label))

    def describe(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "dim": self.dim,
            "params": dict(self.params),
            "epsilon": self.epsilon,
            "c": self.zero_order,
            "hypoelliptic": self.hypoelliptic.value,
            "citation": self.citation,
        }


@dataclass
class InvariantReport:
    """OperatorSpec 不变量检查结果"""

    passed: bool
    n_points: int
    max_asymmetry: float
    min_psd_margin: float
    min_v: float
    finite: bool
    witness: Optional[List[float]] = None
    reason: str = ""


def check_invariants(spec: OperatorSpec, points: np.ndarray) -> InvariantReport:
    """逐点检查对称性、半正定性、V > 0 与有限性"""
    pts = _as_points(points, spec.dim)
    a, v, c = spec.evaluate(pts)
    finite = np.isfinite(a).all(axis=(1, 2)) & np.isfinite(v) & np.isfinite(c)
    if not finite.all():
        bad = int(np.argmin(finite))
        return InvariantReport(
            False, len(pts), np.nan, np.nan, np.nan, False, pts[bad].tolist(), "non-finite"
        )
    scale = np.maximum(np.abs(a).max(axis=(1, 2)), 1e-300)
    asym = np.abs(a - np.swapaxes(a, 1, 2)).max(axis=(1, 2)) / scale
    trace = np.trace(a, axis1=1, axis2=2)
    eig_min = np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, 1, 2)))[:, 0]
    margin = eig_min + PSD_TOL * (1.0 + np.abs(trace))
    report = InvariantReport(
        passed=True,
        n_points=len(pts),
        max_asymmetry=float(asym.max()),
        min_psd_margin=float(margin.min()),
        min_v=float(v.min()),
        finite=True,
    )
    for mask, reason in ((asym > SYMMETRY_RTOL, "asymmetric"), (margin < 0, "not-psd"),
                         (v <= 0, "nonpositive-density")):
        if mask.any():
            report.passed = False
            report.witness = pts[int(np.argmax(mask))].tolist()
            report.reason = reason
            break
    return report


def require_invariants(spec: OperatorSpec, points: np.ndarray) -> None:
    """不变量不成立时抛出异常

    Raises:
        CoefficientError: 系数出现非有限值
        InvalidOperator: 对称性、半正定性或 V > 0 不成立
    """
    report = check_invariants(spec, points)
    if report.passed:
        return
    if not report.finite:
        raise CoefficientError(f"算子 {spec.name} 的系数在某点非有限", point=report.witness)
    raise InvalidOperator(
        f"算子 {spec.name} 违反不变量: {report.reason}",
        point=report.witness,
        max_asymmetry=report.max_asymmetry,
        min_psd_margin=report.min_psd_margin,
        min_v=report.min_v,
    )


# ---------------------------------------------------------------------------
# 示例库
# ---------------------------------------------------------------------------


def _flat_power(t: np.ndarray, scale: float, power: float) -> Tuple[np.ndarray, np.ndarray]:
    """exp(−scale/|t|^power) 及其导数，t = 0 处取 0"""
    t = np.asarray(t, dtype=float)
    value = np.zeros_like(t)
    deriv = np.zeros_like(t)
    nz = t != 0
    with np.errstate(all="ignore"):
        r = np.abs(t[nz])
        e = np.exp(-scale / r**power)
        value[nz] = e
        d = scale * power * np.sign(t[nz]) * e / r ** (power + 1)
        deriv[nz] = np.where(e > 0, d, 0.0)
    return value, deriv


def _diagonal_operator(
    dim: int,
    entries: Sequence[Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]],
    v: ArrayFn = _ones,
    grad_v: Optional[ArrayFn] = None,
    **meta: Any,
) -> OperatorSpec:
    """由对角元（值与梯度）构造算子"""

    def a(points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        out = np.zeros((pts.shape[0], dim, dim))
        for k, entry in enumerate(entries):
            out[:, k, k] = entry(pts)[0]
        return out

    def grad_a(points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        out = np.zeros((pts.shape[0], dim, dim, dim))
        for k, entry in enumerate(entries):
            out[:, :, k, k] = entry(pts)[1]
        return out

    if grad_v is None and v is _ones:
        grad_v = lambda pts: np.zeros_like(np.atleast_2d(pts))  # noqa: E731
    return OperatorSpec(dim=dim, a=a, v=v, grad_v=grad_v, grad_a=grad_a, **meta)


def _unit_entry(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return np.ones(points.shape[0]), np.zeros_like(points)


def _profile_entry(
    axis: int, scale: float, power: float
) -> Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]:
    """只依赖 x_axis 的对角元 exp(−scale/|x_axis|^power)"""

    def entry(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        value, deriv = _flat_power(points[:, axis], scale, power)
        grad = np.zeros_like(points)
        grad[:, axis] = deriv
        return value, grad

    return entry


def _validate_profile(profile: Callable[[np.ndarray], np.ndarray], source: str) -> None:
    """剖面须为偶函数、非负、在 [0,∞) 上不减"""
    t = np.linspace(0.0, 4.0, 401)
    with np.errstate(all="ignore"):
        right = np.asarray(profile(t), dtype=float)
        left = np.asarray(profile(-t), dtype=float)
    if not (np.isfinite(right).all() and np.isfinite(left).all()):
        raise InvalidProfile(f"剖面 {source} 在采样点上非有限")
    tol = 1e-12 * (1.0 + np.abs(right))
    if np.any(np.abs(right - left) > tol):
        k = int(np.argmax(np.abs(right - left) - tol))
        raise InvalidProfile(f"剖面 {source} 不是偶函数", t=float(t[k]))
    if np.any(right < 0):
        raise InvalidProfile(f"剖面 {source} 出现负值", t=float(t[int(np.argmin(right))]))
    drop = np.diff(right) < -tol[1:]
    if drop.any():
        raise InvalidProfile(f"剖面 {source} 在 [0,∞) 上不是不减的", t=float(t[int(np.argmax(drop))]))


def _build_laplace(params: Dict[str, Any]) -> OperatorSpec:
    dim = params.get("dim", 2)
    if not isinstance(dim, int) or isinstance(dim, bool) or dim < 1:
        raise ConfigError("laplace 的 dim 必须是正整数", dim=dim)
    return _diagonal_operator(dim, [_unit_entry] * dim, name="laplace", params={"dim": dim})


def _build_grushin(params: Dict[str, Any]) -> OperatorSpec:
    profile = params.get("profile", "flat")
    expression = params.get("a")
    if expression is not None:
        expr = compile_expression(expression, ("x",))
        _validate_profile(lambda t: expr(np.asarray(t)[:, None]), expr.source)

        def entry(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            value = expr(points[:, :1]) ** 2
            return value, np.zeros_like(points)

        # 表达式剖面没有解析导数，grad_a 交给有限差分
        spec = _diagonal_operator(2, [_unit_entry, entry], name="grushin_fedii")
        spec = dataclasses.replace(spec, grad_a=None, params={"a": expr.source})
    elif profile == "flat":
        spec = _diagonal_operator(
            2, [_unit_entry, _profile_entry(0, 2.0, 2.0)], name="grushin_fedii",
            params={"a": "exp(-1/x**2)"},
        )
    elif profile == "power":
        k = params.get("k", 1.0)
        if isinstance(k, bool) or not isinstance(k, (int, float)) or k <= 0:
            raise InvalidProfile("power 剖面的指数 k 必须为正数", k=k)

        def power_entry(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            t = points[:, 0]
            grad = np.zeros_like(points)
            with np.errstate(all="ignore"):
                grad[:, 0] = np.where(t != 0, 2 * k * np.sign(t) * np.abs(t) ** (2 * k - 1), 0.0)
            return np.abs(t) ** (2 * k), grad

        spec = _diagonal_operator(
            2, [_unit_entry, power_entry], name="grushin_fedii",
            params={"profile": "power", "k": float(k)},
        )
    else:
        raise InvalidProfile(f"未知的剖面类型: {profile}", allowed=["flat", "power"])
    return spec


def _build_lie2d(params: Dict[str, Any]) -> OperatorSpec:
    def stretched(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        value = np.exp(2.0 * points[:, 1])
        grad = np.zeros_like(points)
        grad[:, 1] = 2.0 * value
        return value, grad

    def density(points: np.ndarray) -> np.ndarray:
        return np.exp(-np.atleast_2d(points)[:, 1])

    def density_grad(points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        grad = np.zeros_like(pts)
        grad[:, 1] = -np.exp(-pts[:, 1])
        return grad

    return _diagonal_operator(
        2, [stretched, _unit_entry], v=density, grad_v=density_grad, name="lie2d"
    )


def _build_christ3d(params: Dict[str, Any]) -> OperatorSpec:
    degenerate = _profile_entry(0, 2.0, 1.0)
    return _diagonal_operator(3, [_unit_entry, degenerate, degenerate], name="christ3d")


def _build_kusuoka_stroock3d(params: Dict[str, Any]) -> OperatorSpec:
    return _diagonal_operator(
        3, [_unit_entry, _profile_entry(0, 2.0, 0.5), _unit_entry], name="kusuoka_stroock3d"
    )


def _build_morimoto4d(params: Dict[str, Any]) -> OperatorSpec:
    def quadratic(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        grad = np.zeros_like(points)
        grad[:, 1] = 2.0 * points[:, 1]
        return points[:, 1] ** 2, grad

    return _diagonal_operator(
        4,
        [quadratic, _unit_entry, _profile_entry(0, 2.0, 1.0 / 3.0), _unit_entry],
        name="morimoto4d",
    )


def _heisenberg_generators(points: np.ndarray) -> List[np.ndarray]:
    pts = np.atleast_2d(points)
    one, zero = np.ones(len(pts)), np.zeros(len(pts))
    return [
        np.stack([one, zero, 2.0 * pts[:, 1]], axis=1),
        np.stack([zero, one, -2.0 * pts[:, 0]], axis=1),
    ]


def _build_heisenberg3d(params: Dict[str, Any]) -> OperatorSpec:
    def grad_a(points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        out = np.zeros((len(pts), 3, 3, 3))
        out[:, 0, 1, 2] = out[:, 0, 2, 1] = -2.0
        out[:, 0, 2, 2] = 8.0 * pts[:, 0]
        out[:, 1, 0, 2] = out[:, 1, 2, 0] = 2.0
        out[:, 1, 2, 2] = 8.0 * pts[:, 1]
        return out

    spec = from_vector_fields(
        [lambda p: _heisenberg_generators(p)[0], lambda p: _heisenberg_generators(p)[1]],
        dim=3,
        name="heisenberg3d",
    )
    return dataclasses.replace(
        spec,
        grad_a=grad_a,
        grad_v=lambda pts: np.zeros_like(np.atleast_2d(pts)),
    )


@dataclass(frozen=True)
class GalleryEntry:
    """示例库条目"""

    name: str
    dim: Optional[int]
    description: str
    citation: str
    params: Tuple[str, ...]
    builder: Callable[[Dict[str, Any]], OperatorSpec]


_GALLERY: Dict[str, GalleryEntry] = {
    entry.name: entry
    for entry in [
        GalleryEntry("laplace", None, "A = I, V ≡ 1", "classical", ("dim",), _build_laplace),
        GalleryEntry(
            "grushin_fedii", 2, "A = diag(1, a(x1)²), V ≡ 1",
            "Fediĭ; infinitely degenerate at x1 = 0", ("a", "profile", "k"), _build_grushin,
        ),
        GalleryEntry(
            "lie2d", 2, "A = diag(e^{2x2}, 1), V = e^{-x2}",
            "left-invariant sub-Laplacian on (R², *)", (), _build_lie2d,
        ),
        GalleryEntry(
            "christ3d", 3, "A = diag(1, e^{-2/|x1|}, e^{-2/|x1|})", "Christ", (), _build_christ3d,
        ),
        GalleryEntry(
            "kusuoka_stroock3d", 3, "A = diag(1, e^{-2/sqrt|x1|}, 1)",
            "Kusuoka–Stroock", (), _build_kusuoka_stroock3d,
        ),
        GalleryEntry(
            "morimoto4d", 4, "A = diag(x2², 1, e^{-2/|x1|^{1/3}}, 1)", "Morimoto", (),
            _build_morimoto4d,
        ),
        GalleryEntry(
            "heisenberg3d", 3, "X1 = ∂1 + 2x2∂3, X2 = ∂2 − 2x1∂3, A = SSᵀ",
            "Hörmander; Lie generators of the Heisenberg group", (), _build_heisenberg3d,
        ),
    ]
}


def gallery_names() -> List[str]:
    return list(_GALLERY)


def gallery_entries() -> List[GalleryEntry]:
    return list(_GALLERY.values())


def gallery(name: str, params: Optional[Dict[str, Any]] = None) -> OperatorSpec:
    """按名称构造示例算子

    Args:
        name: 示例名称
        params: 示例参数（如 grushin_fedii 的剖面）

    Returns:
        带有 "certified" 亚椭圆标记的 OperatorSpec

    Raises:
        UnknownGallery: 名称不存在
        InvalidProfile: 剖面不满足偶、非负、不减
    """
    if name not in _GALLERY:
        raise UnknownGallery(f"未知的示例算子: {name}", allowed=gallery_names())
    entry = _GALLERY[name]
    params = dict(params or {})
    unknown = sorted(set(params) - set(entry.params))
    if unknown:
        raise ConfigError(f"示例 {name} 不接受参数: {', '.join(unknown)}", allowed=entry.params)
    spec = entry.builder(params)
    logger.debug("构造示例算子 %s (dim=%d)", name, spec.dim)
    return dataclasses.replace(
        spec, hypoelliptic=HypoellipticStatus.CERTIFIED, citation=entry.citation
    )


# ---------------------------------------------------------------------------
# 用户自定义算子
# ---------------------------------------------------------------------------


def from_expressions(
    dim: int,
    a: Sequence[Sequence[Union[str, float]]],
    v: Union[str, float] = "1",
    c: Union[str, float] = "0",
    epsilon: float = 0.0,
    name: str = "custom",
) -> OperatorSpec:
    """由表达式构造算子

    a 可以是完整的 N×N 列表，也可以是上三角（第 i 行有 N−i 项），后者按对称补全。
    """
    names = coordinate_names(dim)
    rows = [list(row) for row in a]
    if len(rows) != dim:
        raise ConfigError(f"系数矩阵需要 {dim} 行，得到 {len(rows)}")
    full = all(len(row) == dim for row in rows)
    upper = all(len(row) == dim - i for i, row in enumerate(rows))
    if not (full or upper):
        raise ConfigError("系数矩阵必须是 N×N 或上三角形式")
    entries: Dict[Tuple[int, int], Any] = {}
    for i, row in enumerate(rows):
        for offset, source in enumerate(row):
            j = offset if full else i + offset
            entries[(i, j)] = compile_expression(source, names)
            if not full:
                entries[(j, i)] = entries[(i, j)]
    v_expr = compile_expression(v, names)
    c_expr = compile_expression(c, names)

    def a_field(points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        out = np.empty((pts.shape[0], dim, dim))
        for (i, j), expr in entries.items():
            out[:, i, j] = expr(pts)
        return out

    return OperatorSpec(
        dim=dim,
        a=a_field,
        v=v_expr,
        c=c_expr,
        epsilon=float(epsilon),
        name=name,
        params={"a": [[entries[(i, j)].source for j in range(dim)] for i in range(dim)],
                "v": v_expr.source},
        zero_order=c_expr.source,
    )


def from_vector_fields(
    fields: Sequence[ArrayFn],
    dim: int,
    v: ArrayFn = _ones,
    grad_v: Optional[ArrayFn] = None,
    name: str = "vector_fields",
) -> OperatorSpec:
    """次拉普拉斯算子 −Σ Xⱼ* Xⱼ（伴随取在 L²(V dx) 中）

    A = S Sᵀ，S 的列为各向量场的系数。
    """
    if not fields:
        raise ConfigError("至少需要一个向量场")

    def a_field(points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        s = np.stack([np.asarray(f(pts), dtype=float).reshape(len(pts), dim) for f in fields],
                     axis=2)
        return np.einsum("nim,njm->nij", s, s)

    return OperatorSpec(dim=dim, a=a_field, v=v, grad_v=grad_v, name=name,
                        params={"fields": len(fields)})


def vector_fields_from_expressions(
    dim: int, fields: Sequence[Sequence[Union[str, float]]]
) -> List[ArrayFn]:
    """把表达式列表转换成向量场函数"""
    names = coordinate_names(dim)
    out: List[ArrayFn] = []
    for components in fields:
        if len(components) != dim:
            raise ConfigError(f"向量场需要 {dim} 个分量，得到 {len(components)}")
        exprs = [compile_expression(s, names) for s in components]
        out.append(lambda pts, exprs=exprs: np.stack([e(pts) for e in exprs], axis=1))
    return out


# ---------------------------------------------------------------------------
# (NTD)
# ---------------------------------------------------------------------------


@dataclass
class NtdReport:
    """非完全退化检查结果"""

    passed: bool
    min_trace: float
    argmin: List[float]
    samples: int
    seed: int


def check_ntd(
    spec: OperatorSpec, region: Box, samples: int, seed: int = DEFAULT_SEED
) -> NtdReport:
    """在区域内低差异采样，检查 trace A(x) > 0

    采样点为扰乱Halton序列加上区域顶点。
    """
    if samples < 1:
        raise ValueError("samples 必须 ≥ 1")
    if region.dim != spec.dim:
        raise ValueError("区域维数与算子维数不一致")
    sampler = qmc.Halton(d=spec.dim, scramble=True, seed=seed)
    unit = sampler.random(samples)
    pts = qmc.scale(unit, region.lower, region.upper)
    pts = np.vstack([pts, region.vertices()])
    a, _, _ = spec.evaluate(pts)
    trace = np.trace(a, axis1=1, axis2=2)
    k = int(np.argmin(trace))
    report = NtdReport(
        passed=bool(np.all(trace > 0)),
        min_trace=float(trace[k]),
        argmin=pts[k].tolist(),
        samples=len(pts),
        seed=seed,
    )
    logger.debug("NTD %s: min trace %.6g at %s", spec.name, report.min_trace, report.argmin)
    return report


# ---------------------------------------------------------------------------
# 向量场
# ---------------------------------------------------------------------------


class VectorFieldSet:
    """向量场 X₁..X_N（A 的各行）、漂移 X₀ 与一阶系数 b

    无解析梯度时使用步长 h = 1e-5·(1+|x|) 的中心差分。
    """

    def __init__(self, spec: OperatorSpec, fd_step_scale: float = FD_STEP_SCALE) -> None:
        self.spec = spec
        self.fd_step_scale = fd_step_scale

    def _steps(self, pts: np.ndarray) -> np.ndarray:
        return self.fd_step_scale * (1.0 + np.linalg.norm(pts, axis=1))

    def x_fields(self, points: np.ndarray) -> np.ndarray:
        """(n, N, N)，第 i 行为 Xᵢ"""
        return self.spec.evaluate(points)[0]

    def grad_v(self, points: np.ndarray) -> np.ndarray:
        pts = _as_points(points, self.spec.dim)
        if self.spec.grad_v is not None:
            return np.asarray(self.spec.grad_v(pts), dtype=float).reshape(pts.shape)
        h = self._steps(pts)
        out = np.empty_like(pts)
        for k in range(self.spec.dim):
            shift = np.zeros_like(pts)
            shift[:, k] = h
            out[:, k] = (self.spec.evaluate(pts + shift)[1]
                         - self.spec.evaluate(pts - shift)[1]) / (2 * h)
        return out

    def grad_a(self, points: np.ndarray) -> np.ndarray:
        pts = _as_points(points, self.spec.dim)
        n, dim = pts.shape
        if self.spec.grad_a is not None:
            return np.asarray(self.spec.grad_a(pts), dtype=float).reshape(n, dim, dim, dim)
        h = self._steps(pts)
        out = np.empty((n, dim, dim, dim))
        for k in range(dim):
            shift = np.zeros_like(pts)
            shift[:, k] = h
            diff = self.spec.evaluate(pts + shift)[0] - self.spec.evaluate(pts - shift)[0]
            out[:, k] = diff / (2 * h)[:, None, None]
        return out

    def log_grad_v(self, points: np.ndarray) -> np.ndarray:
        """∂ᵢV / V"""
        pts = _as_points(points, self.spec.dim)
        return self.grad_v(pts) / self.spec.evaluate(pts)[1][:, None]

    def x0(self, points: np.ndarray) -> np.ndarray:
        """X₀ = Σᵢ (∂ᵢV/V) Xᵢ"""
        pts = _as_points(points, self.spec.dim)
        return np.einsum("ni,nij->nj", self.log_grad_v(pts), self.x_fields(pts))

    def b(self, points: np.ndarray) -> np.ndarray:
        """bⱼ = (1/V) Σᵢ ∂ᵢ(V aᵢⱼ) = X₀ⱼ + Σᵢ ∂ᵢaᵢⱼ"""
        pts = _as_points(points, self.spec.dim)
        return self.x0(pts) + np.einsum("niij->nj", self.grad_a(pts))

    def combination(self, xi: Sequence[float], points: np.ndarray) -> np.ndarray:
        """ξ₀X₀ + Σ ξᵢXᵢ"""
        pts = _as_points(points, self.spec.dim)
        xi = np.asarray(xi, dtype=float)
        if xi.shape != (self.spec.dim + 1,):
            raise ValueError(f"控制系数 ξ 需要 {self.spec.dim + 1} 个分量")
        out = np.einsum("i,nij->nj", xi[1:], self.x_fields(pts))
        if xi[0] != 0.0:
            out = out + xi[0] * self.x0(pts)
        return out

    def span_residual(self, points: np.ndarray) -> np.ndarray:
        """X₀ 相对 {Xᵢ} 张成空间的最小二乘相对残差"""
        pts = _as_points(points, self.spec.dim)
        a = self.x_fields(pts)
        x0 = self.x0(pts)
        coef = np.einsum("nj,nji->ni", x0, np.linalg.pinv(a))
        residual = x0 - np.einsum("ni,nij->nj", coef, a)
        return np.linalg.norm(residual, axis=1) / (1.0 + np.linalg.norm(x0, axis=1))


def extract_fields(spec: OperatorSpec) -> VectorFieldSet:
    return VectorFieldSet(spec)


# ---------------------------------------------------------------------------
# 切向性
# ---------------------------------------------------------------------------


@dataclass
class TangentialityCertificate:
    """⟨Xᵢ,ν⟩² ≤ λᵢ⟨Aν,ν⟩ 的经验证书"""

    point: List[float]
    lambdas: List[float]
    max_ratio: List[float]
    directions: int
    passed: bool


def tangentiality_bound(
    spec: OperatorSpec, x: Sequence[float], samples: int = 128, seed: int = DEFAULT_SEED
) -> TangentialityCertificate:
    """计算切向性常数 λᵢ(x)

    取 λᵢ = aᵢᵢ(x)（Cauchy–Schwarz：⟨Aeᵢ,ν⟩² ≤ ⟨Aeᵢ,eᵢ⟩⟨Aν,ν⟩），aᵢᵢ = 0 时 Xᵢ = 0，取 trace A。
    在随机单位向量与坐标向量上验证。

    Raises:
        TotallyDegeneratePoint: A(x) 的迹不为正
    """
    point = np.asarray(x, dtype=float)
    a = spec.matrix_at(point)
    trace = float(np.trace(a))
    if not trace > 0:
        raise TotallyDegeneratePoint(f"A(x) 在 {point.tolist()} 处完全退化", point=point)
    diag = np.diag(a)
    lambdas = np.where(diag > 0, diag, trace)
    rng = np.random.default_rng(seed)
    nu = rng.standard_normal((samples, spec.dim))
    nu /= np.linalg.norm(nu, axis=1, keepdims=True)
    nu = np.vstack([nu, np.eye(spec.dim)])
    q = np.einsum("si,ij,sj->s", nu, a, nu)
    proj_sq = (nu @ a.T) ** 2
    with np.errstate(all="ignore"):
        ratio = np.where(q[:, None] > 1e-300, proj_sq / q[:, None],
                         np.where(proj_sq > 1e-300, np.inf, 0.0))
    passed = bool(np.all(proj_sq <= lambdas[None, :] * q[:, None] + 1e-12))
    return TangentialityCertificate(
        point=point.tolist(),
        lambdas=lambdas.tolist(),
        max_ratio=ratio.max(axis=0).tolist(),
        directions=len(nu),
        passed=passed,
    )
