"""极大值传播

积分曲线、可达集（分段沿 span{X₀,…,X_N} 中向量场的积分曲线）、强极大值原理检查、
Hopf型障碍函数证书与特征方向判定。
"""
# -*- coding: utf-8 -*-

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .dirichlet_solver import Field
from .discretize import StencilSystem, apply_at_point, assemble
from .domain_grid import DomainMask
from .errors import CharacteristicDirection, LeftDomain, PreconditionViolated
from .figures import grid_extent, slice_2d, write_heatmap_svg, write_table_csv
from .operator_core import Box, OperatorSpec, VectorFieldSet

logger = logging.getLogger(__name__)

SKIP_FIELD_BELOW = 1e-12
LEG_SUBSTEPS = 4
CHAR_RTOL = 1e-14
SMP_OSC_RTOL = 1e-7
SUBHARMONIC_RTOL = 1e-9


def _rk4(fields: VectorFieldSet, xi: np.ndarray, x: np.ndarray, dt: np.ndarray) -> np.ndarray:
    """批量经典四阶Runge–Kutta一步；x 为 (n, N)，dt 为 (n,)"""
    step = dt[:, None]
    k1 = fields.combination(xi, x)
    k2 = fields.combination(xi, x + 0.5 * step * k1)
    k3 = fields.combination(xi, x + 0.5 * step * k2)
    k4 = fields.combination(xi, x + step * k3)
    return x + step / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


@dataclass
class CurveResult:
    """积分曲线

    Attributes:
        times: 时间节点
        points: (m, N) 折线
        max_error: 步长加倍误差估计的最大值
        error_per_time: max_error / 步长
    """

    times: np.ndarray
    points: np.ndarray
    max_error: float
    error_per_time: float

    @property
    def end(self) -> np.ndarray:
        return self.points[-1]


def integral_curve(
    spec: OperatorSpec,
    x_start: Sequence[float],
    xi: Sequence[float],
    t_end: float,
    dt: float,
    box: Optional[Box] = None,
) -> CurveResult:
    """积分 γ' = ξ₀X₀(γ) + Σ ξᵢXᵢ(γ)

    每步同时做一个整步与两个半步，误差估计为 |整步 − 两半步|/15，轨迹取两半步的结果。

    Raises:
        ValueError: dt ≤ 0 或 t_end < 0
        LeftDomain: 轨迹离开 box
    """
    if not dt > 0:
        raise ValueError("dt 必须为正")
    if t_end < 0:
        raise ValueError("t_end 不能为负")
    fields = VectorFieldSet(spec)
    coef = np.asarray(xi, dtype=float)
    x = np.asarray(x_start, dtype=float)[None, :].copy()
    steps = max(1, int(math.ceil(t_end / dt))) if t_end > 0 else 0
    h = t_end / steps if steps else 0.0
    times = [0.0]
    points = [x[0].copy()]
    worst = 0.0
    full_dt, half_dt = np.array([h]), np.array([0.5 * h])
    for i in range(steps):
        full = _rk4(fields, coef, x, full_dt)
        half = _rk4(fields, coef, _rk4(fields, coef, x, half_dt), half_dt)
        worst = max(worst, float(np.linalg.norm(full - half)) / 15.0)
        x = half
        t = (i + 1) * h
        if not np.isfinite(x).all():
            raise LeftDomain(t, x[0])
        if box is not None and not box.contains(x)[0]:
            raise LeftDomain(t, x[0])
        times.append(t)
        points.append(x[0].copy())
    return CurveResult(
        times=np.array(times),
        points=np.array(points),
        max_error=worst,
        error_per_time=worst / h if h > 0 else 0.0,
    )


# ---------------------------------------------------------------------------
# 可达集
# ---------------------------------------------------------------------------


@dataclass
class PathSegment:
    xi: np.ndarray
    duration: float
    samples: np.ndarray


@dataclass
class ControlPath:
    """分段积分曲线

    Attributes:
        start: 起点
        end: 终点
        segments: 各段（控制系数、时长、采样折线）
    """

    start: np.ndarray
    end: np.ndarray
    segments: List[PathSegment] = field(default_factory=list)

    def polyline(self) -> np.ndarray:
        if not self.segments:
            return self.start[None, :]
        return np.vstack([self.segments[0].samples[:1]] + [s.samples[1:] for s in self.segments])

    def max_gap(self) -> float:
        """相邻段首尾的最大间隙"""
        gaps = [
            float(np.linalg.norm(a.samples[-1] - b.samples[0]))
            for a, b in zip(self.segments, self.segments[1:])
        ]
        return max(gaps, default=0.0)

    def revalidate(self, spec: OperatorSpec, refine: int = 2) -> float:
        """以 refine 倍子步重新积分每一段，返回与记录终点的最大偏差"""
        fields = VectorFieldSet(spec)
        worst = 0.0
        for seg in self.segments:
            x = seg.samples[:1].copy()
            n = LEG_SUBSTEPS * refine
            dt = np.array([seg.duration / n])
            for _ in range(n):
                x = _rk4(fields, seg.xi, x, dt)
            worst = max(worst, float(np.linalg.norm(x[0] - seg.samples[-1])))
        return worst

    def to_csv(self, path: Union[str, Path]) -> Path:
        rows = []
        for k, seg in enumerate(self.segments):
            for point in seg.samples:
                rows.append([k] + [float(c) for c in point])
        dim = len(self.start)
        return write_table_csv(path, ["segment"] + [f"x{i + 1}" for i in range(dim)], rows)


@dataclass
class ReachResult:
    """可达集

    Attributes:
        start_node: 起点节点
        reached: 已到达的内部节点（全网格下标，升序）
        complete: 覆盖全部内部节点
        budget_exhausted: 因预算停止
        skipped_legs: 因场过小而跳过的控制
        expansions: 已积分的控制段数
    """

    mask: DomainMask
    start_node: int
    reached: np.ndarray
    complete: bool
    budget_exhausted: bool
    skipped_legs: int
    expansions: int
    parents: Dict[int, Tuple[int, PathSegment]] = field(repr=False, default_factory=dict)
    origin: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    @property
    def coverage(self) -> float:
        return len(self.reached) / max(self.mask.n_interior, 1)

    def contains(self, node: int) -> bool:
        return int(node) in self.parents or int(node) == self.start_node

    def path_to(self, node: int) -> ControlPath:
        node = int(node)
        if not self.contains(node):
            raise KeyError(f"节点 {node} 不在可达集中")
        segments: List[PathSegment] = []
        while node != self.start_node:
            parent, seg = self.parents[node]
            segments.append(seg)
            node = parent
        segments.reverse()
        end = segments[-1].samples[-1] if segments else self.origin
        return ControlPath(start=self.origin.copy(), end=end.copy(), segments=segments)


def _controls(dim: int) -> List[np.ndarray]:
    out = []
    for i in range(1, dim + 1):
        for sign in (1.0, -1.0):
            xi = np.zeros(dim + 1)
            xi[i] = sign
            out.append(xi)
    for sign in (1.0, -1.0):
        xi = np.zeros(dim + 1)
        xi[0] = sign
        out.append(xi)
    return out


def reachable_set(
    spec: OperatorSpec,
    x_start: Sequence[float],
    mask: DomainMask,
    step_budget: Optional[int] = None,
) -> ReachResult:
    """广度优先扩展可达节点

    控制字典为 ±Xᵢ 与 ±X₀；每段时长取穿过一个最小网格步长所需的时间，
    终点四舍五入到最近节点且该节点必须是内部节点。后续扩展从实际终点出发。
    同一层按节点下标顺序处理。

    Raises:
        PreconditionViolated: 起点不是内部节点
    """
    grid = mask.grid
    origin = np.asarray(x_start, dtype=float)
    start = grid.nearest_node(origin)
    if not mask.interior.ravel()[start]:
        raise PreconditionViolated(f"起点 {origin.tolist()} 不在区域内部")
    fields = VectorFieldSet(spec)
    interior = mask.interior.ravel()
    h_min = float(grid.spacing.min())
    spacing, lower = grid.spacing, grid.lower
    upper = np.array(grid.shape) - 1

    visited = {start}
    position: Dict[int, np.ndarray] = {start: origin}
    parents: Dict[int, Tuple[int, PathSegment]] = {}
    frontier = [start]
    skipped = 0
    expansions = 0
    exhausted = False
    while frontier and not exhausted:
        pts = np.array([position[n] for n in frontier])
        candidates: List[Tuple[int, int, PathSegment]] = []
        for xi in _controls(spec.dim):
            speed = np.linalg.norm(fields.combination(xi, pts), axis=1)
            live = np.flatnonzero(speed >= SKIP_FIELD_BELOW)
            skipped += len(frontier) - len(live)
            if not live.size:
                continue
            if step_budget is not None and expansions + live.size > step_budget:
                live = live[: max(step_budget - expansions, 0)]
                exhausted = True
            expansions += live.size
            duration = h_min / speed[live]
            x = pts[live]
            samples = [x]
            for _ in range(LEG_SUBSTEPS):
                x = _rk4(fields, xi, x, duration / LEG_SUBSTEPS)
                samples.append(x)
            track = np.stack(samples, axis=1)
            idx = np.rint((x - lower) / spacing).astype(int)
            valid = np.isfinite(x).all(axis=1) & np.all((idx >= 0) & (idx <= upper), axis=1)
            for j in np.flatnonzero(valid):
                node = int(np.ravel_multi_index(tuple(idx[j]), grid.shape))
                if interior[node] and node not in visited:
                    seg = PathSegment(xi=xi.copy(), duration=float(duration[j]), samples=track[j])
                    candidates.append((live[j], node, seg))
            if exhausted:
                break
        next_frontier = []
        for parent_idx, node, seg in sorted(candidates, key=lambda c: frontier[c[0]]):
            if node in visited:
                continue
            visited.add(node)
            parents[node] = (frontier[parent_idx], seg)
            position[node] = seg.samples[-1]
            next_frontier.append(node)
        frontier = sorted(next_frontier)
        logger.debug("可达集: 已到达 %d, 新层 %d", len(visited), len(frontier))
    if skipped:
        logger.debug("跳过 %d 个场强低于 %g 的控制段", skipped, SKIP_FIELD_BELOW)
    reached = np.array(sorted(visited), dtype=np.int64)
    complete = len(reached) == mask.n_interior
    if exhausted and not complete:
        logger.warning("可达集搜索在 %d 段后用尽预算，结果不完整", expansions)
    return ReachResult(
        mask=mask,
        start_node=start,
        reached=reached,
        complete=complete,
        budget_exhausted=exhausted,
        skipped_legs=skipped,
        expansions=expansions,
        parents=parents,
        origin=origin,
    )


def write_paths_svg(
    path: Union[str, Path],
    reach: ReachResult,
    nodes: Sequence[int],
    title: str,
    config_hash: str = "",
) -> Path:
    """在区域状态图上叠加到若干节点的控制路径（取前两个坐标）"""
    mask = reach.mask
    reached = np.zeros(mask.grid.size)
    reached[reach.reached] = 1.0
    image = np.where(mask.closure.ravel(), mask.flat_status + reached, np.nan)
    overlays = [reach.path_to(n).polyline()[:, :2] for n in nodes]
    return write_heatmap_svg(
        path, slice_2d(image, mask.grid), grid_extent(mask.grid), title,
        config_hash=config_hash, label="status + reached", overlays=overlays,
    )


# ---------------------------------------------------------------------------
# 强极大值原理
# ---------------------------------------------------------------------------


@dataclass
class SmpReport:
    """强极大值原理检查

    status 取值：
        "no-interior-maximum"：内部最大值严格小于边界最大值
        "constant-on-reachable"：内部取到最大值，且 u 在最大点的可达集上为常数
        "violated"：内部取到最大值但在可达集上不为常数
        "not-applicable"：有零阶项且最大值为负
    """

    status: str
    passed: bool
    max_interior: float
    max_boundary: float
    tol: float
    argmax: Optional[int]
    reached: int
    reach_complete: bool
    deviation: float


def smp_test(
    u: Field,
    spec: OperatorSpec,
    mask: DomainMask,
    tol: Optional[float] = None,
    sys: Optional[StencilSystem] = None,
    step_budget: Optional[int] = None,
) -> SmpReport:
    """检查离散强极大值原理

    Raises:
        PreconditionViolated: u 不是离散下调和函数
    """
    sys = sys or assemble(spec, mask)
    lu = sys.apply(u.values)
    u_int, u_bnd = u.interior_values, u.boundary_values
    norm_m = float(np.max(np.asarray(abs(sys.matrix).sum(axis=1)).ravel(), initial=0.0))
    norm_b = float(np.max(np.asarray(abs(sys.boundary_map).sum(axis=1)).ravel(), initial=0.0))
    scale = norm_m * float(np.max(np.abs(u_int), initial=0.0)) + norm_b * float(
        np.max(np.abs(u_bnd), initial=0.0)
    )
    if lu.size and lu.min() < -SUBHARMONIC_RTOL * max(scale, 1.0):
        raise PreconditionViolated(
            "u 不是离散下调和函数", min_lu=float(lu.min()), scale=scale
        )
    closure = u.closure_values()
    osc = float(closure.max() - closure.min())
    tol = tol if tol is not None else max(SMP_OSC_RTOL * osc, 1e-12 * max(1.0, u.sup_norm()))
    max_int = float(u_int.max())
    max_bnd = float(u_bnd.max())

    def report(status: str, argmax: Optional[int] = None, reached: int = 0,
               complete: bool = False, deviation: float = 0.0) -> SmpReport:
        return SmpReport(status, status != "violated", max_int, max_bnd, tol, argmax,
                         reached, complete, deviation)

    if max_int < max_bnd - tol:
        return report("no-interior-maximum")
    if sys.has_zero_order() and max_int < 0:
        return report("not-applicable")
    argmax = int(mask.interior_indices[int(np.argmax(u_int))])
    reach = reachable_set(spec, mask.grid.coordinates(argmax), mask, step_budget)
    deviation = float(np.max(max_int - u.values[reach.reached]))
    status = "constant-on-reachable" if deviation <= tol else "violated"
    if status == "violated":
        logger.warning("强极大值原理在节点 %d 附近不成立，偏差 %.3e", argmax, deviation)
    return report(status, argmax, len(reach.reached), reach.complete, deviation)


# ---------------------------------------------------------------------------
# Hopf证书与特征方向
# ---------------------------------------------------------------------------


@dataclass
class HopfCertificate:
    """障碍函数 w(x) = e^{−λ|x−(y+ν)|²} − e^{−λ|ν|²} 的证书

    Attributes:
        y: 边界点
        nu: 外法向量
        lam: λ = 2·max(1, threshold)
        lw_at_y: Lw(y) = λ²e^{−λ|ν|²}(4⟨Aν,ν⟩ − (2/λ)Σⱼ(aⱼⱼ − bⱼνⱼ))
        quadratic_form: ⟨A(y)ν,ν⟩
        trace_term: Σⱼ(aⱼⱼ(y) − bⱼ(y)νⱼ)
        threshold: trace_term / (2⟨Aν,ν⟩)
        cross_check: (h, 离散值, 绝对误差)
        observed_order: 相邻两级误差比的 log₂
    """

    y: np.ndarray
    nu: np.ndarray
    lam: float
    lw_at_y: float
    quadratic_form: float
    trace_term: float
    threshold: float
    cross_check: List[Tuple[float, float, float]] = field(default_factory=list)
    observed_order: List[float] = field(default_factory=list)

    @property
    def positive(self) -> bool:
        return self.lw_at_y > 0

    def barrier(self, points: np.ndarray) -> np.ndarray:
        centre = self.y + self.nu
        pts = np.atleast_2d(points)
        return np.exp(-self.lam * np.sum((pts - centre) ** 2, axis=1)) - np.exp(
            -self.lam * float(self.nu @ self.nu)
        )

    def discrete_value(self, spec: OperatorSpec, h: float) -> float:
        """用装配模板在 y 处计算 (L_h w)(y)"""
        return float(apply_at_point(spec, self.barrier, self.y, h))

    def to_dict(self) -> dict:
        return {
            "y": self.y.tolist(),
            "nu": self.nu.tolist(),
            "lambda": self.lam,
            "lw_at_y": self.lw_at_y,
            "quadratic_form": self.quadratic_form,
            "trace_term": self.trace_term,
            "threshold": self.threshold,
            "cross_check": [list(c) for c in self.cross_check],
            "observed_order": self.observed_order,
        }


def hopf_certificate(
    spec: OperatorSpec,
    y: Sequence[float],
    nu: Sequence[float],
    levels: Sequence[int] = (4, 8, 16),
) -> HopfCertificate:
    """构造Hopf障碍证书，并在 h = σ/4, σ/8, σ/16（σ = min(|ν|, 1/√λ)）上离散交叉检查

    Raises:
        CharacteristicDirection: ⟨A(y)ν,ν⟩ 不为正
    """
    point = np.asarray(y, dtype=float)
    normal = np.asarray(nu, dtype=float)
    a = spec.matrix_at(point)
    q = float(normal @ a @ normal)
    if q <= CHAR_RTOL * float(normal @ normal):
        raise CharacteristicDirection(
            f"⟨A(y)ν,ν⟩ = {q!r}，ν 是特征方向", point=point, nu=normal, value=q
        )
    b = VectorFieldSet(spec).b(point)[0]
    trace_term = float(np.trace(a) - b @ normal)
    threshold = trace_term / (2 * q)
    lam = 2.0 * max(1.0, threshold)
    lw = lam**2 * math.exp(-lam * float(normal @ normal)) * (4 * q - 2 * trace_term / lam)
    cert = HopfCertificate(point, normal, lam, lw, q, trace_term, threshold)
    sigma = min(float(np.linalg.norm(normal)), 1.0 / math.sqrt(lam))
    errors = []
    for level in levels:
        h = sigma / level
        value = cert.discrete_value(spec, h)
        cert.cross_check.append((h, value, abs(value - lw)))
        errors.append(abs(value - lw))
    cert.observed_order = [
        math.log2(e1 / e2) if e2 > 0 and e1 > 0 else float("inf")
        for e1, e2 in zip(errors, errors[1:])
    ]
    return cert


@dataclass
class CharacteristicReport:
    """⟨A(y)ν,ν⟩ ≤ tol 判定

    at_tolerance 表示判为特征方向但原始值不为0（无穷退化区的下溢情形）。
    """

    characteristic: bool
    value: float
    tol: float
    at_tolerance: bool


def characteristic_test(
    spec: OperatorSpec, y: Sequence[float], nu: Sequence[float], tol: Optional[float] = None
) -> CharacteristicReport:
    normal = np.asarray(nu, dtype=float)
    norm2 = float(normal @ normal)
    if norm2 == 0:
        raise ValueError("ν 不能为零向量")
    value = float(normal @ spec.matrix_at(np.asarray(y, dtype=float)) @ normal)
    tol = CHAR_RTOL * norm2 if tol is None else tol
    characteristic = value <= tol
    return CharacteristicReport(characteristic, value, tol, characteristic and value != 0.0)
