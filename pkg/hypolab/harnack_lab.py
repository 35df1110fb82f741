"""Harnack常数

离散调和测度（Poisson核）与由其列张成的非负调和锥上的精确Harnack常数：
弱常数 C(y₀)、强常数 M(K)、导数常数以及球链界 3^p。
"""
# -*- coding: utf-8 -*-

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .dirichlet_solver import Factorization, Field, factorize
from .discretize import StencilSystem, assemble
from .domain_grid import DomainMask
from .errors import ChainFailure, CollarViolation, DegenerateBasepoint, PreconditionViolated
from .figures import grid_extent, slice_2d, write_heatmap_svg
from .operator_core import OperatorSpec

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "hypolab/harnack-v1"
MAX_DERIVATIVE_ORDER = 4
CHAIN_LOWER = 0.5
CHAIN_UPPER = 1.5
CHAIN_OVERFLOW_P = 600


@dataclass(frozen=True, eq=False)
class PoissonKernel:
    """离散调和测度

    只保留至少与一个内部行耦合的边界节点（活动列）；其余边界节点的调和测度为0。

    Attributes:
        sys: 离散系统
        p: (n_interior, n_active)，p[x][z] 为边界数据取 z 的指示函数时解在 x 处的值
        active: 活动列在边界序号中的位置
    """

    sys: StencilSystem
    p: np.ndarray
    active: np.ndarray

    @property
    def mask(self) -> DomainMask:
        return self.sys.mask

    @property
    def boundary_nodes(self) -> np.ndarray:
        """活动列对应的全网格下标"""
        return self.mask.boundary_indices[self.active]

    def positions(self, nodes: Sequence[int]) -> np.ndarray:
        pos = self.mask.interior_position()[np.asarray(nodes, dtype=np.int64)]
        if np.any(pos < 0):
            raise ValueError("节点集合必须由内部节点组成")
        return pos

    def row_sums(self) -> np.ndarray:
        return self.p.sum(axis=1)

    def apply(self, phi: Field) -> np.ndarray:
        """边界数据 φ 的离散调和延拓（内部值）"""
        return self.p @ phi.boundary_values[self.active]

    def column_field(self, j: int) -> np.ndarray:
        """第 j 列扩展到全网格：内部为 p[·][z]，边界为 z 的指示函数"""
        values = np.zeros(self.mask.grid.size)
        values[self.mask.interior_indices] = self.p[:, j]
        values[self.boundary_nodes[j]] = 1.0
        return values


def poisson_kernel(
    sys: StencilSystem, factorization: Optional[Factorization] = None
) -> PoissonKernel:
    """对每个活动边界节点求解指示函数边界数据的Dirichlet问题

    Raises:
        SingularSystem: 系统奇异，需 ε > 0 或正则化
    """
    coupling = sys.boundary_map.tocsc()
    col_mass = np.asarray(abs(coupling).sum(axis=0)).ravel()
    active = np.flatnonzero(col_mass > 0)
    fact = factorization or factorize(sys)
    rhs = coupling[:, active].toarray()
    p = fact.solve(rhs).reshape(sys.n_interior, len(active))
    p.setflags(write=False)
    logger.debug("Poisson核: %d 内部节点 × %d 活动边界节点", p.shape[0], p.shape[1])
    return PoissonKernel(sys=sys, p=p, active=active)


def ball_nodes(mask: DomainMask, center: Sequence[float], radius: float) -> np.ndarray:
    """|x − center| ≤ radius 的内部节点"""
    pts = mask.interior_points()
    inside = np.linalg.norm(pts - np.asarray(center, dtype=float), axis=1) <= radius + 1e-12
    return mask.interior_indices[inside]


# ---------------------------------------------------------------------------
# 弱/强常数
# ---------------------------------------------------------------------------


@dataclass
class HarnackConstant:
    """常数及取到极值的见证

    Attributes:
        value: 常数
        z: 边界节点（全网格下标）
        x1: 分子所在节点
        x2: 分母所在节点（弱常数时为 y₀）
    """

    value: float
    z: int
    x1: int
    x2: int


def weak_constant(pk: PoissonKernel, compact: Sequence[int], y0: int) -> HarnackConstant:
    """C(y₀) = max_{z, x∈K} p[x][z]/p[y₀][z]

    Raises:
        DegenerateBasepoint: p[y₀][z] = 0 对某个 z 成立
    """
    rows = pk.positions(compact)
    base = pk.p[int(pk.positions([y0])[0])]
    if np.any(base <= 0):
        z = int(pk.boundary_nodes[int(np.argmin(base))])
        raise DegenerateBasepoint(f"基点 {y0} 处对边界节点 {z} 的调和测度为0", z=z, y0=int(y0))
    ratios = pk.p[rows] / base[None, :]
    i, j = np.unravel_index(int(np.argmax(ratios)), ratios.shape)
    return HarnackConstant(
        value=float(ratios[i, j]),
        z=int(pk.boundary_nodes[j]),
        x1=int(np.asarray(compact)[i]),
        x2=int(y0),
    )


def strong_constant(pk: PoissonKernel, compact: Sequence[int]) -> HarnackConstant:
    """M(K) = max_{z, x₁, x₂∈K} p[x₁][z]/p[x₂][z]

    Raises:
        DegenerateBasepoint: 某列在 K 上取到0
    """
    nodes = np.asarray(compact, dtype=np.int64)
    block = pk.p[pk.positions(nodes)]
    lo = block.min(axis=0)
    if np.any(lo <= 0):
        j = int(np.argmin(lo))
        raise DegenerateBasepoint(
            f"边界节点 {int(pk.boundary_nodes[j])} 的调和测度在 K 上取到0",
            z=int(pk.boundary_nodes[j]),
        )
    ratio = block.max(axis=0) / lo
    j = int(np.argmax(ratio))
    return HarnackConstant(
        value=float(ratio[j]),
        z=int(pk.boundary_nodes[j]),
        x1=int(nodes[int(np.argmax(block[:, j]))]),
        x2=int(nodes[int(np.argmin(block[:, j]))]),
    )


@dataclass
class NestedConstants:
    radii: List[float]
    sizes: List[int]
    weak: List[float]
    strong: List[float]
    monotone: bool


def nested_constants(pk: PoissonKernel, y0: int, radii: Sequence[float]) -> NestedConstants:
    """以 y₀ 为心、半径递增的一族紧集 K_r 上的常数"""
    center = pk.mask.grid.coordinates(int(y0))
    radii = sorted(float(r) for r in radii)
    sizes, weak, strong = [], [], []
    for r in radii:
        nodes = ball_nodes(pk.mask, center, r)
        sizes.append(len(nodes))
        weak.append(weak_constant(pk, nodes, y0).value)
        strong.append(strong_constant(pk, nodes).value)
    monotone = all(b >= a for a, b in zip(weak, weak[1:])) and all(
        b >= a for a, b in zip(strong, strong[1:])
    )
    return NestedConstants(radii, sizes, weak, strong, monotone)


@dataclass
class ResolutionConstants:
    """一个分辨率上的 C(y₀) 与 M(K)

    Attributes:
        resolution: 每轴节点数
        spacing: 最大网格步长
        compact_size: K 的节点数
        weak: C(y₀)，失败时为 None
        strong: M(K)，失败时为 None
        failure: 基点退化时的错误字典
    """

    resolution: int
    spacing: float
    compact_size: int
    weak: Optional[float] = None
    strong: Optional[float] = None
    weak_witness: Dict[str, int] = field(default_factory=dict)
    strong_witness: Dict[str, int] = field(default_factory=dict)
    failure: Optional[Dict[str, Any]] = None


def refine_constants(
    spec: OperatorSpec,
    mask_factory: Callable[[int], DomainMask],
    resolutions: Sequence[int],
    y0_point: Sequence[float],
    compact_radius: float,
) -> List[ResolutionConstants]:
    """在每个分辨率上重新组装、求Poisson核并计算常数

    K 取以离 y0_point 最近的节点为心、半径 compact_radius 的球内节点。

    Args:
        spec: 算子
        mask_factory: 分辨率 -> 区域
        resolutions: 分辨率列表，按给定顺序记录
        y0_point: 基点坐标
        compact_radius: K 的半径

    Returns:
        每个分辨率一条记录；DegenerateBasepoint 记入 failure 而不中断

    Raises:
        PreconditionViolated: 基点不是内部节点
    """
    history = []
    for res in resolutions:
        mask = mask_factory(int(res))
        y0 = mask.grid.nearest_node(y0_point)
        if not mask.interior.ravel()[y0]:
            raise PreconditionViolated(f"分辨率 {res} 下基点不是内部节点", resolution=int(res))
        compact = ball_nodes(mask, mask.grid.coordinates(y0), compact_radius)
        entry = ResolutionConstants(
            resolution=int(res),
            spacing=float(mask.grid.spacing.max()),
            compact_size=len(compact),
        )
        pk = poisson_kernel(assemble(spec, mask))
        try:
            weak = weak_constant(pk, compact, y0)
            strong = strong_constant(pk, compact)
        except DegenerateBasepoint as exc:
            entry.failure = exc.to_dict()
        else:
            entry.weak = weak.value
            entry.strong = strong.value
            entry.weak_witness = {"z": weak.z, "x": weak.x1}
            entry.strong_witness = {"z": strong.z, "x1": strong.x1, "x2": strong.x2}
        logger.debug("分辨率 %d: C = %s, M = %s", res, entry.weak, entry.strong)
        history.append(entry)
    return history


# ---------------------------------------------------------------------------
# 导数常数
# ---------------------------------------------------------------------------


@dataclass
class DerivativeConstant:
    """Σ_{|α|≤j} sup_K |D^α u| ≤ table[j]·u(y₀)，j = 0..m

    Attributes:
        m: 最高阶数
        table: 累计常数
        witnesses: 每一阶取到最大值的边界节点
    """

    m: int
    table: List[float]
    witnesses: List[int]


def _multi_indices(dim: int, order: int) -> List[Tuple[int, ...]]:
    if dim == 1:
        return [(order,)]
    return [
        (k,) + rest for k in range(order, -1, -1) for rest in _multi_indices(dim - 1, order - k)
    ]


def derivative_constant(
    pk: PoissonKernel, compact: Sequence[int], y0: int, m: int
) -> DerivativeConstant:
    """用中心差分对每一列求 D^α，按列取 Σ_{|α|≤j} sup_K |D^α p[·][z]| / p[y₀][z] 的最大值

    Raises:
        ValueError: m 不在 0..4
        CollarViolation: K 到边界的距离小于 m+1 个节点
        DegenerateBasepoint: p[y₀][z] = 0
    """
    if not 0 <= m <= MAX_DERIVATIVE_ORDER:
        raise ValueError(f"导数阶数 m 必须在 0..{MAX_DERIVATIVE_ORDER}")
    mask = pk.mask
    nodes = np.asarray(compact, dtype=np.int64)
    pk.positions(nodes)
    dist = mask.distance_to_boundary()[nodes]
    if np.any(dist < m + 1):
        bad = int(nodes[int(np.argmin(dist))])
        raise CollarViolation(
            f"K 中节点 {bad} 到边界只有 {int(dist.min())} 个节点，m = {m} 需要至少 {m + 1}",
            node=bad,
        )
    base = pk.p[int(pk.positions([y0])[0])]
    if np.any(base <= 0):
        raise DegenerateBasepoint(f"基点 {y0} 处存在为0的调和测度")

    grid = mask.grid
    n_cols = pk.p.shape[1]
    columns = np.zeros((n_cols,) + tuple(grid.shape))
    flat = columns.reshape(n_cols, -1)
    flat[:, mask.interior_indices] = pk.p.T
    flat[np.arange(n_cols), pk.boundary_nodes] = 1.0
    spacing = grid.spacing

    cache: Dict[Tuple[int, ...], np.ndarray] = {(0,) * grid.dim: columns}

    def derivative(alpha: Tuple[int, ...]) -> np.ndarray:
        if alpha not in cache:
            k = next(i for i, a in enumerate(alpha) if a > 0)
            lower = tuple(a - (i == k) for i, a in enumerate(alpha))
            prev = derivative(lower)
            cache[alpha] = (np.roll(prev, -1, axis=k + 1) - np.roll(prev, 1, axis=k + 1)) / (
                2 * spacing[k]
            )
        return cache[alpha]

    running = np.zeros(n_cols)
    table, witnesses = [], []
    for order in range(m + 1):
        for alpha in _multi_indices(grid.dim, order):
            values = derivative(alpha).reshape(n_cols, -1)[:, nodes]
            running = running + np.abs(values).max(axis=1)
        ratio = running / base
        j = int(np.argmax(ratio))
        table.append(float(ratio[j]))
        witnesses.append(int(pk.boundary_nodes[j]))
    return DerivativeConstant(m=m, table=table, witnesses=witnesses)


# ---------------------------------------------------------------------------
# 球链
# ---------------------------------------------------------------------------


@dataclass
class ChainOfBalls:
    """球链

    Attributes:
        centers: 覆盖所选球心（全网格下标，按选择顺序）
        radii: 对应半径
        p: 链长
        bound: 3^p（p 过大时为 inf）
        log10_bound: p·log₁₀3
        strong_m: 同一 K 上的 M(K)
        dominates: M(K) ≤ 3^p
    """

    centers: List[int]
    radii: List[float]
    p: int
    bound: float
    log10_bound: float
    strong_m: float
    dominates: bool


def _admissible_radius(
    pk: PoissonKernel,
    x: int,
    cap: float,
    allowed: np.ndarray,
    closure_ids: np.ndarray,
    closure_pts: np.ndarray,
) -> Tuple[float, np.ndarray]:
    grid = pk.mask.grid
    h_max = float(grid.spacing.max())
    interior_pos = pk.mask.interior_position()
    centre = grid.coordinates(x)
    row = pk.p[interior_pos[x]]
    dist = np.linalg.norm(closure_pts - centre, axis=1)
    delta = cap
    while delta >= h_max:
        inside = closure_ids[dist <= delta + 1e-12]
        if np.all(allowed[inside]):
            block = pk.p[interior_pos[inside]]
            if np.all(block >= CHAIN_LOWER * row) and np.all(block <= CHAIN_UPPER * row):
                return delta, inside
        delta *= 0.5
    raise ChainFailure(
        f"节点 {x} 处找不到不小于一个网格步长的可容许半径", node=int(x), point=centre
    )


def chain_of_balls(
    pk: PoissonKernel,
    compact: Sequence[int],
    delta: float,
    region: Optional[np.ndarray] = None,
) -> ChainOfBalls:
    """构造满足局部估计 ½u(x) ≤ u(ξ) ≤ (3/2)u(x) 的球覆盖与链

    Args:
        pk: Poisson核
        compact: K（内部节点）
        delta: 半径上限，逐次减半
        region: 开集 O 的全网格布尔数组，球必须落在 O 与区域内部中；缺省为整个内部

    Raises:
        ChainFailure: 某点没有可容许半径，或覆盖无法链式延伸
    """
    mask = pk.mask
    nodes = [int(n) for n in np.asarray(compact, dtype=np.int64)]
    pk.positions(nodes)
    if not delta > 0:
        raise ValueError("delta 必须为正")
    allowed = mask.interior.ravel().copy()
    if region is not None:
        allowed &= np.asarray(region, dtype=bool).ravel()
    closure_ids = np.flatnonzero(mask.closure.ravel())
    closure_pts = mask.grid.coordinates(closure_ids)

    balls: Dict[int, Tuple[float, Set[int]]] = {}
    for x in nodes:
        radius, inside = _admissible_radius(pk, x, delta, allowed, closure_ids, closure_pts)
        balls[x] = (radius, set(int(i) for i in inside))

    targets = set(nodes)
    covered: Set[int] = set()
    union: Set[int] = set()
    order: List[int] = []
    while not targets <= covered:
        best, best_gain = None, 0
        for x in sorted(balls):
            ball = balls[x][1]
            if order and not (ball & union):
                continue
            gain = len((ball & targets) - covered)
            if gain > best_gain:
                best, best_gain = x, gain
        if best is None:
            missing = sorted(targets - covered)[0]
            raise ChainFailure(f"覆盖无法链式延伸到节点 {missing}", node=missing)
        order.append(best)
        union |= balls[best][1]
        covered |= balls[best][1] & targets

    p = len(order)
    log10_bound = p * math.log10(3.0)
    bound = float("inf") if p > CHAIN_OVERFLOW_P else float(3.0**p)
    strong = strong_constant(pk, nodes).value
    dominates = strong <= bound
    if not dominates:
        logger.warning("M(K) = %.6g 超过球链界 3^%d", strong, p)
    return ChainOfBalls(
        centers=order,
        radii=[balls[x][0] for x in order],
        p=p,
        bound=bound,
        log10_bound=log10_bound,
        strong_m=strong,
        dominates=dominates,
    )


# ---------------------------------------------------------------------------
# 报告
# ---------------------------------------------------------------------------


@dataclass
class HarnackReport:
    """Harnack实验报告"""

    compact: List[int]
    basepoint: int
    weak_c: float
    strong_m: float
    weak_witness: Dict[str, int]
    strong_witness: Dict[str, int]
    derivative_table: List[float] = field(default_factory=list)
    chain: Optional[Dict[str, Any]] = None
    refinement: List[Dict[str, Any]] = field(default_factory=list)
    nested: Optional[Dict[str, Any]] = None
    schema_version: str = SCHEMA_VERSION

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2, sort_keys=True)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "HarnackReport":
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"不支持的报告版本: {data.get('schema_version')}")
        return cls(**data)


def harnack_report(
    pk: PoissonKernel,
    compact: Sequence[int],
    y0: int,
    m: int = 0,
    delta: Optional[float] = None,
) -> HarnackReport:
    """汇总弱/强常数、导数表与（可选的）球链"""
    weak = weak_constant(pk, compact, y0)
    strong = strong_constant(pk, compact)
    report = HarnackReport(
        compact=[int(n) for n in compact],
        basepoint=int(y0),
        weak_c=weak.value,
        strong_m=strong.value,
        weak_witness={"z": weak.z, "x": weak.x1},
        strong_witness={"z": strong.z, "x1": strong.x1, "x2": strong.x2},
    )
    if m > 0:
        report.derivative_table = derivative_constant(pk, compact, y0, m).table
    if delta is not None:
        try:
            chain = chain_of_balls(pk, compact, delta)
            report.chain = {
                "p": chain.p,
                "log10_bound": chain.log10_bound,
                "dominates": chain.dominates,
                "centers": chain.centers,
            }
        except ChainFailure as exc:
            report.chain = {"failure": exc.to_dict()}
    return report


def write_ratio_svg(
    path: Union[str, Path],
    pk: PoissonKernel,
    y0: int,
    title: str,
    config_hash: str = "",
) -> Path:
    """max_z p[x][z]/p[y₀][z] 的热图"""
    mask = pk.mask
    base = pk.p[int(pk.positions([y0])[0])]
    ratio = np.full(mask.grid.size, np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio[mask.interior_indices] = np.max(pk.p / base[None, :], axis=1)
    return write_heatmap_svg(
        path, slice_2d(ratio, mask.grid), grid_extent(mask.grid), title,
        config_hash=config_hash, label="max_z p(x,z)/p(y0,z)",
    )
