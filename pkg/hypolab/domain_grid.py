"""网格与区域

矩形网格、Bony透镜区域与球/盒区域的栅格化、节点分类（内部/边界/外部）以及外部球证书。
"""
# -*- coding: utf-8 -*-

import csv
import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .errors import (
    DisconnectedDomain,
    EmptyDomain,
    GridTooLarge,
    GridTooSmall,
    NoExteriorBall,
)

logger = logging.getLogger(__name__)

DEFAULT_NODE_CAP = 2_000_000
EXTERIOR_BALL_SCALE = 4.0


@dataclass(frozen=True)
class Grid:
    """矩形网格，节点按C顺序展平

    Attributes:
        bounds: 每个轴的 (lo, hi)
        resolution: 每个轴的节点数
    """

    bounds: Tuple[Tuple[float, float], ...]
    resolution: Tuple[int, ...]

    @property
    def dim(self) -> int:
        return len(self.resolution)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.resolution

    @property
    def size(self) -> int:
        return int(np.prod(self.resolution))

    @property
    def spacing(self) -> np.ndarray:
        return np.array([(hi - lo) / (n - 1) for (lo, hi), n in zip(self.bounds, self.resolution)])

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.bounds])

    def axes(self) -> List[np.ndarray]:
        return [np.linspace(lo, hi, n) for (lo, hi), n in zip(self.bounds, self.resolution)]

    def nodes(self) -> np.ndarray:
        """全部节点坐标，(size, N)"""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def coordinates(self, flat: Union[int, np.ndarray]) -> np.ndarray:
        idx = np.unravel_index(np.asarray(flat), self.shape)
        axes = self.axes()
        return np.stack([axes[k][idx[k]] for k in range(self.dim)], axis=-1)

    def ravel(self, multi: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(int(i) for i in multi), self.shape))

    def unravel(self, flat: int) -> Tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(int(flat), self.shape))

    def index_of(self, point: Sequence[float]) -> Tuple[int, ...]:
        """坐标 → 最近节点的多重下标（越界时截断）"""
        rel = (np.asarray(point, dtype=float) - self.lower) / self.spacing
        idx = np.clip(np.rint(rel).astype(int), 0, np.array(self.shape) - 1)
        return tuple(int(i) for i in idx)

    def nearest_node(self, point: Sequence[float]) -> int:
        return self.ravel(self.index_of(point))

    def to_dict(self) -> Dict[str, Any]:
        return {"bounds": [list(b) for b in self.bounds], "resolution": list(self.resolution)}


def build_grid(
    bounds: Sequence[Sequence[float]],
    resolution: Union[int, Sequence[int]],
    node_cap: int = DEFAULT_NODE_CAP,
) -> Grid:
    """构造网格

    Raises:
        GridTooSmall: 某轴节点数小于3
        GridTooLarge: 总节点数超过上限
    """
    bounds_t = tuple((float(lo), float(hi)) for lo, hi in bounds)
    if not bounds_t:
        raise GridTooSmall("网格至少需要一个轴")
    if any(not lo < hi for lo, hi in bounds_t):
        raise GridTooSmall("每个轴都需要 lo < hi", bounds=[list(b) for b in bounds_t])
    if isinstance(resolution, (int, np.integer)):
        res = (int(resolution),) * len(bounds_t)
    else:
        res = tuple(int(n) for n in resolution)
    if len(res) != len(bounds_t):
        raise GridTooSmall("resolution 与 bounds 的维数不一致")
    if min(res) < 3:
        raise GridTooSmall(f"每个轴至少需要3个节点，得到 {list(res)}", resolution=list(res))
    total = int(np.prod(res, dtype=np.int64))
    if total > node_cap:
        raise GridTooLarge(f"网格节点数 {total} 超过上限 {node_cap}", nodes=total, cap=node_cap)
    return Grid(bounds=bounds_t, resolution=res)


class NodeStatus(IntEnum):
    """节点分类"""

    EXTERIOR = 0  # 外部
    BOUNDARY = 1  # 边界
    INTERIOR = 2  # 内部


class ShapeKind(Enum):
    LENS = "lens"
    BALL = "ball"
    BOX = "box"
    CUSTOM = "custom"


@dataclass(frozen=True)
class ShapeRecord:
    """区域的来源记录"""

    kind: ShapeKind
    params: Dict[str, Any] = field(default_factory=dict, hash=False)

    def spheres(self) -> List[Tuple[np.ndarray, float]]:
        """解析边界球面 (球心, 半径)，盒与自定义区域为空"""
        if self.kind is ShapeKind.BALL:
            return [(np.asarray(self.params["center"], dtype=float), float(self.params["radius"]))]
        if self.kind is ShapeKind.LENS:
            x0 = np.asarray(self.params["x0"], dtype=float)
            h0 = np.asarray(self.params["h0"], dtype=float)
            eps = float(self.params["eps"])
            radius = 1.0 / eps + eps**2
            return [(x0 + h0 / eps, radius), (x0 - h0 / eps, radius)]
        return []

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind.value, **self.params}


@dataclass(frozen=True, eq=False)
class DomainMask:
    """栅格化区域

    Attributes:
        grid: 网格
        status: 节点状态数组，形状同 grid.shape
        shape: 来源记录
    """

    grid: Grid
    status: np.ndarray
    shape: ShapeRecord

    @property
    def flat_status(self) -> np.ndarray:
        return self.status.ravel()

    @property
    def interior(self) -> np.ndarray:
        return self.status == NodeStatus.INTERIOR

    @property
    def boundary(self) -> np.ndarray:
        return self.status == NodeStatus.BOUNDARY

    @property
    def closure(self) -> np.ndarray:
        return self.status != NodeStatus.EXTERIOR

    @property
    def interior_indices(self) -> np.ndarray:
        return np.flatnonzero(self.flat_status == NodeStatus.INTERIOR)

    @property
    def boundary_indices(self) -> np.ndarray:
        return np.flatnonzero(self.flat_status == NodeStatus.BOUNDARY)

    @property
    def n_interior(self) -> int:
        return int(np.count_nonzero(self.interior))

    @property
    def n_boundary(self) -> int:
        return int(np.count_nonzero(self.boundary))

    def interior_points(self) -> np.ndarray:
        return self.grid.coordinates(self.interior_indices)

    def boundary_points(self) -> np.ndarray:
        return self.grid.coordinates(self.boundary_indices)

    def node_status(self, flat: int) -> NodeStatus:
        return NodeStatus(int(self.flat_status[int(flat)]))

    def interior_position(self) -> np.ndarray:
        """全网格下标 → 内部序号（非内部为 −1）"""
        pos = np.full(self.grid.size, -1, dtype=np.int64)
        pos[self.interior_indices] = np.arange(self.n_interior)
        return pos

    def boundary_position(self) -> np.ndarray:
        pos = np.full(self.grid.size, -1, dtype=np.int64)
        pos[self.boundary_indices] = np.arange(self.n_boundary)
        return pos

    def distance_to_boundary(self) -> np.ndarray:
        """内部节点到非内部节点的棋盘距离（节点数），非内部为0"""
        return ndimage.distance_transform_cdt(self.interior, metric="chessboard").ravel()

    def diameter(self) -> float:
        pts = self.interior_points()
        if len(pts) < 2:
            return 0.0
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    def to_pgm(self, path: Union[str, Path]) -> Path:
        """三级灰度PGM（外部0、边界128、内部255）；N > 2 时取中间切片"""
        from .figures import slice_2d, write_pgm

        levels = np.array([0, 128, 255], dtype=np.uint8)[self.status]
        return write_pgm(path, slice_2d(levels, self.grid))

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        coords = self.grid.nodes()
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["index"] + [f"x{k + 1}" for k in range(self.grid.dim)] + ["status"])
            for flat in np.flatnonzero(self.flat_status != NodeStatus.EXTERIOR):
                status = NodeStatus(int(self.flat_status[flat])).name.lower()
                writer.writerow([int(flat)] + [repr(float(c)) for c in coords[flat]] + [status])
        return path


def mask_from_predicate(
    grid: Grid, inside: np.ndarray, shape: Optional[ShapeRecord] = None
) -> DomainMask:
    """由节点布尔数组构造区域

    内部 = 严格属于区域且不在网格最外层的节点；边界 = 与内部节点（含对角）相邻的其余节点。

    Raises:
        EmptyDomain: 没有内部节点
        DisconnectedDomain: 内部节点不连通
    """
    candidate = np.asarray(inside, dtype=bool).reshape(grid.shape).copy()
    inner = tuple(slice(1, n - 1) for n in grid.shape)
    trimmed = np.zeros_like(candidate)
    trimmed[inner] = candidate[inner]
    labels, count = ndimage.label(trimmed, structure=ndimage.generate_binary_structure(grid.dim, 1))
    if count == 0:
        raise EmptyDomain("区域没有内部节点", grid=grid.to_dict())
    if count > 1:
        sizes = np.bincount(labels.ravel())[1:]
        raise DisconnectedDomain(f"内部节点分成 {count} 个连通分量", sizes=sizes.tolist())
    dilated = ndimage.binary_dilation(trimmed, structure=np.ones((3,) * grid.dim, dtype=bool))
    status = np.full(grid.shape, NodeStatus.EXTERIOR, dtype=np.int8)
    status[dilated] = NodeStatus.BOUNDARY
    status[trimmed] = NodeStatus.INTERIOR
    status.flags.writeable = False
    return DomainMask(grid=grid, status=status, shape=shape or ShapeRecord(ShapeKind.CUSTOM))


def lens_domain(
    x0: Sequence[float], h0: Sequence[float], eps: float, grid: Grid
) -> DomainMask:
    """Bony透镜 Ω(ε) = B(x₀+h₀/ε, 1/ε+ε²) ∩ B(x₀−h₀/ε, 1/ε+ε²)"""
    x0_arr = np.asarray(x0, dtype=float)
    h0_arr = np.asarray(h0, dtype=float)
    if x0_arr.shape != (grid.dim,) or h0_arr.shape != (grid.dim,):
        raise ValueError("x0 与 h0 的维数必须与网格一致")
    if abs(np.linalg.norm(h0_arr) - 1.0) > 1e-12:
        raise ValueError(f"h0 必须是单位向量，|h0| = {np.linalg.norm(h0_arr)!r}")
    if not eps > 0:
        raise ValueError("透镜参数 eps 必须为正")
    record = ShapeRecord(
        ShapeKind.LENS, {"x0": x0_arr.tolist(), "h0": h0_arr.tolist(), "eps": float(eps)}
    )
    nodes = grid.nodes()
    inside = np.ones(grid.size, dtype=bool)
    for center, radius in record.spheres():
        inside &= np.linalg.norm(nodes - center, axis=1) < radius
    mask = mask_from_predicate(grid, inside, record)
    logger.debug("透镜 eps=%g: %d 内部节点, %d 边界节点", eps, mask.n_interior, mask.n_boundary)
    return mask


def ball_domain(center: Sequence[float], radius: float, grid: Grid) -> DomainMask:
    center_arr = np.asarray(center, dtype=float)
    record = ShapeRecord(ShapeKind.BALL, {"center": center_arr.tolist(), "radius": float(radius)})
    inside = np.linalg.norm(grid.nodes() - center_arr, axis=1) < radius
    return mask_from_predicate(grid, inside, record)


def box_domain(lower: Sequence[float], upper: Sequence[float], grid: Grid) -> DomainMask:
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    record = ShapeRecord(ShapeKind.BOX, {"lower": lo.tolist(), "upper": hi.tolist()})
    nodes = grid.nodes()
    inside = np.all((nodes > lo) & (nodes < hi), axis=1)
    return mask_from_predicate(grid, inside, record)


# ---------------------------------------------------------------------------
# 外部球
# ---------------------------------------------------------------------------


@dataclass
class ExteriorBall:
    """外部球 B(y+ν, |ν|)

    Attributes:
        node: 边界节点下标
        y: 边界点坐标
        nu: 外法向量，|ν| = 4·最大步长
        certificate: min_{内部节点} dist(·, y+ν) − |ν|，必须 > 0
        boundary_margin: 对其余边界节点的同一量（仅供参考）
    """

    node: int
    y: np.ndarray
    nu: np.ndarray
    certificate: float
    boundary_margin: float

    @property
    def center(self) -> np.ndarray:
        return self.y + self.nu

    @property
    def radius(self) -> float:
        return float(np.linalg.norm(self.nu))

    @property
    def passed(self) -> bool:
        return self.certificate > 0


def _candidate_directions(mask: DomainMask, node: int) -> List[np.ndarray]:
    y = mask.grid.coordinates(node)
    candidates: List[np.ndarray] = []
    spheres = mask.shape.spheres()
    if spheres:
        # 取 y 越界最多的那个球面，其外向径向即解析法向
        excess = [np.linalg.norm(y - c) - r for c, r in spheres]
        center, _ = spheres[int(np.argmax(excess))]
        candidates.append(y - center)
    multi = np.array(mask.grid.unravel(node))
    neighbours = []
    for offset in itertools.product((-1, 0, 1), repeat=mask.grid.dim):
        idx = multi + np.array(offset)
        if np.any(idx < 0) or np.any(idx >= np.array(mask.grid.shape)):
            continue
        if mask.status[tuple(idx)] == NodeStatus.INTERIOR:
            neighbours.append(np.array(offset, dtype=float))
    if neighbours:
        candidates.append(-np.mean(neighbours, axis=0))
    for offset in itertools.product((-1, 0, 1), repeat=mask.grid.dim):
        if any(offset):
            candidates.append(np.array(offset, dtype=float))
    return [c / np.linalg.norm(c) for c in candidates if np.linalg.norm(c) > 0]


def exterior_ball(mask: DomainMask, y: int) -> ExteriorBall:
    """为边界节点 y 寻找外部球

    透镜与球区域先试解析径向，其余候选为邻域平均外向与格点方向。

    证书只要求球内不含内部节点。节点边界层跨在解析边界两侧，要求球也避开
    其余边界节点时，透镜上约一半的边界节点找不到外部球；boundary_margin
    记录这一更严的量，仅供参考，不参与判定。

    Raises:
        ValueError: y 不是边界节点
        NoExteriorBall: 所有候选方向都失败（离散凹角）
    """
    if mask.node_status(y) != NodeStatus.BOUNDARY:
        raise ValueError(f"节点 {y} 不是边界节点")
    point = mask.grid.coordinates(y)
    length = EXTERIOR_BALL_SCALE * float(mask.grid.spacing.max())
    interior_pts = mask.interior_points()
    others = mask.boundary_points()
    others = others[np.any(others != point, axis=1)]
    for direction in _candidate_directions(mask, y):
        nu = length * direction
        center = point + nu
        certificate = float(np.min(np.linalg.norm(interior_pts - center, axis=1)) - length)
        if certificate > 0:
            margin = (float(np.min(np.linalg.norm(others - center, axis=1)) - length)
                      if len(others) else np.inf)
            return ExteriorBall(y, point, nu, certificate, margin)
    raise NoExteriorBall(f"边界节点 {y} 处找不到外部球", node=int(y), point=point)
