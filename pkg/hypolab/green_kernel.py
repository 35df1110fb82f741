"""Green核

离散Green核 k = (−M)⁻¹W⁻¹，即 k[x][y] 为在 y 处放置质量 1/ν(y) 的点源时的解在 x 处的值。
检查对称性、正性、再生恒等式、边界衰减、L¹质量与比较估计。
"""
# -*- coding: utf-8 -*-

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .dirichlet_solver import Factorization, Field, factorize
from .discretize import StencilSystem, assemble
from .domain_grid import DomainMask
from .errors import GridTooLarge, PreconditionViolated
from .operator_core import OperatorSpec

logger = logging.getLogger(__name__)

DENSE_NODE_CAP = 20_000
COLUMN_BLOCK = 256
BINARY_MAGIC = b"HYGK"
BINARY_VERSION = 1
REPRODUCTION_RTOL = 1e-8
HARMONIC_RTOL = 1e-9
MARGIN_RTOL = 1e-8
COLLAR_WIDTH = 2


@dataclass(frozen=True, eq=False)
class GreenMatrix:
    """稠密Green核（可只含部分源点列）

    Attributes:
        sys: 离散系统（带平移 ε）
        k: (n_interior, n_sources)，k[:, j] = k(·, y_j)
        weights: 内部节点的 ν 权
        sources: 源点的内部序号
        factorization: 共享的分解
    """

    sys: StencilSystem
    k: np.ndarray
    weights: np.ndarray
    sources: np.ndarray
    factorization: Factorization = field(repr=False)

    @property
    def full(self) -> bool:
        return len(self.sources) == self.sys.n_interior

    def _require_full(self, what: str) -> None:
        if not self.full:
            raise ValueError(f"{what} 需要完整的Green矩阵，当前只有 {len(self.sources)} 列")

    def position(self, node: int) -> int:
        """全网格下标 → 内部序号"""
        pos = int(self.sys.mask.interior_position()[int(node)])
        if pos < 0:
            raise ValueError(f"节点 {node} 不是内部节点")
        return pos

    def row(self, node: int) -> np.ndarray:
        """k(x, ·)，x 为全网格下标"""
        pos = self.position(node)
        if self.full:
            return self.k[pos]
        unit = np.zeros(self.sys.n_interior)
        unit[pos] = 1.0
        return self.factorization.solve_transpose(unit) / self.weights

    def apply(self, f_interior: np.ndarray) -> np.ndarray:
        """G f(x) = Σ_y k(x,y) f(y) ν(y)"""
        self._require_full("G f")
        return self.k @ (self.weights * np.asarray(f_interior, dtype=float))

    def asymmetry(self) -> float:
        """max|k − kᵀ| / max|k|"""
        self._require_full("对称性检查")
        scale = float(np.max(np.abs(self.k)))
        return float(np.max(np.abs(self.k - self.k.T))) / scale if scale > 0 else 0.0

    def min_entry(self) -> float:
        return float(self.k.min())

    def diagonal(self) -> np.ndarray:
        return self.k[self.sources, np.arange(len(self.sources))]

    def harmonicity_residual(self) -> float:
        """L_ε 作用于每一列：除源点外为0，源点处为 −1/ν(y)；返回相对残差"""
        residual = self.sys.matrix @ self.k
        residual[self.sources, np.arange(len(self.sources))] += 1.0 / self.weights[self.sources]
        norm_m = float(np.max(np.asarray(abs(self.sys.matrix).sum(axis=1)).ravel()))
        scale = norm_m * float(np.max(np.abs(self.k)))
        return float(np.max(np.abs(residual))) / scale if scale > 0 else 0.0


def green_matrix(
    sys: StencilSystem,
    sources: Optional[Sequence[int]] = None,
    threads: int = 1,
    factorization: Optional[Factorization] = None,
    node_cap: int = DENSE_NODE_CAP,
) -> GreenMatrix:
    """构造Green矩阵

    Args:
        sys: 离散系统
        sources: 源点（全网格下标）；None 表示全部内部节点
        threads: 列块并行的线程数
        factorization: 可复用的分解
        node_cap: 完整模式的内部节点上限

    Raises:
        GridTooLarge: 完整模式超过上限（应改用 sources）
        SingularSystem: 系统奇异
    """
    n = sys.n_interior
    if sources is None:
        if n > node_cap:
            raise GridTooLarge(
                f"内部节点 {n} 超过稠密Green矩阵上限 {node_cap}，请指定源点子集",
                nodes=n, cap=node_cap,
            )
        cols = np.arange(n)
    else:
        pos = sys.mask.interior_position()[np.asarray(sources, dtype=np.int64)]
        if np.any(pos < 0):
            raise ValueError("源点必须是内部节点")
        cols = pos
    fact = factorization or factorize(sys)
    weights = sys.nu_weights.copy()

    def block(start: int) -> np.ndarray:
        chunk = cols[start:start + COLUMN_BLOCK]
        rhs = np.zeros((n, len(chunk)))
        rhs[chunk, np.arange(len(chunk))] = 1.0 / weights[chunk]
        return fact.solve(rhs).reshape(n, len(chunk))

    starts = list(range(0, len(cols), COLUMN_BLOCK))
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(block, starts))
    else:
        blocks = [block(s) for s in starts]
    k = np.hstack(blocks) if blocks else np.zeros((n, 0))
    k.setflags(write=False)
    logger.debug("Green矩阵 %s: %d × %d", sys.spec.name, n, len(cols))
    return GreenMatrix(sys=sys, k=k, weights=weights, sources=cols, factorization=fact)


# ---------------------------------------------------------------------------
# 再生恒等式与边界衰减
# ---------------------------------------------------------------------------


@dataclass
class ReproductionReport:
    """G(Lφ) = −φ = L(Gφ) 的残差"""

    residual_g_of_l: float
    residual_l_of_g: float
    phi_norm: float
    passed: bool


def verify_reproduction(gm: GreenMatrix, phi: Field) -> ReproductionReport:
    """检查再生恒等式

    Raises:
        PreconditionViolated: φ 在边界或宽度2的内侧带上不为0
    """
    mask = gm.sys.mask
    dist = mask.distance_to_boundary()
    collar = np.flatnonzero(mask.interior.ravel() & (dist <= COLLAR_WIDTH))
    if np.any(phi.boundary_values != 0) or np.any(phi.values[collar] != 0):
        raise PreconditionViolated(f"φ 必须在边界及宽度 {COLLAR_WIDTH} 的内侧带上为0")
    phi_int = phi.interior_values
    l_phi = gm.sys.matrix @ phi_int
    g_of_l = gm.apply(l_phi) + phi_int
    l_of_g = gm.sys.matrix @ gm.apply(phi_int) + phi_int
    norm = float(np.max(np.abs(phi_int), initial=0.0))
    r1 = float(np.max(np.abs(g_of_l), initial=0.0))
    r2 = float(np.max(np.abs(l_of_g), initial=0.0))
    return ReproductionReport(
        residual_g_of_l=r1,
        residual_l_of_g=r2,
        phi_norm=norm,
        passed=bool(r1 <= REPRODUCTION_RTOL * norm and r2 <= REPRODUCTION_RTOL * norm),
    )


def bump(mask: DomainMask, center: Sequence[float], radius: float) -> Field:
    """光滑紧支函数 exp(−1/(1−r²))，r = |x−c|/radius"""
    c = np.asarray(center, dtype=float)

    def fn(points: np.ndarray) -> np.ndarray:
        r2 = np.sum((points - c) ** 2, axis=1) / radius**2
        out = np.zeros(len(points))
        inside = r2 < 1
        out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
        return out

    values = Field.from_function(mask, fn).values.copy()
    dist = mask.distance_to_boundary()
    values[~mask.interior.ravel() | (dist <= COLLAR_WIDTH)] = 0.0
    return Field(mask, values)


@dataclass
class DecayProfile:
    """k(x, ·) 在一层内侧带上的最大值"""

    node: int
    point: List[float]
    collar_max: float
    collar_nodes: int
    value_at_x: float


def verify_boundary_decay(gm: GreenMatrix, x: int) -> DecayProfile:
    mask = gm.sys.mask
    row = gm.row(x)
    dist = mask.distance_to_boundary()[mask.interior_indices]
    collar = dist == 1
    return DecayProfile(
        node=int(x),
        point=mask.grid.coordinates(int(x)).tolist(),
        collar_max=float(row[collar].max()) if collar.any() else 0.0,
        collar_nodes=int(collar.sum()),
        value_at_x=float(row[gm.position(x)]),
    )


@dataclass
class RefinementDecay:
    resolutions: List[int]
    profiles: List[DecayProfile]
    strictly_decreasing: bool

    @property
    def collar_max(self) -> List[float]:
        return [p.collar_max for p in self.profiles]


def boundary_decay_refinement(
    spec: OperatorSpec,
    mask_factory: Callable[[int], DomainMask],
    resolutions: Sequence[int],
    point: Sequence[float],
) -> RefinementDecay:
    """在多个分辨率上记录 k(x,·) 的内侧带最大值，x 取离 point 最近的节点"""
    profiles = []
    for res in resolutions:
        mask = mask_factory(int(res))
        sys = assemble(spec, mask)
        node = mask.grid.nearest_node(point)
        gm = green_matrix(sys, sources=[node])
        profiles.append(verify_boundary_decay(gm, node))
        logger.debug("分辨率 %d: 内侧带最大值 %.6g", res, profiles[-1].collar_max)
    values = [p.collar_max for p in profiles]
    return RefinementDecay(
        resolutions=[int(r) for r in resolutions],
        profiles=profiles,
        strictly_decreasing=all(b < a for a, b in zip(values, values[1:])),
    )


# ---------------------------------------------------------------------------
# 质量与比较估计
# ---------------------------------------------------------------------------


@dataclass
class MassReport:
    """Σ_y k(x,y)ν(y) = G_ε(1)(x)"""

    row_mass: np.ndarray = field(repr=False)
    max_row_mass: float
    total: float


def l1_mass(gm: GreenMatrix) -> MassReport:
    gm._require_full("L¹质量")
    row = gm.k @ gm.weights
    return MassReport(row_mass=row, max_row_mass=float(row.max()), total=float(gm.weights @ row))


@dataclass
class ComparisonReport:
    """u(x) − ε·Σ_y u(y)k(x,y)ν(y) 的下界"""

    epsilon: float
    margin: np.ndarray = field(repr=False)
    min_margin: float
    u_norm: float
    harmonic_residual: float
    passed: bool


def _check_outer_field(gm: GreenMatrix, u: Field, outer: Optional[StencilSystem]) -> float:
    inner = gm.sys.mask
    if u.mask.grid != inner.grid:
        raise PreconditionViolated("u 必须与Green矩阵定义在同一网格上")
    if np.any(inner.closure & ~u.mask.interior):
        raise PreconditionViolated("u 所在区域必须严格包含Green矩阵的区域闭包")
    norm = u.sup_norm()
    if u.closure_values().min(initial=0.0) < -1e-12 * max(norm, 1.0):
        raise PreconditionViolated("u 必须非负")
    sys = outer or assemble(gm.sys.spec, u.mask)
    # 调和性针对不含 ε 的 L
    lu = sys.apply(u.values) + sys.shift * u.interior_values
    norm_m = float(np.max(np.asarray(abs(sys.matrix).sum(axis=1)).ravel(), initial=0.0))
    scale = norm_m * max(norm, 1e-300)
    residual = float(np.max(np.abs(lu), initial=0.0)) / scale
    if residual > HARMONIC_RTOL:
        raise PreconditionViolated(f"u 不是离散 L-调和函数（相对残差 {residual:.3e}）",
                                   residual=residual)
    return residual


def comparison_bound(
    gm: GreenMatrix, u: Field, outer: Optional[StencilSystem] = None
) -> ComparisonReport:
    """检查 u(x) ≥ ε·Σ_y u(y)k(x,y)ν(y)

    Args:
        gm: 小区域上的Green矩阵
        u: 在严格更大区域上非负且离散 L-调和的场
        outer: 大区域上的离散系统（缺省时重新组装）

    Raises:
        PreconditionViolated: u 为负、不调和或区域不包含
    """
    residual = _check_outer_field(gm, u, outer)
    eps = gm.sys.shift
    u_int = u.values[gm.sys.mask.interior_indices]
    margin = u_int - eps * gm.apply(u_int) if eps > 0 else u_int.copy()
    norm = u.sup_norm()
    min_margin = float(margin.min()) if margin.size else 0.0
    return ComparisonReport(
        epsilon=eps,
        margin=margin,
        min_margin=min_margin,
        u_norm=norm,
        harmonic_residual=residual,
        passed=bool(min_margin >= -MARGIN_RTOL * norm),
    )


@dataclass
class WeakBoundReport:
    """ε·min_K k(x₀,·)·Σ_K u ν ≤ u(x₀)

    constant = 1/(ε·min_K k(x₀,·)) 给出 Σ_K u ν ≤ constant·u(x₀)。
    """

    x0: int
    lhs: float
    u_at_x0: float
    min_kernel: float
    constant: float
    passed: bool


def green_weak_bound(
    gm: GreenMatrix,
    u: Field,
    compact: Sequence[int],
    x0: int,
    outer: Optional[StencilSystem] = None,
) -> WeakBoundReport:
    _check_outer_field(gm, u, outer)
    eps = gm.sys.shift
    if not eps > 0:
        raise PreconditionViolated("L¹控制需要 ε > 0")
    pos = gm.sys.mask.interior_position()[np.asarray(compact, dtype=np.int64)]
    if np.any(pos < 0):
        raise ValueError("K 必须由内部节点组成")
    row = gm.row(x0)
    min_k = float(row[pos].min())
    mass = float(np.sum(u.values[np.asarray(compact)] * gm.weights[pos]))
    lhs = eps * min_k * mass
    u0 = float(u.values[int(x0)])
    return WeakBoundReport(
        x0=int(x0),
        lhs=lhs,
        u_at_x0=u0,
        min_kernel=min_k,
        constant=1.0 / (eps * min_k) if min_k > 0 else float("inf"),
        passed=bool(lhs <= u0 * (1 + 1e-10) + MARGIN_RTOL * u.sup_norm()),
    )


# ---------------------------------------------------------------------------
# 导出
# ---------------------------------------------------------------------------


def export_binary(gm: GreenMatrix, path: Union[str, Path]) -> List[Path]:
    """二进制格式（小端）：b"HYGK"、uint32 版本、uint64 行数、uint64 列数，然后按行存放 float64"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows, cols = gm.k.shape
    header = (
        BINARY_MAGIC
        + np.array([BINARY_VERSION], dtype="<u4").tobytes()
        + np.array([rows, cols], dtype="<u8").tobytes()
    )
    path.write_bytes(header + np.ascontiguousarray(gm.k, dtype="<f8").tobytes(order="C"))
    meta: Dict[str, object] = {
        "format": "HYGK",
        "version": BINARY_VERSION,
        "rows": rows,
        "cols": cols,
        "operator": gm.sys.spec.describe(),
        "grid": gm.sys.mask.grid.to_dict(),
        "interior_nodes": gm.sys.mask.interior_indices.tolist(),
        "source_nodes": gm.sys.mask.interior_indices[gm.sources].tolist(),
        "nu_weights": gm.weights.tolist(),
    }
    sidecar = path.with_suffix(".json")
    with open(sidecar, "w", encoding="utf-8") as f:
        json.dump(meta, f, ensure_ascii=False, indent=2, sort_keys=True)
    return [path, sidecar]


def read_binary(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != BINARY_MAGIC:
        raise ValueError(f"{path} 不是 HYGK 文件")
    version = int(np.frombuffer(data, dtype="<u4", count=1, offset=4)[0])
    if version != BINARY_VERSION:
        raise ValueError(f"不支持的 HYGK 版本: {version}")
    rows, cols = (int(v) for v in np.frombuffer(data, dtype="<u8", count=2, offset=8))
    return np.frombuffer(data, dtype="<f8", count=rows * cols, offset=24).reshape(rows, cols)
