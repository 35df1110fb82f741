"""Dirichlet求解器

求解离散Dirichlet问题 (L − ε)u = −f（内部）、u = φ（边界），
并提供正则化阶梯、弱极大值原理检查与 w 变换求解。
"""
# -*- coding: utf-8 -*-

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .discretize import StencilSystem, TildeTransform, assemble, regularize
from .domain_grid import DomainMask
from .errors import SingularSystem, SolverDiverged
from .figures import field_image, grid_extent, slice_2d, write_heatmap_svg, write_pgm
from .operator_core import OperatorSpec

logger = logging.getLogger(__name__)

DIRECT_NODE_LIMIT = 300_000
RESIDUAL_RTOL = 1e-10
PIVOT_RTOL = 1e-14

PathLike = Union[str, Path]


@dataclass(frozen=True, eq=False)
class Field:
    """网格函数，区域外取0

    Attributes:
        mask: 所在区域
        values: 全网格展平数组
    """

    mask: DomainMask
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float).ravel()
        if values.shape != (self.mask.grid.size,):
            raise ValueError(f"场的长度 {values.size} 与网格节点数 {self.mask.grid.size} 不一致")
        closure = self.mask.closure.ravel()
        if not np.isfinite(values[closure]).all():
            raise ValueError("场在区域闭包上必须取有限值")
        values = np.where(closure, values, 0.0)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, mask: DomainMask, fn: Callable[[np.ndarray], np.ndarray]) -> "Field":
        """在闭包节点上对 fn((n, N)) 求值"""
        values = np.zeros(mask.grid.size)
        ids = np.flatnonzero(mask.closure.ravel())
        values[ids] = np.asarray(fn(mask.grid.coordinates(ids)), dtype=float).reshape(len(ids))
        return cls(mask, values)

    @classmethod
    def constant(cls, mask: DomainMask, value: float) -> "Field":
        return cls(mask, np.full(mask.grid.size, float(value)))

    @classmethod
    def zeros(cls, mask: DomainMask) -> "Field":
        return cls(mask, np.zeros(mask.grid.size))

    @classmethod
    def from_parts(
        cls, mask: DomainMask, interior: np.ndarray, boundary: Optional[np.ndarray] = None
    ) -> "Field":
        values = np.zeros(mask.grid.size)
        values[mask.interior_indices] = interior
        if boundary is not None:
            values[mask.boundary_indices] = boundary
        return cls(mask, values)

    @property
    def interior_values(self) -> np.ndarray:
        return self.values[self.mask.interior_indices]

    @property
    def boundary_values(self) -> np.ndarray:
        return self.values[self.mask.boundary_indices]

    def closure_values(self) -> np.ndarray:
        return self.values[self.mask.closure.ravel()]

    def sup_norm(self) -> float:
        vals = self.closure_values()
        return float(np.max(np.abs(vals))) if vals.size else 0.0

    def at(self, point: Sequence[float]) -> float:
        """最近节点处的值"""
        return float(self.values[self.mask.grid.nearest_node(point)])

    def to_csv(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        ids = np.flatnonzero(self.mask.closure.ravel())
        coords = self.mask.grid.coordinates(ids)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            coords_header = [f"x{k + 1}" for k in range(self.mask.grid.dim)]
            writer.writerow(["index"] + coords_header + ["value"])
            for flat, point in zip(ids, coords):
                writer.writerow(
                    [int(flat)] + [repr(float(c)) for c in point] + [repr(float(self.values[flat]))]
                )
        return path

    def to_pgm(self, path: PathLike) -> Path:
        closure = self.mask.closure.ravel()
        lo = float(self.closure_values().min()) if closure.any() else 0.0
        image = slice_2d(np.where(closure, self.values, lo), self.mask.grid)
        return write_pgm(path, image)

    def to_svg(self, path: PathLike, title: str, config_hash: str = "", label: str = "u") -> Path:
        image = field_image(self.values, self.mask.closure, self.mask.grid)
        return write_heatmap_svg(
            path, image, grid_extent(self.mask.grid), title, config_hash=config_hash, label=label
        )


# ---------------------------------------------------------------------------
# 分解与求解
# ---------------------------------------------------------------------------


class Factorization:
    """−M 的一次分解，可对多个右端项重复使用

    小规模用稀疏LU；M-矩阵不做主元交换，消元保持M-矩阵结构，
    解的分量不产生相消。节点数超过阈值时改用迭代法：
    ν-自伴系统用共轭梯度（求解 W(−M)x = W·rhs），否则用GMRES。

    Attributes:
        sys: 被分解的系统
        method: "direct" 或 "iterative"
    """

    def __init__(self, sys: StencilSystem, node_limit: int = DIRECT_NODE_LIMIT) -> None:
        self.sys = sys
        self.method = "direct" if sys.n_interior <= node_limit else "iterative"
        self._neg = (-sys.matrix).tocsc()
        if sys.n_interior == 0:
            raise SingularSystem("区域没有内部节点")
        row_mass = np.asarray(abs(self._neg).sum(axis=1)).ravel()
        dead = np.flatnonzero(row_mass == 0)
        if dead.size:
            point = sys.mask.grid.coordinates(sys.mask.interior_indices[dead[0]])
            raise SingularSystem(
                f"{len(dead)} 个内部行全为零（ε = 0、c ≡ 0 且算子完全退化）",
                rows=int(dead.size),
                point=point,
            )
        self._lu = None
        if self.method == "direct":
            self._factor_direct()
        logger.debug("分解 %s: n=%d, 方法=%s", sys.spec.name, sys.n_interior, self.method)

    def _factor_direct(self) -> None:
        options = {}
        if self.sys.mmatrix:
            options = dict(diag_pivot_thresh=0.0, options={"SymmetricMode": True})
        try:
            self._lu = spla.splu(self._neg, permc_spec="MMD_AT_PLUS_A", **options)
        except RuntimeError as exc:
            raise SingularSystem(f"稀疏LU分解失败: {exc}") from exc
        pivots = np.abs(self._lu.U.diagonal())
        if pivots.size and pivots.min() <= PIVOT_RTOL * pivots.max():
            raise SingularSystem(
                "LU主元接近零，系统奇异或近奇异",
                min_pivot=float(pivots.min()),
                max_pivot=float(pivots.max()),
            )

    def _solve_iterative(self, rhs: np.ndarray) -> np.ndarray:
        if self.sys.self_adjoint:
            weights = sparse.diags(self.sys.nu_weights)
            x, info = spla.cg(weights @ self._neg, self.sys.nu_weights * rhs, rtol=1e-13,
                              maxiter=20 * self.sys.n_interior)
        else:
            x, info = spla.gmres(self._neg, rhs, rtol=1e-13, restart=200,
                                 maxiter=20 * self.sys.n_interior)
        if info != 0:
            raise SolverDiverged("迭代求解未收敛", info=int(info))
        return x

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """求解 (−M)x = rhs；rhs 可为 (n,) 或 (n, k)"""
        rhs = np.asarray(rhs, dtype=float)
        if self._lu is not None:
            out = self._lu.solve(rhs)
        elif rhs.ndim == 1:
            out = self._solve_iterative(rhs)
        else:
            out = np.column_stack([self._solve_iterative(rhs[:, j]) for j in range(rhs.shape[1])])
        if not np.isfinite(out).all():
            raise SingularSystem("求解结果出现非有限值")
        return out

    def solve_transpose(self, rhs: np.ndarray) -> np.ndarray:
        """求解 (−M)ᵀx = rhs"""
        rhs = np.asarray(rhs, dtype=float)
        if self._lu is not None:
            out = self._lu.solve(rhs, trans="T")
        elif self.sys.self_adjoint:
            # (−M)ᵀ = W(−M)W⁻¹
            w = self.sys.nu_weights if rhs.ndim == 1 else self.sys.nu_weights[:, None]
            out = w * self.solve(rhs / w)
        else:
            x, info = spla.gmres(self._neg.T.tocsc(), rhs, rtol=1e-13, restart=200,
                                 maxiter=20 * self.sys.n_interior)
            if info != 0:
                raise SolverDiverged("迭代求解未收敛", info=int(info))
            out = x
        if not np.isfinite(out).all():
            raise SingularSystem("求解结果出现非有限值")
        return out


def factorize(sys: StencilSystem, node_limit: int = DIRECT_NODE_LIMIT) -> Factorization:
    return Factorization(sys, node_limit=node_limit)


def _inf_norm(matrix: sparse.spmatrix) -> float:
    if matrix.shape[1] == 0:
        return 0.0
    return float(np.max(np.asarray(abs(matrix).sum(axis=1)).ravel(), initial=0.0))


def solve(
    sys: StencilSystem,
    f: Field,
    phi: Field,
    factorization: Optional[Factorization] = None,
) -> Field:
    """求解内部 (L − ε)u = −f、边界 u = φ

    Args:
        sys: 离散系统
        f: 右端项（只用内部值）
        phi: 边界数据（只用边界值）
        factorization: 可复用的分解

    Returns:
        内部为解、边界为 φ 的Field

    Raises:
        SingularSystem: 系统奇异
        SolverDiverged: 相对残差超过 1e-10
    """
    fact = factorization or factorize(sys)
    f_int = f.interior_values
    phi_bnd = phi.boundary_values
    rhs = f_int + sys.boundary_map @ phi_bnd
    u_int = fact.solve(rhs)
    residual = sys.matrix @ u_int + sys.boundary_map @ phi_bnd + f_int
    scale = _inf_norm(sys.matrix) * float(np.max(np.abs(u_int), initial=0.0)) + float(
        np.max(np.abs(rhs), initial=0.0)
    )
    rel = float(np.max(np.abs(residual), initial=0.0)) / scale if scale > 0 else 0.0
    if rel > RESIDUAL_RTOL:
        raise SolverDiverged(f"相对残差 {rel:.3e} 超过 {RESIDUAL_RTOL:g}", residual=rel)
    return Field.from_parts(sys.mask, u_int, phi_bnd)


def harmonic_extension(
    sys: StencilSystem, phi: Field, factorization: Optional[Factorization] = None
) -> Field:
    """f ≡ 0 的解，即边界数据的离散 L_ε-调和延拓"""
    return solve(sys, Field.zeros(sys.mask), phi, factorization)


def solve_via_tilde(
    transform: TildeTransform, sys: StencilSystem, f: Field, phi: Field
) -> Field:
    """经 w 变换求解：以 (w·f, φ/w) 求 ũ，再返回 u = w·ũ"""
    tsys = transform.apply(sys)
    w = np.ones(sys.mask.grid.size)
    closure = np.flatnonzero(sys.mask.closure.ravel())
    w[closure] = transform.weight(sys.mask.grid.coordinates(closure))
    tilde_f = Field(sys.mask, w * f.values)
    tilde_phi = Field(sys.mask, phi.values / w)
    tilde_u = solve(tsys, tilde_f, tilde_phi)
    return Field(sys.mask, w * tilde_u.values)


# ---------------------------------------------------------------------------
# 正则化阶梯
# ---------------------------------------------------------------------------


@dataclass
class LadderReport:
    """正则化阶梯结果

    Attributes:
        n_list: 正则化参数
        solutions: 每个 n 的解
        sup_norms: ‖uₙ‖∞
        c0: 一致下界 c₀ = min(−L_h(1))，不为正时无界
        bound: max(‖φ‖∞, ‖f‖∞/c₀)，c₀ ≤ 0 时为 None
        bound_holds: 每个 n 的一致界是否成立
        step_distances: 相邻两级的 sup 距离
        limit_distances: 到最后一级的 sup 距离
        monotone: 相邻距离单调不增
        rate_constant: max dₙ·n（到最后一级的距离乘以 n）
    """

    n_list: List[int]
    solutions: List[Field] = field(repr=False)
    sup_norms: List[float]
    c0: float
    bound: Optional[float]
    bound_holds: List[bool]
    step_distances: List[float]
    limit_distances: List[float]
    monotone: bool
    rate_constant: float

    def to_dict(self) -> dict:
        return {
            "n_list": self.n_list,
            "sup_norms": self.sup_norms,
            "c0": self.c0,
            "bound": self.bound,
            "bound_holds": self.bound_holds,
            "step_distances": self.step_distances,
            "limit_distances": self.limit_distances,
            "monotone": self.monotone,
            "rate_constant": self.rate_constant,
        }


def regularization_ladder(
    spec: OperatorSpec, mask: DomainMask, f: Field, phi: Field, n_list: Sequence[int]
) -> LadderReport:
    """对 Pₙ = P + (1/n)Δ 逐级求解

    Raises:
        ValueError: n_list 为空或不严格递增
    """
    ns = [int(n) for n in n_list]
    if not ns or any(b <= a for a, b in zip(ns, ns[1:])) or ns[0] < 1:
        raise ValueError("n_list 必须是非空的严格递增正整数序列")
    base = assemble(spec, mask)
    c0 = base.zero_order_floor()
    bound = max(phi.sup_norm(), f.sup_norm() / c0) if c0 > 0 else None
    solutions = []
    for n in ns:
        u = solve(regularize(base, n), f, phi)
        logger.debug("阶梯 n=%d: ‖u‖∞=%.6g", n, u.sup_norm())
        solutions.append(u)
    sups = [u.sup_norm() for u in solutions]
    holds = [bound is not None and s <= bound * (1 + 1e-10) + 1e-14 for s in sups]
    steps = [float(np.max(np.abs(b.values - a.values))) for a, b in zip(solutions, solutions[1:])]
    last = solutions[-1].values
    limits = [float(np.max(np.abs(u.values - last))) for u in solutions]
    monotone = all(b <= a * (1 + 1e-12) for a, b in zip(steps, steps[1:]))
    rate = max((d * n for d, n in zip(limits[:-1], ns[:-1])), default=0.0)
    return LadderReport(
        n_list=ns,
        solutions=solutions,
        sup_norms=sups,
        c0=c0,
        bound=bound,
        bound_holds=holds,
        step_distances=steps,
        limit_distances=limits,
        monotone=monotone,
        rate_constant=float(rate),
    )


# ---------------------------------------------------------------------------
# 弱极大值原理
# ---------------------------------------------------------------------------


@dataclass
class WmpReport:
    """弱极大值原理检查结果

    Attributes:
        passed: 蕴含式与上确界等式均成立
        subsolution: (Lu)ᵢ ≥ −tol 对所有内部 i 成立（或由调用方断言）
        boundary_nonpositive: 边界上 u ≤ tol
        implication_holds: 前提成立时内部 u ≤ tol
        sup_closure: 闭包上的最大值
        sup_boundary: 边界上的最大值
        sup_identity_holds: 下解的最大值在边界取得（有零阶项时与 max(sup_∂Ω u, 0) 比较）
        witness: 违例的全网格节点下标
        guarantee: "exact"（M-矩阵）或 "empirical"
        min_lu: min (Lu)ᵢ
    """

    passed: bool
    subsolution: bool
    boundary_nonpositive: bool
    implication_holds: bool
    sup_closure: float
    sup_boundary: float
    sup_identity_holds: bool
    witness: Optional[int]
    guarantee: str
    min_lu: float


def wmp_check(
    sys: StencilSystem, u: Field, tol: float = 1e-10, assume_subharmonic: bool = False
) -> WmpReport:
    """检查离散弱极大值原理

    Args:
        sys: 离散系统
        u: 待检查的场
        tol: 相对容差
        assume_subharmonic: 跳过 Lu ≥ 0 的检查，直接把 u 当作下解
    """
    u_int, u_bnd = u.interior_values, u.boundary_values
    lu = sys.apply(u.values)
    scale_res = _inf_norm(sys.matrix) * float(np.max(np.abs(u_int), initial=0.0)) + _inf_norm(
        sys.boundary_map
    ) * float(np.max(np.abs(u_bnd), initial=0.0))
    min_lu = float(lu.min()) if lu.size else 0.0
    subsolution = assume_subharmonic or min_lu >= -tol * max(scale_res, 1.0)
    tol_sup = tol * max(1.0, u.sup_norm())
    sup_int = float(u_int.max()) if u_int.size else -np.inf
    sup_bnd = float(u_bnd.max()) if u_bnd.size else -np.inf
    sup_closure = max(sup_int, sup_bnd)
    boundary_nonpositive = sup_bnd <= tol_sup

    implication = not (subsolution and boundary_nonpositive) or sup_int <= tol_sup
    target = max(sup_bnd, 0.0) if sys.has_zero_order() else sup_bnd
    identity = not subsolution or sup_int <= target + tol_sup

    witness = None
    if not (implication and identity):
        witness = int(sys.mask.interior_indices[int(np.argmax(u_int))])
    guarantee = "exact" if sys.mmatrix else "empirical"
    return WmpReport(
        passed=bool(implication and identity),
        subsolution=bool(subsolution),
        boundary_nonpositive=bool(boundary_nonpositive),
        implication_holds=bool(implication),
        sup_closure=sup_closure,
        sup_boundary=sup_bnd,
        sup_identity_holds=bool(identity),
        witness=witness,
        guarantee=guarantee,
        min_lu=min_lu,
    )
