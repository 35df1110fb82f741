"""离散化

在区域上组装 L_ε 的守恒型有限差分系统：

- 对角项用两点通量，中点系数取端点 V·aₖₖ 的几何平均；
- 交叉项 aₖₗ（k ≠ l）用中心四角模板；
- 对角线上加零阶项 −(c + ε)。

边界值通过 boundary_map 消元，内部矩阵保持方阵且在 ν 权下对称（A 为对角时）。
"""
# -*- coding: utf-8 -*-

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.io
from scipy import sparse

from .domain_grid import DomainMask, NodeStatus
from .errors import OutsideBallOfValidity
from .operator_core import OperatorSpec, VectorFieldSet, require_invariants

logger = logging.getLogger(__name__)

FLUSH_BELOW = 1e-300
MMATRIX_RTOL = 1e-12
SELF_ADJOINT_RTOL = 1e-12

Offset = Tuple[int, ...]
Sampler = Callable[[Offset], Tuple[np.ndarray, np.ndarray]]


def _flush(values: np.ndarray) -> np.ndarray:
    return np.where(values < FLUSH_BELOW, 0.0, values)


def _unit(dim: int, k: int, sign: int = 1) -> Offset:
    return tuple(sign if i == k else 0 for i in range(dim))


def _flux_weights(
    sample: Sampler, dim: int, spacing: np.ndarray
) -> Tuple[Dict[Offset, np.ndarray], bool]:
    """通量模板权重

    Args:
        sample: offset ↦ (a, v)，在 中心 + offset·h 处的系数
        dim: 维数
        spacing: 每轴步长

    Returns:
        (offset ↦ 权重, A 是否在所有采样点上为对角)
    """
    zero = (0,) * dim
    a0, v0 = sample(zero)
    weights: Dict[Offset, np.ndarray] = {zero: np.zeros(len(v0))}
    cache: Dict[Offset, Tuple[np.ndarray, np.ndarray]] = {zero: (a0, v0)}
    for k in range(dim):
        g0 = _flush(v0 * a0[:, k, k])
        for sign in (1, -1):
            off = _unit(dim, k, sign)
            cache[off] = sample(off)
            a1, v1 = cache[off]
            flux = np.sqrt(g0 * _flush(v1 * a1[:, k, k])) / (v0 * spacing[k] ** 2)
            weights[off] = flux
            weights[zero] = weights[zero] - flux

    off_diagonal = [(k, l) for k in range(dim) for l in range(k + 1, dim)]
    diagonal = True
    for k, l in off_diagonal:
        if any(np.any(a[:, k, l] != 0.0) or np.any(a[:, l, k] != 0.0) for a, _ in cache.values()):
            diagonal = False
    if diagonal:
        return weights, True

    for k, l in off_diagonal:
        def g(off: Offset) -> np.ndarray:
            a, v = cache[off]
            return v * 0.5 * (a[:, k, l] + a[:, l, k])

        scale = 1.0 / (4.0 * spacing[k] * spacing[l] * v0)
        pk, mk = _unit(dim, k, 1), _unit(dim, k, -1)
        pl, ml = _unit(dim, l, 1), _unit(dim, l, -1)
        corners = {
            (1, 1): g(pk) + g(pl),
            (1, -1): -(g(pk) + g(ml)),
            (-1, 1): -(g(mk) + g(pl)),
            (-1, -1): g(mk) + g(ml),
        }
        for (sk, sl), value in corners.items():
            off = tuple(sk if i == k else sl if i == l else 0 for i in range(dim))
            weights[off] = weights.get(off, 0.0) + scale * value
    return weights, False


@dataclass(frozen=True, eq=False)
class StencilSystem:
    """离散系统：行 = 内部节点处的 (L − ε)u

    Attributes:
        spec: 算子
        mask: 区域
        matrix: 内部×内部稀疏矩阵 M
        boundary_map: 内部×边界稀疏矩阵 B
        nu_weights: 内部节点质量 V(x)·∏h
        diag_a: A 在所有模板求值点上为对角
        mmatrix: −M 为M-矩阵（非对角非负，行和 ≤ −ε）
        self_adjoint: W·M 对称
        shift: M-矩阵行和判据中使用的 ε
        regularization: 正则化参数 n（未正则化为 None）
        transform: 变换标记
    """

    spec: OperatorSpec
    mask: DomainMask
    matrix: sparse.csr_matrix
    boundary_map: sparse.csr_matrix
    nu_weights: np.ndarray
    diag_a: bool
    mmatrix: bool
    self_adjoint: bool
    shift: float
    regularization: Optional[int] = None
    transform: Optional[str] = None

    @property
    def n_interior(self) -> int:
        return self.matrix.shape[0]

    def split(self, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """全网格值 → (内部值, 边界值)"""
        flat = np.asarray(values, dtype=float).ravel()
        return flat[self.mask.interior_indices], flat[self.mask.boundary_indices]

    def apply(self, values: np.ndarray) -> np.ndarray:
        """离散 L 作用于全网格值，返回内部行"""
        interior, boundary = self.split(values)
        return self.matrix @ interior + self.boundary_map @ boundary

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel() + np.asarray(
            self.boundary_map.sum(axis=1)
        ).ravel()

    def zero_order_floor(self) -> float:
        """c₀ = min(−L_h(1))"""
        return float(np.min(-self.row_sums()))

    def has_zero_order(self) -> bool:
        return bool(np.any(self.row_sums() < 0))

    def flags(self) -> Dict[str, object]:
        return {
            "diag_a": self.diag_a,
            "mmatrix": self.mmatrix,
            "self_adjoint": self.self_adjoint,
            "shift": self.shift,
            "regularization": self.regularization,
            "transform": self.transform,
        }


def _structure_flags(
    matrix: sparse.csr_matrix, boundary_map: sparse.csr_matrix, nu_weights: np.ndarray,
    shift: float,
) -> Tuple[bool, bool]:
    report = _mmatrix_scan(matrix, boundary_map, shift, max_witnesses=0)
    weighted = sparse.diags(nu_weights) @ matrix
    scale = abs(weighted).max()
    asym = abs(weighted - weighted.T).max()
    self_adjoint = bool(scale == 0 or asym <= SELF_ADJOINT_RTOL * scale)
    return report.passed, self_adjoint


def _assemble_parts(
    spec: OperatorSpec, mask: DomainMask
) -> Tuple[sparse.csr_matrix, sparse.csr_matrix, np.ndarray, bool]:
    grid = mask.grid
    closure_ids = np.flatnonzero(mask.flat_status != NodeStatus.EXTERIOR)
    closure_pos = np.full(grid.size, -1, dtype=np.int64)
    closure_pos[closure_ids] = np.arange(len(closure_ids))
    closure_pts = grid.coordinates(closure_ids)
    require_invariants(spec, closure_pts)
    a_all, v_all, c_all = spec.evaluate(closure_pts)

    interior = mask.interior_indices
    strides = np.array([int(np.prod(grid.shape[k + 1:])) for k in range(grid.dim)])

    def neighbour(off: Offset) -> np.ndarray:
        return interior + int(np.dot(off, strides))

    def sample(off: Offset) -> Tuple[np.ndarray, np.ndarray]:
        pos = closure_pos[neighbour(off)]
        return a_all[pos], v_all[pos]

    weights, diagonal = _flux_weights(sample, grid.dim, grid.spacing)
    zero = (0,) * grid.dim
    centre = closure_pos[interior]
    weights[zero] = weights[zero] - (c_all[centre] + spec.epsilon)

    int_pos = mask.interior_position()
    bnd_pos = mask.boundary_position()
    rows = np.arange(len(interior))
    m_rows: List[np.ndarray] = []
    m_cols: List[np.ndarray] = []
    m_vals: List[np.ndarray] = []
    b_rows: List[np.ndarray] = []
    b_cols: List[np.ndarray] = []
    b_vals: List[np.ndarray] = []
    for off, w in weights.items():
        cols = neighbour(off)
        keep = (w != 0.0) | (off == zero)
        inside = keep & (int_pos[cols] >= 0)
        onto = keep & (bnd_pos[cols] >= 0)
        m_rows.append(rows[inside])
        m_cols.append(int_pos[cols[inside]])
        m_vals.append(w[inside])
        b_rows.append(rows[onto])
        b_cols.append(bnd_pos[cols[onto]])
        b_vals.append(w[onto])
    n, nb = len(interior), mask.n_boundary
    matrix = sparse.coo_matrix(
        (np.concatenate(m_vals), (np.concatenate(m_rows), np.concatenate(m_cols))), shape=(n, n)
    ).tocsr()
    boundary_map = sparse.coo_matrix(
        (np.concatenate(b_vals), (np.concatenate(b_rows), np.concatenate(b_cols))), shape=(n, nb)
    ).tocsr()
    nu_weights = v_all[centre] * float(np.prod(grid.spacing))
    return matrix, boundary_map, nu_weights, diagonal


def assemble(spec: OperatorSpec, mask: DomainMask) -> StencilSystem:
    """组装离散系统

    Raises:
        CoefficientError: 系数在某个模板点非有限
        InvalidOperator: 系数违反对称/半正定/V > 0
    """
    if spec.dim != mask.grid.dim:
        raise ValueError(f"算子维数 {spec.dim} 与网格维数 {mask.grid.dim} 不一致")
    matrix, boundary_map, nu_weights, diagonal = _assemble_parts(spec, mask)
    mmatrix, self_adjoint = _structure_flags(matrix, boundary_map, nu_weights, spec.epsilon)
    logger.debug(
        "组装 %s: %d 行, nnz=%d, diag_a=%s, mmatrix=%s",
        spec.name, matrix.shape[0], matrix.nnz, diagonal, mmatrix,
    )
    if not mmatrix:
        logger.warning("%s 的离散系统不是M-矩阵，极值原理检查降级为经验检查", spec.name)
    return StencilSystem(
        spec=spec,
        mask=mask,
        matrix=matrix,
        boundary_map=boundary_map,
        nu_weights=nu_weights,
        diag_a=diagonal,
        mmatrix=mmatrix,
        self_adjoint=self_adjoint,
        shift=spec.epsilon,
    )


def apply_at_point(
    spec: OperatorSpec,
    u: Callable[[np.ndarray], np.ndarray],
    x: Sequence[float],
    h: Union[float, Sequence[float]],
) -> np.ndarray:
    """在任意点用与 assemble 相同的模板计算 (L_h u)(x)

    Args:
        spec: 算子
        u: 向量化函数 (m, N) -> (m,)
        x: 单点 (N,) 或点阵 (m, N)
        h: 步长（标量或每轴）

    Returns:
        单点时为标量数组，点阵时为 (m,)
    """
    centres = np.atleast_2d(np.asarray(x, dtype=float))
    spacing = np.broadcast_to(np.asarray(h, dtype=float), (spec.dim,))

    def sample(off: Offset) -> Tuple[np.ndarray, np.ndarray]:
        a, v, _ = spec.evaluate(centres + np.asarray(off) * spacing)
        return a, v

    weights, _ = _flux_weights(sample, spec.dim, spacing)
    _, _, c = spec.evaluate(centres)
    total = -(c + spec.epsilon) * np.asarray(u(centres), dtype=float)
    for off, w in weights.items():
        total = total + w * np.asarray(u(centres + np.asarray(off) * spacing), dtype=float)
    return total[0] if np.ndim(x) == 1 else total


# ---------------------------------------------------------------------------
# 正则化与 w 变换
# ---------------------------------------------------------------------------


def _unit_laplacian(mask: DomainMask) -> Tuple[sparse.csr_matrix, sparse.csr_matrix]:
    dim = mask.grid.dim

    def identity(points: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.eye(dim), (np.atleast_2d(points).shape[0], dim, dim)).copy()

    lap = OperatorSpec(dim=dim, a=identity, name="unit_laplacian")
    matrix, boundary_map, _, _ = _assemble_parts(lap, mask)
    return matrix, boundary_map


def regularize(sys: StencilSystem, n: int) -> StencilSystem:
    """Pₙ = P + (1/n)Δ：加上 (1/n) 倍离散拉普拉斯

    V 非常数时 Δ_h 在 ν 权下不对称，self_adjoint 标记重新计算。
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError("正则化参数 n 必须是正整数")
    lap_m, lap_b = _unit_laplacian(sys.mask)
    matrix = (sys.matrix + lap_m / float(n)).tocsr()
    boundary_map = (sys.boundary_map + lap_b / float(n)).tocsr()
    mmatrix, self_adjoint = _structure_flags(matrix, boundary_map, sys.nu_weights, sys.shift)
    return dataclasses.replace(
        sys,
        matrix=matrix,
        boundary_map=boundary_map,
        mmatrix=mmatrix,
        self_adjoint=self_adjoint,
        regularization=int(n),
    )


@dataclass(frozen=True, eq=False)
class TildeTransform:
    """L̃u := w·L(w·u)，w(x) = 1 − m|x − x₀|²

    Attributes:
        spec: 原算子
        x0: 中心
        m: 参数 m > 0
    """

    spec: OperatorSpec
    x0: np.ndarray
    m: float

    def weight(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return 1.0 - self.m * np.sum((pts - self.x0) ** 2, axis=1)

    def _require_valid(self, points: np.ndarray) -> np.ndarray:
        w = self.weight(points)
        if np.any(w <= 0):
            bad = np.atleast_2d(points)[int(np.argmin(w))]
            raise OutsideBallOfValidity(
                f"点 {bad.tolist()} 不在 w > 0 的球内（半径 1/√m = {1 / np.sqrt(self.m):.6g}）",
                point=bad,
            )
        return w

    def _pieces(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        a, _, c = self.spec.evaluate(pts)
        gamma = -(c + self.spec.epsilon)
        trace = np.trace(a, axis1=1, axis2=2)
        drift = np.einsum("nj,nj->n", VectorFieldSet(self.spec).b(pts), pts - self.x0)
        return gamma, trace, drift

    def zero_order(self, points: np.ndarray) -> np.ndarray:
        """L̃(1) = w·L(w) = w(γw − 2m·trA − 2mΣbⱼ(x−x₀)ⱼ)，其中 γ = L(1) = −(c+ε)"""
        w = self._require_valid(points)
        gamma, trace, drift = self._pieces(points)
        return w * (gamma * w - 2 * self.m * trace - 2 * self.m * drift)

    def displayed_zero_order(self, points: np.ndarray) -> np.ndarray:
        """w²γ − 2m·trA − 2mΣbⱼ(x−x₀)ⱼ；在 x₀ 处与 zero_order 相等"""
        self._require_valid(points)
        gamma, trace, drift = self._pieces(points)
        w = self.weight(points)
        return w**2 * gamma - 2 * self.m * trace - 2 * self.m * drift

    def critical_m(self) -> float:
        """γ(x₀)/(2 trace A(x₀))；m 大于它时 L̃(1)(x₀) < 0"""
        gamma, trace, _ = self._pieces(self.x0)
        return float(gamma[0] / (2 * trace[0]))

    def apply(self, sys: StencilSystem) -> StencilSystem:
        """D_w M D_w 与 D_w B D_w"""
        w_int = self._require_valid(sys.mask.interior_points())
        w_bnd = self._require_valid(sys.mask.boundary_points())
        matrix = (sparse.diags(w_int) @ sys.matrix @ sparse.diags(w_int)).tocsr()
        boundary_map = (sparse.diags(w_int) @ sys.boundary_map @ sparse.diags(w_bnd)).tocsr()
        mmatrix, self_adjoint = _structure_flags(matrix, boundary_map, sys.nu_weights, 0.0)
        return dataclasses.replace(
            sys,
            matrix=matrix,
            boundary_map=boundary_map,
            mmatrix=mmatrix,
            self_adjoint=self_adjoint,
            shift=0.0,
            transform=f"tilde(m={self.m:g})",
        )


def tilde_transform(spec: OperatorSpec, x0: Sequence[float], m: float) -> TildeTransform:
    if not m > 0:
        raise ValueError("m 必须为正")
    centre = np.asarray(x0, dtype=float)
    if centre.shape != (spec.dim,):
        raise ValueError("x0 的维数与算子不一致")
    return TildeTransform(spec=spec, x0=centre, m=float(m))


# ---------------------------------------------------------------------------
# M-矩阵检查与导出
# ---------------------------------------------------------------------------


@dataclass
class MmatrixReport:
    """M-矩阵结构检查结果

    Attributes:
        passed: 全部条件成立
        offdiag_violations: 负的非对角元 (行, 列, 值)，列为内部序号
        boundary_violations: 负的边界耦合 (行, 边界序号, 值)
        rowsum_violations: 行和过大的 (行, 行和)
        n_offdiag_violations: 负非对角元总数
        n_rowsum_violations: 行和违例总数
    """

    passed: bool
    offdiag_violations: List[Tuple[int, int, float]]
    boundary_violations: List[Tuple[int, int, float]]
    rowsum_violations: List[Tuple[int, float]]
    n_offdiag_violations: int
    n_rowsum_violations: int


def _mmatrix_scan(
    matrix: sparse.csr_matrix, boundary_map: sparse.csr_matrix, shift: float, max_witnesses: int
) -> MmatrixReport:
    coo = matrix.tocoo()
    off = coo.row != coo.col
    neg = off & (coo.data < 0)
    bcoo = boundary_map.tocoo()
    bneg = bcoo.data < 0
    diag = matrix.diagonal()
    rowsum = np.asarray(matrix.sum(axis=1)).ravel() + np.asarray(boundary_map.sum(axis=1)).ravel()
    limit = -shift * (1 - MMATRIX_RTOL) + MMATRIX_RTOL * np.abs(diag)
    bad_rows = np.flatnonzero(rowsum > limit)
    return MmatrixReport(
        passed=bool(not neg.any() and not bneg.any() and len(bad_rows) == 0),
        offdiag_violations=[
            (int(r), int(c), float(v))
            for r, c, v in zip(coo.row[neg], coo.col[neg], coo.data[neg])
        ][:max_witnesses],
        boundary_violations=[
            (int(r), int(c), float(v))
            for r, c, v in zip(bcoo.row[bneg], bcoo.col[bneg], bcoo.data[bneg])
        ][:max_witnesses],
        rowsum_violations=[(int(r), float(rowsum[r])) for r in bad_rows[:max_witnesses]],
        n_offdiag_violations=int(neg.sum() + bneg.sum()),
        n_rowsum_violations=len(bad_rows),
    )


def check_mmatrix(sys: StencilSystem, max_witnesses: int = 10) -> MmatrixReport:
    """扫描符号结构与弱对角占优，返回违例见证"""
    return _mmatrix_scan(sys.matrix, sys.boundary_map, sys.shift, max_witnesses)


def export_matrix_market(sys: StencilSystem, path: Union[str, Path]) -> List[Path]:
    """写出 <stem>.mtx、<stem>_boundary.mtx 与 <stem>.json"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.with_suffix("")
    matrix_path = stem.with_name(stem.name + ".mtx")
    boundary_path = stem.with_name(stem.name + "_boundary.mtx")
    sidecar = stem.with_name(stem.name + ".json")
    scipy.io.mmwrite(str(matrix_path), sys.matrix, field="real")
    scipy.io.mmwrite(str(boundary_path), sys.boundary_map, field="real")
    meta = {
        "operator": sys.spec.describe(),
        "grid": sys.mask.grid.to_dict(),
        "shape": sys.mask.shape.to_dict(),
        "flags": sys.flags(),
        "interior_nodes": sys.mask.interior_indices.tolist(),
        "boundary_nodes": sys.mask.boundary_indices.tolist(),
        "nu_weights": sys.nu_weights.tolist(),
    }
    with open(sidecar, "w", encoding="utf-8") as f:
        json.dump(meta, f, ensure_ascii=False, indent=2, sort_keys=True)
    return [matrix_path, boundary_path, sidecar]
