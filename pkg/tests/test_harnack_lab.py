"""测试Harnack常数

测试Poisson核、弱/强常数、导数常数、球链与报告的保存读取。
"""

import json

import numpy as np
import pytest

from hypolab.dirichlet_solver import Field, harmonic_extension
from hypolab.discretize import assemble
from hypolab.domain_grid import ball_domain, box_domain, build_grid, lens_domain
from hypolab.errors import (
    ChainFailure,
    CollarViolation,
    DegenerateBasepoint,
    PreconditionViolated,
)
from hypolab.harnack_lab import (
    HarnackReport,
    ball_nodes,
    chain_of_balls,
    derivative_constant,
    harnack_report,
    nested_constants,
    poisson_kernel,
    refine_constants,
    strong_constant,
    weak_constant,
    write_ratio_svg,
)
from hypolab.operator_core import from_expressions, gallery


def _disk_mask(resolution):
    return ball_domain([0.0, 0.0], 1.0, build_grid([[-1, 1], [-1, 1]], resolution))


def _disk_kernel(resolution):
    return poisson_kernel(assemble(gallery("laplace"), _disk_mask(resolution)))


class TestPoissonKernel:
    """测试离散调和测度"""

    def setup_method(self):
        grid = build_grid([[-0.5, 1.5], [-0.5, 1.5]], 9)
        self.mask = box_domain([0.0, 0.0], [1.0, 1.0], grid)
        self.sys = assemble(gallery("laplace"), self.mask)
        self.pk = poisson_kernel(self.sys)

    def test_probability(self):
        """测试非负且行和为1"""
        assert np.all(self.pk.p >= 0)
        assert np.allclose(self.pk.row_sums(), 1.0, atol=1e-12)

    def test_corners_inactive(self):
        """测试五点格式不耦合角点"""
        assert self.pk.p.shape == (9, 12)
        corner = self.mask.grid.nearest_node([0.0, 0.0])
        assert corner not in set(self.pk.boundary_nodes.tolist())

    def test_apply(self):
        """测试与调和延拓一致"""
        phi = Field.from_function(self.mask, lambda p: p[:, 0] * p[:, 1] + 1)
        u = harmonic_extension(self.sys, phi)
        assert np.allclose(self.pk.apply(phi), u.interior_values, atol=1e-12)

    def test_column_field(self):
        """测试列扩展到全网格"""
        values = self.pk.column_field(0)
        assert values[self.pk.boundary_nodes[0]] == 1.0
        assert np.allclose(values[self.mask.interior_indices], self.pk.p[:, 0])

    def test_read_only(self):
        """测试核矩阵只读"""
        with pytest.raises(ValueError):
            self.pk.p[0, 0] = 1.0


class TestDiskConstants:
    """测试单位圆盘上的常数（连续值 C = 3，M = 9）"""

    def setup_method(self):
        self.pk = _disk_kernel(65)
        self.y0 = self.pk.mask.grid.nearest_node([0.0, 0.0])
        self.compact = ball_nodes(self.pk.mask, [0.0, 0.0], 0.5)

    def test_weak(self):
        """测试弱常数接近3"""
        c = weak_constant(self.pk, self.compact, self.y0)
        assert 2.7 <= c.value <= 3.3
        assert c.x2 == self.y0
        assert c.x1 in set(self.compact.tolist())

    def test_strong(self):
        """测试强常数接近9且不小于弱常数"""
        m = strong_constant(self.pk, self.compact)
        assert 7.5 <= m.value <= 10.5
        assert m.value >= weak_constant(self.pk, self.compact, self.y0).value

    def test_nested(self):
        """测试紧集增大时常数单调"""
        nested = nested_constants(self.pk, self.y0, [0.5, 0.25])
        assert nested.radii == [0.25, 0.5]
        assert nested.sizes[0] < nested.sizes[1]
        assert nested.monotone
        assert nested.weak[0] >= 1.0

    def test_ball_nodes(self):
        """测试球内节点"""
        pts = self.pk.mask.grid.coordinates(self.compact)
        assert np.all(np.linalg.norm(pts, axis=1) <= 0.5 + 1e-12)


class TestConeExactness:
    """测试常数在非负调和锥上是精确的"""

    def setup_method(self):
        self.pk = _disk_kernel(65)
        self.y0 = self.pk.mask.grid.nearest_node([0.0, 0.0])
        self.compact = ball_nodes(self.pk.mask, [0.0, 0.0], 0.5)
        self.rows = self.pk.positions(self.compact)
        self.base = int(self.pk.positions([self.y0])[0])

    def _column(self, z):
        return self.pk.p[:, int(np.flatnonzero(self.pk.boundary_nodes == z)[0])]

    def test_random_data(self):
        """测试随机非负边界数据满足两个界"""
        c = weak_constant(self.pk, self.compact, self.y0).value
        m = strong_constant(self.pk, self.compact).value
        rng = np.random.default_rng(11)
        u = self.pk.p @ rng.random((self.pk.p.shape[1], 200))
        on_k = u[self.rows]
        assert np.all(on_k.max(axis=0) <= c * u[self.base] * (1 + 1e-9))
        assert np.all(on_k.max(axis=0) <= m * on_k.min(axis=0) * (1 + 1e-9))

    def test_weak_witness(self):
        """测试集中在见证边界节点上的数据取到 C(y₀)"""
        c = weak_constant(self.pk, self.compact, self.y0)
        u = self._column(c.z)
        assert np.isclose(u[self.rows].max() / u[self.base], c.value, rtol=1e-9, atol=0.0)

    def test_strong_witness(self):
        """测试集中在见证边界节点上的数据取到 M(K)"""
        m = strong_constant(self.pk, self.compact)
        u = self._column(m.z)[self.rows]
        assert np.isclose(u.max() / u.min(), m.value, rtol=1e-9, atol=0.0)


class TestRefinement:
    """测试逐级加密时常数趋向连续值 3 与 9"""

    def test_disk_tightening(self):
        """测试129节点比65节点更接近且落在±5%内"""

        def disk(resolution):
            return ball_domain([0.0, 0.0], 1.0, build_grid([[-1, 1], [-1, 1]], resolution))

        coarse, fine = refine_constants(gallery("laplace"), disk, [65, 129], [0.0, 0.0], 0.5)
        assert [coarse.resolution, fine.resolution] == [65, 129]
        assert coarse.failure is None and fine.failure is None
        assert fine.spacing < coarse.spacing
        assert fine.compact_size > coarse.compact_size
        assert 2.7 <= coarse.weak <= 3.3 and 7.5 <= coarse.strong <= 10.5
        assert abs(fine.weak - 3.0) < abs(coarse.weak - 3.0)
        assert abs(fine.strong - 9.0) < abs(coarse.strong - 9.0)
        assert 2.85 <= fine.weak <= 3.15
        assert 8.55 <= fine.strong <= 9.45
        assert set(fine.strong_witness) == {"z", "x1", "x2"}

    def test_degenerate_recorded(self):
        """测试基点退化记入 failure 而不中断"""
        spec = from_expressions(2, [["1", "0"], ["0", "0"]], name="horizontal")

        def box(resolution):
            grid = build_grid([[-0.5, 1.5], [-0.5, 1.5]], resolution)
            return box_domain([0.0, 0.0], [1.0, 1.0], grid)

        history = refine_constants(spec, box, [9, 17], [0.5, 0.5], 0.3)
        assert [h.resolution for h in history] == [9, 17]
        assert all(h.failure["error"] == "DegenerateBasepoint" for h in history)
        assert all(h.weak is None and h.strong is None for h in history)

    def test_basepoint_outside(self):
        """测试基点不在区域内部"""
        with pytest.raises(PreconditionViolated):
            refine_constants(gallery("laplace"), _disk_mask, [9], [0.99, 0.99], 0.3)


class TestDegenerateKernel:
    """测试只有水平场时的零调和测度"""

    def setup_method(self):
        grid = build_grid([[-0.5, 1.5], [-0.5, 1.5]], 9)
        self.mask = box_domain([0.0, 0.0], [1.0, 1.0], grid)
        spec = from_expressions(2, [["1", "0"], ["0", "0"]], name="horizontal")
        self.pk = poisson_kernel(assemble(spec, self.mask))
        self.y0 = grid.nearest_node([0.5, 0.5])

    def test_only_side_columns(self):
        """测试只有左右边界节点是活动的"""
        assert self.pk.p.shape[1] == 6

    def test_weak_degenerate(self):
        """测试基点处调和测度为0"""
        with pytest.raises(DegenerateBasepoint):
            weak_constant(self.pk, [self.y0], self.y0)

    def test_strong_degenerate(self):
        """测试跨行紧集的调和测度为0"""
        other = self.mask.grid.nearest_node([0.5, 0.25])
        with pytest.raises(DegenerateBasepoint):
            strong_constant(self.pk, [self.y0, other])


class TestDerivativeConstant:
    """测试导数常数"""

    def setup_method(self):
        self.pk = _disk_kernel(33)
        self.y0 = self.pk.mask.grid.nearest_node([0.0, 0.0])
        self.compact = ball_nodes(self.pk.mask, [0.0, 0.0], 0.5)

    def test_table(self):
        """测试零阶常数等于弱常数且表单调"""
        result = derivative_constant(self.pk, self.compact, self.y0, 2)
        assert len(result.table) == 3
        assert np.isclose(result.table[0], weak_constant(self.pk, self.compact, self.y0).value)
        assert result.table[0] <= result.table[1] <= result.table[2]
        assert len(result.witnesses) == 3

    def test_order_range(self):
        """测试阶数范围"""
        with pytest.raises(ValueError):
            derivative_constant(self.pk, self.compact, self.y0, 5)

    def test_collar(self):
        """测试紧集离边界太近"""
        mask = self.pk.mask
        near = mask.interior_indices[mask.distance_to_boundary()[mask.interior_indices] == 1][:1]
        with pytest.raises(CollarViolation):
            derivative_constant(self.pk, near, self.y0, 1)


class TestChainOfBalls:
    """测试球链"""

    def setup_method(self):
        self.pk = _disk_kernel(33)
        self.compact = ball_nodes(self.pk.mask, [0.0, 0.0], 0.5)

    def test_chain(self):
        """测试链界 3^p 支配 M(K)"""
        chain = chain_of_balls(self.pk, self.compact, 0.25)
        assert chain.p == len(chain.centers) == len(chain.radii)
        assert chain.bound == 3.0**chain.p
        assert np.isclose(chain.log10_bound, chain.p * np.log10(3.0))
        assert chain.dominates
        assert set(chain.centers) <= set(self.compact.tolist())
        assert all(r <= 0.25 for r in chain.radii)

    def test_grushin_lens(self):
        """测试跨越退化线 x₁ = 0 的 K：链建成时 M(K) ≤ 3^p，失败时给出见证节点"""
        grid = build_grid([[-2, 2], [-2, 2]], 33)
        mask = lens_domain([0.0, 0.0], [1.0, 0.0], 1.0, grid)
        pk = poisson_kernel(assemble(gallery("grushin_fedii"), mask))
        compact = ball_nodes(mask, [0.0, 0.0], 0.5)
        try:
            chain = chain_of_balls(pk, compact, 0.5)
        except ChainFailure as exc:
            assert exc.details["node"] in set(compact.tolist())
        else:
            assert chain.dominates
            assert chain.strong_m <= chain.bound
            assert set(chain.centers) <= set(compact.tolist())

    def test_radius_below_grid(self):
        """测试半径上限小于网格步长"""
        with pytest.raises(ChainFailure):
            chain_of_balls(self.pk, self.compact, 0.01)

    def test_invalid_delta(self):
        """测试 delta 必须为正"""
        with pytest.raises(ValueError):
            chain_of_balls(self.pk, self.compact, 0.0)


class TestHarnackReport:
    """测试Harnack报告"""

    def setup_method(self):
        self.pk = _disk_kernel(33)
        self.y0 = self.pk.mask.grid.nearest_node([0.0, 0.0])
        self.compact = ball_nodes(self.pk.mask, [0.0, 0.0], 0.5)

    def test_chain_failure_recorded(self):
        """测试球链失败记录在报告中"""
        report = harnack_report(self.pk, self.compact, self.y0, m=1, delta=0.01)
        assert report.chain["failure"]["error"] == "ChainFailure"
        assert len(report.derivative_table) == 2
        assert report.strong_m >= report.weak_c

    def test_save_load(self, tmp_path):
        """测试保存与读取"""
        report = harnack_report(self.pk, self.compact, self.y0)
        path = report.save(tmp_path / "harnack.json")
        loaded = HarnackReport.load(path)
        assert loaded.weak_c == report.weak_c
        assert loaded.compact == report.compact
        assert loaded.chain is None

    def test_schema_version(self, tmp_path):
        """测试读取时检查版本"""
        path = harnack_report(self.pk, self.compact, self.y0).save(tmp_path / "harnack.json")
        data = json.loads(path.read_text(encoding="utf-8"))
        data["schema_version"] = "other"
        path.write_text(json.dumps(data), encoding="utf-8")
        with pytest.raises(ValueError):
            HarnackReport.load(path)

    def test_ratio_svg(self, tmp_path):
        """测试比值热图"""
        path = write_ratio_svg(tmp_path / "ratio.svg", self.pk, self.y0, "ratio")
        assert "<svg" in path.read_text(encoding="utf-8")
