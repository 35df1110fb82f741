"""测试Green核

测试Green矩阵的构造、对称性、再生恒等式、边界衰减、质量、比较估计与二进制导出。
"""

import json

import numpy as np
import pytest

from hypolab.dirichlet_solver import Field, factorize, harmonic_extension, solve
from hypolab.discretize import assemble
from hypolab.domain_grid import box_domain, build_grid, lens_domain
from hypolab.errors import GridTooLarge, PreconditionViolated
from hypolab.green_kernel import (
    boundary_decay_refinement,
    bump,
    comparison_bound,
    export_binary,
    green_matrix,
    green_weak_bound,
    l1_mass,
    read_binary,
    verify_boundary_decay,
    verify_reproduction,
)
from hypolab.operator_core import gallery, gallery_names


def _unit_box(resolution):
    grid = build_grid([[-0.5, 1.5], [-0.5, 1.5]], resolution)
    return box_domain([0.0, 0.0], [1.0, 1.0], grid)


class TestGreenMatrix:
    """测试Green矩阵"""

    def setup_method(self):
        self.mask = _unit_box(9)
        self.sys = assemble(gallery("laplace"), self.mask)
        self.gm = green_matrix(self.sys)

    def test_shape_and_sign(self):
        """测试完整矩阵为正且对称"""
        assert self.gm.full
        assert self.gm.k.shape == (9, 9)
        assert self.gm.min_entry() > 0
        assert self.gm.asymmetry() < 1e-12

    def test_columns_solve_point_sources(self):
        """测试每一列满足点源方程"""
        assert self.gm.harmonicity_residual() < 1e-12

    def test_read_only(self):
        """测试核矩阵只读"""
        with pytest.raises(ValueError):
            self.gm.k[0, 0] = 1.0

    def test_partial_sources(self):
        """测试源点子集与完整矩阵一致"""
        node = self.mask.grid.nearest_node([0.5, 0.5])
        partial = green_matrix(self.sys, sources=[node])
        assert not partial.full
        pos = self.gm.position(node)
        assert np.allclose(partial.diagonal(), self.gm.k[pos, pos])
        assert np.allclose(partial.row(node), self.gm.row(node), rtol=1e-10)
        with pytest.raises(ValueError):
            partial.apply(np.ones(self.sys.n_interior))

    def test_weighted_symmetry(self):
        """测试非常数密度下 k 仍对称"""
        grid = build_grid([[-2, 2], [-2, 2]], 17)
        mask = lens_domain([0.0, 0.0], [1.0, 0.0], 1.0, grid)
        gm = green_matrix(assemble(gallery("lie2d"), mask))
        assert gm.asymmetry() < 1e-10
        assert gm.min_entry() > 0

    def test_lens_symmetry_with_shift(self):
        """测试 ε = 0.1 时退化算子透镜上 k 对称且为正"""
        grid = build_grid([[-2, 2], [-2, 2]], 33)
        mask = lens_domain([0.0, 0.0], [1.0, 0.0], 1.0, grid)
        for name in ("grushin_fedii", "lie2d"):
            gm = green_matrix(assemble(gallery(name).with_shift(0.1), mask))
            assert gm.asymmetry() < 1e-10
            assert gm.min_entry() > 0

    def test_threads(self):
        """测试多线程列块与单线程结果一致"""
        sys = assemble(gallery("laplace"), _unit_box(41))
        assert sys.n_interior > 256
        single = green_matrix(sys, sources=sys.mask.interior_indices[:300])
        multi = green_matrix(sys, sources=sys.mask.interior_indices[:300], threads=2)
        assert np.allclose(single.k, multi.k, rtol=1e-12, atol=0.0)

    def test_invalid_sources(self):
        """测试源点必须是内部节点"""
        with pytest.raises(ValueError):
            green_matrix(self.sys, sources=[0])
        with pytest.raises(ValueError):
            self.gm.row(0)

    def test_node_cap(self):
        """测试完整模式的节点上限"""
        with pytest.raises(GridTooLarge):
            green_matrix(self.sys, node_cap=5)


class TestOneDimensionalOracle:
    """测试一维Laplace的闭式Green函数 min(x,y)(1−max(x,y))"""

    def test_closed_form(self):
        """测试各分辨率下误差在舍入量级"""
        spec = gallery("laplace", {"dim": 1})
        for resolution in (33, 65, 129):
            mask = box_domain([0.0], [1.0], build_grid([[0.0, 1.0]], resolution))
            gm = green_matrix(assemble(spec, mask))
            x = mask.interior_points()[:, 0]
            exact = np.minimum.outer(x, x) * (1.0 - np.maximum.outer(x, x))
            assert gm.k.shape == (resolution - 2, resolution - 2)
            assert np.max(np.abs(gm.k - exact)) < 1e-12


class TestReproduction:
    """测试再生恒等式"""

    def setup_method(self):
        self.mask = _unit_box(33)
        self.gm = green_matrix(assemble(gallery("laplace"), self.mask))

    def test_bump(self):
        """测试紧支光滑函数满足 G(Lφ) = −φ"""
        phi = bump(self.mask, [0.5, 0.5], 0.3)
        report = verify_reproduction(self.gm, phi)
        assert report.phi_norm > 0
        assert report.passed

    def test_gallery_bumps(self):
        """测试示例库每个算子上五个紧支函数的再生残差"""
        offsets = [0.0, 0.2, -0.2]
        for name in gallery_names():
            spec = gallery(name).with_shift(0.1)
            grid = build_grid([[-1.25, 1.25]] * spec.dim, 11)
            mask = box_domain([-1.0] * spec.dim, [1.0] * spec.dim, grid)
            gm = green_matrix(assemble(spec, mask))
            centers = [np.eye(spec.dim)[0] * t for t in offsets]
            centers += [0.2 * np.eye(spec.dim)[1], np.full(spec.dim, 0.15)]
            for center in centers:
                report = verify_reproduction(gm, bump(mask, center, 0.6))
                assert report.phi_norm > 0, name
                assert report.passed, name

    def test_precondition(self):
        """测试边界非零的 φ 被拒绝"""
        with pytest.raises(PreconditionViolated):
            verify_reproduction(self.gm, Field.constant(self.mask, 1.0))


class TestBoundaryDecay:
    """测试边界衰减"""

    def test_profile(self):
        """测试单个节点的内侧带"""
        mask = _unit_box(9)
        gm = green_matrix(assemble(gallery("laplace"), mask))
        center = mask.grid.nearest_node([0.5, 0.5])
        profile = verify_boundary_decay(gm, center)
        assert profile.collar_nodes == 8
        assert profile.value_at_x > profile.collar_max > 0
        assert np.allclose(profile.point, [0.5, 0.5])

    def test_refinement(self):
        """测试内侧带最大值随加密严格下降"""
        result = boundary_decay_refinement(
            gallery("laplace"), _unit_box, [9, 17, 33], [0.5, 0.5]
        )
        assert len(result.profiles) == 3
        assert result.strictly_decreasing
        assert all(p.value_at_x > p.collar_max for p in result.profiles)
        assert result.collar_max == [p.collar_max for p in result.profiles]

    def test_grushin_lens(self):
        """测试无穷退化透镜上内侧带最大值随加密严格下降"""

        def lens(resolution):
            grid = build_grid([[-2, 2], [-2, 2]], resolution)
            return lens_domain([0.0, 0.0], [1.0, 0.0], 1.0, grid)

        spec = gallery("grushin_fedii").with_shift(0.1)
        result = boundary_decay_refinement(spec, lens, [17, 33, 65], [0.0, 0.0])
        assert result.strictly_decreasing
        assert all(p.collar_max > 0 for p in result.profiles)


class TestMass:
    """测试 L¹ 质量"""

    def test_row_mass_is_torsion(self):
        """测试行质量等于 −Lu = 1 的解"""
        mask = _unit_box(17)
        sys = assemble(gallery("laplace"), mask)
        report = l1_mass(green_matrix(sys))
        torsion = solve(sys, Field.constant(mask, 1.0), Field.zeros(mask))
        assert np.allclose(report.row_mass, torsion.interior_values, rtol=1e-10)
        assert 0.05 < report.max_row_mass < 0.09


class TestComparison:
    """测试比较估计"""

    def setup_method(self):
        self.grid = build_grid([[-0.5, 1.5], [-0.5, 1.5]], 17)
        self.outer = box_domain([0.0, 0.0], [1.0, 1.0], self.grid)
        self.inner = box_domain([0.25, 0.25], [0.75, 0.75], self.grid)
        self.spec = gallery("laplace").with_shift(1.0)
        self.gm = green_matrix(assemble(self.spec, self.inner))
        outer_sys = assemble(gallery("laplace"), self.outer)
        phi = Field.from_function(self.outer, lambda p: 1 + p[:, 0])
        self.u = harmonic_extension(outer_sys, phi)

    def test_bound(self):
        """测试 u ≥ ε·G_ε u"""
        report = comparison_bound(self.gm, self.u)
        assert report.epsilon == 1.0
        assert report.passed
        assert report.min_margin > 0
        assert report.harmonic_residual < 1e-9

    def test_weak_bound(self):
        """测试 ε·min k·Σ_K u ν ≤ u(x₀)"""
        x0 = self.grid.nearest_node([0.5, 0.5])
        compact = [self.grid.nearest_node(p) for p in ([0.375, 0.5], [0.625, 0.5], [0.5, 0.5])]
        report = green_weak_bound(self.gm, self.u, compact, x0)
        assert report.passed
        assert report.min_kernel > 0
        assert np.isclose(report.constant, 1.0 / report.min_kernel)

    def test_weak_bound_needs_shift(self):
        """测试 ε = 0 时L¹控制不可用"""
        gm = green_matrix(assemble(gallery("laplace"), self.inner))
        x0 = self.grid.nearest_node([0.5, 0.5])
        with pytest.raises(PreconditionViolated):
            green_weak_bound(gm, self.u, [x0], x0)

    def test_not_harmonic(self):
        """测试非调和的 u 被拒绝"""
        u = Field.from_function(self.outer, lambda p: p[:, 0] ** 2)
        with pytest.raises(PreconditionViolated):
            comparison_bound(self.gm, u)

    def test_negative(self):
        """测试负的 u 被拒绝"""
        with pytest.raises(PreconditionViolated):
            comparison_bound(self.gm, Field.constant(self.outer, -1.0))

    def test_not_containing(self):
        """测试 u 的区域必须严格包含小区域闭包"""
        with pytest.raises(PreconditionViolated):
            comparison_bound(self.gm, Field.constant(self.inner, 1.0))


class TestComparisonDraws:
    """测试随机非负边界数据下的比较估计"""

    def setup_method(self):
        grid = build_grid([[-2, 2], [-2, 2]], 33)
        self.inner = lens_domain([0.0, 0.0], [1.0, 0.0], 1.0, grid)
        self.outer = lens_domain([0.0, 0.0], [1.0, 0.0], 1.5, grid)

    def test_seeded_draws(self):
        """测试 ε ∈ {0.05, 0.1, 0.5} 下每次抽样的余量不低于 −1e−8‖u‖"""
        rng = np.random.default_rng(2024)
        for name in ("grushin_fedii", "lie2d"):
            outer_sys = assemble(gallery(name), self.outer)
            fact = factorize(outer_sys)
            fields = []
            for _ in range(20):
                values = np.zeros(self.outer.grid.size)
                values[self.outer.boundary_indices] = rng.random(self.outer.n_boundary)
                fields.append(harmonic_extension(outer_sys, Field(self.outer, values), fact))
            for eps in (0.05, 0.1, 0.5):
                gm = green_matrix(assemble(gallery(name).with_shift(eps), self.inner))
                for u in fields:
                    report = comparison_bound(gm, u, outer_sys)
                    assert report.epsilon == eps
                    assert report.passed, name
                    assert report.min_margin >= -1e-8 * report.u_norm


class TestBinaryExport:
    """测试二进制导出"""

    def test_export(self, tmp_path):
        """测试头部、数据与JSON附件"""
        gm = green_matrix(assemble(gallery("laplace"), _unit_box(9)))
        paths = export_binary(gm, tmp_path / "green.bin")
        data = paths[0].read_bytes()
        assert data[:4] == b"HYGK"
        assert len(data) == 24 + 81 * 8
        assert np.array_equal(read_binary(paths[0]), gm.k)
        meta = json.loads(paths[1].read_text(encoding="utf-8"))
        assert meta["rows"] == 9 and meta["cols"] == 9
        assert meta["source_nodes"] == meta["interior_nodes"]

    def test_bad_magic(self, tmp_path):
        """测试非 HYGK 文件"""
        path = tmp_path / "x.bin"
        path.write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(ValueError):
            read_binary(path)
