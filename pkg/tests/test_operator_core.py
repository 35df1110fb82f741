"""测试算子核心

测试示例库、用户自定义算子、不变量检查、NTD、向量场与切向性常数。
"""

import numpy as np
import pytest

from hypolab.errors import (
    CoefficientError,
    ConfigError,
    InvalidOperator,
    InvalidProfile,
    TotallyDegeneratePoint,
    UnknownGallery,
)
from hypolab.operator_core import (
    Box,
    HypoellipticStatus,
    check_invariants,
    check_ntd,
    extract_fields,
    from_expressions,
    from_vector_fields,
    gallery,
    gallery_entries,
    gallery_names,
    require_invariants,
    tangentiality_bound,
    vector_fields_from_expressions,
)


class TestGallery:
    """测试示例库"""

    def test_names(self):
        """测试示例名称"""
        names = gallery_names()
        for name in ("laplace", "grushin_fedii", "lie2d", "christ3d", "kusuoka_stroock3d",
                     "morimoto4d", "heisenberg3d"):
            assert name in names
        assert len(gallery_entries()) == len(names)

    def test_laplace(self):
        """测试Laplace算子"""
        spec = gallery("laplace")
        assert spec.dim == 2
        assert np.allclose(spec.matrix_at([0.3, -0.2]), np.eye(2))
        assert spec.hypoelliptic is HypoellipticStatus.CERTIFIED

    def test_laplace_dim(self):
        """测试Laplace维数参数"""
        assert gallery("laplace", {"dim": 3}).dim == 3
        with pytest.raises(ConfigError):
            gallery("laplace", {"dim": 0})

    def test_grushin_flat(self):
        """测试Fedii型算子 a(x1) = exp(-1/x1²)"""
        spec = gallery("grushin_fedii")
        assert np.allclose(spec.matrix_at([1.0, 0.5]), np.diag([1.0, np.exp(-2.0)]))
        assert spec.matrix_at([0.0, 0.5])[1, 1] == 0.0

    def test_grushin_power(self):
        """测试幂次剖面"""
        spec = gallery("grushin_fedii", {"profile": "power", "k": 1})
        assert np.isclose(spec.matrix_at([0.5, 0.0])[1, 1], 0.25)

    def test_grushin_expression_profile(self):
        """测试表达式剖面"""
        spec = gallery("grushin_fedii", {"a": "x**2"})
        assert np.isclose(spec.matrix_at([2.0, 0.0])[1, 1], 16.0)

    def test_invalid_profiles(self):
        """测试不合法剖面"""
        for source in ("x", "-1 - x**2", "exp(-x**2)"):
            with pytest.raises(InvalidProfile):
                gallery("grushin_fedii", {"a": source})
        with pytest.raises(InvalidProfile):
            gallery("grushin_fedii", {"profile": "power", "k": -1})
        with pytest.raises(InvalidProfile):
            gallery("grushin_fedii", {"profile": "cubic"})

    def test_unknown(self):
        """测试未知名称与未知参数"""
        with pytest.raises(UnknownGallery):
            gallery("no_such_operator")
        with pytest.raises(ConfigError):
            gallery("lie2d", {"k": 2})

    def test_lie2d(self):
        """测试Lie群算子"""
        spec = gallery("lie2d")
        a, v, _ = spec.evaluate(np.array([[0.0, 0.5]]))
        assert np.allclose(a[0], np.diag([np.e, 1.0]))
        assert np.isclose(v[0], np.exp(-0.5))

    def test_heisenberg(self):
        """测试Heisenberg次拉普拉斯算子"""
        spec = gallery("heisenberg3d")
        expected = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, -2.0], [0.0, -2.0, 4.0]])
        assert np.allclose(spec.matrix_at([1.0, 0.0, 0.0]), expected)

    def test_higher_dimensional_entries(self):
        """测试三维与四维示例"""
        assert np.isclose(gallery("christ3d").matrix_at([1.0, 0, 0])[2, 2], np.exp(-2.0))
        assert np.isclose(
            gallery("kusuoka_stroock3d").matrix_at([1.0, 0, 0])[1, 1], np.exp(-2.0)
        )
        assert np.isclose(gallery("morimoto4d").matrix_at([1.0, 3.0, 0, 0])[0, 0], 9.0)

    def test_all_gallery_invariants(self):
        """测试全部示例满足对称、半正定与 V > 0"""
        rng = np.random.default_rng(1)
        for name in gallery_names():
            spec = gallery(name)
            points = rng.uniform(-1.5, 1.5, size=(50, spec.dim))
            assert check_invariants(spec, points).passed, name


class TestOperatorSpec:
    """测试OperatorSpec"""

    def test_shift(self):
        """测试谱平移"""
        spec = gallery("laplace").with_shift(0.1)
        assert spec.epsilon == 0.1
        with pytest.raises(InvalidOperator):
            gallery("laplace").with_shift(-1.0)

    def test_zero_order(self):
        """测试零阶项"""
        spec = gallery("laplace").with_zero_order("x1**2")
        _, _, c = spec.evaluate(np.array([[2.0, 0.0]]))
        assert np.isclose(c[0], 4.0)
        assert spec.describe()["c"] == "x1**2"

    def test_describe(self):
        """测试描述字典"""
        info = gallery("grushin_fedii").describe()
        assert info["name"] == "grushin_fedii"
        assert info["dim"] == 2
        assert info["hypoelliptic"] == "certified"

    def test_invalid_dim(self):
        """测试非法维数"""
        with pytest.raises(InvalidOperator):
            from_vector_fields([lambda p: np.ones_like(p)], dim=0)

    def test_wrong_point_dim(self):
        """测试点维数不符"""
        with pytest.raises(ValueError):
            gallery("laplace").evaluate(np.zeros((2, 3)))


class TestUserOperators:
    """测试用户自定义算子"""

    def test_full_matrix(self):
        """测试完整矩阵"""
        spec = from_expressions(2, [["1 + x1**2", "0"], ["0", "exp(x2)"]], v="2", c="x1")
        a, v, c = spec.evaluate(np.array([[1.0, 0.0]]))
        assert np.allclose(a[0], np.diag([2.0, 1.0]))
        assert v[0] == 2.0
        assert c[0] == 1.0
        assert spec.hypoelliptic is HypoellipticStatus.ASSERTED

    def test_upper_triangular(self):
        """测试上三角补全"""
        spec = from_expressions(2, [["2", "x1"], ["2"]])
        a = spec.matrix_at([0.5, 0.0])
        assert a[0, 1] == a[1, 0] == 0.5

    def test_bad_shape(self):
        """测试形状错误"""
        with pytest.raises(ConfigError):
            from_expressions(2, [["1", "0"]])
        with pytest.raises(ConfigError):
            from_expressions(2, [["1"], ["1", "0", "0"]])

    def test_vector_fields(self):
        """测试向量场构造 A = S Sᵀ"""
        fields = vector_fields_from_expressions(2, [["1", "0"], ["0", "x1"]])
        spec = from_vector_fields(fields, dim=2)
        assert np.allclose(spec.matrix_at([3.0, 1.0]), np.diag([1.0, 9.0]))
        with pytest.raises(ConfigError):
            vector_fields_from_expressions(2, [["1"]])
        with pytest.raises(ConfigError):
            from_vector_fields([], dim=2)


class TestInvariants:
    """测试不变量检查"""

    def setup_method(self):
        self.points = np.array([[0.5, 0.5], [-0.5, 1.0], [0.0, 0.0]])

    def test_asymmetric(self):
        """测试非对称系数"""
        spec = from_expressions(2, [["1", "1"], ["0", "1"]])
        report = check_invariants(spec, self.points)
        assert not report.passed
        assert report.reason == "asymmetric"
        with pytest.raises(InvalidOperator):
            require_invariants(spec, self.points)

    def test_not_psd(self):
        """测试非半正定"""
        report = check_invariants(from_expressions(2, [["1", "0"], ["0", "-1"]]), self.points)
        assert report.reason == "not-psd"

    def test_density(self):
        """测试非正密度"""
        spec = from_expressions(2, [["1", "0"], ["0", "1"]], v="x1")
        assert check_invariants(spec, self.points).reason == "nonpositive-density"

    def test_non_finite(self):
        """测试非有限系数"""
        spec = from_expressions(2, [["1/x1", "0"], ["0", "1"]])
        with pytest.raises(CoefficientError):
            require_invariants(spec, self.points)


class TestNtd:
    """测试非完全退化检查"""

    def test_grushin_passes(self):
        """测试Fedii型算子满足NTD"""
        report = check_ntd(gallery("grushin_fedii"), Box.from_bounds([[-1, 1], [-1, 1]]), 64)
        assert report.passed
        assert report.min_trace >= 1.0
        assert report.samples == 64 + 4

    def test_zero_fails(self):
        """测试全零系数不满足NTD"""
        spec = from_expressions(2, [["0", "0"], ["0", "0"]])
        report = check_ntd(spec, Box.from_bounds([[0, 1], [0, 1]]), 8)
        assert not report.passed
        assert report.min_trace == 0.0

    def test_reproducible(self):
        """测试相同种子结果相同"""
        spec = gallery("lie2d")
        region = Box.from_bounds([[-1, 1], [-1, 1]])
        assert check_ntd(spec, region, 16, seed=3) == check_ntd(spec, region, 16, seed=3)

    def test_arguments(self):
        """测试参数检查"""
        with pytest.raises(ValueError):
            check_ntd(gallery("laplace"), Box.from_bounds([[0, 1], [0, 1]]), 0)
        with pytest.raises(ValueError):
            check_ntd(gallery("laplace"), Box.from_bounds([[0, 1]]), 4)
        with pytest.raises(ValueError):
            Box.from_bounds([[1, 0]])


class TestVectorFields:
    """测试向量场"""

    def test_lie2d_drift(self):
        """测试Lie群算子的漂移 X0 = -X2 与 b"""
        fields = extract_fields(gallery("lie2d"))
        points = np.array([[0.0, 0.0], [0.3, -0.4]])
        assert np.allclose(fields.x0(points), [[0.0, -1.0], [0.0, -1.0]])
        assert np.allclose(fields.b(points), [[0.0, -1.0], [0.0, -1.0]])
        assert np.all(fields.span_residual(points) < 1e-10)

    def test_grushin_b(self):
        """测试 b = Σ ∂ᵢaᵢⱼ 对Fedii型算子为零"""
        fields = extract_fields(gallery("grushin_fedii"))
        assert np.allclose(fields.b(np.array([[0.7, 0.2]])), 0.0)

    def test_finite_difference_gradient(self):
        """测试无解析梯度时的中心差分"""
        spec = from_expressions(2, [["1", "0"], ["0", "1"]], v="exp(x1)")
        fields = extract_fields(spec)
        assert np.allclose(fields.log_grad_v(np.array([[0.2, 0.1]])), [[1.0, 0.0]], atol=1e-6)

    def test_combination(self):
        """测试 ξ₀X₀ + Σ ξᵢXᵢ"""
        fields = extract_fields(gallery("lie2d"))
        value = fields.combination([1.0, 1.0, 0.0], np.array([[0.0, 0.0]]))
        assert np.allclose(value, [[1.0, -1.0]])
        with pytest.raises(ValueError):
            fields.combination([1.0, 0.0], np.array([[0.0, 0.0]]))


class TestTangentiality:
    """测试切向性常数"""

    def test_laplace(self):
        """测试Laplace算子 λ = 1"""
        cert = tangentiality_bound(gallery("laplace"), [0.0, 0.0])
        assert cert.passed
        assert cert.lambdas == [1.0, 1.0]
        assert cert.directions == 128 + 2

    def test_heisenberg(self):
        """测试非对角系数时 λᵢ = aᵢᵢ"""
        cert = tangentiality_bound(gallery("heisenberg3d"), [1.0, 0.0, 0.0])
        assert cert.passed
        assert np.allclose(cert.lambdas, [1.0, 1.0, 4.0])

    def test_degenerate_direction(self):
        """测试 aᵢᵢ = 0 时取迹"""
        cert = tangentiality_bound(gallery("grushin_fedii"), [0.0, 0.0])
        assert cert.passed
        assert cert.lambdas == [1.0, 1.0]

    def test_totally_degenerate(self):
        """测试完全退化点"""
        spec = from_expressions(2, [["0", "0"], ["0", "0"]])
        with pytest.raises(TotallyDegeneratePoint):
            tangentiality_bound(spec, [0.0, 0.0])
