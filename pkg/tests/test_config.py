"""测试实验配置

测试配置文件读取、覆盖项、校验诊断、一致性检查、哈希与算子构造。
"""

import json

import numpy as np
import pytest

from hypolab.config import (
    SCHEMA,
    ExperimentConfig,
    apply_overrides,
    load_config,
    load_raw,
    parse_override,
    validate,
)
from hypolab.errors import ConfigError, ConfigValidationError
from hypolab.operator_core import DEFAULT_SEED

TOML_CONFIG = """
schema = "hypolab/experiment-v1"

[operator]
gallery = "grushin_fedii"
shift_eps = 0.1

[grid]
bounds = [[-2.0, 2.0], [-2.0, 2.0]]
resolution = 17

[domain]
kind = "lens"
x0 = [0.0, 0.0]
h0 = [1.0, 0.0]
lens_eps = 1.0

[run]
f = "1"
"""


def _raw(**sections):
    raw = {
        "schema": SCHEMA,
        "operator": {"gallery": "laplace"},
        "grid": {"bounds": [[-1.0, 1.0], [-1.0, 1.0]], "resolution": 17},
        "domain": {"kind": "ball", "center": [0.0, 0.0], "radius": 1.0},
    }
    raw.update(sections)
    return raw


class TestLoadRaw:
    """测试配置文件读取"""

    def test_toml(self, tmp_path):
        """测试TOML"""
        path = tmp_path / "exp.toml"
        path.write_text(TOML_CONFIG, encoding="utf-8")
        raw = load_raw(path)
        assert raw["schema"] == SCHEMA
        assert raw["operator"]["gallery"] == "grushin_fedii"

    def test_yaml_and_json(self, tmp_path):
        """测试YAML与JSON"""
        (tmp_path / "exp.yaml").write_text("schema: hypolab/experiment-v1\n", encoding="utf-8")
        (tmp_path / "exp.json").write_text(json.dumps({"schema": SCHEMA}), encoding="utf-8")
        assert load_raw(tmp_path / "exp.yaml") == {"schema": SCHEMA}
        assert load_raw(tmp_path / "exp.json") == {"schema": SCHEMA}

    def test_empty_yaml(self, tmp_path):
        """测试空YAML文件"""
        path = tmp_path / "empty.yml"
        path.write_text("", encoding="utf-8")
        assert load_raw(path) == {}

    def test_missing(self, tmp_path):
        """测试文件不存在"""
        with pytest.raises(ConfigError):
            load_raw(tmp_path / "missing.toml")

    def test_unsupported_suffix(self, tmp_path):
        """测试不支持的扩展名"""
        path = tmp_path / "exp.ini"
        path.write_text("[x]\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_raw(path)

    def test_parse_error(self, tmp_path):
        """测试解析失败"""
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_raw(path)


class TestOverrides:
    """测试 --set 覆盖项"""

    def test_parse(self):
        """测试值按YAML解析"""
        assert parse_override("grid.resolution=65") == (["grid", "resolution"], 65)
        assert parse_override("run.f=x1 + x2") == (["run", "f"], "x1 + x2")
        assert parse_override("run.n_list=[10, 100]") == (["run", "n_list"], [10, 100])

    def test_parse_errors(self):
        """测试格式错误"""
        with pytest.raises(ConfigError):
            parse_override("grid.resolution")
        with pytest.raises(ConfigError):
            parse_override("=3")

    def test_apply(self):
        """测试嵌套创建且不修改原字典"""
        raw = {"grid": {"resolution": 17}}
        data = apply_overrides(raw, ["grid.resolution=33", "run.seed=7"])
        assert data == {"grid": {"resolution": 33}, "run": {"seed": 7}}
        assert raw == {"grid": {"resolution": 17}}

    def test_through_scalar(self):
        """测试覆盖路径穿过标量"""
        with pytest.raises(ConfigError):
            apply_overrides({"grid": 3}, ["grid.resolution=5"])


class TestValidate:
    """测试校验诊断"""

    def test_valid(self):
        """测试合法配置没有诊断"""
        assert validate(_raw()) == []

    def test_collects_all(self):
        """测试一次收集全部问题"""
        raw = _raw(extra={}, run={"threads": "four", "bogus": 1})
        del raw["schema"]
        diagnostics = validate(raw)
        assert len(diagnostics) == 4
        assert any(d.startswith("schema:") for d in diagnostics)
        assert any(d.startswith("extra:") for d in diagnostics)
        assert any(d.startswith("run.bogus:") for d in diagnostics)
        assert any(d.startswith("run.threads:") for d in diagnostics)

    def test_not_mapping(self):
        """测试顶层与配置节必须是映射"""
        assert validate([1, 2]) == ["配置顶层必须是映射"]
        assert validate(_raw(grid=5)) == ["grid: 必须是映射"]

    def test_booleans_are_not_numbers(self):
        """测试布尔值不被当作数"""
        assert validate(_raw(run={"threads": True})) != []

    def test_formats(self):
        """测试输出格式"""
        assert validate(_raw(output={"formats": ["json", "mm"]})) == []
        assert validate(_raw(output={"formats": ["png"]})) != []


class TestExperimentConfig:
    """测试配置构造"""

    def test_defaults(self):
        """测试缺省值"""
        config = ExperimentConfig.from_dict(_raw())
        assert config.run.threads == 1
        assert config.output.formats == ["json", "csv", "svg"]
        assert config.seed == DEFAULT_SEED

    def test_validation_error(self):
        """测试诊断信息随异常携带"""
        with pytest.raises(ConfigValidationError) as info:
            ExperimentConfig.from_dict(_raw(grid={"resolution": "big"}), source="exp.toml")
        assert info.value.exit_code == 2
        assert info.value.diagnostics
        assert info.value.to_dict()["details"]["source"] == "exp.toml"

    def test_consistency(self):
        """测试跨字段一致性"""
        raw = _raw(
            operator={"gallery": "laplace", "a": [["1"]], "shift_eps": -1.0},
            domain={"kind": "lens", "x0": [0.0, 0.0]},
            run={"threads": 0, "m": 5},
        )
        with pytest.raises(ConfigValidationError) as info:
            ExperimentConfig.from_dict(raw)
        assert len(info.value.diagnostics) == 5

    def test_custom_needs_dim(self):
        """测试自定义算子必须给出维数"""
        with pytest.raises(ConfigValidationError):
            ExperimentConfig.from_dict(_raw(operator={"a": [["1", "0"], ["0", "1"]]}))

    def test_hash(self):
        """测试哈希不含输出目录但随内容改变"""
        a = ExperimentConfig.from_dict(_raw(output={"directory": "a"}))
        b = ExperimentConfig.from_dict(_raw(output={"directory": "b"}))
        c = ExperimentConfig.from_dict(_raw(grid={"bounds": [[-1.0, 1.0], [-1.0, 1.0]],
                                                  "resolution": 33}))
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != c.config_hash()
        assert len(a.config_hash()) == 64
        assert a.to_dict()["schema"] == SCHEMA


class TestBuildOperator:
    """测试算子构造"""

    def test_gallery_with_shift(self):
        """测试示例库算子与谱平移"""
        config = ExperimentConfig.from_dict(_raw(operator={"gallery": "laplace", "shift_eps": 0.5}))
        spec = config.build_operator()
        assert spec.name == "laplace"
        assert spec.epsilon == 0.5

    def test_gallery_zero_order(self):
        """测试示例库算子替换零阶项"""
        config = ExperimentConfig.from_dict(_raw(operator={"gallery": "laplace", "c": "-1"}))
        spec = config.build_operator()
        assert spec.describe()["c"] == "-1"

    def test_expressions(self):
        """测试表达式系数"""
        operator = {"dim": 2, "a": [["1", "0"], ["0", "x1**2"]], "name": "grushin_quadratic"}
        spec = ExperimentConfig.from_dict(_raw(operator=operator)).build_operator()
        assert spec.name == "grushin_quadratic"
        assert np.allclose(spec.matrix_at([2.0, 0.0]), [[1.0, 0.0], [0.0, 4.0]])

    def test_vector_fields(self):
        """测试向量场给出 A = Σ XᵢXᵢᵀ"""
        operator = {"dim": 2, "fields": [["1", "0"], ["0", "x1"]]}
        spec = ExperimentConfig.from_dict(_raw(operator=operator)).build_operator()
        assert np.allclose(spec.matrix_at([3.0, 0.0]), [[1.0, 0.0], [0.0, 9.0]])


class TestLoadConfig:
    """测试完整的读取流程"""

    def test_seed_and_overrides(self, tmp_path):
        """测试覆盖项与种子注入"""
        path = tmp_path / "exp.toml"
        path.write_text(TOML_CONFIG, encoding="utf-8")
        config = load_config(path, ["grid.resolution=33"], seed=42)
        assert config.grid.resolution == 33
        assert config.run.seed == 42
        assert config.source == str(path)

    def test_default_seed(self, tmp_path):
        """测试未给种子时使用默认种子"""
        path = tmp_path / "exp.toml"
        path.write_text(TOML_CONFIG, encoding="utf-8")
        assert load_config(path).run.seed == DEFAULT_SEED

    def test_invalid_override(self, tmp_path):
        """测试覆盖后的配置同样被校验"""
        path = tmp_path / "exp.toml"
        path.write_text(TOML_CONFIG, encoding="utf-8")
        with pytest.raises(ConfigValidationError):
            load_config(path, ["domain.kind=torus"])
