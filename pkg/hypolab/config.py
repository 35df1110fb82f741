"""实验配置

从TOML、YAML或JSON文件读取实验配置，应用 --set 覆盖，逐项校验并收集全部诊断信息。
"""
# -*- coding: utf-8 -*-

import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import yaml

from .errors import ConfigError, ConfigValidationError
from .operator_core import (
    DEFAULT_SEED,
    OperatorSpec,
    from_expressions,
    from_vector_fields,
    gallery,
    vector_fields_from_expressions,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

SCHEMA = "hypolab/experiment-v1"
FORMATS = ("json", "csv", "svg", "pgm", "mm")


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_str(value: Any) -> bool:
    return isinstance(value, str)


def _is_expr(value: Any) -> bool:
    return isinstance(value, str) or _is_number(value)


def _is_point(value: Any) -> bool:
    return isinstance(value, list) and len(value) > 0 and all(_is_number(v) for v in value)


def _is_int_list(value: Any) -> bool:
    return isinstance(value, list) and len(value) > 0 and all(_is_int(v) for v in value)


def _is_points(value: Any) -> bool:
    return isinstance(value, list) and all(_is_point(v) for v in value)


def _is_expr_rows(value: Any) -> bool:
    return isinstance(value, list) and all(
        isinstance(row, list) and all(_is_expr(v) for v in row) for row in value
    )


def _is_bounds(value: Any) -> bool:
    return isinstance(value, list) and len(value) > 0 and all(
        _is_point(b) and len(b) == 2 for b in value
    )


def _is_resolution(value: Any) -> bool:
    return _is_int(value) or _is_int_list(value)


def _is_formats(value: Any) -> bool:
    return isinstance(value, list) and all(v in FORMATS for v in value)


def _is_dict(value: Any) -> bool:
    return isinstance(value, dict)


def _optional(check: Callable[[Any], bool]) -> Callable[[Any], bool]:
    return lambda value: value is None or check(value)


@dataclass
class OperatorSection:
    """算子：示例库名称，或表达式系数 a / 向量场 fields"""

    gallery: Optional[str] = None
    params: Dict[str, Any] = field(default_factory=dict)
    dim: Optional[int] = None
    a: Optional[List[List[Any]]] = None
    fields: Optional[List[List[Any]]] = None
    v: Any = "1"
    c: Any = "0"
    shift_eps: float = 0.0
    name: str = "custom"


@dataclass
class GridSection:
    bounds: List[List[float]] = field(default_factory=lambda: [[-2.0, 2.0], [-2.0, 2.0]])
    resolution: Any = 33
    node_cap: int = 2_000_000


@dataclass
class DomainSection:
    """区域：lens（x0, h0, lens_eps）、ball（center, radius）或 box（lower, upper）"""

    kind: str = "lens"
    x0: Optional[List[float]] = None
    h0: Optional[List[float]] = None
    lens_eps: float = 1.0
    center: Optional[List[float]] = None
    radius: Optional[float] = None
    lower: Optional[List[float]] = None
    upper: Optional[List[float]] = None
    outer_lens_eps: Optional[float] = None


@dataclass
class RunSection:
    """命令参数"""

    seed: Optional[int] = None
    threads: int = 1
    f: Any = "0"
    phi: Any = "0"
    n_list: List[int] = field(default_factory=lambda: [10, 100, 1000, 10000])
    point: Optional[List[float]] = None
    y0: Optional[List[float]] = None
    compact_radius: float = 0.5
    m: int = 0
    delta: Optional[float] = None
    draws: int = 20
    resolutions: List[int] = field(default_factory=lambda: [17, 33, 65])
    samples: int = 50
    step_budget: Optional[int] = None
    sources: Optional[List[List[float]]] = None
    targets: Optional[List[List[float]]] = None


@dataclass
class OutputSection:
    directory: str = "out"
    formats: List[str] = field(default_factory=lambda: ["json", "csv", "svg"])


_SCHEMA: Dict[str, Dict[str, Callable[[Any], bool]]] = {
    "operator": {
        "gallery": _optional(_is_str),
        "params": _is_dict,
        "dim": _optional(_is_int),
        "a": _optional(_is_expr_rows),
        "fields": _optional(_is_expr_rows),
        "v": _is_expr,
        "c": _is_expr,
        "shift_eps": _is_number,
        "name": _is_str,
    },
    "grid": {"bounds": _is_bounds, "resolution": _is_resolution, "node_cap": _is_int},
    "domain": {
        "kind": lambda v: v in ("lens", "ball", "box"),
        "x0": _optional(_is_point),
        "h0": _optional(_is_point),
        "lens_eps": _is_number,
        "center": _optional(_is_point),
        "radius": _optional(_is_number),
        "lower": _optional(_is_point),
        "upper": _optional(_is_point),
        "outer_lens_eps": _optional(_is_number),
    },
    "run": {
        "seed": _optional(_is_int),
        "threads": _is_int,
        "f": _is_expr,
        "phi": _is_expr,
        "n_list": _is_int_list,
        "point": _optional(_is_point),
        "y0": _optional(_is_point),
        "compact_radius": _is_number,
        "m": _is_int,
        "delta": _optional(_is_number),
        "draws": _is_int,
        "resolutions": _is_int_list,
        "samples": _is_int,
        "step_budget": _optional(_is_int),
        "sources": _optional(_is_points),
        "targets": _optional(_is_points),
    },
    "output": {"directory": _is_str, "formats": _is_formats},
}

_SECTIONS = {
    "operator": OperatorSection,
    "grid": GridSection,
    "domain": DomainSection,
    "run": RunSection,
    "output": OutputSection,
}


@dataclass
class ExperimentConfig:
    """实验配置

    Attributes:
        operator: 算子
        grid: 网格
        domain: 区域
        run: 命令参数
        output: 输出
        source: 来源文件
    """

    operator: OperatorSection
    grid: GridSection
    domain: DomainSection
    run: RunSection
    output: OutputSection
    source: Optional[str] = None

    @classmethod
    def from_dict(cls, raw: Dict[str, Any], source: Optional[str] = None) -> "ExperimentConfig":
        """校验并构造配置

        Raises:
            ConfigValidationError: 存在任何诊断信息
        """
        diagnostics = validate(raw)
        if diagnostics:
            raise ConfigValidationError(diagnostics, source)
        sections = {name: _SECTIONS[name](**raw.get(name, {})) for name in _SECTIONS}
        config = cls(source=source, **sections)
        config._check_consistency()
        return config

    def _check_consistency(self) -> None:
        diagnostics = []
        op = self.operator
        given = [k for k in ("gallery", "a", "fields") if getattr(op, k) is not None]
        if len(given) != 1:
            diagnostics.append("operator: gallery、a、fields 必须恰好给出一个")
        if op.gallery is None and op.dim is None:
            diagnostics.append("operator.dim: 自定义算子必须给出维数")
        if op.shift_eps < 0:
            diagnostics.append("operator.shift_eps: 必须非负")
        dom = self.domain
        required = {"lens": ("x0", "h0"), "ball": ("center", "radius"), "box": ("lower", "upper")}
        for key in required[dom.kind]:
            if getattr(dom, key) is None:
                diagnostics.append(f"domain.{key}: {dom.kind} 区域必须给出")
        if self.run.threads < 1:
            diagnostics.append("run.threads: 必须 ≥ 1")
        if not 0 <= self.run.m <= 4:
            diagnostics.append("run.m: 必须在 0..4")
        if diagnostics:
            raise ConfigValidationError(diagnostics, self.source)

    @property
    def seed(self) -> int:
        return DEFAULT_SEED if self.run.seed is None else self.run.seed

    def to_dict(self) -> Dict[str, Any]:
        data = {name: asdict(getattr(self, name)) for name in _SECTIONS}
        data["schema"] = SCHEMA
        return data

    def config_hash(self) -> str:
        """规范化JSON（不含输出目录）的SHA-256"""
        data = self.to_dict()
        data["output"] = {k: v for k, v in data["output"].items() if k != "directory"}
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def build_operator(self) -> OperatorSpec:
        """按 operator 节构造算子（含谱平移与零阶项）"""
        op = self.operator
        if op.gallery is not None:
            spec = gallery(op.gallery, op.params)
            if str(op.c) not in ("0", "0.0"):
                spec = spec.with_zero_order(op.c)
        elif op.a is not None:
            spec = from_expressions(int(op.dim), op.a, v=op.v, c=op.c, name=op.name)
        else:
            dim = int(op.dim)
            vector_fields = vector_fields_from_expressions(dim, op.fields)
            spec = from_vector_fields(vector_fields, dim=dim, name=op.name)
            if str(op.c) not in ("0", "0.0"):
                spec = spec.with_zero_order(op.c)
        return spec.with_shift(float(op.shift_eps))


def validate(raw: Any) -> List[str]:
    """返回全部诊断信息（空列表表示通过）"""
    if not isinstance(raw, dict):
        return ["配置顶层必须是映射"]
    diagnostics = []
    schema = raw.get("schema")
    if schema != SCHEMA:
        diagnostics.append(f"schema: 需要 \"{SCHEMA}\"，得到 {schema!r}")
    for key in sorted(set(raw) - set(_SECTIONS) - {"schema"}):
        diagnostics.append(f"{key}: 未知的配置节")
    for name, checks in _SCHEMA.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            diagnostics.append(f"{name}: 必须是映射")
            continue
        for key in sorted(set(section) - set(checks)):
            diagnostics.append(f"{name}.{key}: 未知的键")
        for key, check in checks.items():
            if key in section and not check(section[key]):
                diagnostics.append(f"{name}.{key}: 取值不合法 ({section[key]!r})")
    return diagnostics


def load_raw(path: Union[str, Path]) -> Dict[str, Any]:
    """按扩展名读取 .toml / .yaml / .yml / .json

    Raises:
        ConfigError: 文件不存在、格式不支持或解析失败
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"配置文件不存在: {path}")
    suffix = path.suffix.lower()
    try:
        if suffix == ".toml":
            with open(path, "rb") as fb:
                return tomllib.load(fb)
        with open(path, "r", encoding="utf-8") as f:
            if suffix in (".yaml", ".yml"):
                return yaml.safe_load(f) or {}
            if suffix == ".json":
                return json.load(f)
    except (tomllib.TOMLDecodeError, yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"配置文件解析失败: {path}: {exc}") from exc
    raise ConfigError(f"不支持的配置格式: {suffix}", allowed=[".toml", ".yaml", ".yml", ".json"])


def parse_override(item: str) -> Tuple[List[str], Any]:
    """'a.b.c=value' → (['a','b','c'], value)，value 用 YAML 解析"""
    if "=" not in item:
        raise ConfigError(f"覆盖项必须是 key=value 形式: {item}")
    key, _, text = item.partition("=")
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"覆盖项缺少键: {item}")
    try:
        value = yaml.safe_load(text) if text.strip() else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"覆盖值解析失败: {item}") from exc
    return parts, value


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    data = json.loads(json.dumps(raw))
    for item in overrides:
        parts, value = parse_override(item)
        node = data
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"覆盖路径 {'.'.join(parts)} 穿过了非映射值")
            node = child
        node[parts[-1]] = value
    return data


def load_config(
    path: Union[str, Path],
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
) -> ExperimentConfig:
    """读取、覆盖、注入种子并校验"""
    raw = apply_overrides(load_raw(path), overrides)
    if seed is not None:
        raw.setdefault("run", {})["seed"] = int(seed)
    config = ExperimentConfig.from_dict(raw, source=str(path))
    if config.run.seed is None:
        config.run.seed = DEFAULT_SEED
        logger.warning("未指定种子，使用默认种子 0x%X", DEFAULT_SEED)
    return config
