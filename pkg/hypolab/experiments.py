"""实验引擎

按配置构造算子、网格与区域，执行各个命令并收集结果与输出文件。
"""
# -*- coding: utf-8 -*-

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import scipy

from . import __version__
from .config import ExperimentConfig
from .dirichlet_solver import (
    Field,
    factorize,
    harmonic_extension,
    regularization_ladder,
    solve,
    wmp_check,
)
from .discretize import StencilSystem, assemble, check_mmatrix, export_matrix_market
from .domain_grid import (
    DomainMask,
    Grid,
    ball_domain,
    box_domain,
    build_grid,
    exterior_ball,
    lens_domain,
)
from .errors import CharacteristicDirection, ConfigError, NoExteriorBall
from .expressions import compile_expression, coordinate_names
from .figures import field_image, grid_extent, write_heatmap_svg, write_table_csv
from .green_kernel import (
    boundary_decay_refinement,
    bump,
    comparison_bound,
    export_binary,
    green_matrix,
    l1_mass,
    verify_reproduction,
)
from .harnack_lab import (
    ball_nodes,
    harnack_report,
    nested_constants,
    poisson_kernel,
    refine_constants,
    write_ratio_svg,
)
from .operator_core import OperatorSpec, gallery_entries
from .propagation import hopf_certificate, reachable_set, smp_test, write_paths_svg

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "hypolab/report-v1"


class Command(Enum):
    """命令"""

    SOLVE = "solve"  # Dirichlet求解
    GREEN = "green"  # Green核
    HARNACK = "harnack"  # Harnack常数
    SMP = "smp"  # 强极大值原理
    HOPF = "hopf"  # Hopf证书
    PATHS = "paths"  # 可达集与控制路径
    REFINE = "refine"  # 正则化阶梯
    GALLERY_LIST = "gallery-list"  # 列出示例库


@dataclass
class RunResult:
    """一次命令的结果

    Attributes:
        command: 命令名
        results: 数值结果（写入 report.json）
        artifacts: 输出文件
        timing: 各阶段耗时（秒）
    """

    command: str
    results: Dict[str, Any]
    artifacts: List[Path] = field(default_factory=list)
    timing: Dict[str, float] = field(default_factory=dict)


def versions() -> Dict[str, str]:
    return {"hypolab": __version__, "numpy": np.__version__, "scipy": scipy.__version__}


def gallery_listing() -> List[Dict[str, Any]]:
    return [
        {
            "name": e.name,
            "dim": e.dim,
            "description": e.description,
            "citation": e.citation,
            "params": list(e.params),
        }
        for e in gallery_entries()
    ]


class ExperimentEngine:
    """实验引擎

    Attributes:
        config: 实验配置
        out_dir: 输出目录
        spec: 算子
        config_hash: 配置哈希
        rng: 由配置种子初始化的随机数发生器
    """

    def __init__(self, config: ExperimentConfig, out_dir: Optional[Path] = None) -> None:
        self.config = config
        self.out_dir = Path(out_dir or config.output.directory)
        self.formats = set(config.output.formats)
        self.config_hash = config.config_hash()
        self.rng = np.random.default_rng(config.seed)
        self.spec: OperatorSpec = config.build_operator()
        self._timing: Dict[str, float] = {}
        self._artifacts: List[Path] = []
        self._handlers: Dict[Command, Callable[[], Dict[str, Any]]] = {
            Command.SOLVE: self.run_solve,
            Command.GREEN: self.run_green,
            Command.HARNACK: self.run_harnack,
            Command.SMP: self.run_smp,
            Command.HOPF: self.run_hopf,
            Command.PATHS: self.run_paths,
            Command.REFINE: self.run_refine,
        }

    # -- 构造 ---------------------------------------------------------------

    def grid(self, resolution: Optional[int] = None) -> Grid:
        res = self.config.grid.resolution if resolution is None else resolution
        return build_grid(self.config.grid.bounds, res, node_cap=self.config.grid.node_cap)

    def mask(
        self, resolution: Optional[int] = None, lens_eps: Optional[float] = None
    ) -> DomainMask:
        dom = self.config.domain
        grid = self.grid(resolution)
        if len(grid.bounds) != self.spec.dim:
            raise ConfigError(f"网格维数 {grid.dim} 与算子维数 {self.spec.dim} 不一致")
        if dom.kind == "lens":
            h0 = np.asarray(dom.h0, dtype=float)
            norm = float(np.linalg.norm(h0))
            if norm == 0:
                raise ConfigError("domain.h0 不能为零向量")
            eps = dom.lens_eps if lens_eps is None else lens_eps
            return lens_domain(dom.x0, h0 / norm, eps, grid)
        if dom.kind == "ball":
            return ball_domain(dom.center, float(dom.radius), grid)
        return box_domain(dom.lower, dom.upper, grid)

    def center(self) -> np.ndarray:
        dom = self.config.domain
        if dom.kind == "lens":
            return np.asarray(dom.x0, dtype=float)
        if dom.kind == "ball":
            return np.asarray(dom.center, dtype=float)
        return 0.5 * (np.asarray(dom.lower, dtype=float) + np.asarray(dom.upper, dtype=float))

    def data_field(self, mask: DomainMask, source: Any) -> Field:
        expr = compile_expression(source, coordinate_names(mask.grid.dim))
        return Field.from_function(mask, expr)

    def interior_node(self, mask: DomainMask, point: Sequence[float]) -> int:
        node = mask.grid.nearest_node(point)
        if not mask.interior.ravel()[node]:
            raise ConfigError(f"点 {list(point)} 最近的节点不是内部节点")
        return node

    def _timed(self, label: str, fn: Callable[[], Any]) -> Any:
        start = time.perf_counter()
        try:
            return fn()
        finally:
            self._timing[label] = round(time.perf_counter() - start, 6)

    def _emit(self, path: Path) -> Path:
        self._artifacts.append(path)
        return path

    # -- 命令 ---------------------------------------------------------------

    def run(self, command: Command) -> RunResult:
        """执行一个命令"""
        if command is Command.GALLERY_LIST:
            return RunResult(command.value, {"gallery": gallery_listing()})
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._timing = {}
        self._artifacts = []
        logger.info("运行 %s（算子 %s，种子 %d）", command.value, self.spec.name, self.config.seed)
        results = self._timed("total", self._handlers[command])
        return RunResult(command.value, results, list(self._artifacts), dict(self._timing))

    def _system(self, mask: DomainMask) -> StencilSystem:
        sys = self._timed("assemble", lambda: assemble(self.spec, mask))
        if "mm" in self.formats:
            for path in export_matrix_market(sys, self.out_dir / "system.mtx"):
                self._emit(path)
        if "pgm" in self.formats:
            self._emit(mask.to_pgm(self.out_dir / "mask.pgm"))
        return sys

    def _emit_field(self, u: Field, stem: str, title: str) -> None:
        if "csv" in self.formats:
            self._emit(u.to_csv(self.out_dir / f"{stem}.csv"))
        if "svg" in self.formats:
            self._emit(u.to_svg(self.out_dir / f"{stem}.svg", title, self.config_hash))
        if "pgm" in self.formats:
            self._emit(u.to_pgm(self.out_dir / f"{stem}.pgm"))

    def run_solve(self) -> Dict[str, Any]:
        mask = self.mask()
        sys = self._system(mask)
        f = self.data_field(mask, self.config.run.f)
        phi = self.data_field(mask, self.config.run.phi)
        u = self._timed("solve", lambda: solve(sys, f, phi))
        self._emit_field(u, "u", f"{self.spec.name}: u")
        wmp = wmp_check(sys, u)
        mm = check_mmatrix(sys)
        closure = u.closure_values()
        return {
            "operator": self.spec.describe(),
            "n_interior": mask.n_interior,
            "n_boundary": mask.n_boundary,
            "flags": sys.flags(),
            "mmatrix_violations": mm.n_offdiag_violations + mm.n_rowsum_violations,
            "u": {"min": float(closure.min()), "max": float(closure.max()),
                  "sup_norm": u.sup_norm()},
            "wmp": asdict(wmp),
        }

    def run_green(self) -> Dict[str, Any]:
        run = self.config.run
        mask = self.mask()
        sys = self._system(mask)
        fact = self._timed("factorize", lambda: factorize(sys))
        sources = None
        if run.sources is not None:
            sources = [self.interior_node(mask, p) for p in run.sources]
        gm = self._timed(
            "green", lambda: green_matrix(sys, sources, threads=run.threads, factorization=fact)
        )
        centre = self.center() if run.point is None else np.asarray(run.point, dtype=float)
        x0 = self.interior_node(mask, centre)
        results: Dict[str, Any] = {
            "operator": self.spec.describe(),
            "n_interior": mask.n_interior,
            "columns": len(gm.sources),
            "min_entry": gm.min_entry(),
            "positive": bool(gm.min_entry() > 0),
            "flags": sys.flags(),
        }
        if gm.full:
            mass = l1_mass(gm)
            results["asymmetry"] = gm.asymmetry()
            results["harmonicity_residual"] = gm.harmonicity_residual()
            results["l1_mass"] = {"max_row_mass": mass.max_row_mass, "total": mass.total}
            phi = bump(mask, centre, 0.25 * mask.diameter())
            results["reproduction"] = asdict(verify_reproduction(gm, phi))
        decay = self._timed(
            "decay",
            lambda: boundary_decay_refinement(self.spec, self.mask, run.resolutions, centre),
        )
        results["boundary_decay"] = {
            "resolutions": decay.resolutions,
            "collar_max": decay.collar_max,
            "strictly_decreasing": decay.strictly_decreasing,
        }
        outer_eps = self.config.domain.outer_lens_eps
        if gm.full and outer_eps is not None and self.config.domain.kind == "lens":
            results["comparison"] = self._comparison_suite(gm, mask, outer_eps)
        if "mm" in self.formats:
            for path in export_binary(gm, self.out_dir / "green.hygk"):
                self._emit(path)
        row = np.zeros(mask.grid.size)
        row[mask.interior_indices] = gm.row(x0)
        if "svg" in self.formats:
            image = field_image(row, mask.closure, mask.grid)
            self._emit(write_heatmap_svg(
                self.out_dir / "green_row.svg", image, grid_extent(mask.grid),
                f"{self.spec.name}: k(x0, ·)", self.config_hash, label="k",
            ))
        if "csv" in self.formats:
            self._emit(Field(mask, row).to_csv(self.out_dir / "green_row.csv"))
        return results

    def _comparison_suite(self, gm: Any, mask: DomainMask, outer_eps: float) -> Dict[str, Any]:
        outer_mask = self.mask(lens_eps=outer_eps)
        outer_sys = assemble(self.spec.with_shift(0.0), outer_mask)
        fact = factorize(outer_sys)
        margins = []
        for _ in range(self.config.run.draws):
            values = np.zeros(outer_mask.grid.size)
            values[outer_mask.boundary_indices] = self.rng.random(outer_mask.n_boundary)
            u = harmonic_extension(outer_sys, Field(outer_mask, values), fact)
            margins.append(comparison_bound(gm, u, outer_sys))
        return {
            "draws": len(margins),
            "min_margin": min(r.min_margin for r in margins),
            "passed": all(r.passed for r in margins),
        }

    def run_harnack(self) -> Dict[str, Any]:
        run = self.config.run
        mask = self.mask()
        sys = self._system(mask)
        pk = self._timed("poisson", lambda: poisson_kernel(sys))
        y0_point = self.center() if run.y0 is None else np.asarray(run.y0, dtype=float)
        y0 = self.interior_node(mask, y0_point)
        compact = ball_nodes(mask, mask.grid.coordinates(y0), run.compact_radius)
        report = self._timed(
            "constants", lambda: harnack_report(pk, compact, y0, m=run.m, delta=run.delta)
        )
        radii = [run.compact_radius * s for s in (0.25, 0.5, 1.0)]
        report.nested = asdict(nested_constants(pk, y0, radii))
        history = self._timed(
            "refinement",
            lambda: refine_constants(
                self.spec, self.mask, run.resolutions, y0_point, run.compact_radius
            ),
        )
        report.refinement = [asdict(entry) for entry in history]
        if "json" in self.formats:
            self._emit(report.save(self.out_dir / "harnack.json"))
        if "svg" in self.formats:
            self._emit(write_ratio_svg(
                self.out_dir / "harnack_ratio.svg", pk, y0, f"{self.spec.name}: ratio",
                self.config_hash,
            ))
        data = report.to_dict()
        data["compact_size"] = len(compact)
        data["row_sum_range"] = [float(pk.row_sums().min()), float(pk.row_sums().max())]
        data.pop("compact")
        return data

    def run_smp(self) -> Dict[str, Any]:
        run = self.config.run
        mask = self.mask()
        sys = self._system(mask)
        fact = factorize(sys)
        f = self.data_field(mask, run.f)
        phi = self.data_field(mask, run.phi)
        u = solve(sys, f, phi, fact)
        reports = [smp_test(u, self.spec, mask, sys=sys, step_budget=run.step_budget)]
        self._emit_field(u, "u", f"{self.spec.name}: u")
        for _ in range(run.draws):
            values = np.zeros(mask.grid.size)
            values[mask.boundary_indices] = self.rng.random(mask.n_boundary)
            draw = harmonic_extension(sys, Field(mask, values), fact)
            reports.append(smp_test(draw, self.spec, mask, sys=sys, step_budget=run.step_budget))
        statuses: Dict[str, int] = {}
        for r in reports:
            statuses[r.status] = statuses.get(r.status, 0) + 1
        return {
            "configured": asdict(reports[0]),
            "draws": len(reports) - 1,
            "statuses": statuses,
            "passed": all(r.passed for r in reports),
        }

    def run_hopf(self) -> Dict[str, Any]:
        run = self.config.run
        mask = self.mask()
        nodes = mask.boundary_indices
        count = min(run.samples, len(nodes))
        chosen = np.sort(self.rng.choice(nodes, size=count, replace=False))
        rows = []
        certificates, characteristic, no_ball = [], 0, 0
        for node in chosen:
            try:
                ball = exterior_ball(mask, int(node))
            except NoExteriorBall:
                no_ball += 1
                continue
            try:
                cert = hopf_certificate(self.spec, ball.y, ball.nu)
            except CharacteristicDirection:
                characteristic += 1
                rows.append([int(node)] + ball.y.tolist() + [0.0, float("nan")])
                continue
            certificates.append(cert)
            rows.append([int(node)] + ball.y.tolist() + [cert.lam, cert.lw_at_y])
        if "csv" in self.formats:
            header = ["node"] + list(coordinate_names(mask.grid.dim)) + ["lambda", "lw_at_y"]
            self._emit(write_table_csv(self.out_dir / "hopf.csv", header, rows))
        orders = [o for c in certificates for o in c.observed_order]
        return {
            "sampled": int(count),
            "certified": len(certificates),
            "characteristic": characteristic,
            "no_exterior_ball": no_ball,
            "all_positive": all(c.positive for c in certificates),
            "min_lw": min((c.lw_at_y for c in certificates), default=None),
            "min_observed_order": min(orders, default=None),
        }

    def run_paths(self) -> Dict[str, Any]:
        run = self.config.run
        mask = self.mask()
        start = self.center() if run.point is None else np.asarray(run.point, dtype=float)
        reach = self._timed(
            "reach", lambda: reachable_set(self.spec, start, mask, run.step_budget)
        )
        if run.targets is not None:
            targets = [mask.grid.nearest_node(p) for p in run.targets]
            targets = [t for t in targets if reach.contains(t)]
        else:
            targets = [int(n) for n in reach.reached[[0, len(reach.reached) // 2, -1]]]
        paths = []
        for k, node in enumerate(targets):
            path = reach.path_to(node)
            paths.append({
                "node": int(node),
                "segments": len(path.segments),
                "max_gap": path.max_gap(),
                "revalidation": path.revalidate(self.spec),
            })
            if "csv" in self.formats:
                self._emit(path.to_csv(self.out_dir / f"path_{k}.csv"))
        if "svg" in self.formats and mask.grid.dim >= 2:
            self._emit(write_paths_svg(
                self.out_dir / "paths.svg", reach, targets, f"{self.spec.name}: reachable set",
                self.config_hash,
            ))
        return {
            "start_node": reach.start_node,
            "reached": int(len(reach.reached)),
            "n_interior": mask.n_interior,
            "coverage": reach.coverage,
            "complete": reach.complete,
            "budget_exhausted": reach.budget_exhausted,
            "skipped_legs": reach.skipped_legs,
            "paths": paths,
        }

    def run_refine(self) -> Dict[str, Any]:
        run = self.config.run
        mask = self.mask()
        f = self.data_field(mask, run.f)
        phi = self.data_field(mask, run.phi)
        ladder = self._timed(
            "ladder", lambda: regularization_ladder(self.spec, mask, f, phi, run.n_list)
        )
        self._emit_field(ladder.solutions[-1], "u_ladder", f"{self.spec.name}: u_n")
        return ladder.to_dict()


def build_report(
    config: Optional[ExperimentConfig],
    command: str,
    result: Optional[RunResult] = None,
    error: Optional[Dict[str, Any]] = None,
    out_dir: Optional[Path] = None,
) -> Dict[str, Any]:
    """report.json 的内容；timing 单独成块"""
    report: Dict[str, Any] = {
        "schema_version": REPORT_SCHEMA,
        "command": command,
        "versions": versions(),
        "status": "ok" if error is None else "error",
    }
    if config is not None:
        report["config"] = config.to_dict()
        report["config_hash"] = config.config_hash()
        report["seed"] = config.seed
    if result is not None:
        report["results"] = result.results
        base = Path(out_dir) if out_dir is not None else None
        report["artifacts"] = sorted(
            str(p.relative_to(base)) if base is not None else str(p) for p in result.artifacts
        )
        report["timing"] = result.timing
    if error is not None:
        report["error"] = error
    return report


def write_report(report: Dict[str, Any], out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "report.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_plain(report), f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    return value


def strip_timing(report: Dict[str, Any]) -> Dict[str, Any]:
    return {k: v for k, v in report.items() if k != "timing"}
