"""命令行界面

hypolab的批处理入口：读取实验配置，执行命令，写出 report.json 与图表文件。
"""
# -*- coding: utf-8 -*-

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from rich import box
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

from . import __version__
from .config import FORMATS, ExperimentConfig, load_config
from .errors import HypolabError
from .experiments import (
    Command,
    ExperimentEngine,
    RunResult,
    build_report,
    gallery_listing,
    strip_timing,
    write_report,
)

logger = logging.getLogger("hypolab")

EXIT_OK = 0
EXIT_GOLDEN_MISMATCH = 1
GOLDEN_RTOL = 1e-9
GOLDEN_ATOL = 1e-12


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hypolab",
        description="退化椭圆算子的数值实验：Dirichlet问题、Green核、Harnack常数与极大值原理",
    )
    parser.add_argument("--version", action="version", version=f"hypolab {__version__}")
    parser.add_argument(
        "command", choices=[c.value for c in Command], help="要执行的命令"
    )
    parser.add_argument("--config", type=Path, help="实验配置文件（.toml/.yaml/.json）")
    parser.add_argument("--out", type=Path, help="输出目录（覆盖 output.directory）")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="点分路径覆盖，例如 --set grid.resolution=65",
    )
    parser.add_argument("--seed", type=int, help="随机种子（覆盖 run.seed）")
    parser.add_argument("--threads", type=int, help="Green核列求解的线程数")
    parser.add_argument(
        "--format", dest="formats", action="append", choices=FORMATS,
        help="输出格式，可重复给出（覆盖 output.formats）",
    )
    parser.add_argument("--golden", type=Path, help="与之比较的基准 report.json")
    parser.add_argument("-v", "--verbose", action="store_true", help="输出调试日志")
    return parser


def setup_logging(verbose: bool, console: Console) -> None:
    level = logging.DEBUG if verbose else logging.INFO
    for handler in list(logger.handlers):
        if isinstance(handler, RichHandler):
            logger.removeHandler(handler)
    handler = RichHandler(console=console, show_path=False, rich_tracebacks=False)
    handler.setFormatter(logging.Formatter("%(message)s"))
    logger.addHandler(handler)
    logger.setLevel(level)


def golden_diff(actual: Any, expected: Any, prefix: str = "") -> List[str]:
    """两个报告之间取值不同的点分键

    浮点数按 GOLDEN_RTOL / GOLDEN_ATOL 比较，其余取值要求完全相同。
    """
    if isinstance(actual, dict) and isinstance(expected, dict):
        keys: List[str] = []
        for key in sorted(set(actual) | set(expected)):
            path = f"{prefix}.{key}" if prefix else str(key)
            if key not in actual or key not in expected:
                keys.append(path)
            else:
                keys.extend(golden_diff(actual[key], expected[key], path))
        return keys
    if isinstance(actual, list) and isinstance(expected, list):
        if len(actual) != len(expected):
            return [prefix or "."]
        keys = []
        for k, (a, e) in enumerate(zip(actual, expected)):
            keys.extend(golden_diff(a, e, f"{prefix}[{k}]"))
        return keys
    if _is_real(actual) and _is_real(expected):
        if np.isclose(actual, expected, rtol=GOLDEN_RTOL, atol=GOLDEN_ATOL, equal_nan=True):
            return []
        return [prefix or "."]
    return [] if actual == expected else [prefix or "."]


def _is_real(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


class CLI:
    """命令行界面"""

    def __init__(self, console: Optional[Console] = None) -> None:
        self.console = console or Console()

    def print_gallery(self) -> None:
        """打印示例库"""
        table = Table(box=box.ROUNDED)
        table.add_column("名称", style="cyan")
        table.add_column("维数", justify="right")
        table.add_column("参数", style="green")
        table.add_column("描述", style="white")
        table.add_column("亚椭圆性依据", style="magenta")
        for entry in gallery_listing():
            table.add_row(
                entry["name"],
                "N" if entry["dim"] is None else str(entry["dim"]),
                ", ".join(entry["params"]) or "-",
                entry["description"],
                entry["citation"],
            )
        self.console.print(Panel(table, title="算子示例库", border_style="blue"))

    def print_summary(self, result: RunResult, report_path: Path) -> None:
        """打印结果摘要"""
        table = Table(box=box.ROUNDED, show_header=False)
        table.add_column("键", style="cyan")
        table.add_column("值", style="white")
        for key, value in result.results.items():
            if isinstance(value, (dict, list)):
                continue
            table.add_row(key, f"{value:.6g}" if isinstance(value, float) else str(value))
        table.add_row("report", str(report_path))
        table.add_row("artifacts", str(len(result.artifacts)))
        self.console.print(Panel(table, title=f"hypolab {result.command}", border_style="green"))

    def print_error(self, error: Dict[str, Any]) -> None:
        lines = [f"[bold red]{error['error']}[/bold red]: {error['message']}"]
        for item in error.get("details", {}).get("diagnostics", []):
            lines.append(f"  • {item}")
        self.console.print(Panel("\n".join(lines), title="错误", border_style="red"))

    def _overrides(self, args: argparse.Namespace) -> List[str]:
        overrides = list(args.overrides)
        if args.threads is not None:
            overrides.append(f"run.threads={args.threads}")
        if args.formats:
            overrides.append(f"output.formats={json.dumps(sorted(set(args.formats)))}")
        return overrides

    def run(self, args: argparse.Namespace) -> int:
        """执行一个命令并返回退出码"""
        command = Command(args.command)
        if command is Command.GALLERY_LIST:
            self.print_gallery()
            if args.out is not None:
                result = RunResult(command.value, {"gallery": gallery_listing()})
                write_report(build_report(None, command.value, result, out_dir=args.out), args.out)
            return EXIT_OK
        if args.config is None:
            self.print_error({"error": "ConfigError", "message": f"{command.value} 需要 --config"})
            return 2

        config: Optional[ExperimentConfig] = None
        out_dir = args.out or Path("out")
        try:
            config = load_config(args.config, self._overrides(args), seed=args.seed)
            out_dir = args.out or Path(config.output.directory)
            engine = ExperimentEngine(config, out_dir)
            result = engine.run(command)
        except HypolabError as exc:
            return self._fail(config, command, exc.to_dict(), exc.exit_code, out_dir)
        except ValueError as exc:
            error = {"error": type(exc).__name__, "message": str(exc), "details": {}}
            return self._fail(config, command, error, 2, out_dir)
        except Exception as exc:
            logger.exception("%s 异常终止", command.value)
            error = {"error": type(exc).__name__, "message": str(exc), "details": {}}
            return self._fail(config, command, error, 3, out_dir)

        report = build_report(config, command.value, result, out_dir=out_dir)
        report_path = write_report(report, out_dir)
        self.print_summary(result, report_path)
        if args.golden is not None:
            return self.compare_golden(report_path, args.golden)
        return EXIT_OK

    def _fail(
        self,
        config: Optional[ExperimentConfig],
        command: Command,
        error: Dict[str, Any],
        code: int,
        out_dir: Path,
    ) -> int:
        report = build_report(config, command.value, error=error, out_dir=out_dir)
        write_report(report, out_dir)
        self.print_error(error)
        return code

    def compare_golden(self, report_path: Path, golden_path: Path) -> int:
        """与基准报告比较（忽略 timing 块）"""
        with open(report_path, "r", encoding="utf-8") as f:
            actual = strip_timing(json.load(f))
        with open(golden_path, "r", encoding="utf-8") as f:
            expected = strip_timing(json.load(f))
        differing = golden_diff(actual, expected)
        if not differing:
            self.console.print("[bold green]与基准报告一致[/bold green]")
            return EXIT_OK
        for key in differing:
            self.console.print(f"[red]不一致:[/red] {key}")
        return EXIT_GOLDEN_MISMATCH


def main(argv: Optional[Sequence[str]] = None) -> int:
    """主入口"""
    for stream in (sys.stdout, sys.stderr):
        if hasattr(stream, "reconfigure"):
            try:
                stream.reconfigure(encoding="utf-8")
            except (OSError, ValueError):
                pass
    args = build_parser().parse_args(argv)
    cli = CLI()
    setup_logging(args.verbose, cli.console)
    return cli.run(args)


if __name__ == "__main__":
    sys.exit(main())
