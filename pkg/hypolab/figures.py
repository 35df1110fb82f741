"""图形与表格输出

CSV、PGM 与 SVG 热图。SVG 带色标图例，并在图中与元数据里写入配置哈希。
"""
# -*- coding: utf-8 -*-

import csv
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "hypolab"

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

if TYPE_CHECKING:
    from .domain_grid import Grid

PathLike = Union[str, Path]


def slice_2d(
    values: np.ndarray,
    grid: "Grid",
    axes: Tuple[int, int] = (0, 1),
    index: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """取二维切片

    Args:
        values: 全网格数组（展平或已成形）
        grid: Grid
        axes: 保留的两个轴
        index: 其余轴的下标，缺省取中点

    Returns:
        (n_axes0, n_axes1) 数组；一维网格返回 (n, 1)
    """
    shape = tuple(grid.shape)
    arr = np.asarray(values).reshape(shape)
    if len(shape) == 1:
        return arr[:, None]
    others = [k for k in range(len(shape)) if k not in axes]
    if index is None:
        index = [shape[k] // 2 for k in others]
    selector = [slice(None)] * len(shape)
    for k, i in zip(others, index):
        selector[k] = int(i)
    out = arr[tuple(selector)]
    return out if axes[0] < axes[1] else out.T


def write_pgm(path: PathLike, image: np.ndarray) -> Path:
    """写二进制PGM（P5，maxval 255）；第0轴为横向"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = np.asarray(image)
    if img.dtype != np.uint8:
        lo, hi = float(np.nanmin(img)), float(np.nanmax(img))
        scaled = np.zeros_like(img, dtype=float) if hi <= lo else (img - lo) / (hi - lo)
        img = np.rint(255 * np.nan_to_num(scaled)).astype(np.uint8)
    raster = np.ascontiguousarray(img.T[::-1])
    header = f"P5\n{raster.shape[1]} {raster.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + raster.tobytes())
    return path


def write_table_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                             for v in row])
    return path


def write_heatmap_svg(
    path: PathLike,
    image: np.ndarray,
    extent: Sequence[float],
    title: str,
    config_hash: str = "",
    label: str = "value",
    overlays: Sequence[np.ndarray] = (),
) -> Path:
    """写SVG热图

    Args:
        image: (nx, ny) 数组，第0轴为横向，NaN 视为区域外
        extent: (xmin, xmax, ymin, ymax)
        title: 标题
        config_hash: 配置哈希，写入图内与SVG元数据
        label: 色标标签
        overlays: 叠加的折线 (m, 2)
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    try:
        data = np.ma.masked_invalid(np.asarray(image, dtype=float).T)
        im = ax.imshow(data, origin="lower", extent=tuple(extent), cmap="viridis", aspect="auto")
        fig.colorbar(im, ax=ax, label=label)
        for line in overlays:
            line = np.asarray(line)
            ax.plot(line[:, 0], line[:, 1], color="white", linewidth=0.8)
        ax.set_title(title)
        if config_hash:
            fig.text(0.01, 0.01, f"config {config_hash[:16]}", fontsize=6, color="gray")
        metadata = {"Description": f"config_hash={config_hash}", "Date": None}
        fig.savefig(path, format="svg", metadata=metadata)
    finally:
        plt.close(fig)
    return path


def field_image(values: np.ndarray, closure: np.ndarray, grid: "Grid") -> np.ndarray:
    """全网格场 → 区域外为 NaN 的二维切片"""
    full = np.where(np.asarray(closure).ravel(), np.asarray(values, dtype=float).ravel(), np.nan)
    return slice_2d(full, grid)


def grid_extent(grid: "Grid") -> Tuple[float, float, float, float]:
    bounds = grid.bounds
    if len(bounds) == 1:
        return (bounds[0][0], bounds[0][1], 0.0, 1.0)
    return (bounds[0][0], bounds[0][1], bounds[1][0], bounds[1][1])
