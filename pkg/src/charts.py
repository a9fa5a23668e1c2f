"""
MISFIT-V Fusion - Charts and image outputs

Grouped metric bar charts and training curves (plotly, static PNG through
kaleido), qualitative thermal | visual | fused panels and colormapped
attention heatmaps (OpenCV).
"""

import os
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
import pandas as pd
import plotly.graph_objects as go

from src.fusion_metrics import HIGHER_IS_BETTER, METRICS, MODALITIES, ComparisonTable
from src.errors import ShapeError
from src.utils import logger

MODALITY_COLORS = {'thermal': '#C2410A', 'visual': '#0A66C2'}
CURVE_COLORS = {'total': '#2C2C2C', 'gen': '#0A66C2', 'kl': '#057642', 'l1': '#C2410A'}


def _layout(fig: go.Figure, title: str, y_title: str):
    fig.update_layout(
        title=dict(text=title, x=0.5),
        height=400,
        width=640,
        barmode='group',
        yaxis=dict(title=y_title),
        legend=dict(orientation="h", yanchor="bottom", y=1.02, xanchor="right", x=1),
        margin=dict(l=40, r=20, t=60, b=40),
        paper_bgcolor='white',
        plot_bgcolor='white',
        font=dict(size=12, color='#2C2C2C'),
    )


def metric_bar_figure(table: ComparisonTable, metric: str) -> go.Figure:
    """One group per run, one bar per modality."""
    fig = go.Figure()
    for modality in MODALITIES:
        fig.add_trace(go.Bar(
            x=table.labels,
            y=table.column(metric, modality).tolist(),
            name=f"vs {modality}",
            marker_color=MODALITY_COLORS[modality],
        ))
    better = 'higher' if HIGHER_IS_BETTER[metric] else 'lower'
    y_title = f"{metric} (normalized)" if table.normalized else metric
    _layout(fig, f"{metric} ({better} is better)", y_title)
    return fig


def training_curve_figure(log: pd.DataFrame) -> go.Figure:
    fig = go.Figure()
    for column, color in CURVE_COLORS.items():
        fig.add_trace(go.Scatter(
            x=log['step'],
            y=log[column],
            name=column,
            mode='lines',
            line=dict(color=color, width=2),
        ))
    _layout(fig, 'Training losses', 'loss')
    fig.update_layout(xaxis=dict(title='step'), yaxis=dict(type='log', title='loss'))
    return fig


def write_figure(fig: go.Figure, filepath: str) -> str:
    """
    Export a figure as a static PNG; falls back to standalone HTML.

    Returns:
        The path actually written
    """
    os.makedirs(os.path.dirname(os.path.abspath(filepath)), exist_ok=True)
    try:
        fig.write_image(filepath, format='png')
    except Exception as e:
        fallback = str(Path(filepath).with_suffix('.html'))
        logger.warning(f"Static export failed ({e}); writing {fallback} instead")
        fig.write_html(fallback, include_plotlyjs=True)
        return fallback
    logger.info(f"Saved chart to: {filepath}")
    return filepath


def write_metric_charts(table: ComparisonTable, out_dir: str, prefix: str = '') -> List[str]:
    """One grouped bar chart per metric; returns the five written paths."""
    return [write_figure(metric_bar_figure(table, metric),
                         os.path.join(out_dir, f"{prefix}{metric.lower()}.png"))
            for metric in METRICS]


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def _bgr(pixels: np.ndarray) -> np.ndarray:
    arr = to_uint8(np.asarray(pixels))
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.shape[2] == 1:
        return cv2.cvtColor(arr, cv2.COLOR_GRAY2BGR)
    return cv2.cvtColor(arr, cv2.COLOR_RGB2BGR)


def save_image(pixels: np.ndarray, filepath: str) -> str:
    """Write an HxWx{1,3} [0, 1] RGB/grey image as 8-bit PNG."""
    os.makedirs(os.path.dirname(os.path.abspath(filepath)), exist_ok=True)
    arr = to_uint8(np.asarray(pixels))
    if arr.ndim == 3 and arr.shape[2] == 3:
        arr = cv2.cvtColor(arr, cv2.COLOR_RGB2BGR)
    elif arr.ndim == 3:
        arr = arr[..., 0]
    if not cv2.imwrite(filepath, arr):
        raise OSError(f"Could not write image: {filepath}")
    return filepath


def write_panel(thermal: np.ndarray, visual: np.ndarray, fused: np.ndarray, filepath: str) -> str:
    """Side-by-side thermal | visual | fused triptych."""
    tiles = [_bgr(thermal), _bgr(visual), _bgr(fused)]
    if len({t.shape for t in tiles}) != 1:
        raise ShapeError(f"Panel tiles differ in size: {[t.shape for t in tiles]}")
    os.makedirs(os.path.dirname(os.path.abspath(filepath)), exist_ok=True)
    if not cv2.imwrite(filepath, cv2.hconcat(tiles)):
        raise OSError(f"Could not write image: {filepath}")
    return filepath


def write_heatmap(heat: np.ndarray, filepath: str, size: Optional[Tuple[int, int]] = None,
                  underlay: Optional[np.ndarray] = None, alpha: float = 0.6) -> str:
    """
    Colormap an attention heatmap (viridis) and write it as PNG.

    Args:
        heat: h x w (x 1) values in [0, 1]
        size: (H, W) to upscale to with nearest-neighbour; None keeps the grid size
        underlay: Optional HxWxC image blended under the heatmap
    """
    grid = to_uint8(np.asarray(heat).reshape(heat.shape[0], heat.shape[1]))
    if size is not None:
        grid = cv2.resize(grid, (size[1], size[0]), interpolation=cv2.INTER_NEAREST)
    colored = cv2.applyColorMap(grid, cv2.COLORMAP_VIRIDIS)
    if underlay is not None:
        base = _bgr(underlay)
        if base.shape != colored.shape:
            raise ShapeError(f"Heatmap {colored.shape} and underlay {base.shape} differ in size")
        colored = cv2.addWeighted(colored, alpha, base, 1.0 - alpha, 0.0)
    os.makedirs(os.path.dirname(os.path.abspath(filepath)), exist_ok=True)
    if not cv2.imwrite(filepath, colored):
        raise OSError(f"Could not write image: {filepath}")
    return filepath


def chart_paths_exist(paths: Sequence[str]) -> bool:
    return all(os.path.exists(p) and os.path.getsize(p) > 0 for p in paths)
