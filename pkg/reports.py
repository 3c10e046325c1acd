"""
Run outputs: cluster-map images, metrics files, loss-curve charts, sweep tables.
"""
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from clustering import MetricsReport
from hsi_data import LabelMap
from numerics import require
from trainer import COMPONENTS

# 16 high-contrast colors; cluster c uses PALETTE[c % 16], background is black
PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230],
    [210, 245, 60], [250, 190, 212], [0, 128, 128], [220, 190, 255],
    [170, 110, 40], [255, 250, 200], [128, 0, 0], [170, 255, 195],
], dtype=np.uint8)
BACKGROUND = np.array([0, 0, 0], dtype=np.uint8)


def cluster_map(cluster_labels: np.ndarray, labels: LabelMap) -> np.ndarray:
    """Scene-shaped array of cluster ids, -1 on background pixels."""
    index = labels.labeled_index()
    require(cluster_labels.shape == index.shape,
            f"{cluster_labels.size} cluster labels for {index.size} labeled pixels")
    flat = np.full(labels.height * labels.width, -1, dtype=np.int64)
    flat[index] = cluster_labels
    return flat.reshape(labels.height, labels.width)


def render_rgb(cmap: np.ndarray) -> np.ndarray:
    rgb = np.empty(cmap.shape + (3,), dtype=np.uint8)
    rgb[:] = BACKGROUND
    mask = cmap >= 0
    rgb[mask] = PALETTE[cmap[mask] % len(PALETTE)]
    return rgb


def write_ppm(path, cmap: np.ndarray) -> Path:
    """Binary P6 pixmap, 8 bits per channel."""
    path = Path(path)
    rgb = render_rgb(cmap)
    header = f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode('ascii')
    path.write_bytes(header + rgb.tobytes())
    return path


def write_metrics(path, report: MetricsReport) -> Path:
    path = Path(path)
    path.write_text(report.to_text(), encoding='utf-8')
    return path


def render_loss_curves(path, history: Sequence[Mapping[str, float]]) -> Path:
    """Interactive chart of component losses (top) and their weights (bottom)."""
    frame = pd.DataFrame(list(history))
    fig = make_subplots(rows=2, cols=1, shared_xaxes=True,
                        subplot_titles=('Loss components', 'Loss weights exp(-alpha)'))
    for name in COMPONENTS:
        fig.add_trace(go.Scatter(x=frame['epoch'], y=frame[f'l_{name}'], name=f'L_{name}', mode='lines'),
                      row=1, col=1)
        fig.add_trace(go.Scatter(x=frame['epoch'], y=frame[f'w_{name}'], name=f'w_{name}', mode='lines'),
                      row=2, col=1)
    fig.add_trace(go.Scatter(x=frame['epoch'], y=frame['total'], name='total', mode='lines',
                             line=dict(dash='dash')), row=1, col=1)
    fig.update_layout(title='Training convergence', xaxis2_title='epoch', height=700)
    path = Path(path)
    fig.write_html(str(path), include_plotlyjs='cdn')
    return path


def write_sweep_table(path, rows: Sequence[Mapping[str, float]]) -> pd.DataFrame:
    frame = pd.DataFrame(list(rows))
    frame.to_csv(path, index=False)
    return frame
