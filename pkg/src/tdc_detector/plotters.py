"""
Functions for plotting table results, CAM panels and avoidance curves.
"""
from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from matplotlib.collections import LineCollection

SVG_RC = {"svg.hashsalt": "tdc-detector", "svg.fonttype": "none"}
NEUTRAL = "0.6"


def save_svg(fig: plt.Figure, path: Union[str, Path]) -> None:
    """
    Writes fig as SVG with fixed element ids and no date, then closes it.
    """
    with plt.rc_context(SVG_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_grouped_bars(
    frame: pd.DataFrame,
    x: str,
    ys: Sequence[str],
    ax: Optional[plt.Axes] = None,
    ylabel: str = "Accuracy (%)",
) -> plt.Axes:
    """
    Plots the columns ys of frame as bars grouped by column x.
    """
    if ax is None:
        fig, ax = plt.subplots()
    positions = np.arange(len(frame))
    width = 0.8 / len(ys)
    for i, y in enumerate(ys):
        ax.bar(positions + (i - (len(ys) - 1) / 2) * width, frame[y], width, label=y)
    ax.set_xticks(positions)
    ax.set_xticklabels([str(v) for v in frame[x]])
    ax.set_xlabel(x)
    ax.set_ylabel(ylabel)
    ax.legend()
    return ax


def plot_series(
    frame: pd.DataFrame,
    x: str,
    y: str,
    group: str,
    ax: Optional[plt.Axes] = None,
    ylabel: str = "Accuracy (%)",
) -> plt.Axes:
    """
    Plots y against x with one line per value of group, e.g. test accuracy
    against the number of BGRU layers per hidden size.
    """
    if ax is None:
        fig, ax = plt.subplots()
    for value, sub in frame.groupby(group, sort=True):
        ax.plot(sub[x], sub[y], marker="o", label=f"{group}={value}")
    ax.set_xlabel(x)
    ax.set_ylabel(ylabel)
    ax.legend()
    return ax


def plot_cam_panel(
    matrix: np.ndarray,
    importance: np.ndarray,
    ax: Optional[plt.Axes] = None,
    title: str = "",
    all_zero: bool = False,
) -> plt.Axes:
    """
    Plots the rows of a preprocessed trace matrix with the line colored by the
    CAM importance of each column. Maps without evidence are drawn in a neutral
    color.
    """
    if ax is None:
        fig, ax = plt.subplots()
    matrix = np.atleast_2d(matrix)
    cols = np.arange(matrix.shape[-1])
    for row in matrix:
        points = np.column_stack([cols, row])
        segments = np.stack([points[:-1], points[1:]], axis=1)
        if all_zero:
            lc = LineCollection(segments, colors=NEUTRAL, linewidths=1.0)
        else:
            lc = LineCollection(segments, cmap="inferno", linewidths=1.0)
            lc.set_array(0.5 * (importance[:-1] + importance[1:]))
            lc.set_clim(0.0, 1.0)
        ax.add_collection(lc)
    ax.set_xlim(0, len(cols) - 1)
    ax.set_ylim(-0.05, 1.05)
    ax.set_xlabel("Column")
    ax.set_title(f"{title} (no evidence)" if all_zero else title)
    return ax


def plot_avoidance_curve(curve: pd.DataFrame, ax: Optional[plt.Axes] = None) -> plt.Axes:
    """
    Benign-classification rate and victim label preservation per iteration.
    """
    if ax is None:
        fig, ax = plt.subplots()
    ax.plot(curve["iteration"], curve["benign_rate"], label="benign rate")
    ax.plot(curve["iteration"], curve["victim_label_preserved_rate"], ls="--", label="victim label kept")
    ax.set_xlabel("Iteration")
    ax.set_ylabel("Rate")
    ax.set_ylim(-0.05, 1.05)
    ax.legend()
    return ax
