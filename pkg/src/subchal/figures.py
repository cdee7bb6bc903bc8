"""Matplotlib rendering of the report figures.

SVG output is made reproducible by pinning the hash salt and stripping
the creation date, so reruns are byte-identical.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "subchal"

_FIGSIZE = (5.0, 4.0)


def embedding_figure(embedding) -> plt.Figure:
    """Scatter of the two principal coordinates, one labelled dot per team."""
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    xs = embedding.coordinates[:, 0]
    ys = embedding.coordinates[:, 1]
    ax.scatter(xs, ys, s=30, color="#336699", zorder=3)
    for label, x, y in zip(embedding.labels, xs, ys):
        ax.annotate(label, (x, y), textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xlabel("principal coordinate 1")
    ax.set_ylabel("principal coordinate 2")
    ax.set_title("Subgroup similarity map")
    ax.axhline(0, color="0.85", lw=0.8, zorder=1)
    ax.axvline(0, color="0.85", lw=0.8, zorder=1)
    fig.tight_layout()
    return fig


def error_vs_size_figure(report) -> plt.Figure:
    """Absolute prediction error against subgroup size, one dot per team."""
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    sizes = [r.subgroup_size for r in report.rows]
    errors = [r.abs_error for r in report.rows]
    ax.scatter(sizes, errors, s=30, color="#993333", zorder=3)
    for r in report.rows:
        ax.annotate(
            r.team_id, (r.subgroup_size, r.abs_error),
            textcoords="offset points", xytext=(4, 4), fontsize=8,
        )
    ax.set_xlabel("subgroup size")
    ax.set_ylabel("|prediction error|")
    ax.set_title("Prediction error vs subgroup size")
    fig.tight_layout()
    return fig


def save_svg(fig: plt.Figure, path: str | Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
