"""
Plotly figures for evaluation results, training curves and coverage studies.

All plots use the gridloc theme for consistency.
"""

from typing import Sequence

import numpy as np
import plotly.graph_objects as go
import polars as pl

from .theme import CATEGORICAL, CATEGORY_COLORS, COLORS, SEQUENTIAL, apply_theme, create_figure, create_subplots


# =============================================================================
# EVALUATION
# =============================================================================

def plot_ap_vs_iou(results: Sequence, labels: Sequence[str]) -> go.Figure:
    """AP at every evaluated IoU threshold, one line per run."""
    fig = create_figure("AP by IoU threshold", "Higher thresholds reward tighter boxes", height=450)
    for k, (label, result) in enumerate(zip(labels, results)):
        fig.add_trace(go.Scatter(
            x=list(result.thresholds),
            y=[100 * result.ap_by_threshold[t] for t in result.thresholds],
            name=label,
            mode="lines+markers",
            line=dict(width=2.5, color=CATEGORICAL[k % len(CATEGORICAL)]),
            marker=dict(size=6),
            hovertemplate=f"<b>{label}</b><br>IoU %{{x:.2f}}: AP %{{y:.1f}}<extra></extra>",
        ))
    fig.update_layout(xaxis_title="IoU threshold", yaxis_title="AP", hovermode="x unified")
    return apply_theme(fig)


def plot_threshold_gains(report) -> go.Figure:
    """Per-threshold AP change of each run against the baseline."""
    fig = create_figure("AP change vs baseline", f"Baseline: {report.labels[0]}", height=450)
    columns = [c for c in report.deltas.columns if c.startswith("AP@")]
    thresholds = [float(c[3:]) for c in columns]
    for k, row in enumerate(report.deltas.iter_rows(named=True)):
        fig.add_trace(go.Bar(
            x=thresholds,
            y=[100 * row[c] for c in columns],
            name=row["label"],
            marker_color=CATEGORICAL[(k + 1) % len(CATEGORICAL)],
        ))
    fig.add_hline(y=0, line_color=COLORS["neutral"])
    fig.update_layout(xaxis_title="IoU threshold", yaxis_title="AP change (points)", barmode="group")
    return apply_theme(fig)


def plot_category_gains(gains: pl.DataFrame) -> go.Figure:
    fig = create_figure("Per-category AP gain", "Sorted by gain", height=400)
    categories = gains["category"].to_list()
    fig.add_trace(go.Bar(
        x=categories,
        y=[None if g is None else 100 * g for g in gains["gain"].to_list()],
        marker_color=[CATEGORY_COLORS.get(c, COLORS["primary"]) for c in categories],
        hovertemplate="<b>%{x}</b>: %{y:+.1f}<extra></extra>",
    ))
    fig.add_hline(y=0, line_color=COLORS["neutral"])
    fig.update_layout(xaxis_title="Category", yaxis_title="AP gain (points)", showlegend=False)
    return apply_theme(fig)


# =============================================================================
# TRAINING
# =============================================================================

def plot_loss_curves(curves: dict[str, pl.DataFrame]) -> go.Figure:
    """Mean loss per epoch, one line per run."""
    fig = create_figure("Training loss", "Mean over batches", height=400)
    for k, (label, curve) in enumerate(curves.items()):
        fig.add_trace(go.Scatter(
            x=curve["epoch"].to_list(),
            y=curve["loss"].to_list(),
            name=label,
            mode="lines",
            line=dict(width=2.5, color=CATEGORICAL[k % len(CATEGORICAL)]),
        ))
    fig.update_layout(xaxis_title="Epoch", yaxis_title="Loss", yaxis_type="log")
    return apply_theme(fig)


# =============================================================================
# GEOMETRY
# =============================================================================

def plot_coverage(coverage: pl.DataFrame) -> go.Figure:
    """Fraction of ground-truth grid points inside the representation window."""
    fig = create_figure("Grid point coverage", "Jittered proposals around random boxes", height=400)
    for k, mapping in enumerate(coverage["mapping"].unique(maintain_order=True).to_list()):
        rows = coverage.filter(pl.col("mapping") == mapping)
        fig.add_trace(go.Bar(
            x=rows["grid"].to_list(),
            y=[100 * c for c in rows["coverage"].to_list()],
            name=mapping,
            marker_color=CATEGORICAL[k % len(CATEGORICAL)],
            hovertemplate=f"<b>{mapping}</b> %{{x}}: %{{y:.1f}}%<extra></extra>",
        ))
    fig.update_layout(xaxis_title="Grid", yaxis_title="Coverage (%)", barmode="group")
    return apply_theme(fig)


def plot_heatmaps(probabilities: np.ndarray, titles: Sequence[str] | None = None) -> go.Figure:
    """One panel per grid point heatmap, (n, H, W) probabilities."""
    n = probabilities.shape[0]
    cols = min(n, 3)
    rows = (n + cols - 1) // cols
    fig = create_subplots(rows, cols, titles=list(titles) if titles else [f"point {i}" for i in range(n)])
    scale = [[k / (len(SEQUENTIAL) - 1), c] for k, c in enumerate(SEQUENTIAL)]
    for i in range(n):
        fig.add_trace(
            go.Heatmap(z=probabilities[i], colorscale=scale, zmin=0.0, zmax=1.0, showscale=i == 0),
            row=i // cols + 1, col=i % cols + 1,
        )
    fig.update_yaxes(autorange="reversed")
    fig.update_layout(height=300 * rows, width=300 * cols + 100)
    return apply_theme(fig)
