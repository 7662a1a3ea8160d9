"""
Plotly theme for gridloc figures.

Registered as the ``gridloc`` template and made the default on import.
"""

from pathlib import Path

import plotly.graph_objects as go
import plotly.io as pio
from plotly.subplots import make_subplots

# =============================================================================
# COLOR PALETTES
# =============================================================================

COLORS = {
    "primary": "#1d3557",
    "neutral": "#6c757d",
    "background": "#ffffff",
    "grid": "#e9ecef",
    "text": "#212529",
}

# One color per shape category, fixed across figures
CATEGORY_COLORS = {
    "bar": "#e76f51",
    "square": "#2a9d8f",
    "ellipse": "#8d5fd3",
    "disc": "#e9c46a",
}

# Runs and variants, in report order
CATEGORICAL = ["#1d3557", "#e63946", "#2a9d8f", "#f4a261", "#8d5fd3", "#457b9d"]

# Heatmap probabilities, 0 -> 1
SEQUENTIAL = ["#ffffff", "#d8e2f3", "#a8c0e6", "#6d93cf", "#3a63a8", "#1d3557"]


# =============================================================================
# THEME CONFIGURATION
# =============================================================================

_AXIS = dict(showgrid=True, gridcolor=COLORS["grid"], zeroline=False, tickfont=dict(size=11))

pio.templates["gridloc"] = go.layout.Template(
    layout=go.Layout(
        colorway=CATEGORICAL,
        paper_bgcolor=COLORS["background"],
        plot_bgcolor=COLORS["background"],
        font=dict(family="DejaVu Sans, Helvetica, sans-serif", size=12, color=COLORS["text"]),
        title=dict(font=dict(size=18), x=0.02, xanchor="left"),
        xaxis=dict(_AXIS, showline=True, linecolor=COLORS["grid"]),
        yaxis=_AXIS,
        legend=dict(orientation="h", yanchor="bottom", y=1.02, x=0.0),
        margin=dict(l=60, r=30, t=90, b=55),
    )
)
pio.templates.default = "gridloc"


# =============================================================================
# HELPER FUNCTIONS
# =============================================================================

def apply_theme(fig: go.Figure) -> go.Figure:
    fig.update_layout(template="gridloc")
    return fig


def create_figure(title: str = "", subtitle: str = "", height: int = 450, width: int = 850) -> go.Figure:
    """Themed empty figure; the subtitle renders as a smaller second title line."""
    text = f"<b>{title}</b>" + (f"<br><sup>{subtitle}</sup>" if subtitle else "")
    return go.Figure(layout=dict(template="gridloc", height=height, width=width, title=dict(text=text)))


def create_subplots(rows: int, cols: int, titles: list[str] | None = None, **kwargs) -> go.Figure:
    fig = make_subplots(rows=rows, cols=cols, subplot_titles=titles, **kwargs)
    return apply_theme(fig)


def save_figure(fig: go.Figure, filename: str | Path, format: str = "html") -> Path:
    """Write ``filename.<format>``; html embeds plotly.js from the CDN, png/svg go through kaleido."""
    path = Path(f"{filename}.{format}")
    if format == "html":
        fig.write_html(path, include_plotlyjs="cdn")
    elif format == "png":
        fig.write_image(path, scale=2)
    elif format == "svg":
        fig.write_image(path)
    else:
        raise ValueError(f"unsupported figure format {format!r} (html, png, svg)")
    return path
