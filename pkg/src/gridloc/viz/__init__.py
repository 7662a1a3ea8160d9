"""Visualization modules with Plotly."""

from . import theme, plots

__all__ = ["theme", "plots"]
