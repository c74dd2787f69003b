"""Figure rendering for sensorlqg CSV artifacts."""

from .render import PlotSpec, RenderError, build_figure, read_columns, render

__version__ = "0.1.0"
