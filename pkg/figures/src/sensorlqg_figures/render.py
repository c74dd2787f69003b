"""Turn the experiment CSVs into figures.

Two kinds are understood, keyed to the CSV schemas the sensorlqg CLI
emits:

- ``fig2``: columns ``e_hat,f1,f2``; a two-panel plot of the expected-cost
  decomposition terms against the reported effort.
- ``fig3``: columns ``e,e_hat,expected_J,j_star``; one expected-cost curve
  per distinct true effort plus the truthful-cost curve.

Rendering never alters or reorders the data: the plotted point sets are
exactly the CSV rows in file order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

__all__ = ["PlotSpec", "RenderError", "render", "read_columns", "REQUIRED_COLUMNS"]

REQUIRED_COLUMNS = {
    "fig2": ("e_hat", "f1", "f2"),
    "fig3": ("e", "e_hat", "expected_J", "j_star"),
}


class RenderError(ValueError):
    """Bad plot request: unknown kind, missing column, or no data."""


@dataclass(frozen=True)
class PlotSpec:
    """What to draw: an input CSV, an output image, and the figure kind."""

    input_csv: str
    output_image: str
    kind: str
    title: str | None = None

    def __post_init__(self):
        if self.kind not in REQUIRED_COLUMNS:
            raise RenderError(f"unknown figure kind: {self.kind!r}")


def read_columns(path: str, required: tuple[str, ...]) -> dict[str, list[float]]:
    """Read the required CSV columns as floats, preserving row order."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in required:
            if col not in header:
                raise RenderError(f"missing column: {col}")
        data = {col: [] for col in required}
        for row in reader:
            for col in required:
                data[col].append(float(row[col]))
    if not data[required[0]]:
        raise RenderError("no data rows")
    return data


def _build_fig2(data: dict[str, list[float]], title: str | None):
    fig, (top, bottom) = plt.subplots(2, 1, sharex=True, figsize=(6.4, 6.4))
    top.plot(data["e_hat"], data["f1"], marker=".", color="tab:blue")
    top.set_ylabel("f1 (fixed-noise term)")
    bottom.plot(data["e_hat"], data["f2"], marker=".", color="tab:orange")
    bottom.set_ylabel("f2 (strategic-noise gain)")
    bottom.set_xlabel("reported effort")
    for ax in (top, bottom):
        ax.set_xscale("log")
        ax.grid(True, alpha=0.3)
    top.set_title(title or "Expected-cost decomposition vs reported effort")
    fig.tight_layout()
    return fig


def _build_fig3(data: dict[str, list[float]], title: str | None):
    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    # Group rows by true effort, keeping first-seen order and row order
    # within each group.
    groups: dict[float, list[int]] = {}
    for idx, e in enumerate(data["e"]):
        groups.setdefault(e, []).append(idx)
    for e, rows in groups.items():
        ax.plot(
            [data["e_hat"][i] for i in rows],
            [data["expected_J"][i] for i in rows],
            marker=".",
            label=f"E[J], e = {e:g}",
        )
    first = next(iter(groups.values()))
    ax.plot(
        [data["e_hat"][i] for i in first],
        [data["j_star"][i] for i in first],
        color="black",
        linestyle="--",
        label="J* (truthful)",
    )
    ax.set_xscale("log")
    ax.set_xlabel("reported effort")
    ax.set_ylabel("expected cost")
    ax.grid(True, alpha=0.3)
    ax.legend()
    ax.set_title(title or "Expected cost vs reported effort")
    fig.tight_layout()
    return fig


def build_figure(spec: PlotSpec):
    """Build the matplotlib figure for a plot spec without saving it."""
    data = read_columns(spec.input_csv, REQUIRED_COLUMNS[spec.kind])
    if spec.kind == "fig2":
        return _build_fig2(data, spec.title)
    return _build_fig3(data, spec.title)


def render(spec: PlotSpec) -> str:
    """Render the spec to its output image and return the output path."""
    fig = build_figure(spec)
    try:
        fig.savefig(spec.output_image)
    finally:
        plt.close(fig)
    return spec.output_image
