# isofit/ui.py
from __future__ import annotations

import altair as alt
import click

BASE_FONT = "Inter, system-ui, -apple-system, Segoe UI, Roboto, Helvetica, Arial"

# one color per plotted series
SERIES_COLORS = {
    "chamfer": "#FF6B6B",
    "best_loss": "#45B7D1",
    "sigma": "#6c757d",
}
STAGE_COLORS = ["#4ECDC4", "#45B7D1", "#2C7DA0", "#1B4965"]

# ============================================================================
# CHART STYLING
# ============================================================================

def stage_scale(n_stages: int) -> alt.Scale:
    """Color scale for coarse-to-fine stages; cycles past the fourth stage."""
    return alt.Scale(range=[STAGE_COLORS[i % len(STAGE_COLORS)] for i in range(max(1, n_stages))])


def chart_frame(c, *, title: str | None = None, height: int = 300, width: int = 640):
    """
    Input: any altair chart (single or layered)
    Output: sized, fonted, zoomable chart ready for HTML export
    """
    if title:
        c = c.properties(title=title)
    return (
        c.properties(width=width, height=height)
         .configure_axis(grid=True, tickSize=3, labelFont=BASE_FONT, titleFont=BASE_FONT)
         .configure_legend(labelFont=BASE_FONT, titleFont=BASE_FONT, orient="top")
         .configure_title(font=BASE_FONT, anchor="start")
         .interactive()
    )

# ============================================================================
# CONSOLE MESSAGES
# ============================================================================

def show_success(message: str) -> None:
    click.secho(f"ok: {message}", fg="green")


def show_error(message: str) -> None:
    click.secho(f"error: {message}", fg="red", err=True)


def show_info(message: str) -> None:
    click.secho(message)


def show_warning(message: str) -> None:
    click.secho(f"warning: {message}", fg="yellow", err=True)
