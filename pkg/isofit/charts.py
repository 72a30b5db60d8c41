# isofit/charts.py
from __future__ import annotations

from pathlib import Path
from typing import Union

import altair as alt
import pandas as pd

from .ui import SERIES_COLORS, chart_frame, stage_scale


def _no_data(msg: str) -> alt.Chart:
    c = alt.Chart(pd.DataFrame({"msg": [msg]})).mark_text(size=14).encode(text="msg:N")
    return chart_frame(c)


def loss_curve(log: pd.DataFrame) -> alt.Chart:
    """
    Expects the loss log columns: iter, stage, loss_total, chamfer (NaN where not sampled).
    Loss on a log scale, one color per stage; chamfer samples as points.
    """
    if log is None or log.empty:
        return _no_data("No iterations")

    df = log.copy()
    df["stage"] = df["stage"].astype(str)
    base = alt.Chart(df).encode(x=alt.X("iter:Q", title="iteration"))
    loss = base.mark_line().encode(
        y=alt.Y("loss_total:Q", title="loss", scale=alt.Scale(type="log")),
        color=alt.Color("stage:N", title="stage", scale=stage_scale(df["stage"].nunique())),
        tooltip=[alt.Tooltip("iter:Q"), alt.Tooltip("loss_total:Q", format=".4g")],
    )
    sampled = df.dropna(subset=["chamfer"])
    if sampled.empty:
        return chart_frame(loss, title="Training loss")
    chamfer = (
        alt.Chart(sampled)
        .mark_point(color=SERIES_COLORS["chamfer"], filled=True)
        .encode(
            x="iter:Q",
            y=alt.Y("chamfer:Q", title="chamfer"),
            tooltip=[alt.Tooltip("iter:Q"), alt.Tooltip("chamfer:Q", format=".4g")],
        )
    )
    return chart_frame(alt.layer(loss, chamfer).resolve_scale(y="independent"), title="Training loss")


def trace_curve(trace: pd.DataFrame) -> alt.Chart:
    """
    Expects: generation (int), best_loss, sigma.
    """
    if trace is None or trace.empty:
        return _no_data("No generations")

    c = (
        alt.Chart(trace)
        .transform_fold(["best_loss", "sigma"], as_=["series", "value"])
        .mark_line(point=False)
        .encode(
            x=alt.X("generation:Q", title="generation"),
            y=alt.Y("value:Q", title=None, scale=alt.Scale(type="log")),
            color=alt.Color("series:N", title=None,
                            scale=alt.Scale(domain=["best_loss", "sigma"],
                                            range=[SERIES_COLORS["best_loss"], SERIES_COLORS["sigma"]])),
            tooltip=[alt.Tooltip("generation:Q"), alt.Tooltip("series:N"), alt.Tooltip("value:Q", format=".4g")],
        )
    )
    return chart_frame(c, title="CMA-ES trace")


def save_chart(chart: alt.Chart, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chart.save(str(path), format="html")
    return path
