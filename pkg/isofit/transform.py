# isofit/transform.py
from __future__ import annotations

from pathlib import Path
from typing import Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np
import pandas as pd

LOSS_COLUMNS = ["iter", "stage", "loss_total", "loss_sdf", "loss_eik", "chamfer"]
TRACE_COLUMNS = ["generation", "best_loss", "sigma"]
METRIC_COLUMNS = ["metric", "value"]

FLOAT_FORMAT = "%.17g"

# ---- Small helpers ----------------------------------------------------------

def _empty_df(columns: List[str]) -> pd.DataFrame:
    return pd.DataFrame({c: pd.Series(dtype="float64") for c in columns}).astype(
        {c: "int64" for c in columns if c in {"iter", "stage", "generation"}}
    )

# ---- Public transformations --------------------------------------------------

def loss_log_frame(rows: Sequence[Mapping]) -> pd.DataFrame:
    """
    Input:
      rows of dicts with the LOSS_COLUMNS keys; chamfer may be missing / None
    Output:
      DataFrame in LOSS_COLUMNS order, chamfer NaN where not sampled
    """
    if not rows:
        return _empty_df(LOSS_COLUMNS)
    df = pd.DataFrame.from_records(rows)
    if "chamfer" not in df.columns:
        df["chamfer"] = np.nan
    df = df[LOSS_COLUMNS].copy()
    df["chamfer"] = pd.to_numeric(df["chamfer"], errors="coerce")
    return df.astype({"iter": "int64", "stage": "int64"})


def trace_frame(best_losses: Sequence[float], sigmas: Sequence[float]) -> pd.DataFrame:
    if len(best_losses) == 0:
        return _empty_df(TRACE_COLUMNS)
    return pd.DataFrame({
        "generation": np.arange(1, len(best_losses) + 1, dtype=np.int64),
        "best_loss": np.asarray(best_losses, dtype=np.float64),
        "sigma": np.asarray(sigmas, dtype=np.float64),
    })


def metrics_frame(rows: Iterable[Tuple[str, object]]) -> pd.DataFrame:
    rows = list(rows)
    if not rows:
        return pd.DataFrame({"metric": [], "value": []})
    return pd.DataFrame(rows, columns=METRIC_COLUMNS)


def stage_summary(log: pd.DataFrame) -> pd.DataFrame:
    """
    Output:
      one row per stage: stage, iters, first_loss, last_loss, ratio, last_chamfer
    """
    if log is None or log.empty:
        return pd.DataFrame({"stage": [], "iters": [], "first_loss": [], "last_loss": [], "ratio": [],
                             "last_chamfer": []})
    g = log.sort_values("iter").groupby("stage", sort=True)
    out = pd.DataFrame({
        "iters": g.size(),
        "first_loss": g["loss_total"].first(),
        "last_loss": g["loss_total"].last(),
        "last_chamfer": g["chamfer"].last(),   # last non-null sample
    }).reset_index()
    out["ratio"] = out["last_loss"] / out["first_loss"]
    return out[["stage", "iters", "first_loss", "last_loss", "ratio", "last_chamfer"]]


def window_means(losses: Sequence[float], window: int = 50) -> pd.Series:
    s = pd.Series(np.asarray(losses, dtype=np.float64))
    if s.empty:
        return s
    return s.groupby(np.arange(len(s)) // window).mean()


def is_trending_down(losses: Sequence[float], window: int = 50, tolerance: float = 0.05) -> bool:
    """Consecutive window means never rise by more than `tolerance` (relative)."""
    means = window_means(losses, window).to_numpy()
    if len(means) < 2:
        return True
    return bool(np.all(means[1:] <= means[:-1] * (1.0 + tolerance)))


def write_csv(df: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Deterministic CSV: LF endings, round-trip float precision, NaN as blank."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="", lineterminator="\n")
    return path
