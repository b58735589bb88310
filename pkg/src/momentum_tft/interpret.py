"""Variable-importance and attention exports from a trained TFT.

Both read the diagnostics returned by :func:`model.tft_forward` with dropout
off; nothing here touches the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .features import FeaturePanel
from .model import ModelParams, tft_forward
from .tensorgrad import ContractError
from .training import eval_windows


class UnsupportedModelError(ValueError):
    pass


@dataclass
class VariableImportanceRecord:
    asset_id: str
    weights: pd.DataFrame  # index date, one column per feature; rows sum to 1

    def average(self, start=None, end=None) -> pd.Series:
        """Unweighted mean over the dates in ``[start, end)``."""
        w = self.weights
        if start is not None:
            w = w[w.index >= pd.Timestamp(start)]
        if end is not None:
            w = w[w.index < pd.Timestamp(end)]
        return w.mean(axis=0)


@dataclass
class AttentionMap:
    asset_id: str
    pred_date: pd.Timestamp
    dates: pd.DatetimeIndex      # the tau window dates, oldest first
    weights: np.ndarray          # head-averaged last row, [tau]
    per_head: np.ndarray         # [h, tau]
    matrix: np.ndarray | None = None  # head-averaged [tau, tau]

    @property
    def lags(self) -> np.ndarray:
        """Days back from ``pred_date`` (0 = the prediction date itself)."""
        return np.arange(len(self.weights))[::-1]


def _require_tft(params: ModelParams) -> None:
    if params.dims.kind != "tft":
        raise UnsupportedModelError(f"interpretability requires TFT, got a {params.dims.kind} model")


def extract_variable_importance(params: ModelParams, panels: Sequence[FeaturePanel], start=None, end=None,
                                batch: int = 64) -> list[VariableImportanceRecord]:
    """Selection weights ``eta_t`` for each date in ``[start, end)``, from block windows."""
    _require_tft(params)
    tau = params.dims.seq_len
    records = []
    for panel in panels:
        lo = panel.dates[0] if start is None else pd.Timestamp(start)
        hi = panel.dates[-1] + pd.Timedelta(days=1) if end is None else pd.Timestamp(end)
        jobs = eval_windows(panel, tau, lo, hi, "block")
        if not jobs:
            continue
        feats = panel.features()
        rows_out, eta_out = [], []
        for k in range(0, len(jobs), batch):
            chunk = jobs[k:k + batch]
            x = np.stack([feats[rows] for rows, _ in chunk])
            _, diag = tft_forward(x, np.full(len(chunk), panel.class_code), params)
            for (rows, keep), eta in zip(chunk, diag["vsn_weights"]):
                rows_out.append(rows[keep])
                eta_out.append(eta[keep])
        frame = pd.DataFrame(np.concatenate(eta_out), index=panel.dates[np.concatenate(rows_out)],
                             columns=list(panel.feature_names))
        frame.index.name = "date"
        records.append(VariableImportanceRecord(panel.asset_id, frame))
    return records


def extract_attention(params: ModelParams, panel: FeaturePanel, date, full_matrix: bool = False) -> AttentionMap:
    """Attention of the window of ``tau`` rows ending at ``date`` (last row, heads averaged)."""
    _require_tft(params)
    tau = params.dims.seq_len
    date = pd.Timestamp(date)
    if date not in panel.dates:
        raise ContractError(f"{panel.asset_id}: {date.date()} is not a panel date")
    end = panel.dates.get_loc(date)
    if end + 1 < tau:
        raise ContractError(f"{panel.asset_id}: only {end + 1} rows up to {date.date()}, window needs {tau}")
    rows = np.arange(end - tau + 1, end + 1)
    _, diag = tft_forward(panel.features()[rows][None], [panel.class_code], params)
    att = diag["attention"][0]                      # [h, tau, tau]
    mean = att.mean(axis=0)
    return AttentionMap(panel.asset_id, date, panel.dates[rows], mean[-1].copy(), att[:, -1].copy(),
                        mean if full_matrix else None)


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def write_variable_importance(records: Sequence[VariableImportanceRecord], path: str | Path) -> None:
    """Long CSV ``symbol,date,feature,weight``."""
    lines = ["symbol,date,feature,weight"]
    for rec in records:
        dates = rec.weights.index.strftime("%Y-%m-%d")
        values = rec.weights.to_numpy()
        for i, d in enumerate(dates):
            for j, feat in enumerate(rec.weights.columns):
                lines.append(f"{rec.asset_id},{d},{feat},{float(values[i, j])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def importance_summary(records: Sequence[VariableImportanceRecord], start=None, end=None) -> pd.DataFrame:
    """Average weight per feature: one row per asset plus an ``ALL`` row pooled over every asset-date."""
    rows = {rec.asset_id: rec.average(start, end) for rec in records}
    pooled = pd.concat([rec.weights for rec in records])
    if start is not None:
        pooled = pooled[pooled.index >= pd.Timestamp(start)]
    if end is not None:
        pooled = pooled[pooled.index < pd.Timestamp(end)]
    rows["ALL"] = pooled.mean(axis=0)
    table = pd.DataFrame(rows).T
    table.index.name = "symbol"
    return table


def write_importance_summary(table: pd.DataFrame, path: str | Path) -> None:
    table.to_csv(path, float_format="%.17g")


def write_attention(maps: Sequence[AttentionMap], path: str | Path, per_head: bool = True) -> None:
    """CSV ``symbol,pred_date,lag_days,weight`` (head average), plus ``head`` rows when requested.

    The ``head`` column is ``mean`` for the average and the head index otherwise.
    """
    lines = ["symbol,pred_date,lag_days,weight,head"]
    for amap in maps:
        d = amap.pred_date.strftime("%Y-%m-%d")
        lags = amap.lags
        for lag, w in zip(lags, amap.weights):
            lines.append(f"{amap.asset_id},{d},{lag},{float(w)!r},mean")
        if per_head:
            for h, row in enumerate(amap.per_head):
                for lag, w in zip(lags, row):
                    lines.append(f"{amap.asset_id},{d},{lag},{float(w)!r},{h}")
    Path(path).write_text("\n".join(lines) + "\n")
