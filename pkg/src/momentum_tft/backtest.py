"""Portfolio construction, transaction costs, performance metrics and baselines."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .features import TRADING_DAYS, FeaturePanel
from .model import POSITION_CAP
from .training import SIGMA_TARGET, captured_returns

COST_SWEEP_BPS = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
METRIC_COLUMNS = ("ann_return", "ann_vol", "sharpe", "downside_dev", "sortino", "mdd", "calmar",
                  "pct_positive", "avg_profit_loss")


class BacktestError(ValueError):
    pass


@dataclass(frozen=True)
class PositionSeries:
    asset_id: str
    positions: pd.Series  # indexed by date, values in (-1, 1)

    def __post_init__(self):
        if (self.positions.abs() >= 1.0).any():
            raise BacktestError(f"{self.asset_id}: positions must lie strictly inside (-1, 1)")


@dataclass(frozen=True)
class CostModel:
    bps: float = 0.0

    def __post_init__(self):
        if self.bps < 0:
            raise BacktestError(f"cost must be non-negative, got {self.bps} bps")

    @property
    def rate(self) -> float:
        return self.bps * 1e-4


@dataclass
class BacktestReport:
    """Performance metric set; ``None`` marks a metric whose denominator vanished."""

    ann_return: float
    ann_vol: float
    sharpe: float | None
    downside_dev: float | None
    sortino: float | None
    mdd: float
    calmar: float | None
    pct_positive: float
    avg_profit_loss: float | None

    def as_row(self) -> dict[str, float | None]:
        return asdict(self)


def _as_position_map(positions) -> dict[str, pd.Series]:
    if isinstance(positions, Mapping):
        return {k: (v.positions if isinstance(v, PositionSeries) else v) for k, v in positions.items()}
    return {p.asset_id: p.positions for p in positions}


def apply_costs(returns: np.ndarray, positions: np.ndarray, sigma: np.ndarray,
                sigma_target: float = SIGMA_TARGET, cost: CostModel = CostModel()) -> np.ndarray:
    """``R - C * sigma_tgt * |X_t/sigma_t - X_{t-1}/sigma_{t-1}|`` with ``X_{-1} = 0``."""
    returns = np.asarray(returns, dtype=float)
    if cost.rate == 0.0:
        return returns.copy()
    scaled = np.asarray(positions, dtype=float) / np.asarray(sigma, dtype=float)
    turnover = np.abs(np.diff(scaled, prepend=0.0))
    return returns - cost.rate * sigma_target * turnover


def asset_returns(pos: pd.Series, panel: FeaturePanel, sigma_target: float = SIGMA_TARGET,
                  cost: CostModel = CostModel()) -> pd.Series:
    frame = panel.frame.loc[pos.index]
    sigma = frame["sigma_daily"].to_numpy() * math.sqrt(TRADING_DAYS)
    x = pos.to_numpy(dtype=float)
    raw = captured_returns(x, frame["fwd_ret"].to_numpy(), sigma, sigma_target)
    return pd.Series(apply_costs(raw, x, sigma, sigma_target, cost), index=pos.index, name=panel.asset_id)


def portfolio_returns(positions, panels: Sequence[FeaturePanel], sigma_target: float = SIGMA_TARGET,
                      cost: CostModel = CostModel()) -> pd.Series:
    """Equal-weight mean of per-asset captured returns over the assets live on each date."""
    by_id = {p.asset_id: p for p in panels}
    cols = {}
    for asset, pos in _as_position_map(positions).items():
        if asset not in by_id:
            raise BacktestError(f"no panel for {asset}")
        if len(pos):
            cols[asset] = asset_returns(pos, by_id[asset], sigma_target, cost)
    if not cols:
        raise BacktestError("no live assets")
    table = pd.DataFrame(cols).sort_index()
    out = table.mean(axis=1, skipna=True).dropna()
    out.name = "portfolio"
    return out


def max_drawdown(returns: np.ndarray) -> float:
    """Largest peak-to-trough fall of ``prod(1 + r)``, as a fraction of the peak (start value 1)."""
    curve = np.cumprod(1.0 + np.asarray(returns, dtype=float))
    peak = np.maximum.accumulate(np.concatenate([[1.0], curve]))[1:]
    return float(np.max(1.0 - curve / peak, initial=0.0))


def _ratio(num: float, den: float) -> float | None:
    return float(num / den) if den > 0 else None


def _std(x: np.ndarray) -> float:
    # a constant series has exactly zero spread; np.std would leave rounding noise
    return float(x.std()) if np.ptp(x) > 0 else 0.0


def compute_metrics(returns) -> BacktestReport:
    r = np.asarray(returns, dtype=float)
    if len(r) < 2:
        raise BacktestError("metrics need at least two returns")
    ann_ret = TRADING_DAYS * r.mean()
    ann_vol = math.sqrt(TRADING_DAYS) * _std(r)
    neg, pos = r[r < 0], r[r > 0]
    downside = math.sqrt(TRADING_DAYS) * _std(neg) if len(neg) else 0.0
    mdd = max_drawdown(r)
    avg_pl = float(pos.mean() / abs(neg.mean())) if len(pos) and len(neg) else None
    return BacktestReport(
        ann_return=float(ann_ret), ann_vol=float(ann_vol), sharpe=_ratio(ann_ret, ann_vol),
        downside_dev=float(downside) if len(neg) else None, sortino=_ratio(ann_ret, downside),
        mdd=mdd, calmar=_ratio(ann_ret, mdd), pct_positive=float(len(pos) / len(r)), avg_profit_loss=avg_pl,
    )


def rescale_to_target_vol(returns, sigma_target: float = SIGMA_TARGET):
    """Multiply by one constant so the full-sample annualised vol equals ``sigma_target``."""
    r = np.asarray(returns, dtype=float)
    vol = math.sqrt(TRADING_DAYS) * r.std()
    if not vol > 0:
        raise BacktestError("cannot rescale a series with zero volatility")
    scaled = r * (sigma_target / vol)
    return pd.Series(scaled, index=returns.index) if isinstance(returns, pd.Series) else scaled


def baseline_long_only(panels: Sequence[FeaturePanel], start=None, end=None) -> dict[str, PositionSeries]:
    out = {}
    for p in panels:
        dates = _window_dates(p, start, end)
        out[p.asset_id] = PositionSeries(p.asset_id, pd.Series(POSITION_CAP, index=dates))
    return out


def baseline_tsmom(panels: Sequence[FeaturePanel], start=None, end=None) -> dict[str, PositionSeries]:
    """Sign of the trailing 252-day return; a flat year gives a zero position."""
    out = {}
    for p in panels:
        dates = _window_dates(p, start, end)
        signal = np.sign(p.frame.loc[dates, "ret_252"].to_numpy())
        out[p.asset_id] = PositionSeries(p.asset_id, pd.Series(signal * POSITION_CAP, index=dates))
    return out


def _window_dates(panel: FeaturePanel, start, end) -> pd.DatetimeIndex:
    dates = panel.dates
    mask = np.ones(len(dates), dtype=bool)
    if start is not None:
        mask &= dates >= pd.Timestamp(start)
    if end is not None:
        mask &= dates < pd.Timestamp(end)
    return dates[mask]


def cost_sweep(positions, panels: Sequence[FeaturePanel], bps_values=COST_SWEEP_BPS,
               sigma_target: float = SIGMA_TARGET) -> dict[float, BacktestReport]:
    return {bps: compute_metrics(portfolio_returns(positions, panels, sigma_target, CostModel(bps)))
            for bps in bps_values}


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


def write_report(rows: Sequence[tuple[str, str, BacktestReport]], csv_path: str | Path,
                 json_path: str | Path | None = None) -> None:
    """One row per (strategy, scenario) with the nine metric columns; blanks mark undefined metrics."""
    lines = [",".join(("strategy", "scenario") + METRIC_COLUMNS)]
    for strategy, scenario, rep in rows:
        row = rep.as_row()
        lines.append(",".join([strategy, scenario] + [_fmt(row[c]) for c in METRIC_COLUMNS]))
    Path(csv_path).write_text("\n".join(lines) + "\n")
    if json_path is not None:
        payload = [{"strategy": s, "scenario": sc, **rep.as_row()} for s, sc, rep in rows]
        Path(json_path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def equity_curve(returns: pd.Series, sigma_target: float | None = SIGMA_TARGET, start_value: float = 100.0) -> pd.Series:
    """Compounded value, optionally after rescaling to ``sigma_target``.

    The return stamped on date t is earned over (t, t+1], so the curve reads
    ``start_value`` on the first date and excludes the last date's return.
    """
    r = rescale_to_target_vol(returns, sigma_target) if sigma_target else returns
    growth = (1.0 + r).cumprod().shift(1, fill_value=1.0)
    return start_value * growth


def write_equity_curves(curves: Mapping[str, pd.Series], path: str | Path) -> None:
    lines = ["date,strategy,cumulative_value"]
    for name, curve in curves.items():
        lines += [f"{d.strftime('%Y-%m-%d')},{name},{float(v)!r}" for d, v in zip(curve.index, curve.to_numpy(dtype=float))]
    Path(path).write_text("\n".join(lines) + "\n")
