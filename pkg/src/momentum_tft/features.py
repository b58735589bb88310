"""Model inputs: ex-ante volatility, normalised returns, MACD and assembled panels."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np
import pandas as pd

from .marketdata import ASSET_CLASS_CODES, ASSET_CLASSES, PriceSeries

if TYPE_CHECKING:
    from .cpd import CpdFeatures

VOL_SPAN = 60
VOL_WARMUP = 60
TRADING_DAYS = 252
RETURN_HORIZONS = (1, 21, 63, 126, 252)
CPD_LBWS = (21, 126)
MACD_PRICE_STD_WINDOW = 63
MACD_SIGNAL_STD_WINDOW = 252


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class MacdSpec:
    short: int
    long: int

    def __post_init__(self):
        if not 0 < self.short < self.long:
            raise ValueError(f"MACD needs 0 < short < long, got ({self.short}, {self.long})")

    @property
    def name(self) -> str:
        return f"macd_{self.short}_{self.long}"


DEFAULT_MACD = (MacdSpec(8, 24), MacdSpec(16, 48), MacdSpec(32, 96))


@dataclass(frozen=True)
class VolSeries:
    sigma_daily: pd.Series  # NaN during warm-up

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.sigma_daily.index

    @property
    def sigma_annualised(self) -> pd.Series:
        return self.sigma_daily * math.sqrt(TRADING_DAYS)


def daily_returns(prices: pd.Series) -> pd.Series:
    return prices / prices.shift(1) - 1.0


def _guarded_ratio(num: pd.Series, den: pd.Series) -> pd.Series:
    # x/0 is undefined, except an exactly-zero numerator which stays 0
    out = num / den.where(den > 0)
    return out.mask((num == 0) & den.notna(), 0.0)


def ewm_volatility(returns: pd.Series, span: int = VOL_SPAN, warmup: int = VOL_WARMUP) -> VolSeries:
    """Causal EWM standard deviation of daily returns (``alpha = 2/(span+1)``).

    Dates with fewer than ``warmup`` observations so far are NaN.
    """
    sigma = returns.ewm(span=span, min_periods=warmup, adjust=True).std()
    sigma = sigma.where(sigma >= 0)
    return VolSeries(sigma.rename("sigma_daily"))


def normalized_return(prices: pd.Series, horizon: int, vol: VolSeries) -> pd.Series:
    """``(p_t / p_{t-h} - 1) / (sigma_t * sqrt(h))`` with daily sigma."""
    ret = prices / prices.shift(horizon) - 1.0
    sigma = vol.sigma_daily.reindex(prices.index)
    return _guarded_ratio(ret, sigma * math.sqrt(horizon)).rename(f"ret_{horizon}")


def macd_halflife(timescale: int) -> float:
    return math.log(0.5) / math.log(1.0 - 1.0 / timescale)


def macd(prices: pd.Series, spec: MacdSpec) -> pd.Series:
    """Volatility-normalised MACD signal.

    ``q_t = (ewm_S(p) - ewm_L(p)) / std_63(p)`` and the output is
    ``q_t / std_252(q)``; every statistic is trailing.
    """
    short = prices.ewm(halflife=macd_halflife(spec.short)).mean()
    long = prices.ewm(halflife=macd_halflife(spec.long)).mean()
    crossover = short - long
    # constant stretches leave last-bit noise in the EWM difference
    crossover = crossover.mask(crossover.abs() <= 1e-12 * prices.abs(), 0.0)
    q = _guarded_ratio(crossover, prices.rolling(MACD_PRICE_STD_WINDOW).std())
    return _guarded_ratio(q, q.rolling(MACD_SIGNAL_STD_WINDOW).std()).rename(spec.name)


def cpd_column_names(lbws: Sequence[int] = CPD_LBWS) -> list[str]:
    names = []
    for lbw in lbws:
        names += [f"cpd_nu_{lbw}", f"cpd_gamma_{lbw}"]
    return names


def feature_names(macd_specs: Sequence[MacdSpec] = DEFAULT_MACD, lbws: Sequence[int] = ()) -> list[str]:
    return [f"ret_{h}" for h in RETURN_HORIZONS] + [s.name for s in macd_specs] + cpd_column_names(lbws)


@dataclass
class FeaturePanel:
    """One asset's model inputs, indexed by date.

    ``frame`` holds the feature columns followed by ``fwd_ret`` (next-day
    simple return, the training target) and ``sigma_daily``.  Every row is
    fully defined.
    """

    asset_id: str
    asset_class: str
    frame: pd.DataFrame
    feature_names: tuple[str, ...]

    @property
    def class_code(self) -> int:
        return ASSET_CLASS_CODES[self.asset_class]

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.frame.index

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def features(self) -> np.ndarray:
        return self.frame[list(self.feature_names)].to_numpy(dtype=float)

    def fwd_ret(self) -> np.ndarray:
        return self.frame["fwd_ret"].to_numpy(dtype=float)

    def sigma_annualised(self) -> np.ndarray:
        return self.frame["sigma_daily"].to_numpy(dtype=float) * math.sqrt(TRADING_DAYS)

    def __len__(self) -> int:
        return len(self.frame)


def build_feature_panel(series: PriceSeries, specs: Sequence[MacdSpec] = DEFAULT_MACD,
                        cpd: Iterable[CpdFeatures] | None = None) -> FeaturePanel:
    """Assemble the feature panel for one asset; ``cpd`` adds one (nu, gamma) pair per lookback."""
    prices = series.prices
    if len(prices) == 0:
        raise AlignmentError(f"{series.asset_id}: empty price series")
    vol = ewm_volatility(daily_returns(prices))
    cols: dict[str, pd.Series] = {}
    for h in RETURN_HORIZONS:
        cols[f"ret_{h}"] = normalized_return(prices, h, vol)
    for spec in specs:
        cols[spec.name] = macd(prices, spec)
    lbws: list[int] = []
    for item in sorted(cpd or (), key=lambda c: c.lbw):
        lbw, frame = item.lbw, item.frame
        extra = frame.index.difference(prices.index)
        if len(extra):
            raise AlignmentError(f"{series.asset_id}: CPD lbw={lbw} has {len(extra)} dates not in the price series, "
                                 f"first {extra[0].date()}")
        cols[f"cpd_nu_{lbw}"] = frame["nu"].reindex(prices.index)
        cols[f"cpd_gamma_{lbw}"] = frame["gamma"].reindex(prices.index)
        lbws.append(lbw)
    names = tuple(feature_names(specs, lbws))
    frame = pd.DataFrame({n: cols[n] for n in names}, index=prices.index)
    frame["fwd_ret"] = prices.shift(-1) / prices - 1.0
    frame["sigma_daily"] = vol.sigma_daily
    frame = frame.replace([np.inf, -np.inf], np.nan).dropna()
    # zero-vol rows cannot be scaled in the captured-return formula
    frame = frame[frame["sigma_daily"] > 0]
    frame.index.name = "date"
    return FeaturePanel(series.asset_id, series.asset_class, frame, names)


PANEL_COLUMNS = feature_names(DEFAULT_MACD, CPD_LBWS) + ["asset_class", "fwd_ret", "sigma_daily"]


def write_panel(panel: FeaturePanel, path: str | Path) -> None:
    out = panel.frame[list(panel.feature_names)].copy()
    out.insert(0, "symbol", panel.asset_id)
    out["asset_class"] = panel.asset_class
    out["fwd_ret"] = panel.frame["fwd_ret"]
    out["sigma_daily"] = panel.frame["sigma_daily"]
    out.index = out.index.strftime("%Y-%m-%d")
    out.index.name = "date"
    out.to_csv(path, float_format="%.17g")


def read_panel(path: str | Path) -> FeaturePanel:
    frame = pd.read_csv(path, index_col="date", parse_dates=["date"], float_precision="round_trip")
    if frame.empty:
        raise AlignmentError(f"{path}: empty panel")
    symbol = str(frame["symbol"].iloc[0])
    asset_class = str(frame["asset_class"].iloc[0])
    if asset_class not in ASSET_CLASSES:
        raise AlignmentError(f"{path}: unknown asset class {asset_class!r}")
    names = tuple(c for c in frame.columns if c not in ("symbol", "asset_class", "fwd_ret", "sigma_daily"))
    body = frame[list(names) + ["fwd_ret", "sigma_daily"]].astype(float)
    return FeaturePanel(symbol, asset_class, body, names)
