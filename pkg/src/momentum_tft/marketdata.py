"""Price ingestion, winsorisation, synthetic regime data and expanding-window splits."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

ASSET_CLASSES = ("CM", "EQ", "FI", "FX")
ASSET_CLASS_CODES = {name: code for code, name in enumerate(ASSET_CLASSES)}

WINSOR_SIGMA = 5.0
WINSOR_HALF_LIFE = 252


class DataError(ValueError):
    pass


class ParseError(DataError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class PriceSeries:
    asset_id: str
    asset_class: str
    prices: pd.Series  # DatetimeIndex -> positive float

    def __post_init__(self):
        if self.asset_class not in ASSET_CLASS_CODES:
            raise DataError(f"{self.asset_id}: unknown asset class {self.asset_class!r}")
        idx = self.prices.index
        if not isinstance(idx, pd.DatetimeIndex):
            raise DataError(f"{self.asset_id}: prices must be indexed by date")
        if not (idx.is_monotonic_increasing and idx.is_unique):
            raise DataError(f"{self.asset_id}: dates must be strictly increasing")
        if (self.prices.to_numpy() <= 0).any():
            raise DataError(f"{self.asset_id}: prices must be positive")

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.prices.index

    @property
    def class_code(self) -> int:
        return ASSET_CLASS_CODES[self.asset_class]

    def __len__(self) -> int:
        return len(self.prices)


def read_metadata(path: str | Path) -> dict[str, str]:
    """``symbol,asset_class`` table -> mapping."""
    meta: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["symbol", "asset_class"]:
            raise ParseError(f"{path}: expected header 'symbol,asset_class'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            symbol, cls = row[0].strip(), row[1].strip()
            if cls not in ASSET_CLASS_CODES:
                raise DataError(f"{path}:{lineno}: asset_class {cls!r} not in {ASSET_CLASSES}")
            meta[symbol] = cls
    return meta


def load_csv(path: str | Path, metadata: dict[str, str] | str | Path | None = None) -> dict[str, PriceSeries]:
    """Read a long ``date,symbol,price`` file into one :class:`PriceSeries` per symbol.

    ``metadata`` is either the mapping returned by :func:`read_metadata` or a
    path to the sidecar CSV.  Symbols missing from it raise :class:`DataError`.
    """
    if metadata is None:
        meta: dict[str, str] = {}
    elif isinstance(metadata, dict):
        meta = metadata
    else:
        meta = read_metadata(metadata)

    rows: dict[str, dict[pd.Timestamp, float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["date", "symbol", "price"] or len(header) != 3:
            raise ParseError(f"{path}:1: expected header 'date,symbol,price'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            raw_date, symbol, raw_price = (c.strip() for c in row)
            try:
                day = pd.Timestamp(pd.to_datetime(raw_date, format="%Y-%m-%d"))
                price = float(raw_price.replace("−", "-"))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if not math.isfinite(price) or price <= 0:
                raise DataError(f"{path}:{lineno}: non-positive price {raw_price!r} for {symbol}")
            per_symbol = rows.setdefault(symbol, {})
            if day in per_symbol:
                raise DataError(f"{path}:{lineno}: duplicate date {day.date().isoformat()} for {symbol}")
            per_symbol[day] = price

    out = {}
    for symbol in sorted(rows):
        if meta and symbol not in meta:
            raise DataError(f"{symbol}: missing from asset metadata")
        prices = pd.Series(rows[symbol], dtype=float).sort_index()
        prices.index = pd.DatetimeIndex(prices.index, name="date")
        out[symbol] = PriceSeries(symbol, meta.get(symbol, "CM"), prices)
    return out


def write_csv(series: dict[str, PriceSeries], path: str | Path) -> None:
    frames = [pd.DataFrame({"date": s.dates.strftime("%Y-%m-%d"), "symbol": s.asset_id, "price": s.prices.to_numpy()})
              for s in series.values()]
    pd.concat(frames).to_csv(path, index=False, float_format="%.10g")


def write_metadata(series: dict[str, PriceSeries], path: str | Path) -> None:
    pd.DataFrame({"symbol": list(series), "asset_class": [s.asset_class for s in series.values()]}).to_csv(
        path, index=False)


def winsorise(series: PriceSeries, n_sigma: float = WINSOR_SIGMA, half_life: float = WINSOR_HALF_LIFE,
              min_periods: int = 20) -> PriceSeries:
    """Clip each level to ``EWM mean +/- n_sigma * EWM std`` of the values before it.

    The band at ``t`` uses the already-winsorised history ``< t`` (decay
    ``2**(-1/half_life)``, bias-corrected weighted variance), so a second pass
    leaves the series unchanged.  No clipping happens during the first
    ``min_periods`` observations or while the band is degenerate (std 0).
    """
    values = series.prices.to_numpy(dtype=float)
    if len(values) < 2:
        return series
    decay = 2.0 ** (-1.0 / half_life)
    out = values.copy()
    w = w2 = m2 = 0.0
    mu = 0.0
    for t, x in enumerate(values):
        if t >= min_periods:
            var = m2 / (w - w2 / w)
            if var > 0:
                half_width = n_sigma * math.sqrt(var)
                x = min(max(x, mu - half_width), mu + half_width)
        out[t] = x
        w = decay * w + 1.0
        w2 = decay * decay * w2 + 1.0
        delta = x - mu
        mu += delta / w
        m2 = decay * m2 + delta * (x - mu)
    if np.array_equal(out, values):
        return series
    if (out <= 0).any():
        raise DataError(f"{series.asset_id}: winsorisation produced non-positive prices")
    return replace(series, prices=pd.Series(out, index=series.prices.index, name=series.prices.name))


# ---------------------------------------------------------------------------
# expanding windows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowSplit:
    """Half-open date intervals ``[start, end)`` for one expanding-window fold."""

    train_start: pd.Timestamp
    valid_start: pd.Timestamp
    test_start: pd.Timestamp
    test_end: pd.Timestamp

    @property
    def train_range(self) -> tuple[pd.Timestamp, pd.Timestamp]:
        return self.train_start, self.valid_start

    @property
    def valid_range(self) -> tuple[pd.Timestamp, pd.Timestamp]:
        return self.valid_start, self.test_start

    @property
    def test_range(self) -> tuple[pd.Timestamp, pd.Timestamp]:
        return self.test_start, self.test_end

    def label(self) -> str:
        return f"{self.test_start.year}-{self.test_end.year}"


def _as_timestamp(value) -> pd.Timestamp:
    if isinstance(value, (int, np.integer)):
        return pd.Timestamp(year=int(value), month=1, day=1)
    return pd.Timestamp(value)


def expanding_windows(full_range, first_test, step_years: int = 5, valid_fraction: float = 0.1) -> list[WindowSplit]:
    """Expanding-window folds over ``full_range = (start, end)``.

    Integers are read as 1 January of that year.  Test blocks of ``step_years``
    tile ``[first_test, end)``; the last one is truncated at ``end``.  The
    validation block is the trailing ``valid_fraction`` of each fold's
    train+valid calendar span.
    """
    start, end = (_as_timestamp(v) for v in full_range)
    first = _as_timestamp(first_test)
    if step_years < 1:
        raise ConfigurationError("step_years must be >= 1")
    if not start < first < end:
        raise ConfigurationError(f"first test date {first.date()} must lie inside ({start.date()}, {end.date()})")
    if end < start + pd.DateOffset(years=2 * step_years):
        raise ConfigurationError(f"range {start.date()}..{end.date()} is shorter than 2 x {step_years} years")
    splits = []
    test_start = first
    while test_start < end:
        test_end = min(test_start + pd.DateOffset(years=step_years), end)
        span = test_start - start
        valid_start = (test_start - span * valid_fraction).normalize()
        splits.append(WindowSplit(start, valid_start, test_start, test_end))
        test_start = test_end
    return splits


def assets_for_split(panels_rows: dict[str, pd.DatetimeIndex], split: WindowSplit, min_valid_rows: int = 63) -> list[str]:
    """Symbols with at least ``min_valid_rows`` observations inside the validation block."""
    lo, hi = split.valid_range
    keep = []
    for symbol, dates in panels_rows.items():
        n = int(((dates >= lo) & (dates < hi)).sum())
        if n >= min_valid_rows:
            keep.append(symbol)
    return keep


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    n_assets: int = 10
    n_days: int = 2016
    regime_mean_duration: float = 63.0
    annual_drift: float = 0.15
    daily_vol: float = 0.15 / math.sqrt(252)
    vol_multipliers: tuple[float, ...] = (1.0,)
    seed: int = 0
    start_date: str = "1990-01-01"
    initial_price: float = 100.0
    initial_sign: int | None = None

    def __post_init__(self):
        if self.n_assets < 1 or self.n_days < 1:
            raise ConfigurationError("n_assets and n_days must be positive")
        if self.regime_mean_duration <= 0 or self.daily_vol < 0 or self.initial_price <= 0:
            raise ConfigurationError("durations, vols and prices must be positive")
        if not self.vol_multipliers or min(self.vol_multipliers) <= 0:
            raise ConfigurationError("vol_multipliers must be non-empty and positive")


@dataclass(frozen=True)
class Regime:
    symbol: str
    start: pd.Timestamp
    drift_sign: int
    vol_multiplier: float


@dataclass
class SynthData:
    series: dict[str, PriceSeries]
    regimes: list[Regime] = field(default_factory=list)
    drift_sign: dict[str, pd.Series] = field(default_factory=dict)

    def write_regimes(self, path: str | Path) -> None:
        pd.DataFrame({
            "symbol": [r.symbol for r in self.regimes],
            "regime_start_date": [r.start.strftime("%Y-%m-%d") for r in self.regimes],
            "drift_sign": [r.drift_sign for r in self.regimes],
            "vol_multiplier": [r.vol_multiplier for r in self.regimes],
        }).to_csv(path, index=False)


def synth_generate(spec: SynthSpec) -> SynthData:
    """Regime-switching geometric random walks.

    Each regime lasts an exponential number of days (mean
    ``regime_mean_duration``); at every boundary the drift sign flips and a
    volatility multiplier is drawn from ``vol_multipliers``.  Day ``t``'s log
    return is ``sign * annual_drift / 252 + daily_vol * mult * eps``.
    """
    rng = np.random.default_rng(spec.seed)
    dates = pd.bdate_range(spec.start_date, periods=spec.n_days, name="date")
    mu = spec.annual_drift / 252.0
    series: dict[str, PriceSeries] = {}
    regimes: list[Regime] = []
    signs_out: dict[str, pd.Series] = {}
    width = max(2, len(str(spec.n_assets - 1)))
    for a in range(spec.n_assets):
        symbol = f"SYN{a:0{width}d}"
        sign = spec.initial_sign if spec.initial_sign is not None else int(rng.choice([-1, 1]))
        mult = float(rng.choice(spec.vol_multipliers))
        signs = np.empty(spec.n_days)
        mults = np.empty(spec.n_days)
        t = 0
        while t < spec.n_days:
            length = max(1, int(math.ceil(rng.exponential(spec.regime_mean_duration))))
            regimes.append(Regime(symbol, dates[t], sign, mult))
            signs[t:t + length] = sign
            mults[t:t + length] = mult
            t += length
            sign = -sign
            mult = float(rng.choice(spec.vol_multipliers))
        noise = rng.standard_normal(spec.n_days)
        log_ret = signs * mu + spec.daily_vol * mults * noise
        # first day is the initial price
        log_ret[0] = 0.0
        prices = spec.initial_price * np.exp(np.cumsum(log_ret))
        cls = ASSET_CLASSES[a % len(ASSET_CLASSES)]
        series[symbol] = PriceSeries(symbol, cls, pd.Series(prices, index=dates, name=symbol))
        signs_out[symbol] = pd.Series(signs, index=dates, name=symbol)
    return SynthData(series, regimes, signs_out)
