"""Gaussian-process changepoint features.

For each date ``t`` and lookback ``l`` the last ``l`` daily returns are
standardised and fitted twice by maximum marginal likelihood: a Matern-3/2 GP
with constant mean, and a two-region variant whose kernels are blended by a
sigmoid around a learnable changepoint location.  The fitted location gives
``gamma`` (close to 1 = recent break) and the drop in negative log marginal
likelihood gives the severity ``nu = 1 - exp(-delta / l)``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from scipy import linalg, optimize, special

from .marketdata import PriceSeries

logger = logging.getLogger(__name__)

JITTER = 1e-8
N_RESTARTS = 3
FEATURE_FLOOR = 1e-6
SQRT3 = math.sqrt(3.0)
LOG_2PI = math.log(2.0 * math.pi)

# bounds in the optimiser's coordinates (logs of variances / lengthscales / steepness)
_LOG_VAR = (math.log(1e-4), math.log(1e2))
_LOG_NOISE = (math.log(1e-4), math.log(1e1))
_MEAN = (-5.0, 5.0)
_LOG_STEEP = (math.log(0.05), math.log(10.0))


@dataclass(frozen=True)
class CpdWindow:
    asset_id: str
    end_date: pd.Timestamp
    lbw: int
    returns: np.ndarray

    def __post_init__(self):
        if len(self.returns) != self.lbw:
            raise ValueError(f"window holds {len(self.returns)} returns, expected {self.lbw}")


@dataclass(frozen=True)
class GpFit:
    params: dict[str, float]
    nlml: float
    converged: bool
    location: float | None = None


@dataclass
class CpdFeatures:
    asset_id: str
    lbw: int
    frame: pd.DataFrame  # index date, columns gamma, nu


def _standardise(returns: np.ndarray) -> np.ndarray:
    y = np.asarray(returns, dtype=float)
    y = y - y.mean()
    sd = y.std()
    return y / sd if sd > 0 else y


def _matern(dist: np.ndarray, log_var: float, log_ls: float) -> tuple[np.ndarray, np.ndarray]:
    """Kernel matrix and its derivative with respect to the log lengthscale."""
    var = math.exp(log_var)
    a = SQRT3 * dist / math.exp(log_ls)
    e = np.exp(-a)
    return var * (1.0 + a) * e, var * a * a * e


def _nlml_terms(K: np.ndarray, resid: np.ndarray):
    L, lower = linalg.cho_factor(K, lower=True, check_finite=False)
    alpha = linalg.cho_solve((L, lower), resid, check_finite=False)
    n = len(resid)
    nlml = 0.5 * resid @ alpha + np.log(np.diag(L)).sum() + 0.5 * n * LOG_2PI
    K_inv = linalg.cho_solve((L, lower), np.eye(n), check_finite=False)
    W = K_inv - np.outer(alpha, alpha)
    return nlml, alpha, W


def plain_nlml(theta: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """NLML and gradient for ``theta = [log_var, log_ls, log_noise, mean]``."""
    log_var, log_ls, log_noise, c = theta
    dist = np.abs(x[:, None] - x[None, :])
    k, dk_ls = _matern(dist, log_var, log_ls)
    noise = math.exp(log_noise)
    K = k + (noise + JITTER) * np.eye(len(x))
    nlml, alpha, W = _nlml_terms(K, y - c)
    grad = np.array([
        0.5 * np.sum(W * k),
        0.5 * np.sum(W * dk_ls),
        0.5 * noise * np.trace(W),
        -alpha.sum(),
    ])
    return float(nlml), grad


def changepoint_nlml(theta: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """NLML and gradient of the two-region kernel.

    ``theta = [log_var1, log_ls1, log_var2, log_ls2, log_noise, mean, location, log_steepness]``;
    region 1 (weight ``1 - s``) is before the changepoint, region 2 (weight ``s``) after,
    with ``s = sigmoid(steepness * (x - location))``.
    """
    lv1, ll1, lv2, ll2, log_noise, c, loc, log_steep = theta
    dist = np.abs(x[:, None] - x[None, :])
    k1, dk1 = _matern(dist, lv1, ll1)
    k2, dk2 = _matern(dist, lv2, ll2)
    steep = math.exp(log_steep)
    s = special.expit(steep * (x - loc))
    u = 1.0 - s
    uu, ss = np.outer(u, u), np.outer(s, s)
    noise = math.exp(log_noise)
    K = uu * k1 + ss * k2 + (noise + JITTER) * np.eye(len(x))
    nlml, alpha, W = _nlml_terms(K, y - c)
    slope = s * u
    ds_loc = -steep * slope
    ds_steep = steep * (x - loc) * slope
    WK1, WK2 = W * k1, W * k2

    def sigmoid_grad(ds):
        # d/dphi of u u^T k1 + s s^T k2, contracted with W (symmetric)
        return -(ds @ WK1 @ u) + ds @ WK2 @ s

    grad = np.array([
        0.5 * np.sum(W * uu * k1),
        0.5 * np.sum(W * uu * dk1),
        0.5 * np.sum(W * ss * k2),
        0.5 * np.sum(W * ss * dk2),
        0.5 * noise * np.trace(W),
        -alpha.sum(),
        sigmoid_grad(ds_loc),
        sigmoid_grad(ds_steep),
    ])
    return float(nlml), grad


def _minimise(fun, starts: Iterable[np.ndarray], bounds, x, y) -> tuple[np.ndarray | None, float]:
    best_theta, best = None, math.inf
    for theta0 in starts:
        theta0 = np.clip(theta0, [b[0] for b in bounds], [b[1] for b in bounds])
        try:
            res = optimize.minimize(fun, theta0, args=(x, y), jac=True, method="L-BFGS-B", bounds=bounds,
                                    options={"maxiter": 200})
        except (linalg.LinAlgError, ValueError, FloatingPointError):
            continue
        if np.isfinite(res.fun) and res.fun < best:
            best_theta, best = res.x, float(res.fun)
    return best_theta, best


def _ls_bounds(lbw: int) -> tuple[float, float]:
    return math.log(0.5), math.log(10.0 * lbw)


def _plain_starts(lbw: int, rng: np.random.Generator) -> list[np.ndarray]:
    base = np.array([math.log(0.5), math.log(lbw / 4.0), math.log(0.5), 0.0])
    starts = [base]
    for _ in range(N_RESTARTS - 1):
        starts.append(base + rng.normal(0.0, [1.0, 1.0, 1.0, 0.1]))
    return starts


def fit_plain_gp(window: CpdWindow, seed: int = 0) -> GpFit:
    """Constant-mean Matern-3/2 GP on the standardised window."""
    y = _standardise(window.returns)
    x = np.arange(window.lbw, dtype=float)
    rng = np.random.default_rng(seed)
    bounds = [_LOG_VAR, _ls_bounds(window.lbw), _LOG_NOISE, _MEAN]
    theta, nlml = _minimise(plain_nlml, _plain_starts(window.lbw, rng), bounds, x, y)
    if theta is None:
        return GpFit({}, math.inf, False)
    names = ("log_var", "log_lengthscale", "log_noise", "mean")
    return GpFit(dict(zip(names, map(float, theta))), nlml, True)


def fit_changepoint_gp(window: CpdWindow, seed: int = 0, plain: GpFit | None = None) -> GpFit:
    """Two-region GP; one start reuses the plain fit on both sides so the fit nests it."""
    y = _standardise(window.returns)
    lbw = window.lbw
    x = np.arange(lbw, dtype=float)
    rng = np.random.default_rng(seed)
    if plain is None:
        plain = fit_plain_gp(window, seed)
    if plain.converged:
        p = plain.params
        lv, ll, ln, c = p["log_var"], p["log_lengthscale"], p["log_noise"], p["mean"]
    else:
        lv, ll, ln, c = math.log(0.5), math.log(lbw / 4.0), math.log(0.5), 0.0
    loc_bounds = (1.0, lbw - 2.0)
    starts = []
    for k, frac in enumerate((0.5, 0.25, 0.75)[:N_RESTARTS]):
        theta = np.array([lv, ll, lv, ll, ln, c, frac * (lbw - 1), 0.0])
        if k:
            theta = theta + rng.normal(0.0, [0.5, 0.5, 0.5, 0.5, 0.5, 0.05, 0.0, 0.5])
        starts.append(theta)
    bounds = [_LOG_VAR, _ls_bounds(lbw), _LOG_VAR, _ls_bounds(lbw), _LOG_NOISE, _MEAN, loc_bounds, _LOG_STEEP]
    theta, nlml = _minimise(changepoint_nlml, starts, bounds, x, y)
    if theta is None:
        return GpFit({}, math.inf, False)
    names = ("log_var1", "log_lengthscale1", "log_var2", "log_lengthscale2", "log_noise", "mean", "location",
             "log_steepness")
    return GpFit(dict(zip(names, map(float, theta))), nlml, True, location=float(theta[6]))


def _clamp(v: float) -> float:
    return min(max(v, FEATURE_FLOOR), 1.0 - FEATURE_FLOOR)


def window_features(window: CpdWindow, seed: int = 0) -> tuple[float, float] | None:
    """``(gamma, nu)`` for one window, or None when either fit fails."""
    plain = fit_plain_gp(window, seed)
    if not plain.converged:
        return None
    cp = fit_changepoint_gp(window, seed, plain)
    if not cp.converged:
        return None
    lbw = window.lbw
    gamma = 1.0 - ((lbw - 1) - cp.location) / lbw
    delta = max(0.0, plain.nlml - cp.nlml)
    nu = 1.0 - math.exp(-delta / lbw)
    return _clamp(gamma), _clamp(nu)


def _run_chunk(args) -> list[tuple[int, tuple[float, float] | None]]:
    asset_id, dates, returns, lbw, seed, positions = args
    out = []
    for pos in positions:
        window = CpdWindow(asset_id, dates[pos], lbw, returns[pos - lbw + 1:pos + 1])
        out.append((pos, window_features(window, seed=_window_seed(seed, pos))))
    return out


def _window_seed(seed: int, position: int) -> int:
    return int(np.random.SeedSequence([seed, position]).generate_state(1)[0])


def cpd_features(series: PriceSeries, lbw: int, seed: int = 0, workers: int = 1,
                 skip_dates: Iterable[pd.Timestamp] = ()) -> CpdFeatures:
    """Changepoint features for every date with ``lbw`` trailing returns.

    ``skip_dates`` are not recomputed (used to resume from a cache).  Windows
    whose fits fail produce no row.
    """
    prices = series.prices.to_numpy(dtype=float)
    dates = series.dates
    returns = np.full(len(prices), np.nan)
    if len(prices) > 1:
        returns[1:] = prices[1:] / prices[:-1] - 1.0
    skip = set(pd.DatetimeIndex(list(skip_dates)))
    positions = [p for p in range(lbw, len(prices)) if dates[p] not in skip]
    results: list[tuple[int, tuple[float, float] | None]] = []
    if positions:
        if workers > 1:
            n_chunks = min(len(positions), workers * 4)
            chunks = [positions[i::n_chunks] for i in range(n_chunks)]
            jobs = [(series.asset_id, dates, returns, lbw, seed, c) for c in chunks]
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for part in pool.map(_run_chunk, jobs):
                    results.extend(part)
        else:
            results = _run_chunk((series.asset_id, dates, returns, lbw, seed, positions))
    results.sort()
    kept = [(dates[p], v) for p, v in results if v is not None]
    failed = sum(v is None for _, v in results)
    if failed:
        logger.warning("%s lbw=%d: %d window fits failed and were dropped", series.asset_id, lbw, failed)
    frame = pd.DataFrame([v for _, v in kept], columns=["gamma", "nu"],
                         index=pd.DatetimeIndex([d for d, _ in kept], name="date"))
    return CpdFeatures(series.asset_id, lbw, frame)


def write_cpd_cache(features: Sequence[CpdFeatures], path: str | Path) -> None:
    frames = []
    for f in features:
        if f.frame.empty:
            continue
        frames.append(pd.DataFrame({
            "symbol": f.asset_id,
            "date": f.frame.index.strftime("%Y-%m-%d"),
            "lbw": f.lbw,
            "gamma": f.frame["gamma"].to_numpy(),
            "nu": f.frame["nu"].to_numpy(),
        }))
    out = pd.concat(frames) if frames else pd.DataFrame(columns=["symbol", "date", "lbw", "gamma", "nu"])
    out.to_csv(path, index=False, float_format="%.17g")


def read_cpd_cache(path: str | Path) -> list[CpdFeatures]:
    raw = pd.read_csv(path, parse_dates=["date"], float_precision="round_trip")
    out = []
    for (symbol, lbw), grp in raw.groupby(["symbol", "lbw"], sort=True):
        frame = grp.set_index("date")[["gamma", "nu"]].sort_index()
        frame.index.name = "date"
        out.append(CpdFeatures(str(symbol), int(lbw), frame))
    return out
