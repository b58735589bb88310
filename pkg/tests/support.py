"""Shared builders and oracles for the test suite."""

from __future__ import annotations

import math

import numpy as np
import pandas as pd

from momentum_tft import tensorgrad as tg
from momentum_tft.tensorgrad import Tensor
from momentum_tft.features import FeaturePanel
from momentum_tft.marketdata import ASSET_CLASSES


def gradcheck(loss_fn, params, eps: float = 1e-6) -> float:
    """Worst relative error between backward() and central differences over ``params``."""
    tg.zero_grad(params)
    tg.backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, tg.relative_error(analytic, tg.numerical_grad(loss_fn, p, eps)))
    return worst


def directional_gradcheck(loss_fn, params, rng: np.random.Generator, n_dirs: int = 2, eps: float = 1e-6) -> float:
    """Worst error of ``g . v`` against a central difference along random ``v``, one tensor at a time.

    The error is scaled by ``|g| |v|``, the largest value ``g . v`` can take.
    """
    tg.zero_grad(params)
    tg.backward(loss_fn())
    worst = 0.0
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        base = p.data.copy()
        for _ in range(n_dirs):
            v = rng.standard_normal(p.data.shape)
            p.data[...] = base + eps * v
            up = loss_fn().item()
            p.data[...] = base - eps * v
            down = loss_fn().item()
            p.data[...] = base
            fd = (up - down) / (2 * eps)
            scale = max(np.linalg.norm(g) * np.linalg.norm(v), 1e-8)
            worst = max(worst, abs(float(np.sum(g * v)) - fd) / scale)
    return worst


def regime_signs(rng: np.random.Generator, n_days: int, mean_len: float) -> np.ndarray:
    signs = np.empty(n_days)
    t, s = 0, rng.choice([-1.0, 1.0])
    while t < n_days:
        length = max(1, int(math.ceil(rng.exponential(mean_len))))
        signs[t:t + length] = s
        s, t = -s, t + length
    return signs


def make_panel(asset_id: str, features: np.ndarray, fwd_ret: np.ndarray, sigma_daily, dates,
               names=None, asset_class: str = "CM") -> FeaturePanel:
    names = tuple(names or (f"f{j}" for j in range(features.shape[1])))
    frame = pd.DataFrame(features, index=pd.DatetimeIndex(dates, name="date"), columns=list(names))
    frame["fwd_ret"] = fwd_ret
    frame["sigma_daily"] = sigma_daily
    return FeaturePanel(asset_id, asset_class, frame, names)


def selection_panels(seed: int, n_assets: int = 10, n_days: int = 1500, drift: float = 0.5, vol: float = 0.15,
                     feature_noise: float = 0.5, m: int = 8, regime: float = 63.0):
    """One noisy drift-sign feature (column 0) among ``m - 1`` pure-noise columns."""
    rng = np.random.default_rng(seed)
    dates = pd.bdate_range("2000-01-03", periods=n_days)
    panels = []
    for a in range(n_assets):
        signs = regime_signs(rng, n_days, regime)
        ret = signs * drift / 252 + vol / math.sqrt(252) * rng.standard_normal(n_days)
        x = rng.standard_normal((n_days, m))
        x[:, 0] = signs + feature_noise * rng.standard_normal(n_days)
        panels.append(make_panel(f"A{a:02d}", x, ret, vol / math.sqrt(252), dates,
                                 asset_class=ASSET_CLASSES[a % 4]))
    return panels, dates


def delayed_marker_panels(seed: int, n_assets: int = 10, n_days: int = 2016, drift: float = 0.3,
                          vol: float = 0.15, jump_sigmas: float = 6.0, delay: int = 64,
                          min_regime: int = 150, mean_extra: float = 50.0, burst: int | None = None):
    """Drift whose sign is announced by a marker jump ``delay`` days before it switches on.

    Each regime opens with a one-day jump of ``jump_sigmas`` daily vols whose
    sign is the regime's drift sign; the drift is active only from ``delay``
    days after the jump until the next regime starts.  The single input is the
    vol-normalised daily return, so a window of at most ``delay - 1`` lags
    never contains the marker of the drift it is trading.  With ``burst`` the
    drift lasts only that many days, which leaves little trailing momentum
    for a short window to pick up.
    """
    rng = np.random.default_rng(seed)
    dates = pd.bdate_range("1990-01-01", periods=n_days)
    daily = vol / math.sqrt(252)
    panels = []
    for a in range(n_assets):
        ret = daily * rng.standard_normal(n_days)
        t = int(rng.integers(0, min_regime))
        while t < n_days:
            sign = rng.choice([-1.0, 1.0])
            length = min_regime + int(rng.exponential(mean_extra))
            ret[t] += sign * jump_sigmas * daily
            stop = t + length if burst is None else min(t + length, t + delay + burst)
            ret[t + delay:stop] += sign * drift / 252
            t += length
        x = (ret / daily)[:, None]
        # feature at t is the return realised on t; the target is the next day's return
        fwd = np.append(ret[1:], 0.0)
        panels.append(make_panel(f"M{a:02d}", x[:-1], fwd[:-1], daily, dates[:-1], names=("ret_1",),
                                 asset_class=ASSET_CLASSES[a % 4]))
    return panels, dates[:-1]


def param(rng, *shape, positive=False):
    data = rng.uniform(0.5, 2.0, size=shape) if positive else rng.normal(size=shape)
    return Tensor(data, requires_grad=True)


def op_cases(rng):
    """(name, loss closure, params) for every differentiable op."""
    a, b = param(rng, 3, 4), param(rng, 3, 4)
    pos = param(rng, 3, 4, positive=True)
    m1, m2 = param(rng, 2, 3, 4), param(rng, 4, 5)
    row = param(rng, 4)
    s = param(rng, 2, 5, 5)
    g, bias = param(rng, 4), param(rng, 4)
    table = param(rng, 5, 3)
    h = 3
    lx, lwx, lwh, lb = param(rng, 2, 4, 3), param(rng, 3, 4 * h), param(rng, h, 4 * h), param(rng, 4 * h)
    h0, c0 = param(rng, 2, h), param(rng, 2, h)
    weights = rng.normal(size=(3, 4))
    cases = [
        ("add_broadcast", lambda: ((a + row) * weights).sum(), [a, row]),
        ("sub", lambda: ((a - b) * weights).sum(), [a, b]),
        ("mul", lambda: (a * b).sum(), [a, b]),
        ("div", lambda: (a / pos).sum(), [a, pos]),
        ("maximum", lambda: (tg.maximum(a, 0.1) * weights).sum(), [a]),
        ("power", lambda: (pos ** 1.7).sum(), [pos]),
        ("tanh", lambda: (tg.tanh(a) * weights).sum(), [a]),
        ("sigmoid", lambda: (tg.sigmoid(a) * weights).sum(), [a]),
        ("elu", lambda: (tg.elu(a) * weights).sum(), [a]),
        ("exp", lambda: (tg.exp(a) * weights).sum(), [a]),
        ("log", lambda: (tg.log(pos) * weights).sum(), [pos]),
        ("sqrt", lambda: (tg.sqrt(pos) * weights).sum(), [pos]),
        ("negate", lambda: (-a * weights).sum(), [a]),
        ("mean_axis", lambda: (a.mean(axis=0) * row).sum(), [a, row]),
        ("sum_keepdims", lambda: (a.sum(axis=1, keepdims=True) * a).sum(), [a]),
        ("reshape_transpose", lambda: (a.reshape(4, 3).T * weights).sum(), [a]),
        ("getitem", lambda: (a[1:, ::2] * a[:2, 1::2]).sum(), [a]),
        ("take_rows", lambda: (tg.take_rows(table, [0, 2, 2, 4]) ** 2).sum(), [table]),
        ("concat", lambda: (tg.concat([a, b], axis=1) * np.arange(24.0).reshape(3, 8)).sum(), [a, b]),
        ("stack", lambda: (tg.stack([a, b], axis=0) ** 2 * 0.5).sum(), [a, b]),
        ("matmul_batched", lambda: (tg.tanh(tg.matmul(m1, m2))).sum(), [m1, m2]),
        ("softmax", lambda: (tg.softmax(a, axis=-1) * weights).sum(), [a]),
        ("softmax_masked", lambda: (tg.softmax_masked(s, causal=True) * np.arange(25.0).reshape(5, 5)).sum(), [s]),
        ("layer_norm", lambda: (tg.layer_norm(a, g, bias) * weights).sum(), [a, g, bias]),
        ("lstm", lambda: (tg.lstm(lx, lwx, lwh, lb, h0, c0) * np.linspace(-1, 1, 2 * 4 * h).reshape(2, 4, h)).sum(),
         [lx, lwx, lwh, lb, h0, c0]),
    ]
    return cases


def naive_metrics(r):
    """Loop-only reference for compute_metrics."""
    n = len(r)
    total = 0.0
    for x in r:
        total += x
    mean = total / n
    ss = 0.0
    for x in r:
        ss += (x - mean) ** 2
    vol = math.sqrt(252.0) * math.sqrt(ss / n)
    negs = [x for x in r if x < 0]
    poss = [x for x in r if x > 0]
    if negs:
        nm = sum(negs) / len(negs)
        down = math.sqrt(252.0) * math.sqrt(sum((x - nm) ** 2 for x in negs) / len(negs))
    else:
        down = None
    value, peak, mdd = 1.0, 1.0, 0.0
    for x in r:
        value *= 1.0 + x
        peak = max(peak, value)
        mdd = max(mdd, (peak - value) / peak)
    ann = 252.0 * mean
    return {
        "ann_return": ann, "ann_vol": vol, "sharpe": ann / vol if vol > 0 else None, "downside_dev": down,
        "sortino": ann / down if down else None, "mdd": mdd, "calmar": ann / mdd if mdd > 0 else None,
        "pct_positive": len(poss) / n,
        "avg_profit_loss": (sum(poss) / len(poss)) / abs(sum(negs) / len(negs)) if poss and negs else None,
    }
