"""Sharpe-loss training, early stopping and random grid search.

Positions ``X`` become vol-targeted strategy returns
``R = X * sigma_tgt / sigma_t * r_{t+1}`` and the loss is minus the annualised
Sharpe ratio of every (asset, step) return in the mini-batch.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

from . import tensorgrad as tg
from .features import TRADING_DAYS, FeaturePanel
from .marketdata import WindowSplit
from .model import ModelDims, ModelParams, forward, init_params
from .tensorgrad import Tensor

logger = logging.getLogger(__name__)

SIGMA_TARGET = 0.15
SHARPE_EPS = 1e-9
SQRT_DAYS = math.sqrt(TRADING_DAYS)

LSTM_GRID = {
    "batch_size": [64, 128, 256],
    "learning_rate": [1e-4, 1e-3, 1e-2, 1e-1],
    "dropout": [0.1, 0.2, 0.3, 0.4, 0.5],
    "max_grad_norm": [1e-2, 1e0, 1e2, 1e-1],
    "hidden_size": [5, 10, 20, 40, 80, 160],
}
# hidden sizes must split evenly over the 4 attention heads
TFT_GRID = {
    "batch_size": [32, 64, 128],
    "learning_rate": [1e-4, 1e-3, 1e-2, 1e-1],
    "dropout": [0.1, 0.2, 0.3, 0.4, 0.5],
    "max_grad_norm": [1e-2, 1e0, 1e2],
    "hidden_size": [20, 40, 80, 160],
}
GRIDS = {"lstm": LSTM_GRID, "tft": TFT_GRID}
DEFAULT_SEQ_LEN = {"lstm": 63, "tft": 252}
DEFAULT_STRIDE = {"lstm": 63, "tft": 252}


class TrainingError(RuntimeError):
    pass


class SearchError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HyperParams:
    batch_size: int
    learning_rate: float
    dropout: float
    max_grad_norm: float
    hidden_size: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass(frozen=True)
class TrainConfig:
    kind: str = "lstm"
    seq_len: int | None = None
    stride: int | None = None
    max_epochs: int = 300
    patience: int = 25
    seed: int = 0
    sigma_target: float = SIGMA_TARGET
    n_heads: int = 4
    eval_batch: int = 256

    def __post_init__(self):
        if self.kind not in GRIDS:
            raise ConfigError(f"model must be one of {sorted(GRIDS)}, got {self.kind!r}")
        if self.patience > self.max_epochs:
            raise ConfigError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("max_epochs and patience must be positive")
        if self.stride is not None and self.stride < 1:
            raise ConfigError("stride must be >= 1")

    @property
    def tau(self) -> int:
        return self.seq_len or DEFAULT_SEQ_LEN[self.kind]

    @property
    def step(self) -> int:
        return self.stride or DEFAULT_STRIDE[self.kind]


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    valid_sharpe: list[float] = field(default_factory=list)
    best_epoch: int = 0
    wall_time: float = 0.0

    @property
    def best_sharpe(self) -> float:
        return self.valid_sharpe[self.best_epoch - 1] if self.best_epoch else -math.inf


@dataclass
class Batch:
    x: np.ndarray        # [B, tau, m]
    classes: np.ndarray  # [B]
    fwd_ret: np.ndarray  # [B, tau]
    sigma: np.ndarray    # [B, tau], annualised


@dataclass
class WindowSet:
    """Stacked training windows."""

    x: np.ndarray
    classes: np.ndarray
    fwd_ret: np.ndarray
    sigma: np.ndarray

    def __len__(self) -> int:
        return len(self.x)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def captured_returns(positions, fwd_ret, sigma, sigma_target: float = SIGMA_TARGET):
    """``X * sigma_tgt / sigma * r``; ``sigma`` annualised.  Works on tensors or arrays."""
    scale = sigma_target / np.asarray(sigma, dtype=float)
    weight = scale * np.asarray(fwd_ret, dtype=float)
    if isinstance(positions, Tensor):
        return positions * weight
    return np.asarray(positions, dtype=float) * weight


def sharpe_loss(returns: Tensor, eps: float = SHARPE_EPS) -> Tensor:
    """``-sqrt(252) * mean / sqrt(max(var, eps))`` with population variance over all entries."""
    returns = tg.as_tensor(returns)
    if returns.size < 2:
        raise tg.ContractError("sharpe_loss needs at least two returns")
    mu = returns.mean()
    centred = returns - mu
    var = (centred * centred).mean()
    return -SQRT_DAYS * mu / tg.sqrt(tg.maximum(var, eps))


def sharpe_ratio(returns: np.ndarray) -> float:
    """Annualised Sharpe with population std; 0 for a flat series."""
    returns = np.asarray(returns, dtype=float)
    if len(returns) < 2:
        return 0.0
    if np.ptp(returns) == 0:
        return 0.0
    return float(SQRT_DAYS * returns.mean() / returns.std())


# ---------------------------------------------------------------------------
# windows and batches
# ---------------------------------------------------------------------------

def _rows_in(panel: FeaturePanel, start, end) -> np.ndarray:
    dates = panel.dates
    return np.flatnonzero((dates >= start) & (dates < end))


def build_windows(panels: Sequence[FeaturePanel], tau: int, stride: int, start=None, end=None,
                  drop_last: bool = True) -> WindowSet:
    """Length-``tau`` windows starting every ``stride`` rows inside ``[start, end)``.

    With ``drop_last`` the final row of each block is left out so no target
    return reaches past ``end``.
    """
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    xs, cls, rets, sigs = [], [], [], []
    for panel in panels:
        lo = panel.dates[0] if start is None else start
        hi = panel.dates[-1] + pd.Timedelta(days=1) if end is None else end
        rows = _rows_in(panel, lo, hi)
        if drop_last and end is not None and len(rows):
            rows = rows[:-1]
        if len(rows) < tau:
            continue
        feats, fwd, sigma = panel.features(), panel.fwd_ret(), panel.sigma_annualised()
        for s in range(0, len(rows) - tau + 1, stride):
            idx = rows[s:s + tau]
            xs.append(feats[idx])
            rets.append(fwd[idx])
            sigs.append(sigma[idx])
            cls.append(panel.class_code)
    if not xs:
        m = panels[0].n_features if panels else 0
        return WindowSet(np.empty((0, tau, m)), np.empty(0, dtype=int), np.empty((0, tau)), np.empty((0, tau)))
    return WindowSet(np.stack(xs), np.array(cls, dtype=int), np.stack(rets), np.stack(sigs))


def make_batches(windows: WindowSet, batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
    """Shuffle the windows and yield batches; the last one may be smaller."""
    order = rng.permutation(len(windows))
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        yield Batch(windows.x[idx], windows.classes[idx], windows.fwd_ret[idx], windows.sigma[idx])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def eval_windows(panel: FeaturePanel, tau: int, start, end, mode: str) -> list[tuple[np.ndarray, np.ndarray]]:
    """(row indices of the window, step offsets whose positions are kept) pairs.

    ``block``: consecutive windows tiling the range, each reaching back into
    earlier history when the block would start before the range.  ``sliding``:
    one window per date, keeping only its last step.
    """
    rows = _rows_in(panel, start, end)
    if len(rows) == 0:
        return []
    first, last = int(rows[0]), int(rows[-1])
    if last + 1 < tau:
        return []
    out = []
    if mode == "sliding":
        for t in range(max(first, tau - 1), last + 1):
            out.append((np.arange(t - tau + 1, t + 1), np.array([tau - 1])))
        return out
    if mode != "block":
        raise ConfigError(f"unknown evaluation mode {mode!r}")
    covered = first - 1
    end_row = max(first + tau - 1, tau - 1)
    while covered < last:
        end_row = min(end_row, last)
        lo = end_row - tau + 1
        keep = np.arange(max(covered + 1, first) - lo, tau)
        out.append((np.arange(lo, end_row + 1), keep))
        covered = end_row
        end_row += tau
    return out


def predict_positions(params: ModelParams, panels: Sequence[FeaturePanel], start=None, end=None,
                      mode: str = "block", batch: int = 256) -> dict[str, pd.Series]:
    """Dropout-free positions per asset for the dates in ``[start, end)``."""
    tau = params.dims.seq_len
    jobs = []
    for k, panel in enumerate(panels):
        lo = panel.dates[0] if start is None else start
        hi = panel.dates[-1] + pd.Timedelta(days=1) if end is None else end
        for rows, keep in eval_windows(panel, tau, lo, hi, mode):
            jobs.append((k, rows, keep))
    values: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {}
    feats = [p.features() for p in panels]
    for lo in range(0, len(jobs), batch):
        chunk = jobs[lo:lo + batch]
        x = np.stack([feats[k][rows] for k, rows, _ in chunk])
        classes = np.array([panels[k].class_code for k, _, _ in chunk])
        X = forward(x, classes, params).data
        for (k, rows, keep), pos in zip(chunk, X):
            values.setdefault(k, []).append((rows[keep], pos[keep]))
    out = {}
    for k, parts in values.items():
        rows = np.concatenate([r for r, _ in parts])
        pos = np.concatenate([p for _, p in parts])
        out[panels[k].asset_id] = pd.Series(pos, index=panels[k].dates[rows], name=panels[k].asset_id)
    return out


def portfolio_series(positions: dict[str, pd.Series], panels: Sequence[FeaturePanel],
                     sigma_target: float = SIGMA_TARGET) -> pd.Series:
    """Equal-weight average of captured returns over the assets live on each date."""
    by_id = {p.asset_id: p for p in panels}
    cols = {}
    for asset, pos in positions.items():
        frame = by_id[asset].frame.loc[pos.index]
        sigma = frame["sigma_daily"].to_numpy() * SQRT_DAYS
        cols[asset] = pd.Series(captured_returns(pos.to_numpy(), frame["fwd_ret"].to_numpy(), sigma, sigma_target),
                                index=pos.index)
    if not cols:
        return pd.Series(dtype=float)
    table = pd.DataFrame(cols).sort_index()
    return table.mean(axis=1, skipna=True).dropna()


def validation_sharpe(params: ModelParams, panels: Sequence[FeaturePanel], start=None, end=None,
                      sigma_target: float = SIGMA_TARGET, mode: str = "block") -> float:
    positions = predict_positions(params, panels, start, end, mode)
    if not positions:
        raise ConfigError("validation set is empty")
    return sharpe_ratio(portfolio_series(positions, panels, sigma_target).to_numpy())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    history: TrainHistory


def model_dims(n_inputs: int, hp: HyperParams, cfg: TrainConfig) -> ModelDims:
    return ModelDims(cfg.kind, n_inputs, hp.hidden_size, cfg.tau, cfg.n_heads, hp.dropout)


def train(panels: Sequence[FeaturePanel], split: WindowSplit, hp: HyperParams, cfg: TrainConfig) -> TrainResult:
    """Adam on the Sharpe loss with early stopping on validation portfolio Sharpe.

    Returns the parameters of the best validation epoch.
    """
    if not panels:
        raise ConfigError("no panels to train on")
    t0 = time.perf_counter()
    windows = build_windows(panels, cfg.tau, cfg.step, split.train_start, split.valid_start)
    if len(windows) == 0:
        raise ConfigError(f"no complete training window of {cfg.tau} steps before {split.valid_start.date()}")
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    params = init_params(model_dims(panels[0].n_features, hp, cfg), seed=int(seeds[0].generate_state(1)[0]))
    shuffle_rng = np.random.default_rng(seeds[1])
    dropout_rng = np.random.default_rng(seeds[2])
    weights = params.tensors()
    adam = tg.AdamState.for_params(weights, lr=hp.learning_rate)
    history = TrainHistory()
    best = None
    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        for batch in make_batches(windows, hp.batch_size, shuffle_rng):
            X = forward(batch.x, batch.classes, params, dropout_rng)
            loss = sharpe_loss(captured_returns(X, batch.fwd_ret, batch.sigma, cfg.sigma_target))
            if not math.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            tg.zero_grad(weights)
            tg.backward(loss)
            tg.clip_grad_norm(weights, hp.max_grad_norm)
            tg.adam_step(adam, weights)
            losses.append(loss.item())
        if not params.all_finite():
            raise TrainingError(f"parameters diverged at epoch {epoch}")
        score = validation_sharpe(params, panels, split.valid_start, split.test_start, cfg.sigma_target)
        history.train_loss.append(float(np.mean(losses)))
        history.valid_sharpe.append(score)
        if best is None or score > history.best_sharpe:
            history.best_epoch = epoch
            best = {k: t.data.copy() for k, t in params.named_tensors()}
        elif epoch - history.best_epoch >= cfg.patience:
            break
        logger.debug("epoch %d loss %.4f valid sharpe %.4f", epoch, history.train_loss[-1], score)
    params.load_arrays(best)
    history.wall_time = time.perf_counter() - t0
    return TrainResult(params, history)


# ---------------------------------------------------------------------------
# random grid search
# ---------------------------------------------------------------------------

@dataclass
class TrialRecord:
    trial_id: int
    hp: HyperParams
    val_sharpe: float
    best_epoch: int
    status: str
    seed: int


@dataclass
class SearchResult:
    best_hp: HyperParams
    best: TrainResult
    trials: list[TrialRecord]
    best_trial: int


def grid_points(grid: dict[str, list]) -> list[HyperParams]:
    keys = ("batch_size", "learning_rate", "dropout", "max_grad_norm", "hidden_size")
    missing = [k for k in keys if not grid.get(k)]
    if missing:
        raise ConfigError(f"grid lacks values for {missing}")
    return [HyperParams(*combo) for combo in itertools.product(*(grid[k] for k in keys))]


def trial_seed(master: int, trial: int) -> int:
    return int(np.random.SeedSequence([master, trial]).generate_state(1)[0])


def draw_trials(grid: dict[str, list], n_iter: int, seed: int) -> list[HyperParams]:
    """``n_iter`` distinct grid points, uniformly without replacement."""
    if n_iter < 1:
        raise ConfigError("n_iter must be >= 1")
    points = grid_points(grid)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(points), size=min(n_iter, len(points)), replace=False)
    return [points[i] for i in idx]


def _run_trial(args) -> tuple[TrialRecord, TrainResult | None]:
    trial_id, hp, panels, split, cfg, seed = args
    run_cfg = TrainConfig(**{**asdict(cfg), "seed": seed})
    try:
        result = train(panels, split, hp, run_cfg)
    except (TrainingError, FloatingPointError, tg.DomainError) as exc:
        logger.warning("trial %d failed: %s", trial_id, exc)
        return TrialRecord(trial_id, hp, math.nan, 0, "failed", seed), None
    h = result.history
    return TrialRecord(trial_id, hp, h.best_sharpe, h.best_epoch, "ok", seed), result


def random_search(grid: dict[str, list], n_iter: int, panels: Sequence[FeaturePanel], split: WindowSplit,
                  cfg: TrainConfig, seed: int = 0, workers: int = 1) -> SearchResult:
    """Train ``n_iter`` sampled configurations; highest validation Sharpe wins, ties to the lower trial."""
    hps = draw_trials(grid, n_iter, seed)
    jobs = [(i, hp, panels, split, cfg, trial_seed(seed, i)) for i, hp in enumerate(hps)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_trial, jobs))
    else:
        outcomes = [_run_trial(job) for job in jobs]
    trials = [rec for rec, _ in outcomes]
    best_idx = None
    for i, (rec, _) in enumerate(outcomes):
        if rec.status == "ok" and (best_idx is None or rec.val_sharpe > trials[best_idx].val_sharpe):
            best_idx = i
    if best_idx is None:
        raise SearchError(f"all {len(trials)} trials failed")
    return SearchResult(trials[best_idx].hp, outcomes[best_idx][1], trials, best_idx)


TRIAL_COLUMNS = ("trial_id", "hp_json", "val_sharpe", "best_epoch", "status", "seed")


def write_trials(trials: Sequence[TrialRecord], path: str | Path, split_label: str | None = None) -> None:
    cols = TRIAL_COLUMNS if split_label is None else ("split",) + TRIAL_COLUMNS
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for t in trials:
            row = [t.trial_id, t.hp.to_json(), repr(float(t.val_sharpe)), t.best_epoch, t.status, t.seed]
            writer.writerow(row if split_label is None else [split_label] + row)


def read_trials(path: str | Path) -> list[TrialRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            hp = HyperParams(**json.loads(row["hp_json"]))
            out.append(TrialRecord(int(row["trial_id"]), hp, float(row["val_sharpe"]), int(row["best_epoch"]),
                                   row["status"], int(row["seed"])))
    return out
