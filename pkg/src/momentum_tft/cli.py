"""Command-line pipeline: synth -> cpd -> features -> train -> backtest -> interpret.

Every command takes ``--config PATH`` (JSON), ``--seed N`` and ``--out DIR``.
The output directory doubles as the pipeline workspace: later commands read
what earlier ones wrote there.

Layout under ``--out``::

    prices.csv, metadata.csv, regimes.csv      synth
    cpd_cache.csv                              cpd
    panels/<symbol>.csv                        features
    models/<model>/<split>/{checkpoint.npz,trials.csv}   train
    backtest/<model>/{report.csv,report.json,cost_sweep.csv,equity_curve.csv}
    interpret/<model>/{variable_importance.csv,importance_summary.csv,attention.csv}

Exit codes: 0 ok, 2 usage or configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import pandas as pd

from . import backtest as bt
from . import cpd as cpdmod
from . import features as feat
from . import interpret as interp
from . import marketdata as md
from . import model as mdl
from . import training as tr

logger = logging.getLogger("momentum_tft")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
MODEL_CHOICES = ("lstm", "tft", "tft_cpd")
BASE_FEATURES = tuple(feat.feature_names(feat.DEFAULT_MACD))
CPD_FEATURES = tuple(feat.cpd_column_names(feat.CPD_LBWS))


class UsageError(Exception):
    """Invalid configuration or missing prerequisite; exit code 2."""


@dataclass
class RunConfig:
    prices: Path | None = None
    metadata: Path | None = None
    model: str = "tft"
    scenario: dict = field(default_factory=lambda: {"start": 1990, "end": 2020, "first_test": 1995, "step_years": 5})
    grid: dict = field(default_factory=dict)
    n_iter: int = 50
    max_epochs: int = 300
    patience: int = 25
    seq_len: int | None = None
    stride: int | None = None
    workers: int = 1
    winsorise: bool = True
    synth: dict = field(default_factory=dict)
    seed: int = 0
    out: Path = Path("out")

    @property
    def kind(self) -> str:
        return "lstm" if self.model == "lstm" else "tft"

    @property
    def feature_set(self) -> tuple[str, ...]:
        return BASE_FEATURES + (CPD_FEATURES if self.model == "tft_cpd" else ())

    def train_config(self) -> tr.TrainConfig:
        return tr.TrainConfig(kind=self.kind, seq_len=self.seq_len, stride=self.stride, max_epochs=self.max_epochs,
                              patience=self.patience, seed=self.seed)

    def search_grid(self) -> dict:
        grid = dict(tr.GRIDS[self.kind])
        unknown = set(self.grid) - set(grid)
        if unknown:
            raise UsageError(f"unknown grid keys {sorted(unknown)}")
        grid.update({k: list(v) for k, v in self.grid.items()})
        return grid

    def splits(self) -> list[md.WindowSplit]:
        s = self.scenario
        try:
            return md.expanding_windows((s["start"], s["end"]), s["first_test"], s.get("step_years", 5))
        except KeyError as exc:
            raise UsageError(f"scenario lacks {exc}") from None


def load_config(path: str | None, args: argparse.Namespace) -> RunConfig:
    raw: dict = {}
    base = Path(".")
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise UsageError(f"{p}: top level must be an object")
        base = p.parent
    known = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}")
    for key in ("prices", "metadata"):
        if raw.get(key) is not None:
            raw[key] = (base / raw[key]).resolve() if not Path(raw[key]).is_absolute() else Path(raw[key])
    cfg = RunConfig(**raw)
    for key in ("model", "seq_len", "n_iter", "max_epochs", "workers", "prices", "metadata"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, Path(value) if key in ("prices", "metadata") else value)
    cfg.seed = args.seed
    cfg.out = Path(args.out)
    if cfg.model not in MODEL_CHOICES:
        raise UsageError(f"invalid model {cfg.model!r}; choose from {', '.join(MODEL_CHOICES)}")
    if cfg.workers < 1 or cfg.n_iter < 1:
        raise UsageError("workers and n_iter must be >= 1")
    return cfg


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _prices_paths(cfg: RunConfig) -> tuple[Path, Path]:
    prices = cfg.prices or cfg.out / "prices.csv"
    meta = cfg.metadata or cfg.out / "metadata.csv"
    if not Path(prices).is_file():
        raise UsageError(f"prices not found: {prices}")
    if not Path(meta).is_file():
        raise UsageError(f"metadata not found: {meta}")
    return Path(prices), Path(meta)


def _load_series(cfg: RunConfig) -> dict[str, md.PriceSeries]:
    prices, meta = _prices_paths(cfg)
    series = md.load_csv(prices, meta)
    if cfg.winsorise:
        series = {k: md.winsorise(v) for k, v in series.items()}
    return series


def _panel_dir(cfg: RunConfig) -> Path:
    return cfg.out / "panels"


def _load_panels(cfg: RunConfig) -> list[feat.FeaturePanel]:
    files = sorted(_panel_dir(cfg).glob("*.csv"))
    if not files:
        raise UsageError(f"no feature panels under {_panel_dir(cfg)}; run the features command first")
    panels = [feat.read_panel(f) for f in files]
    wanted = cfg.feature_set
    out = []
    for p in panels:
        missing = [c for c in wanted if c not in p.feature_names]
        if missing:
            raise UsageError(f"{p.asset_id}: panel lacks {missing}; rebuild features"
                             + (" with --with-cpd" if cfg.model == "tft_cpd" else ""))
        frame = p.frame[list(wanted) + ["fwd_ret", "sigma_daily"]]
        out.append(feat.FeaturePanel(p.asset_id, p.asset_class, frame, wanted))
    return out


def _model_dir(cfg: RunConfig) -> Path:
    return cfg.out / "models" / cfg.model


def _checkpoints(cfg: RunConfig, splits: Sequence[md.WindowSplit]) -> list[tuple[md.WindowSplit, mdl.ModelParams, dict]]:
    out = []
    for split in splits:
        path = _model_dir(cfg) / split.label() / "checkpoint.npz"
        if not path.is_file():
            raise UsageError(f"checkpoint missing for split {split.label()} ({path}); run train first")
        params, extra = mdl.load_checkpoint(path)
        if extra.get("split") != split.label() or extra.get("model") != cfg.model:
            raise UsageError(f"{path} was trained for {extra.get('model')} / {extra.get('split')}, "
                             f"not {cfg.model} / {split.label()}")
        out.append((split, params, extra))
    return out


def _split_panels(panels: Sequence[feat.FeaturePanel], split: md.WindowSplit) -> list[feat.FeaturePanel]:
    keep = set(md.assets_for_split({p.asset_id: p.dates for p in panels}, split))
    return [p for p in panels if p.asset_id in keep]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args) -> int:
    try:
        spec = md.SynthSpec(**{**cfg.synth, "seed": cfg.seed})
    except TypeError as exc:
        raise UsageError(f"bad synth section: {exc}") from None
    cfg.out.mkdir(parents=True, exist_ok=True)
    data = md.synth_generate(spec)
    md.write_csv(data.series, cfg.out / "prices.csv")
    md.write_metadata(data.series, cfg.out / "metadata.csv")
    data.write_regimes(cfg.out / "regimes.csv")
    logger.info("wrote %d synthetic series to %s", len(data.series), cfg.out)
    return EXIT_OK


def cmd_cpd(cfg: RunConfig, args) -> int:
    _prices_paths(cfg)
    cache_path = cfg.out / "cpd_cache.csv"
    if args.resume and not cache_path.is_file():
        raise UsageError(f"--resume given but no cache at {cache_path}")
    series = _load_series(cfg)
    cached = {(c.asset_id, c.lbw): c for c in cpdmod.read_cpd_cache(cache_path)} if args.resume else {}
    cfg.out.mkdir(parents=True, exist_ok=True)
    results = []
    for symbol, s in series.items():
        for lbw in feat.CPD_LBWS:
            old = cached.get((symbol, lbw))
            fresh = cpdmod.cpd_features(s, lbw, seed=cfg.seed, workers=cfg.workers,
                                        skip_dates=old.frame.index if old is not None else ())
            frame = fresh.frame if old is None else old.frame
            if old is not None and len(fresh.frame):
                frame = pd.concat([old.frame, fresh.frame]).sort_index()
            if frame.empty:
                logger.warning("%s: %d prices are too few for lbw=%d; no CPD rows", symbol, len(s), lbw)
            results.append(cpdmod.CpdFeatures(symbol, lbw, frame))
            logger.info("%s lbw=%d: %d rows (%d new)", symbol, lbw, len(frame), len(fresh.frame))
    cpdmod.write_cpd_cache(results, cache_path)
    return EXIT_OK


def cmd_features(cfg: RunConfig, args) -> int:
    _prices_paths(cfg)
    cache_path = cfg.out / "cpd_cache.csv"
    if args.with_cpd and not cache_path.is_file():
        raise UsageError(f"--with-cpd needs a CPD cache at {cache_path}; run the cpd command first")
    series = _load_series(cfg)
    cache: dict[str, list] = {}
    if args.with_cpd:
        for c in cpdmod.read_cpd_cache(cache_path):
            cache.setdefault(c.asset_id, []).append(c)
        missing = [s for s in series if {c.lbw for c in cache.get(s, [])} != set(feat.CPD_LBWS)]
        if missing:
            raise UsageError(f"CPD cache lacks {missing[:5]}; rerun the cpd command")
    out = _panel_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for symbol, s in series.items():
        panel = feat.build_feature_panel(s, feat.DEFAULT_MACD, cache.get(symbol))
        if len(panel) == 0:
            logger.warning("%s: no fully defined feature rows", symbol)
            continue
        feat.write_panel(panel, out / f"{symbol}.csv")
        written += 1
    logger.info("wrote %d panels to %s", written, out)
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    splits = cfg.splits()
    grid = cfg.search_grid()
    tcfg = cfg.train_config()
    panels = _load_panels(cfg)
    for k, split in enumerate(splits):
        live = _split_panels(panels, split)
        if not live:
            logger.warning("split %s: no eligible assets, skipped", split.label())
            continue
        logger.info("split %s: %d assets, %d trials", split.label(), len(live), cfg.n_iter)
        try:
            result = tr.random_search(grid, cfg.n_iter, live, split, tcfg, seed=tr.trial_seed(cfg.seed, k),
                                      workers=cfg.workers)
        except tr.SearchError as exc:
            logger.error("split %s: %s", split.label(), exc)
            return EXIT_RUNTIME
        target = _model_dir(cfg) / split.label()
        target.mkdir(parents=True, exist_ok=True)
        tr.write_trials(result.trials, target / "trials.csv")
        extra = {"split": split.label(), "model": cfg.model, "hp": json.loads(result.best_hp.to_json()),
                 "features": list(cfg.feature_set), "assets": [p.asset_id for p in live],
                 "best_epoch": result.best.history.best_epoch}
        mdl.save_checkpoint(result.best.params, target / "checkpoint.npz", extra)
    return EXIT_OK


def _strategy_positions(cfg: RunConfig, panels, checkpoints) -> dict[str, pd.Series]:
    parts: dict[str, list[pd.Series]] = {}
    for split, params, extra in checkpoints:
        live = [p for p in panels if p.asset_id in set(extra["assets"])]
        for asset, pos in tr.predict_positions(params, live, split.test_start, split.test_end).items():
            parts.setdefault(asset, []).append(pos)
    return {a: pd.concat(v).sort_index() for a, v in parts.items()}


def cmd_backtest(cfg: RunConfig, args) -> int:
    splits = cfg.splits()
    panels = _load_panels(cfg)
    checkpoints = _checkpoints(cfg, splits)
    start, end = splits[0].test_start, splits[-1].test_end
    if not any(((p.dates >= start) & (p.dates < end)).any() for p in panels):
        raise UsageError(f"no panel rows in the test range {start.date()}..{end.date()}")
    model_pos = _strategy_positions(cfg, panels, checkpoints)
    live = [p for p in panels if p.asset_id in model_pos]
    strategies = {
        cfg.model: model_pos,
        "long_only": {k: v.positions for k, v in bt.baseline_long_only(live, start, end).items()},
        "tsmom": {k: v.positions for k, v in bt.baseline_tsmom(live, start, end).items()},
    }
    scenario = f"{start.year}-{end.year}"
    rows, sweep, curves = [], [], {}
    for name, positions in strategies.items():
        returns = bt.portfolio_returns(positions, live)
        rows.append((name, scenario, bt.compute_metrics(returns)))
        for bps, rep in bt.cost_sweep(positions, live).items():
            sweep.append((name, f"{bps:g}bps", rep))
        curves[name] = bt.equity_curve(returns)
    target = cfg.out / "backtest" / cfg.model
    target.mkdir(parents=True, exist_ok=True)
    bt.write_report(rows, target / "report.csv", target / "report.json")
    bt.write_report(sweep, target / "cost_sweep.csv")
    bt.write_equity_curves(curves, target / "equity_curve.csv")
    return EXIT_OK


def cmd_interpret(cfg: RunConfig, args) -> int:
    if cfg.kind != "tft":
        raise UsageError("interpretability requires TFT (model tft or tft_cpd)")
    splits = cfg.splits()
    panels = _load_panels(cfg)
    checkpoints = _checkpoints(cfg, splits)
    date = pd.Timestamp(args.date) if args.date else None
    if date is not None and not any(s.test_start <= date < s.test_end for s in splits):
        raise UsageError(f"--date {date.date()} is outside every test range")
    records, maps = [], []
    for split, params, extra in checkpoints:
        live = [p for p in panels if p.asset_id in set(extra["assets"])]
        records += interp.extract_variable_importance(params, live, split.test_start, split.test_end)
        if date is None and split is not splits[-1]:
            continue
        if date is not None and not split.test_start <= date < split.test_end:
            continue
        for p in live:
            in_range = p.dates[(p.dates >= split.test_start) & (p.dates < split.test_end)]
            when = in_range[-1] if date is None else (date if date in p.dates else None)
            if when is None or p.dates.get_loc(when) + 1 < params.dims.seq_len:
                continue
            maps.append(interp.extract_attention(params, p, when))
    merged: dict[str, interp.VariableImportanceRecord] = {}
    for rec in records:
        prev = merged.get(rec.asset_id)
        merged[rec.asset_id] = rec if prev is None else interp.VariableImportanceRecord(
            rec.asset_id, pd.concat([prev.weights, rec.weights]))
    target = cfg.out / "interpret" / cfg.model
    target.mkdir(parents=True, exist_ok=True)
    recs = list(merged.values())
    interp.write_variable_importance(recs, target / "variable_importance.csv")
    interp.write_importance_summary(interp.importance_summary(recs), target / "importance_summary.csv")
    interp.write_attention(maps, target / "attention.csv")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "cpd": cmd_cpd,
    "features": cmd_features,
    "train": cmd_train,
    "backtest": cmd_backtest,
    "interpret": cmd_interpret,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="momentum-tft", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="out", help="pipeline workspace directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("synth",):
            continue
        p.add_argument("--prices")
        p.add_argument("--metadata")
        p.add_argument("--workers", type=int)
        if name == "cpd":
            p.add_argument("--resume", action="store_true", help="only compute dates missing from the cache")
        if name == "features":
            p.add_argument("--with-cpd", action="store_true", help="join the CPD cache into the panels")
        if name in ("train", "backtest", "interpret"):
            p.add_argument("--model", help=f"one of {', '.join(MODEL_CHOICES)}")
        if name == "train":
            p.add_argument("--seq-len", type=int)
            p.add_argument("--n-iter", type=int)
            p.add_argument("--max-epochs", type=int)
        if name == "interpret":
            p.add_argument("--date", help="prediction date for the attention export (YYYY-MM-DD)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = load_config(args.config, args)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, md.ConfigurationError, tr.ConfigError, mdl.ConfigError, bt.BacktestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (md.DataError, feat.AlignmentError) as exc:
        print(f"error: bad input data: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - last-resort runtime failure
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
