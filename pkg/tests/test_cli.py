import json
import logging

import pandas as pd
import pytest

from momentum_tft import backtest as bt
from momentum_tft import cli
from momentum_tft import marketdata as md

CONFIG = {
    "synth": {"n_assets": 3, "n_days": 2700},
    "scenario": {"start": 1990, "end": 2000, "first_test": 1995, "step_years": 5},
    "grid": {"hidden_size": [8], "batch_size": [64], "learning_rate": [0.01]},
    "n_iter": 1,
    "max_epochs": 2,
    "patience": 1,
    "seq_len": 21,
    "stride": 21,
}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(CONFIG))
    out = root / "out"
    assert run("synth", "--config", cfg, "--out", out, "--seed", 3) == 0
    assert run("features", "--config", cfg, "--out", out) == 0
    for model in ("lstm", "tft"):
        assert run("train", "--config", cfg, "--out", out, "--model", model) == 0
        assert run("backtest", "--config", cfg, "--out", out, "--model", model) == 0
    assert run("interpret", "--config", cfg, "--out", out, "--model", "tft") == 0
    return cfg, out


def test_pipeline_layout(workspace):
    cfg, out = workspace
    assert sorted(p.name for p in (out / "panels").iterdir()) == ["SYN00.csv", "SYN01.csv", "SYN02.csv"]
    for model in ("lstm", "tft"):
        split_dir = out / "models" / model / "1995-2000"
        assert (split_dir / "checkpoint.npz").is_file()
        trials = pd.read_csv(split_dir / "trials.csv")
        assert list(trials.columns) == ["trial_id", "hp_json", "val_sharpe", "best_epoch", "status", "seed"]
        for name in ("report.csv", "report.json", "cost_sweep.csv", "equity_curve.csv"):
            assert (out / "backtest" / model / name).is_file()


def test_backtest_rows_and_baselines(workspace):
    _, out = workspace
    report = pd.read_csv(out / "backtest" / "lstm" / "report.csv")
    assert list(report["strategy"]) == ["lstm", "long_only", "tsmom"]
    assert list(report.columns[2:]) == list(bt.METRIC_COLUMNS)
    sweep = pd.read_csv(out / "backtest" / "lstm" / "cost_sweep.csv")
    assert sweep.groupby("strategy").size().to_dict() == {"long_only": 7, "lstm": 7, "tsmom": 7}
    assert list(sweep["scenario"][:7]) == ["0bps", "0.5bps", "1bps", "1.5bps", "2bps", "2.5bps", "3bps"]
    curve = pd.read_csv(out / "backtest" / "lstm" / "equity_curve.csv")
    assert (curve.groupby("strategy")["cumulative_value"].first() == 100.0).all()


def test_interpret_exports(workspace):
    _, out = workspace
    target = out / "interpret" / "tft"
    summary = pd.read_csv(target / "importance_summary.csv", index_col="symbol")
    assert summary.shape[1] == 8
    assert "ALL" in summary.index
    att = pd.read_csv(target / "attention.csv")
    assert set(att["lag_days"]) == set(range(21))


def test_rerun_is_byte_identical(workspace, tmp_path):
    cfg, out = workspace
    again = tmp_path / "again"
    assert run("synth", "--config", cfg, "--out", again, "--seed", 3) == 0
    assert run("features", "--config", cfg, "--out", again) == 0
    assert run("train", "--config", cfg, "--out", again, "--model", "lstm") == 0
    assert run("backtest", "--config", cfg, "--out", again, "--model", "lstm") == 0
    for rel in ("prices.csv", "panels/SYN01.csv", "models/lstm/1995-2000/checkpoint.npz",
                "models/lstm/1995-2000/trials.csv", "backtest/lstm/report.csv", "backtest/lstm/cost_sweep.csv"):
        assert (out / rel).read_bytes() == (again / rel).read_bytes(), rel


def test_seq_len_flag_and_defaults(workspace, tmp_path):
    import argparse
    ns = argparse.Namespace(seed=0, out="x", model="lstm", seq_len=63, n_iter=None, max_epochs=None,
                            workers=None, prices=None, metadata=None)
    cfg = cli.load_config(None, ns)
    assert cfg.train_config().tau == 63
    ns.model, ns.seq_len = "tft", None
    assert cli.load_config(None, ns).train_config().tau == 252


# --- errors ---------------------------------------------------------------------

def test_usage_errors(workspace, tmp_path, capsys):
    cfg, out = workspace
    assert run("train", "--config", cfg, "--out", out, "--model", "gru") == 2
    assert "lstm, tft, tft_cpd" in capsys.readouterr().err
    assert run("features", "--out", tmp_path, "--prices", out / "prices.csv", "--metadata", tmp_path / "nope.csv") == 2
    assert "metadata not found" in capsys.readouterr().err
    assert run("features", "--out", out, "--with-cpd") == 2
    assert "run the cpd command first" in capsys.readouterr().err
    assert run("interpret", "--config", cfg, "--out", out, "--model", "lstm") == 2
    assert "interpretability requires TFT" in capsys.readouterr().err
    assert run("interpret", "--config", cfg, "--out", out, "--model", "tft", "--date", "1993-03-01") == 2
    assert "outside every test range" in capsys.readouterr().err
    assert run("bogus") == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_iterations": 3}))
    assert run("train", "--config", bad, "--out", out) == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_config_errors_have_no_side_effects(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"synth": {"n_assets": 0}}))
    assert run("synth", "--config", bad, "--out", tmp_path / "never") == 2
    assert not (tmp_path / "never").exists()


def test_empty_test_range_and_checkpoint_mismatch(workspace, tmp_path):
    cfg, out = workspace
    late = tmp_path / "late.json"
    late.write_text(json.dumps({**CONFIG, "scenario": {"start": 2010, "end": 2020, "first_test": 2015}}))
    assert run("backtest", "--config", late, "--out", out, "--model", "lstm") == 2
    # a checkpoint saved for one model is rejected when loaded for another
    moved = tmp_path / "ws"
    (moved / "models" / "tft").mkdir(parents=True)
    (moved / "panels").symlink_to(out / "panels")
    (moved / "models" / "tft" / "1995-2000").symlink_to(out / "models" / "lstm" / "1995-2000")
    assert run("backtest", "--config", cfg, "--out", moved, "--model", "tft") == 2


def test_all_trials_failing_exits_3(workspace, monkeypatch, tmp_path):
    cfg, out = workspace

    def boom(*a, **k):
        raise cli.tr.TrainingError("diverged")

    monkeypatch.setattr(cli.tr, "train", boom)
    work = tmp_path / "w"
    work.mkdir()
    (work / "panels").symlink_to(out / "panels")
    assert run("train", "--config", cfg, "--out", work, "--model", "lstm") == 3


# --- CPD command ----------------------------------------------------------------

def test_cpd_command_counts_and_resume(tmp_path, caplog):
    short = md.synth_generate(md.SynthSpec(n_assets=1, n_days=301, seed=1)).series
    long_ = md.synth_generate(md.SynthSpec(n_assets=1, n_days=101, seed=2)).series
    series = {"A": md.PriceSeries("A", "EQ", short["SYN00"].prices),
              "B": md.PriceSeries("B", "FX", long_["SYN00"].prices)}
    md.write_csv(series, tmp_path / "prices.csv")
    md.write_metadata(series, tmp_path / "metadata.csv")
    with caplog.at_level(logging.WARNING, logger="momentum_tft"):
        assert run("cpd", "--out", tmp_path) == 0
    assert any("B" in r.message and "lbw=126" in r.message for r in caplog.records)
    cache = pd.read_csv(tmp_path / "cpd_cache.csv")
    counts = cache.groupby(["symbol", "lbw"]).size().to_dict()
    assert counts[("A", 21)] >= 279
    assert ("B", 126) not in counts
    first = (tmp_path / "cpd_cache.csv").read_bytes()
    caplog.clear()
    with caplog.at_level(logging.INFO, logger="momentum_tft"):
        assert run("cpd", "--out", tmp_path, "--resume") == 0
    assert all("(0 new)" in r.message for r in caplog.records if "rows (" in r.message)
    assert (tmp_path / "cpd_cache.csv").read_bytes() == first
