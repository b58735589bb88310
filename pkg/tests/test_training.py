import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from momentum_tft import tensorgrad as tg
from momentum_tft import training as tr
from momentum_tft.marketdata import WindowSplit
from momentum_tft.model import ModelDims, init_params
from momentum_tft.training import HyperParams, TrainConfig

from support import gradcheck, make_panel, selection_panels


# --- captured returns and loss --------------------------------------------------

def test_captured_returns_examples():
    assert tr.captured_returns(1.0, 0.02, 0.15) == pytest.approx(0.02, abs=1e-15)
    assert tr.captured_returns(1.0, 0.02, 0.30) == pytest.approx(0.01, abs=1e-15)
    assert tr.captured_returns(0.0, 0.02, 0.30) == 0.0


def test_sharpe_loss_examples():
    assert tr.sharpe_loss(np.array([0.01, -0.01])).item() == 0.0
    expected = -math.sqrt(252) * 0.01 / 0.01
    assert tr.sharpe_loss(np.array([0.02, 0.0])).item() == pytest.approx(expected, rel=1e-12)
    assert round(expected, 4) == -15.8745
    flat = tr.sharpe_loss(np.full(10, 0.001)).item()
    assert flat == pytest.approx(-math.sqrt(252) * 0.001 / math.sqrt(1e-9), rel=1e-12)   # guard engaged
    with pytest.raises(tg.ContractError):
        tr.sharpe_loss(np.array([0.01]))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(2, 40), elements=st.floats(-0.1, 0.1)))
def test_sharpe_loss_doubling_invariance_is_exact(r):
    # doubling is exact in binary floating point, so every intermediate scales by a power of two
    if r.var() < 1e-9:
        r = r + np.linspace(-0.05, 0.05, len(r))
    assert tr.sharpe_loss(2.0 * r).item() == tr.sharpe_loss(r).item()


def test_sharpe_loss_gradient_through_captured_returns():
    rng = np.random.default_rng(0)
    for seed in range(20):
        z = tg.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        r, sigma = rng.normal(0, 0.01, (3, 5)), rng.uniform(0.05, 0.4, (3, 5))
        worst = gradcheck(lambda: tr.sharpe_loss(tr.captured_returns(tg.tanh(z), r, sigma)), [z])
        assert worst < 1e-4, seed


def test_sharpe_ratio_guards():
    assert tr.sharpe_ratio(np.zeros(20)) == 0.0
    assert tr.sharpe_ratio(np.array([0.01])) == 0.0
    r = np.array([0.02, 0.0])
    assert tr.sharpe_ratio(r) == pytest.approx(-tr.sharpe_loss(r).item(), rel=1e-15)


# --- windows --------------------------------------------------------------------

def _panel(n, m=2, seed=0, start="2001-01-01"):
    rng = np.random.default_rng(seed)
    dates = pd.bdate_range(start, periods=n)
    return make_panel(f"P{seed}", rng.normal(size=(n, m)), rng.normal(0, 0.01, n), 0.01, dates)


@pytest.mark.parametrize("stride,count", [(252, 2), (1, 253)])
def test_window_tiling_counts(stride, count):
    windows = tr.build_windows([_panel(504)], 252, stride)
    assert len(windows) == count
    batches = list(tr.make_batches(windows, 64, np.random.default_rng(0)))
    assert sum(len(b.x) for b in batches) == count
    assert all(len(b.x) == 64 for b in batches[:-1])


def test_windows_respect_range_and_drop_last():
    p = _panel(300)
    end = p.dates[200]
    w = tr.build_windows([p], 50, 50, p.dates[0], end)
    assert len(w) == 3                 # 200 rows, last dropped -> 199 usable
    np.testing.assert_array_equal(w.x[0], p.features()[:50])
    assert len(tr.build_windows([p], 400, 1)) == 0


def test_batch_order_is_seeded():
    w = tr.build_windows([_panel(400)], 20, 5)
    order = lambda s: [b.x[:, 0, 0].tolist() for b in tr.make_batches(w, 8, np.random.default_rng(s))]
    assert order(3) == order(3)
    assert order(3) != order(4)


def test_block_eval_windows_cover_each_date_once():
    p = _panel(400)
    start, end = p.dates[130], p.dates[390]
    jobs = tr.eval_windows(p, 50, start, end, "block")
    kept = np.concatenate([rows[keep] for rows, keep in jobs])
    np.testing.assert_array_equal(kept, np.arange(130, 390))
    assert all(len(rows) == 50 for rows, _ in jobs)
    sliding = tr.eval_windows(p, 50, start, end, "sliding")
    np.testing.assert_array_equal([rows[k][0] for rows, k in sliding], np.arange(130, 390))


# --- validation Sharpe ----------------------------------------------------------

def _zero_model(m, tau):
    params = init_params(ModelDims("lstm", m, 4, tau))
    params.net.w_out.data[...] = 0.0
    params.net.b_out.data[...] = 0.0
    return params


def test_validation_sharpe_examples():
    p = _panel(200)
    assert tr.validation_sharpe(_zero_model(2, 10), [p]) == 0.0

    params = init_params(ModelDims("lstm", 2, 4, 10), seed=1)
    positions = tr.predict_positions(params, [p])
    rows = p.dates.get_indexer(positions["P0"].index)
    alone = tr.sharpe_ratio(tr.captured_returns(positions["P0"].to_numpy(), p.fwd_ret()[rows],
                                                p.sigma_annualised()[rows]))
    assert tr.validation_sharpe(params, [p]) == pytest.approx(alone, rel=1e-12)

    # the mirror asset earns the negated return on the same features -> portfolio is flat
    mirror = make_panel("P1", p.features(), -p.fwd_ret(), 0.01, p.dates)
    assert tr.validation_sharpe(params, [p, mirror]) == 0.0
    with pytest.raises(tr.ConfigError):
        tr.validation_sharpe(params, [p], p.dates[-1] + pd.Timedelta(days=5), p.dates[-1] + pd.Timedelta(days=9))


# --- training loop --------------------------------------------------------------

HP = HyperParams(batch_size=16, learning_rate=0.01, dropout=0.1, max_grad_norm=1.0, hidden_size=4)


def _split(dates, a=400, b=500):
    return WindowSplit(dates[0], dates[a], dates[b], dates[-1] + pd.Timedelta(days=1))


def test_patience_stops_at_epoch_26(monkeypatch):
    panels, dates = selection_panels(0, n_assets=2, n_days=600, m=2)
    monkeypatch.setattr(tr, "validation_sharpe", lambda *a, **k: 0.5)
    res = tr.train(panels, _split(dates), HP, TrainConfig("lstm", seq_len=21, stride=21, max_epochs=300, patience=25))
    assert len(res.history.valid_sharpe) == 26
    assert res.history.best_epoch == 1


def test_best_epoch_parameters_are_returned(monkeypatch):
    panels, dates = selection_panels(1, n_assets=2, n_days=600, m=2)
    scores = iter([0.1, 0.9, 0.3, 0.2, 0.95, 0.4, 0.1, 0.1])
    snapshots = []

    def fake(params, *a, **k):
        snapshots.append({n: t.data.copy() for n, t in params.named_tensors()})
        return next(scores)

    monkeypatch.setattr(tr, "validation_sharpe", fake)
    res = tr.train(panels, _split(dates), HP, TrainConfig("lstm", seq_len=21, stride=21, max_epochs=8, patience=3))
    assert res.history.best_epoch == 5
    assert len(res.history.valid_sharpe) == 8
    for name, t in res.params.named_tensors():
        np.testing.assert_array_equal(t.data, snapshots[4][name])


def test_training_is_deterministic():
    panels, dates = selection_panels(2, n_assets=2, n_days=600, m=3)
    cfg = TrainConfig("tft", seq_len=21, stride=21, max_epochs=3, patience=3, seed=7)
    a = tr.train(panels, _split(dates), HP, cfg)
    b = tr.train(panels, _split(dates), HP, cfg)
    assert a.history.train_loss == b.history.train_loss
    assert a.history.valid_sharpe == b.history.valid_sharpe
    for (_, x), (_, y) in zip(a.params.named_tensors(), b.params.named_tensors()):
        assert x.data.tobytes() == y.data.tobytes()


def test_training_config_errors():
    with pytest.raises(tr.ConfigError):
        TrainConfig(patience=30, max_epochs=20)
    with pytest.raises(tr.ConfigError):
        TrainConfig(kind="gru")
    panels, dates = selection_panels(0, n_assets=1, n_days=300, m=2)
    with pytest.raises(tr.ConfigError):
        tr.train(panels, _split(dates, 100, 200), HP, TrainConfig("lstm", seq_len=150, max_epochs=2, patience=1))


def test_persistent_trend_lstm_learns():
    panels, dates = selection_panels(3, n_assets=4, n_days=900, m=2, feature_noise=0.2, regime=120)
    res = tr.train(panels, _split(dates, 600, 750), HyperParams(32, 0.01, 0.1, 1.0, 8),
                   TrainConfig("lstm", seq_len=63, stride=21, max_epochs=300, patience=25, seed=0))
    assert res.history.best_sharpe > 1.0


# --- random search --------------------------------------------------------------

SMALL_GRID = {"batch_size": [16, 32], "learning_rate": [0.01], "dropout": [0.1, 0.2], "max_grad_norm": [1.0],
              "hidden_size": [4]}


def test_draw_trials_without_replacement():
    pts = tr.grid_points(SMALL_GRID)
    drawn = tr.draw_trials(SMALL_GRID, len(pts), seed=3)
    assert sorted(drawn, key=repr) == sorted(pts, key=repr)
    assert len(tr.draw_trials(tr.LSTM_GRID, 50, 0)) == len(set(tr.draw_trials(tr.LSTM_GRID, 50, 0))) == 50
    with pytest.raises(tr.ConfigError):
        tr.draw_trials(SMALL_GRID, 0, 0)


def test_grids_follow_architecture():
    assert all(h % 4 == 0 for h in tr.TFT_GRID["hidden_size"])
    assert tr.LSTM_GRID["hidden_size"] == [5, 10, 20, 40, 80, 160]


def _fake_trial(values):
    def run(args):
        trial_id, hp, _, _, _, seed = args
        v = values[trial_id]
        if v is None:
            return tr.TrialRecord(trial_id, hp, math.nan, 0, "failed", seed), None
        return tr.TrialRecord(trial_id, hp, v, 1, "ok", seed), f"result{trial_id}"
    return run


def test_search_tie_goes_to_lower_index(monkeypatch):
    monkeypatch.setattr(tr, "_run_trial", _fake_trial([0.3, 0.7, 0.7, None]))
    res = tr.random_search(SMALL_GRID, 4, [], None, TrainConfig(), seed=0)
    assert res.best_trial == 1 and res.best == "result1"
    monkeypatch.setattr(tr, "_run_trial", _fake_trial([None, None]))
    with pytest.raises(tr.SearchError):
        tr.random_search(SMALL_GRID, 2, [], None, TrainConfig(), seed=0)


def test_single_trial_search_and_reproducible_winner(tmp_path):
    panels, dates = selection_panels(4, n_assets=2, n_days=600, m=2)
    cfg = TrainConfig("lstm", seq_len=21, stride=21, max_epochs=3, patience=2)
    res = tr.random_search(SMALL_GRID, 1, panels, _split(dates), cfg, seed=11)
    assert len(res.trials) == 1 and res.best_trial == 0
    tr.write_trials(res.trials, tmp_path / "t.csv")
    rec = tr.read_trials(tmp_path / "t.csv")[0]
    assert rec == res.trials[0]
    again = tr.train(panels, _split(dates), rec.hp, TrainConfig(**{**cfg.__dict__, "seed": rec.seed}))
    assert again.history.best_sharpe == rec.val_sharpe
