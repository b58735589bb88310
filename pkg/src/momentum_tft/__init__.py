"""Trend-following position sizing with a decoder-only Temporal Fusion Transformer.

Modules, bottom up: ``tensorgrad`` (autodiff core), ``marketdata``, ``features``,
``cpd`` (changepoint features), ``model``, ``training``, ``backtest``,
``interpret`` and the ``cli`` front end.
"""

__version__ = "0.1.0"
