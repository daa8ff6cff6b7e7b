"""Shared fixtures: synthetic panels and small trained models."""

from datetime import datetime

import numpy as np
import pytest

from panelcast.dataset import Granularity, Panel, TimeSeries, WindowSpec, fit_feature_stats
from panelcast.likelihood import LikelihoodKind
from panelcast.network import init_model
from panelcast.trainer import TrainConfig, train

START = datetime(2014, 1, 6)


def make_series(sid, values, start=START, granularity=Granularity.DAILY, category=0):
    return TimeSeries(sid, start, granularity, np.asarray(values, dtype=np.float64), category)


def sinusoid_panel(num_series=20, n=120, seed=42, amplitude=5.0, noise=0.5):
    """Smooth weekly-periodic series with per-series phase, strictly positive."""
    rng = np.random.default_rng(seed)
    t = np.arange(n)
    series = []
    for i in range(num_series):
        vals = 10.0 + amplitude * np.sin(2 * np.pi * t / 7 + i) + rng.normal(0, noise, n)
        series.append(make_series(f"s{i}", np.maximum(vals, 0.1), category=i % 4))
    return Panel(series)


def count_panel(num_series=8, n=60, seed=3, mean_lo=2.0, mean_hi=9.0):
    """Integer-valued Poisson panel for the negative binomial likelihood."""
    rng = np.random.default_rng(seed)
    series = []
    for i in range(num_series):
        mean = mean_lo + (mean_hi - mean_lo) * i / max(1, num_series - 1)
        vals = rng.poisson(mean, n).astype(np.float64)
        series.append(make_series(f"c{i}", vals, category=i % 2))
    return Panel(series)


def tiny_model(kind=LikelihoodKind.GAUSSIAN, panel=None, spec=None, *, hidden=8,
               layers=1, embedding_dim=2, cardinality=2, seed=0):
    """Untrained model over a small panel, for structural tests."""
    if panel is None:
        panel = count_panel(num_series=2, n=26)
    if spec is None:
        spec = WindowSpec(6, 6)
    stats = fit_feature_stats(panel, spec)
    model = init_model(kind, spec, stats, panel.granularity, cardinality,
                       layers, hidden, embedding_dim, seed=seed)
    return panel, model


@pytest.fixture(scope="session")
def trained_gaussian():
    """One small Gaussian model shared read-only across tests (trained once)."""
    panel = sinusoid_panel(num_series=12, n=90, seed=42)
    cfg = TrainConfig(
        likelihood="gaussian", conditioning_length=21, prediction_length=7,
        num_layers=2, hidden_units=16, embedding_dim=4, batch_size=32,
        learning_rate=1e-2, max_batches=200, patience=10,
        windows_per_epoch=320, seed=0,
    )
    params, log = train(panel, cfg)
    return panel, params, log


def write_jsonl(path, rows):
    import json

    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    return path
