import json

import numpy as np
import pytest

from netmomentum.data import PricePanel, SyntheticSpec, block_graph, generate_synthetic
from netmomentum.pipeline import (
    FeatureConfig, GraphGrid, evaluate, network_snapshot, prepare, walk_forward,
)
from netmomentum.training import Ensemble, TrainConfig, WalkForwardPlan

FEATS = FeatureConfig(lookback=20)
TINY = TrainConfig(L=2, max_epochs=2, patience=1, ensemble_size=2, learning_rate=0.01)
GRID = GraphGrid(alphas=(0.5, 1.0), betas=(1.0,), max_iters=300)
ALL = ("long_only", "macd", "linreg", "glinreg", "l2gmom", "l2gmom_sr")


def panel(seed=0, n_days=900):
    return generate_synthetic(SyntheticSpec(6, n_days, block_graph(6, 2), seed=seed))


@pytest.fixture(scope="module")
def md():
    return prepare(panel(), FEATS)


def run(md, strategies=ALL, n_windows=2):
    plan = WalkForwardPlan.expanding(len(md.dates), 700, 100, n_windows=n_windows)
    cfgs = {"l2gmom": TINY, "l2gmom_sr": TINY}
    return plan, walk_forward(md, plan, strategies, cfgs, GRID)


def test_prepare_shapes(md):
    T, N = md.returns.shape
    assert (T, N) == (900, 6)
    assert md.sq_dist.shape == (T, N, N)
    assert md.macd_signals.shape == (T, N, 3)
    assert md.model_valid[-1].all() and not md.model_valid[0].any()


def test_coverage_and_position_ranges(md):
    plan, wf = run(md)
    np.testing.assert_array_equal(wf.test_rows, np.arange(700, 900))
    for name, x in wf.positions.items():
        assert np.all(np.isnan(x[:700])), name
        held = x[700:][np.isfinite(x[700:])]
        assert held.size > 0
        if name in ("linreg", "glinreg", "l2gmom"):
            assert set(np.unique(held)) <= {-1.0, 0.0, 1.0}
        if name == "l2gmom_sr":
            assert np.all(np.abs(held) < 1)
    assert len(wf.checkpoints) == 2
    recs = evaluate(md, wf)
    assert np.flatnonzero(np.isfinite(recs["macd"].returns)).max() <= 898


def test_walk_forward_is_deterministic(md):
    _, a = run(md, ("linreg", "l2gmom"), 1)
    _, b = run(md, ("linreg", "l2gmom"), 1)
    for k in a.positions:
        np.testing.assert_array_equal(a.positions[k], b.positions[k])
    assert json.dumps(a.checkpoints) == json.dumps(b.checkpoints)


def test_fitted_models_ignore_prices_after_train_end(md):
    plan, wf = run(md, ("linreg", "glinreg", "l2gmom_sr"), 1)
    cut = plan.windows[0].train_end + 1
    prices = md.panel.prices.copy()
    prices[cut:] *= np.linspace(1.0, 3.0, len(prices) - cut)[:, None]
    alt = prepare(PricePanel(md.panel.dates, md.panel.tickers, prices, md.panel.available), FEATS)
    _, wf2 = run(alt, ("linreg", "glinreg", "l2gmom_sr"), 1)
    assert json.dumps(wf.checkpoints[0]) == json.dumps(wf2.checkpoints[0])
    assert not np.array_equal(np.nan_to_num(wf.positions["linreg"]),
                              np.nan_to_num(wf2.positions["linreg"]))


def test_unknown_strategy_rejected(md):
    with pytest.raises(ValueError):
        run(md, ("long_only", "mlp"))


def test_network_snapshot(md):
    _, wf = run(md, ("l2gmom",), 1)
    ens = Ensemble.from_dict(wf.checkpoints[0]["l2gmom"])
    assets, G = network_snapshot(md, ens.members[0], 850)
    assert assets.tolist() == list(range(6))
    np.testing.assert_allclose(G, G.T, atol=1e-15)
    assert np.all(np.diag(G) == 0)
    empty, G0 = network_snapshot(md, ens.members[0], 0)
    assert empty.size == 0 and G0.shape == (0, 0)
