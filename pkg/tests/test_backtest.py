import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netmomentum.backtest import (
    METRIC_COLUMNS, StrategyRecord, cost_adjusted_returns, cost_curve, diversification,
    make_record, max_drawdown, metrics, portfolio_returns, rolling_vol_rescale,
    strategy_long_only, strategy_macd, target_vol_rescale, write_matrix_csv, write_metrics_csv,
)
from oracles import metric_mismatches


def check_against_oracle(r):
    assert metric_mismatches(metrics(r), r) == []


@pytest.mark.parametrize("seed", range(20))
def test_metrics_match_oracle(seed):
    rng = np.random.default_rng(seed)
    check_against_oracle(rng.normal(0, 0.02, rng.integers(1, 51)))


@settings(max_examples=100, deadline=None)
# rounded so that every nonzero loss is resolvable on a float equity curve
@given(st.lists(st.floats(-0.5, 0.5).map(lambda v: round(v, 8)), min_size=1, max_size=50))
def test_metrics_match_oracle_property(r):
    check_against_oracle(np.array(r))


def test_mdd_example():
    mdd, peak, trough = max_drawdown([0.1, -0.2, 0.1])
    assert mdd == 0.2 and (peak, trough) == (1, 2)


def test_rising_series_has_no_drawdown():
    m = metrics([0.01, 0.02, 0.005])
    assert m.mdd == 0.0 and m.calmar is None and m.sortino is None
    assert m.hit_rate == 1.0


def test_empty_series_raises():
    with pytest.raises(ValueError):
        metrics([np.nan])


def test_single_asset_unit_leverage_returns_asset_return():
    r = np.array([0.0, 0.01, -0.02, 0.03])
    s = np.full((4, 1), 0.15)
    out = portfolio_returns(np.ones((4, 1)), r[:, None], s)
    assert out[:3].tolist() == [0.01, -0.02, 0.03]
    assert np.isnan(out[3])


def test_portfolio_averages_active_assets_only():
    x = np.array([[1.0, -1.0], [1.0, np.nan], [0.0, 0.0]])
    r = np.array([[0.0, 0.0], [0.02, 0.04], [0.01, -0.01]])
    s = np.full((3, 2), 0.3)
    out = portfolio_returns(x, r, s)
    assert out[0] == pytest.approx(0.5 * (0.01 - 0.02))
    assert out[1] == pytest.approx(0.5 * 0.01)


def test_zero_cost_equals_gross():
    rng = np.random.default_rng(0)
    x = np.sign(rng.normal(size=(50, 3)))
    r = rng.normal(0, 0.01, (50, 3))
    s = rng.uniform(0.1, 0.3, (50, 3))
    np.testing.assert_allclose(cost_adjusted_returns(x, r, s, 0.0), portfolio_returns(x, r, s))


def test_cost_hand_computed():
    x = np.array([[1.0], [-1.0], [-1.0]])
    r = np.array([[0.0], [0.01], [0.01]])
    s = np.array([[0.2], [0.25], [0.25]])
    net = cost_adjusted_returns(x, r, s, 10.0)
    c = 10e-4
    assert net[0] == pytest.approx(0.15 / 0.2 * 0.01 - c * 0.2 * abs(1 / 0.2))
    assert net[1] == pytest.approx(-0.15 / 0.25 * 0.01 - c * 0.25 * abs(-1 / 0.25 - 1 / 0.2))
    tgt = cost_adjusted_returns(x, r, s, 10.0, cost_vol="target")
    assert tgt[0] == pytest.approx(0.15 / 0.2 * 0.01 - c * 0.15 * abs(1 / 0.2))


def test_cost_curve_non_increasing():
    rng = np.random.default_rng(1)
    x = np.sign(rng.normal(size=(500, 4)))
    r = rng.normal(0.0005, 0.01, (500, 4)) * x
    curve = cost_curve(x, r, np.full((500, 4), 0.2))
    vals = list(curve.values())
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_cost_rejects_negative():
    with pytest.raises(ValueError):
        cost_adjusted_returns(np.ones((2, 1)), np.zeros((2, 1)), np.ones((2, 1)), -1)


def test_target_vol_rescale():
    r = np.random.default_rng(2).normal(0, 0.02, 300)
    out = target_vol_rescale(r)
    assert out.std() * math.sqrt(252) == pytest.approx(0.15, rel=1e-12)
    assert metrics(out).sharpe == pytest.approx(metrics(r).sharpe, rel=1e-12)
    with pytest.raises(ValueError):
        target_vol_rescale(np.zeros(10))


def test_rolling_vol_rescale_is_causal():
    r = np.random.default_rng(3).normal(0, 0.02, 200)
    a = rolling_vol_rescale(r)
    r2 = r.copy()
    r2[150:] *= 5
    b = rolling_vol_rescale(r2)
    np.testing.assert_array_equal(a[:150], b[:150])


def test_diversification_identical_and_opposite():
    rng = np.random.default_rng(4)
    x = np.sign(rng.normal(size=(100, 3)))
    ra = rng.normal(size=100)
    a = StrategyRecord("a", x, ra)
    b = StrategyRecord("b", -x, -ra)
    corr, agree = diversification([a, a, b])
    assert corr[0, 1] == pytest.approx(1.0) and agree[0, 1] == 1.0
    assert corr[0, 2] == pytest.approx(-1.0) and agree[0, 2] == 0.0


def test_diversification_needs_overlap():
    a = StrategyRecord("a", np.ones((3, 1)), np.array([0.1, np.nan, np.nan]))
    b = StrategyRecord("b", np.ones((3, 1)), np.array([np.nan, 0.1, 0.2]))
    with pytest.raises(ValueError):
        diversification([a, b])


def test_long_only_profits_on_rising_market():
    T, N = 300, 3
    r = np.full((T, N), 0.001)
    s = np.full((T, N), 0.1)
    rec = make_record("long_only", strategy_long_only(s), r, s)
    assert metrics(rec.returns).ret > 0


def test_make_record_restricts_rows():
    s = np.full((10, 2), 0.1)
    rec = make_record("x", np.ones((10, 2)), np.full((10, 2), 0.01), s, rows=np.arange(5, 8))
    assert np.flatnonzero(np.isfinite(rec.returns)).tolist() == [5, 6, 7]


def test_macd_strategy_masks_missing_signal():
    y = np.full((2, 1, 3), np.sqrt(2))
    y[1, 0, 0] = np.nan
    x = strategy_macd(y)
    assert x[0, 0] == pytest.approx(0.9638, abs=1e-4) and np.isnan(x[1, 0])


def test_metrics_csv_layout(tmp_path):
    m = metrics([0.01, -0.02, 0.005])
    write_metrics_csv(tmp_path / "m.csv", {"raw": {"a": m}})
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0].startswith("#")
    assert lines[1].split(",") == ["block", "strategy", *METRIC_COLUMNS, "n_days"]
    assert lines[2].startswith("raw,a,")
    write_matrix_csv(tmp_path / "c.csv", ["a", "b"], np.eye(2), "note")
    assert (tmp_path / "c.csv").read_text().splitlines()[1] == ",a,b"
