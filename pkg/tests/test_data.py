import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from netmomentum.data import (
    ConflictError, ParseError, PCGStream, PricePanel, SyntheticSpec, ValidationError,
    block_graph, compute_returns, ewm_volatility, generate_synthetic, load_csv,
    winsor_bounds, winsorize,
)


def panel(prices, available=None):
    prices = np.asarray(prices, dtype=float)
    if prices.ndim == 1:
        prices = prices[:, None]
    if available is None:
        available = np.isfinite(prices)
    dates = np.datetime64("2020-01-01") + np.arange(len(prices))
    tickers = tuple(f"T{i}" for i in range(prices.shape[1]))
    return PricePanel(dates, tickers, np.where(available, prices, np.nan), available)


def write(tmp_path, text, name="p.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


# --- load_csv ---------------------------------------------------------------

def test_load_aligns_on_union_calendar(tmp_path):
    p = write(tmp_path, "date,ticker,price\n2020-01-01,A,100\n2020-01-02,A,101\n2020-01-01,B,50\n")
    pan = load_csv(p)
    assert pan.tickers == ("A", "B")
    assert len(pan.dates) == 2
    assert pan.available.tolist() == [[True, True], [True, False]]
    assert np.isnan(pan.prices[1, 1])


def test_load_sorts_rows_by_date(tmp_path):
    p = write(tmp_path, "date,ticker,price\n2020-01-03,A,3\n2020-01-01,A,1\n2020-01-02,A,2\n")
    assert load_csv(p).prices[:, 0].tolist() == [1.0, 2.0, 3.0]


def test_empty_file(tmp_path):
    with pytest.raises(ValidationError, match="no rows"):
        load_csv(write(tmp_path, ""))
    with pytest.raises(ValidationError, match="no rows"):
        load_csv(write(tmp_path, "date,ticker,price\n", "h.csv"))


def test_negative_price_names_row(tmp_path):
    p = write(tmp_path, "date,ticker,price\n2020-01-01,A,100\n2020-01-02,A,-5\n")
    with pytest.raises(ValidationError, match=r":3:.*-5"):
        load_csv(p)


def test_malformed_row_has_line_number(tmp_path):
    p = write(tmp_path, "date,ticker,price\n2020-01-01,A,100\n2020-01-02,A\n")
    with pytest.raises(ParseError, match=":3:"):
        load_csv(p)
    p = write(tmp_path, "date,ticker,price\nnot-a-date,A,1\n", "d.csv")
    with pytest.raises(ParseError, match=":2:"):
        load_csv(p)


def test_duplicate_is_conflict(tmp_path):
    p = write(tmp_path, "date,ticker,price\n2020-01-01,A,1\n2020-01-01,A,2\n")
    with pytest.raises(ConflictError):
        load_csv(p)


def test_csv_roundtrip(tmp_path):
    spec = SyntheticSpec(4, 30, block_graph(4), seed=3)
    pan = generate_synthetic(spec)
    pan.to_csv(tmp_path / "x.csv")
    back = load_csv(tmp_path / "x.csv")
    assert back.tickers == pan.tickers
    np.testing.assert_array_equal(back.dates, pan.dates)
    np.testing.assert_array_equal(back.prices, pan.prices)


def test_panel_rejects_unsorted_dates():
    with pytest.raises(ValidationError):
        PricePanel(np.array(["2020-01-02", "2020-01-01"], dtype="datetime64[D]"), ("A",),
                   np.ones((2, 1)), np.ones((2, 1), bool))


# --- returns ----------------------------------------------------------------

def test_returns_arithmetic():
    r = compute_returns(panel([100, 110, 99])).returns[:, 0]
    assert np.isnan(r[0])
    np.testing.assert_allclose(r[1:], [0.10, -0.10], rtol=0, atol=1e-15)
    r = compute_returns(panel([50, 50, 50])).returns[:, 0]
    assert r[1:].tolist() == [0.0, 0.0]


def test_gap_masks_reentry_day():
    av = np.array([True, True, False, True, True])
    r = compute_returns(panel([1, 2, 3, 4, 5], av[:, None]))
    assert r.available[:, 0].tolist() == [False, True, False, False, True]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.5, 2.0), min_size=2, max_size=40))
def test_returns_reconstruct_prices(growth):
    p = 100.0 * np.cumprod(growth)
    r = compute_returns(panel(p)).returns[:, 0]
    rebuilt = p[0] * np.cumprod(np.concatenate([[1.0], 1.0 + r[1:]]))
    np.testing.assert_allclose(rebuilt, p, rtol=1e-12)


# --- volatility ---------------------------------------------------------------

def explicit_ewm_var(x, decay):
    """Weighted variance by explicit lambda-weight sums over all past values."""
    out = []
    for t in range(len(x)):
        w = decay ** np.arange(t, -1, -1)
        m = np.sum(w * x[:t + 1]) / w.sum()
        out.append(np.sum(w * (x[:t + 1] - m) ** 2) / w.sum())
    return np.array(out)


def test_vol_matches_explicit_weight_oracle():
    rng = np.random.default_rng(1)
    p = 100 * np.cumprod(1 + rng.normal(0, 0.01, 200))
    rets = compute_returns(panel(p))
    vol = ewm_volatility(rets, 60)
    x = rets.returns[1:, 0]
    oracle = np.sqrt(explicit_ewm_var(x, 1 - 2 / 61))
    got = vol.sigma_daily[1:, 0]
    ok = np.isfinite(got)
    assert ok.sum() == len(x) - 19
    np.testing.assert_allclose(got[ok], oracle[ok], rtol=1e-10)
    np.testing.assert_allclose(vol.sigma_ann[1:, 0][ok], oracle[ok] * math.sqrt(252), rtol=1e-10)


def test_vol_matches_pandas_biased_ewm():
    rng = np.random.default_rng(2)
    x = rng.normal(0, 0.02, 300)
    p = 100 * np.cumprod(np.concatenate([[1.0], 1 + x]))
    vol = ewm_volatility(compute_returns(panel(p)), 40).sigma_daily[1:, 0]
    ref = np.sqrt(pd.Series(x).ewm(span=40, adjust=True).var(bias=True)).to_numpy()
    ok = np.isfinite(vol)
    np.testing.assert_allclose(vol[ok], ref[ok], rtol=1e-9)


def test_alternating_series_tends_to_one_percent():
    x = np.tile([0.01, -0.01], 2000)
    p = 100 * np.cumprod(np.concatenate([[1.0], 1 + x]))
    vol = ewm_volatility(compute_returns(panel(p)), 1000).sigma_daily[-1, 0]
    oracle = math.sqrt(explicit_ewm_var(x, 1 - 2 / 1001)[-1])
    assert vol == pytest.approx(oracle, rel=1e-9)
    assert vol == pytest.approx(0.01, rel=1e-3)


def test_constant_returns_hit_floor():
    p = 100 * 1.001 ** np.arange(60)
    vol = ewm_volatility(compute_returns(panel(p)))
    s = vol.sigma_daily[:, 0]
    assert np.all(s[np.isfinite(s)] == 1e-4)


def test_min_periods_masks_early_days():
    p = 100 * np.cumprod(1 + np.random.default_rng(0).normal(0, 0.01, 40))
    s = ewm_volatility(compute_returns(panel(p))).sigma_daily[:, 0]
    # the first price has no return, so the 20th return sits on row 20
    assert np.all(np.isnan(s[:20])) and np.all(np.isfinite(s[20:]))


def test_span_one_is_rejected():
    with pytest.raises(ValueError):
        ewm_volatility(compute_returns(panel([1.0, 2.0])), 1)


def test_vol_invariant_to_prepended_masked_days():
    rng = np.random.default_rng(5)
    p = 100 * np.cumprod(1 + rng.normal(0, 0.01, 80))
    a = ewm_volatility(compute_returns(panel(p))).sigma_daily[:, 0]
    pad = np.concatenate([np.full(15, np.nan), p])
    av = np.isfinite(pad)[:, None]
    b = ewm_volatility(compute_returns(panel(pad, av))).sigma_daily[15:, 0]
    np.testing.assert_array_equal(a, b)


# --- winsorisation --------------------------------------------------------------

def test_spike_clipped_to_band():
    rng = np.random.default_rng(3)
    x = rng.normal(0, 1, 400)
    x[300] = 100.0
    out = winsorize(x[:, None], half_life=252, n_sigmas=5)[:, 0]
    decay = 0.5 ** (1 / 252)
    w = decay ** np.arange(300, -1, -1)
    m = np.sum(w * x[:301]) / w.sum()
    sd = math.sqrt(np.sum(w * (x[:301] - m) ** 2) / w.sum())
    assert out[300] == pytest.approx(m + 5 * sd, rel=1e-10)
    others = np.arange(400) != 300
    # ordinary draws sit well inside +-5 sigma and pass through unchanged
    np.testing.assert_allclose(out[others][1:], x[others][1:], atol=1e-12)


def test_constant_series_unchanged():
    x = np.full((50, 2), 3.0)
    np.testing.assert_array_equal(winsorize(x), x)


def test_infinite_sigmas_is_identity():
    x = np.random.default_rng(0).normal(size=(30, 3))
    x[5, 1] = 1e6
    np.testing.assert_array_equal(winsorize(x, n_sigmas=math.inf), x)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_clipping_is_idempotent_with_frozen_bounds(seed):
    x = np.random.default_rng(seed).standard_t(2, size=(60, 2))
    lo, hi = winsor_bounds(x, 20, 2.0)
    once = np.clip(x, lo, hi)
    np.testing.assert_array_equal(np.clip(once, lo, hi), once)


def test_winsor_rejects_bad_params():
    with pytest.raises(ValueError):
        winsorize(np.ones((3, 1)), half_life=0.5)
    with pytest.raises(ValueError):
        winsorize(np.ones((3, 1)), n_sigmas=0)


# --- synthetic panels -----------------------------------------------------------

def test_pcg_stream_is_reproducible_and_in_range():
    a = PCGStream(7).uniform(1000)
    b = PCGStream(7).uniform(1000)
    np.testing.assert_array_equal(a, b)
    assert a.min() > 0 and a.max() < 1
    z = PCGStream(7).normal(20001)
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1) < 0.03


def test_same_seed_bit_identical():
    spec = SyntheticSpec(5, 200, block_graph(5), seed=11)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert a.prices.tobytes() == b.prices.tobytes()
    assert not np.array_equal(a.prices, generate_synthetic(
        SyntheticSpec(5, 200, block_graph(5), seed=12)).prices)


def test_prices_start_at_100():
    pan = generate_synthetic(SyntheticSpec(3, 10, np.zeros((3, 3))))
    assert np.all(pan.prices[0] == 100.0)


def corr_of(spec):
    r = compute_returns(generate_synthetic(spec)).returns[1:]
    return np.corrcoef(r.T)


def test_empty_graph_gives_uncorrelated_assets():
    c = corr_of(SyntheticSpec(6, 3000, np.zeros((6, 6)), seed=4))
    off = c[~np.eye(6, dtype=bool)]
    assert np.max(np.abs(off)) < 0.1


def test_blocks_correlate_within():
    g = block_graph(8, 2)
    c = corr_of(SyntheticSpec(8, 3000, g, seed=4))
    within = np.abs(c[g > 0]).mean()
    cross = np.abs(c[(g == 0) & ~np.eye(8, dtype=bool)]).mean()
    assert within > cross


def test_block_graph_layout():
    g = block_graph(4, 2)
    assert g.tolist() == [[0, 1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]]


@pytest.mark.parametrize("g", [
    [[0, 1], [0, 0]],  # asymmetric
    [[1, 0], [0, 0]],  # self loop
    [[0, -1], [-1, 0]],  # negative
])
def test_spec_rejects_bad_graphs(g):
    with pytest.raises(ValidationError):
        SyntheticSpec(2, 10, np.array(g, dtype=float))


def test_spec_from_dict_shorthands():
    s = SyntheticSpec.from_dict({"n_assets": 4, "n_days": 10,
                                 "planted_graph": {"kind": "blocks", "n_blocks": 2}})
    np.testing.assert_array_equal(s.planted_graph, block_graph(4, 2))
    s = SyntheticSpec.from_dict({"n_assets": 3, "n_days": 10, "planted_graph": "none"})
    assert not s.planted_graph.any()
    with pytest.raises(ValidationError):
        SyntheticSpec.from_dict({"n_assets": 3, "n_days": 10, "bogus": 1})
