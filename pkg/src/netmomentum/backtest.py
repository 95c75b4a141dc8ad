"""Volatility-targeted portfolio returns, performance metrics, transaction
costs and diversification statistics.

Timing: ``positions[t]`` is the position taken at the close of row t and
earns the return realised over (t, t+1], i.e. ``returns[t + 1]``.
Portfolio series are indexed by the decision row t. Volatilities passed
here are annualised ex-ante estimates at t.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .features import macd_position

SIGMA_TGT = 0.15
DAYS = 252
COST_LEVELS_BPS = (0.5, 1.0, 2.0, 3.0, 4.0, 5.0)
METRIC_COLUMNS = ("return", "vol", "sharpe", "downside_deviation", "mdd", "mdd_duration",
                  "sortino", "calmar", "hit_rate", "avg_profit_over_avg_loss")


def _next(returns: np.ndarray) -> np.ndarray:
    r_next = np.full_like(returns, np.nan, dtype=float)
    r_next[:-1] = returns[1:]
    return r_next


def _active(positions, r_next, sigma_ann):
    return np.isfinite(positions) & np.isfinite(r_next) & np.isfinite(sigma_ann) & (sigma_ann > 0)


def portfolio_returns(positions, returns, sigma_ann, sigma_tgt: float = SIGMA_TGT) -> np.ndarray:
    """Equal-weight average of volatility-scaled position returns.

    An asset counts on row t when its position, volatility and next-day
    return are all defined. Rows with no such asset are NaN.
    """
    x = np.asarray(positions, dtype=float)
    r_next = _next(np.asarray(returns, dtype=float))
    s = np.asarray(sigma_ann, dtype=float)
    act = _active(x, r_next, s)
    contrib = np.where(act, x * sigma_tgt / np.where(act, s, 1.0) * np.where(act, r_next, 0.0), 0.0)
    n = act.sum(axis=1)
    out = np.full(x.shape[0], np.nan)
    out[n > 0] = contrib[n > 0].sum(axis=1) / n[n > 0]
    return out


def cost_adjusted_returns(positions, returns, sigma_ann, c_bps: float,
                          sigma_tgt: float = SIGMA_TGT, cost_vol: str = "asset") -> np.ndarray:
    """Portfolio returns net of a linear turnover charge.

    Each active asset pays ``c * s * |x_t / sigma_t - x_{t-1} / sigma_{t-1}|``
    inside the 1/N_t average, with ``c = c_bps * 1e-4``. ``s`` is the asset's
    own ``sigma_t`` (``cost_vol="asset"``) or ``sigma_tgt`` (``"target"``).
    A missing previous position counts as flat.
    """
    if c_bps < 0:
        raise ValueError("c_bps must be >= 0")
    if cost_vol not in ("asset", "target"):
        raise ValueError(f"unknown cost_vol {cost_vol!r}")
    x = np.asarray(positions, dtype=float)
    r_next = _next(np.asarray(returns, dtype=float))
    s = np.asarray(sigma_ann, dtype=float)
    act = _active(x, r_next, s)
    lev = np.where(np.isfinite(x) & np.isfinite(s) & (s > 0), x / np.where(s > 0, s, 1.0), 0.0)
    prev = np.vstack([np.zeros((1, x.shape[1])), lev[:-1]])
    scale = np.where(act, s, 0.0) if cost_vol == "asset" else sigma_tgt
    cost = c_bps * 1e-4 * scale * np.abs(lev - prev)
    gross = np.where(act, x * sigma_tgt / np.where(act, s, 1.0) * np.where(act, r_next, 0.0), 0.0)
    n = act.sum(axis=1)
    out = np.full(x.shape[0], np.nan)
    net = np.where(act, gross - cost, 0.0)
    out[n > 0] = net[n > 0].sum(axis=1) / n[n > 0]
    return out


def target_vol_rescale(series, sigma_tgt: float = SIGMA_TGT) -> np.ndarray:
    """Scale a whole return series to an ex-post annualised volatility of ``sigma_tgt``."""
    x = np.asarray(series, dtype=float)
    vals = x[np.isfinite(x)]
    if vals.size < 2:
        raise ValueError("need at least 2 returns to rescale")
    sd = vals.std() * math.sqrt(DAYS)
    if sd == 0:
        raise ValueError("cannot rescale a zero-variance series")
    return x * (sigma_tgt / sd)


def rolling_vol_rescale(series, sigma_tgt: float = SIGMA_TGT, span: int = 60) -> np.ndarray:
    """Ex-ante variant: scale day t by ``sigma_tgt`` over the EWM vol through t-1."""
    import pandas as pd

    s = pd.Series(np.asarray(series, dtype=float))
    vol = s.ewm(span=span, min_periods=20).std().shift(1) * math.sqrt(DAYS)
    return (s * sigma_tgt / vol).to_numpy()


@dataclass(frozen=True)
class MetricsTable:
    """Annualised performance statistics. Undefined ratios are None."""
    ret: float
    vol: float
    sharpe: float | None
    downside_deviation: float | None
    mdd: float
    mdd_duration: float
    sortino: float | None
    calmar: float | None
    hit_rate: float
    avg_profit_over_avg_loss: float | None
    n_days: int

    def row(self) -> list:
        return [self.ret, self.vol, self.sharpe, self.downside_deviation, self.mdd,
                self.mdd_duration, self.sortino, self.calmar, self.hit_rate,
                self.avg_profit_over_avg_loss]


def max_drawdown(series) -> tuple[float, int, int]:
    """Largest peak-to-trough loss of the compounded equity curve starting at 1.

    Returns ``(mdd, peak_day, trough_day)`` where days count from 0 (the
    initial capital) to len(series).
    """
    r = np.asarray(series, dtype=float)
    if np.any(r < -1):
        raise ValueError("returns below -100% cannot be compounded")
    # log equity keeps peak-relative losses free of the 1 - x cancellation
    with np.errstate(divide="ignore"):
        log_eq = np.concatenate([[0.0], np.cumsum(np.log1p(r))])
    peaks = np.maximum.accumulate(log_eq)
    dd = -np.expm1(log_eq - peaks)
    trough = int(np.argmax(dd))
    if dd[trough] <= 0:
        return 0.0, 0, 0
    peak = int(np.flatnonzero(log_eq[:trough + 1] == peaks[trough])[-1])
    return float(dd[trough]), peak, trough


def metrics(series) -> MetricsTable:
    """Performance table of a daily return series (NaNs dropped).

    Standard deviations are population (ddof=0). The downside deviation is
    the std of the negative days only. The MDD duration is the
    peak-to-trough length of the maximum drawdown as a fraction of all days.
    """
    r = np.asarray(series, dtype=float)
    r = r[np.isfinite(r)]
    n = r.size
    if n == 0:
        raise ValueError("empty return series")
    mean = r.mean()
    ann_ret = mean * DAYS
    vol = r.std() * math.sqrt(DAYS)
    neg = r[r < 0]
    pos = r[r > 0]
    dd = neg.std() * math.sqrt(DAYS) if neg.size else None
    mdd, peak, trough = max_drawdown(r)
    return MetricsTable(
        ret=float(ann_ret),
        vol=float(vol),
        sharpe=float(ann_ret / vol) if vol > 0 else None,
        downside_deviation=None if dd is None else float(dd),
        mdd=mdd,
        mdd_duration=(trough - peak) / n,
        sortino=float(ann_ret / dd) if dd else None,
        calmar=float(ann_ret / mdd) if mdd > 0 else None,
        hit_rate=float(pos.size / n),
        avg_profit_over_avg_loss=float(pos.mean() / abs(neg.mean())) if pos.size and neg.size else None,
        n_days=int(n),
    )


def sharpe(series) -> float | None:
    return metrics(series).sharpe


def cost_curve(positions, returns, sigma_ann, levels=COST_LEVELS_BPS, **kw) -> dict:
    """Cost level in bps mapped to the cost-adjusted Sharpe ratio."""
    return {c: sharpe(cost_adjusted_returns(positions, returns, sigma_ann, c, **kw)) for c in levels}


@dataclass
class StrategyRecord:
    name: str
    positions: np.ndarray  # (T, N), NaN where the strategy holds no view
    returns: np.ndarray  # (T,) portfolio returns, NaN outside the evaluation rows

    def rescaled(self, sigma_tgt: float = SIGMA_TGT) -> np.ndarray:
        return target_vol_rescale(self.returns, sigma_tgt)


def make_record(name, positions, returns, sigma_ann, rows=None, sigma_tgt=SIGMA_TGT) -> StrategyRecord:
    """Build a record, optionally restricting evaluation to ``rows``."""
    x = np.array(positions, dtype=float)
    if rows is not None:
        keep = np.zeros(x.shape[0], dtype=bool)
        keep[rows] = True
        x[~keep] = np.nan
    return StrategyRecord(name, x, portfolio_returns(x, returns, sigma_ann, sigma_tgt))


def diversification(records):
    """Pairwise return correlation and position sign agreement.

    Sign agreement is the fraction of (date, asset) cells, defined for both
    strategies, where ``sign(x_a) == sign(x_b)`` (zero only matches zero).

    Raises:
        ValueError: two strategies share fewer than 2 return dates.
    """
    k = len(records)
    corr = np.eye(k)
    agree = np.eye(k)
    for a in range(k):
        for b in range(a + 1, k):
            ra, rb = records[a].returns, records[b].returns
            both = np.isfinite(ra) & np.isfinite(rb)
            if both.sum() < 2:
                raise ValueError(f"{records[a].name} and {records[b].name} do not overlap")
            c = np.corrcoef(ra[both], rb[both])[0, 1]
            corr[a, b] = corr[b, a] = c
            xa, xb = records[a].positions, records[b].positions
            cells = np.isfinite(xa) & np.isfinite(xb)
            g = float(np.mean(np.sign(xa[cells]) == np.sign(xb[cells]))) if cells.any() else math.nan
            agree[a, b] = agree[b, a] = g
    return corr, agree


# ---------------------------------------------------------------------------
# model-free strategies

def strategy_long_only(sigma_ann) -> np.ndarray:
    """x = 1 wherever the asset has an ex-ante volatility."""
    return np.where(np.isfinite(sigma_ann), 1.0, np.nan)


def strategy_macd(macd_signals) -> np.ndarray:
    """Positions from the three MACD signals stacked on the last axis (T, N, 3)."""
    y = np.asarray(macd_signals, dtype=float)
    x = macd_position(np.where(np.isfinite(y), y, 0.0))
    return np.where(np.all(np.isfinite(y), axis=-1), x, np.nan)


# ---------------------------------------------------------------------------
# CSV output

def _fmt(v):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    return repr(float(v))


def write_metrics_csv(path, blocks: dict) -> None:
    """``blocks`` maps a block label ("raw", "rescaled_15pct") to {strategy: MetricsTable}."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# annualised with 252 days/yr; vol and downside deviation use population std; "
                 "mdd on compounded equity; mdd_duration and hit_rate are fractions of days; "
                 "empty cell = undefined\n")
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["block", "strategy", *METRIC_COLUMNS, "n_days"])
        for block, table in blocks.items():
            for name, m in table.items():
                out.writerow([block, name, *(_fmt(v) for v in m.row()), m.n_days])


def write_matrix_csv(path, names, mat, note: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {note}\n")
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["", *names])
        for name, row in zip(names, mat):
            out.writerow([name, *(_fmt(v) for v in row)])
