"""Momentum features per asset-day and the stacked lookback representation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .data import PricePanel, ReturnPanel, VolPanel, winsorize

RETURN_HORIZONS = (1, 21, 63, 126, 252)
MACD_SCALES = ((8, 24), (16, 48), (32, 96))
FEATURE_NAMES = (
    "ret_1d", "ret_21d", "ret_63d", "ret_126d", "ret_252d",
    "macd_8_24", "macd_16_48", "macd_32_96",
)
LOOKBACK_DAYS = 252
STD_FLOOR = 1e-8
PHI_PEAK = math.sqrt(2.0) * math.exp(-0.5) / 0.89


@dataclass(frozen=True)
class FeaturePanel:
    dates: np.ndarray
    tickers: tuple[str, ...]
    U: np.ndarray  # (T, N, 8), NaN where undefined
    valid: np.ndarray  # (T, N): all 8 features finite
    feature_names: tuple[str, ...] = FEATURE_NAMES

    def at(self, t: int):
        """Indices of valid assets at row ``t`` and their feature rows."""
        idx = np.flatnonzero(self.valid[t])
        return idx, self.U[t, idx]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["date", "ticker", "feature", "value"])
            for t, d in enumerate(self.dates):
                for i in np.flatnonzero(self.valid[t]):
                    for k, name in enumerate(self.feature_names):
                        out.writerow([str(d), self.tickers[i], name, repr(float(self.U[t, i, k]))])


@dataclass(frozen=True)
class LookbackPanel:
    """Lazily stacked lookback matrices.

    Row i of ``V_t`` is asset i's feature vectors for days ``t-delta+1 .. t``
    concatenated oldest first (day-major: ``[U_{t-delta+1}, ..., U_t]``).
    """
    features: FeaturePanel
    delta: int
    valid: np.ndarray  # (T, N)

    @property
    def dates(self):
        return self.features.dates

    def at(self, t: int):
        idx = np.flatnonzero(self.valid[t])
        if t + 1 < self.delta:
            return idx, np.zeros((0, 8 * self.delta))
        window = self.features.U[t - self.delta + 1:t + 1, idx]  # (delta, n, 8)
        return idx, window.transpose(1, 0, 2).reshape(len(idx), -1)


def norm_return(returns: ReturnPanel, vols: VolPanel, horizon_days: int) -> np.ndarray:
    """Compounded return over the last ``horizon_days`` scaled by ``sigma * sqrt(horizon)``.

    Masked if any daily return in the window is missing.
    """
    if horizon_days < 1:
        raise ValueError("horizon_days must be >= 1")
    r = returns.returns
    if horizon_days == 1:
        cum = r.copy()
    else:
        T = r.shape[0]
        logs = np.log1p(np.where(np.isfinite(r), r, 0.0))
        miss = (~np.isfinite(r)).astype(np.int64)
        csum = np.vstack([np.zeros((1, r.shape[1])), np.cumsum(logs, axis=0)])
        cmiss = np.vstack([np.zeros((1, r.shape[1]), dtype=np.int64), np.cumsum(miss, axis=0)])
        cum = np.full_like(r, np.nan)
        h = horizon_days
        if T >= h:
            window_log = csum[h:] - csum[:-h]
            window_miss = cmiss[h:] - cmiss[:-h]
            vals = np.expm1(window_log)
            vals[window_miss > 0] = np.nan
            cum[h - 1:] = vals
    return cum / (vols.sigma_daily * math.sqrt(horizon_days))


def _ewm_price(p: np.ndarray, scale: int) -> np.ndarray:
    # decay 1 - 1/S per observed day, i.e. half-life log(0.5)/log(1 - 1/S)
    a = 1.0 / scale
    out = np.full_like(p, np.nan)
    m = np.full(p.shape[1], np.nan)
    for t in range(p.shape[0]):
        obs = np.isfinite(p[t])
        fresh = obs & ~np.isfinite(m)
        m[fresh] = p[t, fresh]
        upd = obs & ~fresh
        m[upd] += a * (p[t, upd] - m[upd])
        out[t, obs] = m[obs]
    return out


def _rolling_std(x: np.ndarray, window: int) -> np.ndarray:
    return pd.DataFrame(x).rolling(window, min_periods=window).std(ddof=1).to_numpy()


def macd_feature(prices: PricePanel, short: int, long: int) -> np.ndarray:
    """Volatility-normalised MACD indicator ``y(S, L)`` per asset-day.

    ``MACD = m_S - m_L`` with EWM price averages, divided by the trailing
    63-day price std, then by the trailing 252-day std of that ratio. Both
    stds are floored at 1e-8. Masked until both windows are full.
    """
    if not 1 <= short < long:
        raise ValueError(f"need 1 <= S < L, got S={short}, L={long}")
    p = prices.prices
    macd = _ewm_price(p, short) - _ewm_price(p, long)
    price_sd = np.maximum(_rolling_std(p, 63), STD_FLOOR)
    macd_norm = macd / price_sd
    norm_sd = np.maximum(_rolling_std(macd_norm, LOOKBACK_DAYS), STD_FLOOR)
    return macd_norm / norm_sd


def phi(y):
    """Position scaling ``y * exp(-y^2 / 4) / 0.89``."""
    y = np.asarray(y, dtype=float)
    return y * np.exp(-y * y / 4.0) / 0.89


def macd_position(y_values) -> np.ndarray:
    """Average of ``phi`` over the three MACD signals (last axis)."""
    y = np.asarray(y_values, dtype=float)
    if y.shape[-1] != 3:
        raise ValueError("expected three MACD signals on the last axis")
    return phi(y).mean(axis=-1)


def build_U(returns: ReturnPanel, vols: VolPanel, prices: PricePanel, *,
            winsor_half_life: float = 252, winsor_sigmas: float = 5.0) -> FeaturePanel:
    """Assemble and winsorise the eight momentum features."""
    cols = [norm_return(returns, vols, h) for h in RETURN_HORIZONS]
    cols += [macd_feature(prices, s, l) for s, l in MACD_SCALES]
    raw = np.stack(cols, axis=-1)  # (T, N, 8)
    T, N, K = raw.shape
    U = winsorize(raw.reshape(T, N * K), winsor_half_life, winsor_sigmas).reshape(T, N, K)
    valid = np.all(np.isfinite(U), axis=-1)
    U[~valid] = np.nan
    return FeaturePanel(prices.dates, prices.tickers, U, valid)


def build_V(U: FeaturePanel, delta: int = LOOKBACK_DAYS) -> LookbackPanel:
    """Causal lookback stacking; valid iff the asset is valid on all ``delta`` days."""
    if delta < 1:
        raise ValueError("delta must be >= 1")
    v = U.valid.astype(np.int64)
    c = np.vstack([np.zeros((1, v.shape[1]), dtype=np.int64), np.cumsum(v, axis=0)])
    valid = np.zeros_like(U.valid)
    if len(v) >= delta:
        valid[delta - 1:] = (c[delta:] - c[:-delta]) == delta
    return LookbackPanel(U, delta, valid)


def lookback_sq_distances(V: LookbackPanel) -> np.ndarray:
    """Squared distances between all V rows, for every date at once.

    ``out[t, i, j] = ||V_t[i] - V_t[j]||^2`` computed as a rolling sum of
    daily feature distances. Entries involving an invalid row are NaN.
    """
    U = np.where(V.features.valid[..., None], V.features.U, 0.0)
    T, N, _ = U.shape
    daily = np.empty((T, N, N))
    for i in range(N):
        daily[:, i, :] = ((U[:, i:i + 1, :] - U) ** 2).sum(axis=-1)
    d = V.delta
    out = np.full(daily.shape, np.nan)
    if T >= d:
        c = np.concatenate([np.zeros((1,) + daily.shape[1:]), np.cumsum(daily, axis=0)])
        out[d - 1:] = c[d:] - c[:-d]
    pair_ok = V.valid[:, :, None] & V.valid[:, None, :]
    out[~pair_ok] = np.nan
    # exact zeros on the diagonal; rolling differences may leave rounding dust
    idx = np.arange(N)
    out[:, idx, idx] = np.where(V.valid, 0.0, np.nan)
    return np.maximum(out, 0.0)
