"""Price panels: ingestion, returns, ex-ante volatility, winsorisation and
synthetic panels with planted network structure.

All panels are dense ``date x asset`` float arrays with NaN marking
undefined entries plus an explicit boolean ``available`` mask. Panels are
frozen dataclasses; every function here returns new arrays.

Synthetic randomness comes from the PCG64 bit generator (O'Neill 2014,
``numpy.random.PCG64``) read through ``random_raw``. Uniforms are the top
53 bits of each 64-bit word scaled by 2**-53, and normals are produced by
the Box-Muller transform implemented below. Only the raw PCG64 stream is
used, so fixtures do not depend on numpy's distribution code.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TRADING_DAYS = 252
VOL_FLOOR = 1e-4
VOL_MIN_PERIODS = 20


class DataError(ValueError):
    """Base class for input data problems."""


class ParseError(DataError):
    pass


class ConflictError(DataError):
    pass


class ValidationError(DataError):
    pass


@dataclass(frozen=True)
class PricePanel:
    dates: np.ndarray  # datetime64[D], strictly increasing
    tickers: tuple[str, ...]
    prices: np.ndarray  # (T, N), NaN where unavailable
    available: np.ndarray  # (T, N) bool

    def __post_init__(self):
        T, N = self.prices.shape
        if len(self.dates) != T or len(self.tickers) != N:
            raise ValidationError("panel shape does not match dates/tickers")
        if T > 1 and not np.all(np.diff(self.dates.astype("int64")) > 0):
            raise ValidationError("dates must be strictly increasing")
        if len(set(self.tickers)) != N:
            raise ValidationError("duplicate tickers")
        p = self.prices[self.available]
        if not np.all(np.isfinite(p)) or np.any(p <= 0):
            raise ValidationError("prices must be finite and > 0 where available")
        if np.any(np.isfinite(self.prices[~self.available])):
            raise ValidationError("prices present where available is false")

    @property
    def shape(self) -> tuple[int, int]:
        return self.prices.shape

    def to_csv(self, path) -> None:
        """Write the panel in the long ``date,ticker,price`` layout."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["date", "ticker", "price"])
            for t, d in enumerate(self.dates):
                for i, tk in enumerate(self.tickers):
                    if self.available[t, i]:
                        out.writerow([str(d), tk, repr(float(self.prices[t, i]))])

    def slice_dates(self, stop: int) -> "PricePanel":
        """Panel restricted to the first ``stop`` dates."""
        return PricePanel(self.dates[:stop], self.tickers,
                          self.prices[:stop].copy(), self.available[:stop].copy())


@dataclass(frozen=True)
class ReturnPanel:
    dates: np.ndarray
    tickers: tuple[str, ...]
    returns: np.ndarray  # (T, N) simple daily returns, NaN where undefined
    available: np.ndarray


@dataclass(frozen=True)
class VolPanel:
    dates: np.ndarray
    tickers: tuple[str, ...]
    sigma_daily: np.ndarray  # NaN where undefined
    span_days: int
    vol_floor: float = VOL_FLOOR

    @property
    def sigma_ann(self) -> np.ndarray:
        return self.sigma_daily * math.sqrt(TRADING_DAYS)

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.sigma_daily)


# ---------------------------------------------------------------------------
# ingestion

def load_csv(path, date_format: str = "%Y-%m-%d") -> PricePanel:
    """Read a long-format ``date,ticker,price`` CSV into an aligned panel.

    The calendar is the union of all tickers' dates. Assets missing on a
    date are marked unavailable.

    Raises:
        ParseError: malformed row or header (message carries the line number).
        ConflictError: the same (date, ticker) appears twice.
        ValidationError: non-positive price, or the file has no rows.
    """
    path = Path(path)
    records: dict[tuple[dt.date, str], float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValidationError(f"{path}: no rows")
        if [c.strip().lower() for c in header] != ["date", "ticker", "price"]:
            raise ParseError(f"{path}:1: expected header date,ticker,price, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            ds, ticker, ps = (c.strip() for c in row)
            try:
                day = dt.datetime.strptime(ds, date_format).date()
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad date {ds!r}") from exc
            try:
                price = float(ps)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad price {ps!r}") from exc
            if not ticker:
                raise ParseError(f"{path}:{lineno}: empty ticker")
            if not math.isfinite(price) or price <= 0:
                raise ValidationError(f"{path}:{lineno}: non-positive price {ps!r} for {ticker}")
            key = (day, ticker)
            if key in records:
                raise ConflictError(f"{path}:{lineno}: duplicate row for ({ds}, {ticker})")
            records[key] = price
    if not records:
        raise ValidationError(f"{path}: no rows")

    days = sorted({d for d, _ in records})
    tickers = tuple(sorted({tk for _, tk in records}))
    t_index = {d: k for k, d in enumerate(days)}
    i_index = {tk: k for k, tk in enumerate(tickers)}
    prices = np.full((len(days), len(tickers)), np.nan)
    for (d, tk), p in records.items():
        prices[t_index[d], i_index[tk]] = p
    return PricePanel(np.array(days, dtype="datetime64[D]"), tickers, prices, np.isfinite(prices))


# ---------------------------------------------------------------------------
# returns and volatility

def compute_returns(panel: PricePanel) -> ReturnPanel:
    """Simple daily returns ``p_t / p_{t-1} - 1`` on consecutive calendar rows.

    The first available day of an asset, and the re-entry day after a gap,
    have no return.
    """
    p = panel.prices
    r = np.full_like(p, np.nan)
    both = panel.available[1:] & panel.available[:-1]
    r[1:][both] = p[1:][both] / p[:-1][both] - 1.0
    return ReturnPanel(panel.dates, panel.tickers, r, np.isfinite(r))


def _ewm_moments(x: np.ndarray, decay: float):
    """Causal exponentially weighted mean, biased variance and count.

    Weights are ``decay**k`` over the *observed* entries of each column
    (NaNs are skipped and do not advance the decay). Updates use the
    weighted Welford recursion so constant inputs give exactly zero variance.
    """
    T = x.shape[0]
    mean = np.full(x.shape, np.nan)
    var = np.full(x.shape, np.nan)
    count = np.zeros(x.shape, dtype=np.int64)
    W = np.zeros(x.shape[1:])
    m = np.zeros(x.shape[1:])
    V = np.zeros(x.shape[1:])
    n = np.zeros(x.shape[1:], dtype=np.int64)
    for t in range(T):
        obs = np.isfinite(x[t])
        if obs.any():
            xt = x[t][obs]
            w_old = decay * W[obs]
            w_new = w_old + 1.0
            m_old = m[obs]
            m_new = m_old + (xt - m_old) / w_new
            V[obs] = (w_old * (V[obs] + (m_old - m_new) ** 2) + (xt - m_new) ** 2) / w_new
            m[obs] = m_new
            W[obs] = w_new
            n[obs] += 1
        seen = n > 0
        mean[t][seen] = m[seen]
        var[t][seen] = V[seen]
        count[t] = n
    return mean, var, count


def ewm_volatility(returns: ReturnPanel, span_days: int = 60, *,
                   vol_floor: float = VOL_FLOOR, min_periods: int = VOL_MIN_PERIODS) -> VolPanel:
    """EWM standard deviation of daily returns with decay ``1 - 2/(span+1)``.

    Defined only on days where the asset has a return and at least
    ``min_periods`` returns have been observed; floored at ``vol_floor``.
    """
    if span_days < 2:
        raise ValueError(f"span_days must be >= 2, got {span_days}")
    decay = 1.0 - 2.0 / (span_days + 1.0)
    _, var, count = _ewm_moments(returns.returns, decay)
    sigma = np.sqrt(np.maximum(var, 0.0))
    sigma = np.maximum(sigma, vol_floor)
    ok = returns.available & (count >= min_periods)
    sigma = np.where(ok, sigma, np.nan)
    return VolPanel(returns.dates, returns.tickers, sigma, span_days, vol_floor)


def winsor_bounds(x: np.ndarray, half_life: float = 252, n_sigmas: float = 5.0):
    """Causal clipping band ``mean -/+ n_sigmas * std`` from EWM statistics of ``x``.

    Statistics at row t use rows up to and including t. Works column-wise on
    any array whose first axis is time.
    """
    if half_life < 1:
        raise ValueError("half_life must be >= 1")
    if not n_sigmas > 0:
        raise ValueError("n_sigmas must be > 0")
    decay = 0.5 ** (1.0 / half_life)
    mean, var, _ = _ewm_moments(np.asarray(x, dtype=float), decay)
    sd = np.sqrt(np.maximum(var, 0.0))
    return mean - n_sigmas * sd, mean + n_sigmas * sd


def winsorize(x: np.ndarray, half_life: float = 252, n_sigmas: float = 5.0) -> np.ndarray:
    """Clip each column to its causal EWM band; NaNs pass through."""
    x = np.asarray(x, dtype=float)
    if math.isinf(n_sigmas):
        return x.copy()
    lo, hi = winsor_bounds(x, half_life, n_sigmas)
    out = np.clip(x, lo, hi)
    out[~np.isfinite(x)] = np.nan
    return out


# ---------------------------------------------------------------------------
# synthetic panels

class PCGStream:
    """Portable uniform/normal draws from the raw PCG64 stream."""

    def __init__(self, seed: int):
        self._bits = np.random.PCG64(int(seed))

    def uniform(self, size: int) -> np.ndarray:
        raw = self._bits.random_raw(size)
        # (k + 0.5) * 2**-53 keeps draws strictly inside (0, 1)
        return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53

    def normal(self, size: int) -> np.ndarray:
        half = (size + 1) // 2
        u1 = self.uniform(half)
        u2 = self.uniform(half)
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([rad * np.cos(2 * np.pi * u2), rad * np.sin(2 * np.pi * u2)])
        return z[:size]


def block_graph(n_assets: int, n_blocks: int = 2) -> np.ndarray:
    """Unit-weight graph linking every pair inside each contiguous block."""
    labels = np.arange(n_assets) * n_blocks // n_assets
    g = (labels[:, None] == labels[None, :]).astype(float)
    np.fill_diagonal(g, 0.0)
    return g


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic panel with network momentum spillover.

    Every asset owns a latent AR(1) trend with unit stationary variance and
    the given half-life. The drift an asset actually earns mixes its own
    trend with the degree-weighted average of its neighbours' trends
    (``trend_coupling``); daily shocks are mixed the same way with
    ``noise_coupling``. Assets without neighbours keep their own processes.
    """
    n_assets: int
    n_days: int
    planted_graph: np.ndarray
    trend_strength: float = 0.006
    noise_scale: float = 0.02
    seed: int = 0
    trend_half_life: float = 20.0
    trend_coupling: float = 1.0
    noise_coupling: float = 0.1
    start_date: str = "2000-01-03"

    def __post_init__(self):
        g = np.asarray(self.planted_graph, dtype=float)
        object.__setattr__(self, "planted_graph", g)
        if self.n_assets < 1 or self.n_days < 2:
            raise ValidationError("need n_assets >= 1 and n_days >= 2")
        if g.shape != (self.n_assets, self.n_assets):
            raise ValidationError(f"planted_graph must be {self.n_assets}x{self.n_assets}")
        if not np.allclose(g, g.T, atol=0.0):
            raise ValidationError("planted_graph must be symmetric")
        if np.any(g < 0) or np.any(np.diag(g) != 0):
            raise ValidationError("planted_graph must be nonnegative with zero diagonal")
        if not (self.trend_strength > 0 and self.noise_scale > 0 and self.trend_half_life > 0):
            raise ValidationError("trend_strength, noise_scale and trend_half_life must be > 0")
        for c in (self.trend_coupling, self.noise_coupling):
            if not 0.0 <= c <= 1.0:
                raise ValidationError("couplings must lie in [0, 1]")

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticSpec":
        doc = dict(doc)
        g = doc.get("planted_graph")
        n = int(doc["n_assets"])
        if g is None or g == "none":
            g = np.zeros((n, n))
        elif isinstance(g, dict):
            if g.get("kind") != "blocks":
                raise ValidationError(f"unknown planted_graph kind {g.get('kind')!r}")
            g = block_graph(n, int(g.get("n_blocks", 2)))
        doc["planted_graph"] = np.asarray(g, dtype=float)
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ValidationError(f"unknown synthetic spec keys: {sorted(extra)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> "SyntheticSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _mixing_matrix(g: np.ndarray, coupling: float) -> np.ndarray:
    deg = g.sum(axis=1)
    has = deg > 0
    P = np.zeros_like(g)
    P[has] = g[has] / deg[has, None]
    M = np.eye(len(g))
    M[has] = (1.0 - coupling) * M[has] + coupling * P[has]
    return M


def generate_synthetic(spec: SyntheticSpec) -> PricePanel:
    """Deterministic synthetic price panel; prices start at 100."""
    N, T = spec.n_assets, spec.n_days
    rng = PCGStream(spec.seed)
    phi = 0.5 ** (1.0 / spec.trend_half_life)
    innov = rng.normal(T * N).reshape(T, N)
    shocks = rng.normal(T * N).reshape(T, N)

    z = np.empty((T, N))
    z[0] = innov[0]
    scale = math.sqrt(1.0 - phi * phi)
    for t in range(1, T):
        z[t] = phi * z[t - 1] + scale * innov[t]

    drift = z @ _mixing_matrix(spec.planted_graph, spec.trend_coupling).T
    noise = shocks @ _mixing_matrix(spec.planted_graph, spec.noise_coupling).T
    r = spec.trend_strength * drift + spec.noise_scale * noise
    r[0] = 0.0
    r = np.maximum(r, -0.5)
    prices = 100.0 * np.cumprod(1.0 + r, axis=0)

    start = np.datetime64(spec.start_date, "D")
    dates = np.busday_offset(start, np.arange(T), roll="forward")
    tickers = tuple(f"A{i:03d}" for i in range(N))
    return PricePanel(dates.astype("datetime64[D]"), tickers, prices, np.ones((T, N), dtype=bool))
