"""Market-data preparation and walk-forward fitting of every strategy."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import backtest as bt
from .data import PricePanel, compute_returns, ewm_volatility
from .features import (
    LOOKBACK_DAYS, MACD_SCALES, build_U, build_V, lookback_sq_distances, macd_feature,
)
from .graphsolver import SolverConfig, unvech
from .model import graph_features, linreg_fit, normalize_graph, solve_graphs
from .training import (
    Section, TrainConfig, WalkForwardPlan, build_sections, loss_mse, select_and_train,
    split_train_valid, training_rows,
)
from .unroll import unroll_forward

logger = logging.getLogger(__name__)

STRATEGIES = ("long_only", "macd", "linreg", "glinreg", "l2gmom", "l2gmom_sr")
LEARNED = ("linreg", "glinreg", "l2gmom", "l2gmom_sr")


@dataclass
class FeatureConfig:
    vol_span: int = 60
    winsor_half_life: float = 252
    winsor_sigmas: float = 5.0
    lookback: int = LOOKBACK_DAYS
    sigma_tgt: float = 0.15


@dataclass
class MarketData:
    panel: PricePanel
    returns: np.ndarray  # (T, N) r[t] over (t-1, t]
    sigma_daily: np.ndarray
    sigma_ann: np.ndarray
    features: object  # FeaturePanel
    lookback: object  # LookbackPanel
    sq_dist: np.ndarray  # (T, N, N)
    macd_signals: np.ndarray  # (T, N, 3) unwinsorised
    cfg: FeatureConfig

    @property
    def dates(self):
        return self.panel.dates

    @property
    def model_valid(self) -> np.ndarray:
        """Asset-days usable by the learned models."""
        return self.features.valid & self.lookback.valid & np.isfinite(self.sigma_daily)

    def sections(self, rows) -> list[Section]:
        return build_sections(rows, self.features.valid & self.lookback.valid, self.features.U,
                              self.sq_dist, self.returns, self.sigma_daily, self.cfg.sigma_tgt,
                              self.lookback)

    def eligible_rows(self) -> np.ndarray:
        return np.flatnonzero(self.model_valid.any(axis=1))


def prepare(panel: PricePanel, cfg: FeatureConfig | None = None) -> MarketData:
    cfg = cfg or FeatureConfig()
    rets = compute_returns(panel)
    vols = ewm_volatility(rets, cfg.vol_span)
    U = build_U(rets, vols, panel, winsor_half_life=cfg.winsor_half_life,
                winsor_sigmas=cfg.winsor_sigmas)
    V = build_V(U, cfg.lookback)
    sq = lookback_sq_distances(V)
    macd = np.stack([macd_feature(panel, s, l) for s, l in MACD_SCALES], axis=-1)
    return MarketData(panel, rets.returns, vols.sigma_daily, vols.sigma_ann, U, V, sq, macd, cfg)


# ---------------------------------------------------------------------------
# per-window fitting

def _scatter(T, N, sections, values) -> np.ndarray:
    out = np.full((T, N), np.nan)
    for s, v in zip(sections, values):
        out[s.t, s.assets] = v
    return out


def fit_linreg(train, test):
    X = np.concatenate([s.U[s.has_target] for s in train])
    y = np.concatenate([s.target[s.has_target] for s in train])
    head = linreg_fit(X, y)
    preds = [np.sign(s.U @ head.theta + head.b) for s in test]
    return preds, {"theta": head.theta.tolist(), "b": head.b}


@dataclass
class GraphGrid:
    alphas: tuple = (0.1, 0.5, 1.0, 2.0)
    betas: tuple = (0.1, 0.5, 1.0, 2.0)
    gamma: float = 0.1
    tol: float = 1e-6
    max_iters: int = 2000


def _pooled_xy(feats, sections):
    X = np.concatenate([f[s.has_target] for f, s in zip(feats, sections)])
    y = np.concatenate([s.target[s.has_target] for s in sections])
    return X, y


def fit_glinreg(train, valid, test, grid: GraphGrid):
    """Pick (alpha, beta) on validation MSE, refit on train+valid, predict test."""
    fit_secs = train + valid
    trials = []
    best = None
    for a in grid.alphas:
        for b in grid.betas:
            cfg = SolverConfig(alpha=a, beta=b, gamma=grid.gamma, tol=grid.tol,
                               max_iters=grid.max_iters)
            graphs, ok = solve_graphs([s.h for s in fit_secs], cfg)
            feats = graph_features(graphs, [s.U for s in fit_secs])
            k = len(train)
            tr = [i for i in range(k) if ok[i]]
            Xt, yt = _pooled_xy([feats[i] for i in tr], [train[i] for i in tr])
            head = linreg_fit(Xt, yt)
            Xv, yv = _pooled_xy(feats[k:], valid)
            mse = loss_mse(Xv @ head.theta + head.b, yv)
            trials.append({"alpha": a, "beta": b, "valid_mse": mse,
                           "non_converged": int((~ok).sum())})
            if best is None or mse < best[0]:
                best = (mse, cfg, feats, ok)
    mse, cfg, feats, ok = best
    keep = [i for i in range(len(fit_secs)) if ok[i]]
    X, y = _pooled_xy([feats[i] for i in keep], [fit_secs[i] for i in keep])
    head = linreg_fit(X, y)
    graphs, _ = solve_graphs([s.h for s in test], cfg)
    preds = [np.sign(f @ head.theta + head.b)
             for f in graph_features(graphs, [s.U for s in test])]
    log = {"chosen": {"alpha": cfg.alpha, "beta": cfg.beta}, "grid": trials,
           "theta": head.theta.tolist(), "b": head.b}
    return preds, log


def model_config(base: TrainConfig, kind: str) -> TrainConfig:
    return replace(base, loss="mse" if kind == "l2gmom" else "neg_sharpe")


@dataclass
class WalkForwardResult:
    positions: dict  # strategy -> (T, N)
    test_rows: np.ndarray
    logs: list = field(default_factory=list)  # per window
    checkpoints: list = field(default_factory=list)  # per window {strategy: dict}


def walk_forward(md: MarketData, plan: WalkForwardPlan, strategies=STRATEGIES,
                 train_cfgs: dict | None = None, graph_grid: GraphGrid | None = None) -> WalkForwardResult:
    """Fit every requested strategy per window and stitch test-slice positions.

    Args:
        md: prepared market data.
        plan: expanding windows with consecutive test slices.
        strategies: names from ``STRATEGIES``.
        train_cfgs: ``{"l2gmom": TrainConfig, "l2gmom_sr": TrainConfig}``.
        graph_grid: (alpha, beta) grid for GLinReg.
    """
    unknown = set(strategies) - set(STRATEGIES)
    if unknown:
        raise ValueError(f"unknown strategies {sorted(unknown)}")
    train_cfgs = train_cfgs or {}
    graph_grid = graph_grid or GraphGrid()
    T, N = md.returns.shape
    eligible = md.eligible_rows()
    positions = {s: np.full((T, N), np.nan) for s in strategies}
    test_rows = []
    result = WalkForwardResult(positions, np.zeros(0, dtype=int))

    static = {}
    if "long_only" in strategies:
        static["long_only"] = bt.strategy_long_only(md.sigma_ann)
    if "macd" in strategies:
        static["macd"] = bt.strategy_macd(md.macd_signals)

    for wi, win in enumerate(plan.windows):
        rows = np.arange(win.test_start, win.test_end + 1)
        test_rows.append(rows)
        for name, x in static.items():
            positions[name][rows] = x[rows]
        log = {"window": wi, "train_end": str(md.dates[win.train_end]),
               "test_start": str(md.dates[win.test_start]), "test_end": str(md.dates[win.test_end])}
        ckpt = {}
        if not set(strategies) & set(LEARNED):
            result.logs.append(log)
            continue
        tr_rows = training_rows(win, eligible)
        if len(tr_rows) < 2:
            raise ValueError(f"window {wi} has no valid training dates")
        fit_rows, val_rows = split_train_valid(tr_rows, win.valid_fraction)
        train, valid = md.sections(fit_rows), md.sections(val_rows)
        test = md.sections(rows[np.isin(rows, eligible)])
        log["n_train_dates"], log["n_valid_dates"] = len(train), len(valid)

        if "linreg" in strategies:
            preds, info = fit_linreg(train + valid, test)
            positions["linreg"] = np.where(np.isnan(positions["linreg"]),
                                           _scatter(T, N, test, preds), positions["linreg"])
            ckpt["linreg"] = log["linreg"] = info
        if "glinreg" in strategies:
            preds, info = fit_glinreg(train, valid, test, graph_grid)
            positions["glinreg"] = np.where(np.isnan(positions["glinreg"]),
                                            _scatter(T, N, test, preds), positions["glinreg"])
            log["glinreg"] = info
            ckpt["glinreg"] = {k: info[k] for k in ("chosen", "theta", "b")}
        for kind in ("l2gmom", "l2gmom_sr"):
            if kind not in strategies:
                continue
            cfg = model_config(train_cfgs.get(kind, TrainConfig()), kind)
            ens, tlog = select_and_train(train, valid, cfg)
            preds = ens.positions(test)
            positions[kind] = np.where(np.isnan(positions[kind]),
                                       _scatter(T, N, test, preds), positions[kind])
            log[kind] = tlog
            ckpt[kind] = ens.to_dict()
        result.logs.append(log)
        result.checkpoints.append(ckpt)
        logger.info("window %d done", wi)

    result.test_rows = np.concatenate(test_rows) if test_rows else np.zeros(0, dtype=int)
    return result


def evaluate(md: MarketData, wf: WalkForwardResult, sigma_tgt: float = 0.15) -> dict:
    """Strategy records restricted to the stitched test rows."""
    return {name: bt.make_record(name, x, md.returns, md.sigma_ann, wf.test_rows, sigma_tgt)
            for name, x in wf.positions.items()}


def network_snapshot(md: MarketData, model, t: int):
    """Normalised graph a trained network model produces on row ``t``.

    Returns the asset indices involved and the (n, n) normalised adjacency;
    empty when fewer than two assets have valid inputs.
    """
    secs = md.sections([t])
    if not secs or secs[0].n < 2:
        return np.zeros(0, dtype=int), np.zeros((0, 0))
    s = secs[0]
    w, _ = unroll_forward(s.h[None, :], model.unroll, keep_tape=False)
    return s.assets, normalize_graph(unvech(w[0], s.n))
