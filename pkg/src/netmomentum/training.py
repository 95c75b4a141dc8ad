"""Losses, mini-batch Adam training with early stopping, ensembles and the
expanding-window walk-forward schedule.

A training sample is one asset on one date. Samples are grouped by date
into ``Section`` objects (the cross-section the graph is learned over), and
mini-batches are whole dates.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .graphsolver import normalize_distances, vech
from .model import HeadParams, NetworkModel
from .unroll import NumericError, UnrollParams

logger = logging.getLogger(__name__)

ANNUALIZATION = math.sqrt(252.0)
SHARPE_EPS = 1e-12


class TrainingDivergence(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses

def loss_mse(y, targets) -> float:
    y = np.asarray(y, dtype=float)
    t = np.asarray(targets, dtype=float)
    if y.size == 0:
        raise ValueError("empty sample set")
    return float(np.mean((y - t) ** 2))


def mse_grad(y, targets):
    y = np.asarray(y, dtype=float)
    res = y - np.asarray(targets, dtype=float)
    return float(np.mean(res ** 2)), 2.0 * res / res.size


def sharpe_from_R(R, eps: float = 0.0):
    """Annualised Sharpe of pooled returns and its gradient with respect to R.

    The Sharpe ratio is ``mean(R) * sqrt(252) / sqrt(mean(R^2) - mean(R)^2 + eps)``.
    """
    R = np.asarray(R, dtype=float)
    n = R.size
    if n < 2:
        raise ValueError("need at least 2 samples for a Sharpe ratio")
    mu = R.mean()
    var = max(float(np.mean(R * R) - mu * mu), 0.0) + eps
    if var <= 0:
        raise ValueError("degenerate Sharpe: zero variance")
    sd = math.sqrt(var)
    sr = mu * ANNUALIZATION / sd
    grad = ANNUALIZATION / n * (1.0 / sd - mu * (R - mu) / sd ** 3)
    return sr, grad


def loss_neg_sharpe(x, returns, vols, sigma_tgt: float = 0.15) -> float:
    """Negative annualised Sharpe of ``R = x * (sigma_tgt / sigma) * r``.

    ``returns`` are next-day returns and ``vols`` annualised ex-ante vols,
    all pooled over the same samples.

    Raises:
        ValueError: fewer than 2 samples or zero variance ("degenerate Sharpe").
    """
    R = np.asarray(x, dtype=float) * sigma_tgt / np.asarray(vols, dtype=float) * np.asarray(returns, dtype=float)
    return -sharpe_from_R(R)[0]


# ---------------------------------------------------------------------------
# samples

@dataclass
class Section:
    """One date's cross-section of assets with valid inputs."""
    t: int
    assets: np.ndarray
    U: np.ndarray  # (n, 8)
    h: np.ndarray  # (E,) unit-mean distances
    target: np.ndarray  # r_{t:t+1} / sigma_daily, NaN when unknown
    scale: np.ndarray  # sigma_tgt / sigma_ann
    r_next: np.ndarray
    lookback: object = None  # LookbackPanel for the V head variant

    @property
    def n(self) -> int:
        return len(self.assets)

    @property
    def key(self) -> bytes:
        return self.assets.tobytes()

    @property
    def has_target(self) -> np.ndarray:
        return np.isfinite(self.target)

    def head_input(self, mode: str) -> np.ndarray:
        if mode == "U":
            return self.U
        idx, V = self.lookback.at(self.t)
        pos = np.searchsorted(idx, self.assets)
        return V[pos]


def build_sections(rows, features_valid, U, sq_dist, returns, sigma_daily, sigma_tgt=0.15,
                   lookback=None) -> list[Section]:
    """Cross-sections for the given date rows.

    Assets enter a section when their feature row, lookback row and
    volatility are defined. Targets need the next day's return.
    """
    T = returns.shape[0]
    out = []
    ann = sigma_daily * ANNUALIZATION
    for t in rows:
        assets = np.flatnonzero(features_valid[t] & np.isfinite(sigma_daily[t]))
        if len(assets) == 0:
            continue
        r_next = returns[t + 1, assets] if t + 1 < T else np.full(len(assets), np.nan)
        sd = sigma_daily[t, assets]
        if len(assets) >= 2:
            h = normalize_distances(vech(sq_dist[t][np.ix_(assets, assets)])).h
        else:
            h = np.zeros(0)
        out.append(Section(int(t), assets, U[t, assets], h, r_next / sd,
                           sigma_tgt / ann[t, assets], r_next, lookback))
    return out


# ---------------------------------------------------------------------------
# configuration

@dataclass
class TrainConfig:
    loss: str = "mse"
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    min_delta: float = 1e-4
    ensemble_size: int = 5
    seed: int = 0
    L: int = 20
    head_input: str = "U"
    init_scale: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    sigma_tgt: float = 0.15
    grid: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.loss not in ("mse", "neg_sharpe"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        for name in ("batch_size", "max_epochs", "patience", "ensemble_size", "L"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        unknown = set(self.grid) - {"L", "batch_size", "learning_rate"}
        if unknown:
            raise ValueError(f"unsupported grid keys {sorted(unknown)}")

    @property
    def kind(self) -> str:
        return "trend" if self.loss == "mse" else "position"

    def grid_points(self) -> list["TrainConfig"]:
        if not self.grid:
            return [self]
        keys = sorted(self.grid)
        return [replace(self, grid={}, **dict(zip(keys, vals)))
                for vals in itertools.product(*(self.grid[k] for k in keys))]


class Adam:
    def __init__(self, size, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# batched evaluation

def _buckets(sections):
    groups: dict[bytes, list[int]] = {}
    for k, s in enumerate(sections):
        groups.setdefault(s.key, []).append(k)
    return list(groups.values())


def predict_sections(model: NetworkModel, sections, keep: bool = False):
    """Model outputs for every section; optionally with per-bucket caches.

    Sections with a single asset have no graph; their output is the bias
    (through tanh for positions).
    """
    outs = [None] * len(sections)
    caches = []
    for ks in _buckets(sections):
        n = sections[ks[0]].n
        if n < 2:
            b = model.head.b
            for k in ks:
                outs[k] = np.full(n, math.tanh(b) if model.kind == "position" else b)
            continue
        h = np.stack([sections[k].h for k in ks])
        X = np.stack([sections[k].head_input(model.head_input) for k in ks])
        out, cache = model.forward_bucket(h, X, keep=keep)
        for row, k in enumerate(ks):
            outs[k] = out[row]
        if keep:
            caches.append((ks, cache))
    return outs, caches


def _pooled(sections, outs, cfg: TrainConfig):
    """Pooled loss inputs: per-section masks plus concatenated arrays."""
    masks = [s.has_target for s in sections]
    vals = np.concatenate([o[m] for o, m in zip(outs, masks)]) if sections else np.zeros(0)
    if cfg.loss == "mse":
        aux = np.concatenate([s.target[m] for s, m in zip(sections, masks)])
    else:
        aux = np.concatenate([(s.scale * s.r_next)[m] for s, m in zip(sections, masks)])
    return masks, vals, aux


def evaluate_loss(model: NetworkModel, sections, cfg: TrainConfig) -> float:
    if cfg.loss == "neg_sharpe":
        sections = [s for s in sections if s.n >= 2]
    outs, _ = predict_sections(model, sections)
    _, vals, aux = _pooled(sections, outs, cfg)
    if vals.size == 0:
        raise ValueError("empty sample set")
    if cfg.loss == "mse":
        return loss_mse(vals, aux)
    return -sharpe_from_R(vals * aux, eps=SHARPE_EPS)[0]


def loss_and_grad(model: NetworkModel, sections, cfg: TrainConfig):
    """Pooled batch loss and flat parameter gradient."""
    if cfg.loss == "neg_sharpe":
        sections = [s for s in sections if s.n >= 2]
    outs, caches = predict_sections(model, sections, keep=True)
    masks, vals, aux = _pooled(sections, outs, cfg)
    if vals.size < 2:
        return None, None
    if cfg.loss == "mse":
        loss, g_vals = mse_grad(vals, aux)
    else:
        sr, g_R = sharpe_from_R(vals * aux, eps=SHARPE_EPS)
        loss, g_vals = -sr, -g_R * aux
    # scatter pooled gradients back to per-section outputs
    g_out = []
    pos = 0
    for o, m in zip(outs, masks):
        g = np.zeros_like(o)
        k = int(m.sum())
        g[m] = g_vals[pos:pos + k]
        pos += k
        g_out.append(g)
    grad = np.zeros(len(model.flat()))
    for ks, cache in caches:
        grad += model.backward_bucket(cache, np.stack([g_out[k] for k in ks]))
    for k, s in enumerate(sections):
        if s.n < 2 and g_out[k].size:
            gb = g_out[k].sum()
            if model.kind == "position":
                gb = float((g_out[k] * (1 - outs[k] ** 2)).sum())
            grad[-1] += gb
    return loss, grad


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    model: NetworkModel
    best_valid: float
    best_epoch: int
    curve: list  # per-epoch {"epoch", "train_loss", "valid_loss"}
    config: dict

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "best_valid": self.best_valid,
                "best_epoch": self.best_epoch, "curve": self.curve, "config": self.config}


def init_model(cfg: TrainConfig, n_inputs: int, rng: np.random.Generator) -> NetworkModel:
    head = HeadParams(rng.normal(0.0, cfg.init_scale, n_inputs), rng.normal(0.0, cfg.init_scale))
    return NetworkModel(UnrollParams.init(cfg.L), head, cfg.kind, cfg.head_input,
                        {"L": cfg.L, "loss": cfg.loss})


def train_one(train_sections, valid_sections, cfg: TrainConfig, seed: int | None = None) -> TrainResult:
    """Train one model with Adam on date mini-batches, keeping the best-validation state.

    Raises:
        ValueError: no validation dates or no training dates.
        TrainingDivergence: the loss or parameters became non-finite.
    """
    if not valid_sections:
        raise ValueError("training window has no validation dates")
    if not train_sections:
        raise ValueError("training window has no training dates")
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    n_inputs = train_sections[0].head_input(cfg.head_input).shape[1]
    model = init_model(cfg, n_inputs, rng)
    opt = Adam(len(model.flat()), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    # the untrained state is logged but never retained: the first trained
    # epoch always becomes the initial best checkpoint
    try:
        init_val = evaluate_loss(model, valid_sections, cfg)
    except (NumericError, FloatingPointError) as exc:
        raise TrainingDivergence(f"seed {seed}: initial model fails: {exc}") from exc
    best, best_epoch, best_model = math.inf, 0, model.copy()
    curve = [{"epoch": 0, "train_loss": None, "valid_loss": init_val}]
    stale = 0
    order = np.arange(len(train_sections))
    for epoch in range(1, cfg.max_epochs + 1):
        rng.shuffle(order)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_sections[k] for k in order[start:start + cfg.batch_size]]
            try:
                loss, grad = loss_and_grad(model, batch, cfg)
            except NumericError as exc:
                raise TrainingDivergence(f"seed {seed} epoch {epoch}: {exc}") from exc
            if loss is None:
                continue
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise TrainingDivergence(f"seed {seed} epoch {epoch}: non-finite loss/gradient "
                                         f"(loss={loss})")
            model.set_flat(opt.step(model.flat(), grad))
            losses.append(loss)
        try:
            val = evaluate_loss(model, valid_sections, cfg)
        except NumericError as exc:
            raise TrainingDivergence(f"seed {seed} epoch {epoch}: {exc}") from exc
        if not math.isfinite(val):
            raise TrainingDivergence(f"seed {seed} epoch {epoch}: non-finite validation loss")
        curve.append({"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else None,
                      "valid_loss": val})
        if not math.isfinite(best) or best - val > cfg.min_delta * abs(best):
            best, best_epoch, best_model, stale = val, epoch, model.copy(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return TrainResult(best_model, float(best), best_epoch, curve, asdict(cfg) | {"seed": seed})


@dataclass
class Ensemble:
    members: list  # NetworkModel

    @property
    def kind(self) -> str:
        return self.members[0].kind

    def outputs(self, sections) -> list:
        """Member-averaged outputs per section (trend y or position x)."""
        acc = None
        for m in self.members:
            outs, _ = predict_sections(m, sections)
            acc = outs if acc is None else [a + o for a, o in zip(acc, outs)]
        return [a / len(self.members) for a in acc]

    def positions(self, sections) -> list:
        outs = self.outputs(sections)
        return [np.sign(o) for o in outs] if self.kind == "trend" else outs

    def to_dict(self) -> dict:
        return {"members": [m.to_dict() for m in self.members]}

    @classmethod
    def from_dict(cls, doc) -> "Ensemble":
        return cls([NetworkModel.from_dict(m) for m in doc["members"]])


def train_ensemble(train_sections, valid_sections, cfg: TrainConfig, first: TrainResult | None = None):
    """Train ``ensemble_size`` members with seeds ``seed + k``.

    ``first`` lets a caller hand over an already trained member for seed + 0.
    """
    results = []
    for k in range(cfg.ensemble_size):
        if k == 0 and first is not None:
            results.append(first)
            continue
        try:
            results.append(train_one(train_sections, valid_sections, cfg, cfg.seed + k))
        except TrainingDivergence as exc:
            raise TrainingDivergence(f"ensemble member {k} failed: {exc}") from exc
    return Ensemble([r.model for r in results]), results


def select_and_train(train_sections, valid_sections, cfg: TrainConfig):
    """Grid search on validation loss (one member per point), then the ensemble."""
    trials = []
    for point in cfg.grid_points():
        res = train_one(train_sections, valid_sections, point, point.seed)
        trials.append((res.best_valid, point, res))
        logger.info("grid L=%d batch=%d lr=%g -> valid %.6f", point.L, point.batch_size,
                    point.learning_rate, res.best_valid)
    best_valid, best_cfg, best_res = min(trials, key=lambda x: x[0])
    ens, results = train_ensemble(train_sections, valid_sections, best_cfg, first=best_res)
    log = {
        "chosen": {"L": best_cfg.L, "batch_size": best_cfg.batch_size,
                   "learning_rate": best_cfg.learning_rate},
        "grid": [{"L": p.L, "batch_size": p.batch_size, "learning_rate": p.learning_rate,
                  "valid_loss": v} for v, p, _ in trials],
        "members": [{"seed": r.config["seed"], "best_epoch": r.best_epoch,
                     "best_valid": r.best_valid, "curve": r.curve} for r in results],
    }
    return ens, log


# ---------------------------------------------------------------------------
# walk-forward schedule

@dataclass(frozen=True)
class Window:
    train_start: int
    train_end: int  # inclusive row index
    test_start: int
    test_end: int  # inclusive
    valid_fraction: float = 0.1


@dataclass(frozen=True)
class WalkForwardPlan:
    windows: tuple

    def __post_init__(self):
        prev_end = None
        prev_train_end = None
        for w in self.windows:
            if not (w.train_start <= w.train_end < w.test_start <= w.test_end):
                raise ValueError(f"bad window {w}")
            if not 0 < w.valid_fraction < 1:
                raise ValueError("valid_fraction must lie in (0, 1)")
            if prev_end is not None and w.test_start != prev_end + 1:
                raise ValueError("test windows must be consecutive and disjoint")
            if prev_train_end is not None and w.train_end < prev_train_end:
                raise ValueError("training windows must expand")
            prev_end, prev_train_end = w.test_end, w.train_end

    @classmethod
    def expanding(cls, n_dates: int, initial_train: int, test_len: int,
                  valid_fraction: float = 0.1, n_windows: int | None = None) -> "WalkForwardPlan":
        """Retrain every ``test_len`` rows; the last window absorbs the remainder."""
        wins = []
        end = initial_train - 1
        while end + 1 < n_dates:
            if n_windows is not None and len(wins) == n_windows:
                break
            last = n_windows is not None and len(wins) == n_windows - 1
            t_end = n_dates - 1 if last else min(end + test_len, n_dates - 1)
            if n_dates - 1 - t_end < test_len // 2:
                t_end = n_dates - 1
            wins.append(Window(0, end, end + 1, t_end, valid_fraction))
            end = t_end
        return cls(tuple(wins))

    @classmethod
    def by_year(cls, dates, first_train_end_year: int, step_years: int = 5,
                valid_fraction: float = 0.1) -> "WalkForwardPlan":
        """Calendar preset: train through ``first_train_end_year``, test the next
        ``step_years`` years, then extend training by the same step."""
        years = dates.astype("datetime64[Y]").astype(int) + 1970
        wins = []
        y = first_train_end_year
        while True:
            train = np.flatnonzero(years <= y)
            test = np.flatnonzero((years > y) & (years <= y + step_years))
            if len(train) == 0 or len(test) == 0:
                break
            wins.append(Window(0, int(train[-1]), int(test[0]), int(test[-1]), valid_fraction))
            y += step_years
        return cls(tuple(wins))

    def to_dict(self) -> dict:
        return {"windows": [asdict(w) for w in self.windows]}


def split_train_valid(rows, valid_fraction: float):
    """Chronological split: the most recent fraction of rows is validation."""
    rows = np.asarray(rows)
    n_valid = max(1, int(round(valid_fraction * len(rows))))
    if n_valid >= len(rows):
        raise ValueError("not enough training dates for a validation split")
    return rows[:-n_valid], rows[-n_valid:]


def training_rows(window: Window, candidate_rows) -> np.ndarray:
    """Rows whose next-day target lies inside the training window."""
    rows = np.asarray(candidate_rows)
    return rows[(rows >= window.train_start) & (rows + 1 <= window.train_end)]
