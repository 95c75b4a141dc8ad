"""Graph normalisation, network-momentum heads and linear baselines."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .graphsolver import GraphEstimate, SolverConfig, solve_batch, unvech
from .unroll import (
    NumericError, UnrollParams, forward as unroll_graph, grad_vech,
    unroll_backward, unroll_forward,
)

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
RIDGE = 1e-6


@dataclass
class HeadParams:
    theta: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.b = float(self.b)
        if not (np.all(np.isfinite(self.theta)) and np.isfinite(self.b)):
            raise ValueError("head parameters must be finite")

    def copy(self) -> "HeadParams":
        return HeadParams(self.theta.copy(), self.b)

    def to_dict(self) -> dict:
        return {"theta": self.theta.tolist(), "b": self.b}

    @classmethod
    def from_dict(cls, doc) -> "HeadParams":
        return cls(doc["theta"], doc["b"])


@dataclass
class ModelOutput:
    values: np.ndarray  # trend y (kind="trend") or position x (kind="position")
    graph: np.ndarray  # normalised adjacency used
    kind: str
    assets: np.ndarray | None = None

    @property
    def positions(self) -> np.ndarray:
        return np.sign(self.values) if self.kind == "trend" else self.values


def _inv_sqrt_degrees(A: np.ndarray) -> np.ndarray:
    d = A.sum(axis=-1)
    s = np.zeros_like(d)
    pos = d > 0
    s[pos] = 1.0 / np.sqrt(d[pos])
    return s


def normalize_graph(A) -> np.ndarray:
    """``D^{-1/2} A D^{-1/2}``; zero-degree nodes get zero rows and columns.

    Accepts a GraphEstimate, a single (N, N) matrix or a (B, N, N) stack.
    """
    if isinstance(A, GraphEstimate):
        A = A.A
    A = np.asarray(A, dtype=float)
    s = _inv_sqrt_degrees(A)
    return s[..., :, None] * A * s[..., None, :]


def normalize_graph_backward(A: np.ndarray, g_norm: np.ndarray) -> np.ndarray:
    """Gradient on the raw (symmetric, entrywise-independent) A."""
    s = _inv_sqrt_degrees(A)
    direct = g_norm * s[..., :, None] * s[..., None, :]
    # d s_i / d d_i = -s_i^3 / 2 ; s_i enters row i and column i of the product
    g_s = ((g_norm + np.swapaxes(g_norm, -1, -2)) * A * s[..., None, :]).sum(axis=-1)
    g_d = -0.5 * s ** 3 * g_s
    return direct + g_d[..., :, None]


# ---------------------------------------------------------------------------
# network-momentum heads

@dataclass
class NetworkModel:
    """Unrolled graph layer + degree normalisation + linear head.

    ``kind="trend"`` gives ``y = Ã X theta + b`` (positions ``sgn(y)``);
    ``kind="position"`` gives ``x = tanh(Ã X theta + b)``. X is the
    current-day feature matrix U by default; ``head_input="V"`` uses the
    stacked lookback matrix instead (theta is then 8 * delta long).
    """
    unroll: UnrollParams
    head: HeadParams
    kind: str = "trend"
    head_input: str = "U"
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("trend", "position"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.head_input not in ("U", "V"):
            raise ValueError(f"unknown head input {self.head_input!r}")

    def copy(self) -> "NetworkModel":
        return NetworkModel(self.unroll.copy(), self.head.copy(), self.kind, self.head_input,
                            dict(self.config))

    # -- flat parameter view used by the optimiser
    def flat(self) -> np.ndarray:
        return np.concatenate([self.unroll.flat(), self.head.theta, [self.head.b]])

    def set_flat(self, x: np.ndarray) -> None:
        k = len(self.unroll.flat())
        m = len(self.head.theta)
        self.unroll = UnrollParams.from_flat(x[:k])
        self.head = HeadParams(x[k:k + m].copy(), float(x[k + m]))

    # -- batched evaluation over dates that share an asset set
    def forward_bucket(self, h: np.ndarray, X: np.ndarray, keep: bool = False):
        """h: (B, E) distances, X: (B, n, K) head inputs -> ((B, n) outputs, cache)."""
        w, tape = unroll_forward(h, self.unroll, keep_tape=keep)
        A = unvech(w, X.shape[1])
        At = normalize_graph(A)
        z = X @ self.head.theta
        pre = np.einsum("bij,bj->bi", At, z) + self.head.b
        out = np.tanh(pre) if self.kind == "position" else pre
        cache = (tape, A, At, z, X, out) if keep else None
        return out, cache

    def backward_bucket(self, cache, g_out: np.ndarray) -> np.ndarray:
        """Flat parameter gradient from ``d loss / d outputs`` of one bucket."""
        tape, A, At, z, X, out = cache
        g_pre = g_out * (1.0 - out ** 2) if self.kind == "position" else g_out
        g_b = g_pre.sum()
        g_z = np.einsum("bij,bi->bj", At, g_pre)
        g_theta = np.einsum("bnk,bn->k", X, g_z)
        g_At = g_pre[:, :, None] * z[:, None, :]
        g_A = normalize_graph_backward(A, g_At)
        g_raw, _ = unroll_backward(tape, grad_vech(g_A))
        return np.concatenate([g_raw.flat(), g_theta, [g_b]])

    # -- checkpoints
    def to_dict(self) -> dict:
        return {"schema_version": CHECKPOINT_SCHEMA, "kind": self.kind,
                "head_input": self.head_input, "unroll": self.unroll.to_dict(),
                "head": self.head.to_dict(), "config": self.config}

    @classmethod
    def from_dict(cls, doc) -> "NetworkModel":
        if doc.get("schema_version") != CHECKPOINT_SCHEMA:
            raise ValueError(f"unsupported checkpoint schema {doc.get('schema_version')!r}")
        return cls(UnrollParams.from_dict(doc["unroll"]), HeadParams.from_dict(doc["head"]),
                   doc["kind"], doc.get("head_input", "U"), doc.get("config", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "NetworkModel":
        return cls.from_dict(json.loads(text))


def _head_forward(V, U, unroll, head, kind, head_input):
    est, _ = unroll_graph(V, unroll)
    At = normalize_graph(est.A)
    X = np.asarray(V if head_input == "V" else U, dtype=float)
    if X.shape[1] != len(head.theta):
        raise ValueError(f"head expects {len(head.theta)} features, got {X.shape[1]}")
    pre = At @ (X @ head.theta) + head.b
    return At, pre


def l2gmom_forward(V, U, unroll: UnrollParams, head: HeadParams) -> ModelOutput:
    """Trend estimate ``y = Ã U theta + b`` with Ã learned from V."""
    At, y = _head_forward(V, U, unroll, head, "trend", "U")
    return ModelOutput(y, At, "trend")


def l2gmom_sr_forward(V, U, unroll: UnrollParams, head: HeadParams,
                      head_input: str = "U") -> ModelOutput:
    """Position ``x = tanh(Ã X theta + b)``, X = U (default) or V."""
    At, pre = _head_forward(V, U, unroll, head, "position", head_input)
    return ModelOutput(np.tanh(pre), At, "position")


# ---------------------------------------------------------------------------
# linear baselines

def linreg_fit(X, targets, ridge: float = RIDGE) -> HeadParams:
    """Least squares with an unpenalised intercept and a tiny ridge on theta.

    Args:
        X: (n, K) pooled feature rows.
        targets: (n,) next-day volatility-scaled returns.

    Raises:
        ValueError: fewer than K + 1 samples.
        NumericError: the regularised system is still singular.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(targets, dtype=float)
    n, K = X.shape
    if n < K + 1:
        raise ValueError(f"need at least {K + 1} samples, got {n}")
    xm = X.mean(axis=0)
    ym = y.mean()
    Xc = X - xm
    G = Xc.T @ Xc + ridge * np.eye(K)
    try:
        theta = np.linalg.solve(G, Xc.T @ (y - ym))
    except np.linalg.LinAlgError as exc:
        raise NumericError("singular normal equations") from exc
    if not np.all(np.isfinite(theta)):
        raise NumericError("non-finite regression coefficients")
    return HeadParams(theta, ym - xm @ theta)


def linreg_predict(U_t, head: HeadParams) -> np.ndarray:
    return np.asarray(U_t, dtype=float) @ head.theta + head.b


def solve_graphs(h_list, cfg: SolverConfig):
    """Solve the fixed-hyperparameter problem for a list of distance vectors.

    Problems with equal node counts are solved together. Returns the list of
    adjacency matrices and a boolean convergence flag per entry.
    """
    out = [None] * len(h_list)
    ok = np.zeros(len(h_list), dtype=bool)
    by_size: dict[int, list[int]] = {}
    for k, h in enumerate(h_list):
        by_size.setdefault(len(h), []).append(k)
    for E, ks in by_size.items():
        if E == 0:
            for k in ks:
                out[k] = np.zeros((1, 1))
                ok[k] = True
            continue
        w, _, _, conv, _ = solve_batch(np.stack([h_list[k] for k in ks]), cfg)
        for row, k in enumerate(ks):
            out[k] = unvech(w[row])
            ok[k] = conv[row]
    return out, ok


def graph_features(graphs, U_list) -> list:
    """Network features ``Ã_t U_t`` for each date."""
    return [normalize_graph(A) @ U for A, U in zip(graphs, U_list)]


def glinreg_fit(h_list, U_list, target_list, solver_cfg: SolverConfig, *,
                graph_fn=None, graphs=None) -> HeadParams:
    """Fit the linear head on graph-aggregated features from separately learned graphs.

    Args:
        h_list: per-date normalised distance vectors.
        U_list: per-date (n_t, 8) feature matrices.
        target_list: per-date (n_t,) targets; NaN entries are excluded.
        solver_cfg: fixed (alpha, beta) for the graph problem.
        graph_fn: optional override mapping a date's ``U`` to the matrix
            used in place of Ã (test hook).
        graphs: precomputed adjacency matrices, skips solving.
    """
    if graph_fn is not None:
        feats = [graph_fn(U) @ U for U in U_list]
        keep = np.ones(len(U_list), dtype=bool)
    else:
        if graphs is None:
            graphs, keep = solve_graphs(h_list, solver_cfg)
        else:
            keep = np.ones(len(graphs), dtype=bool)
        n_bad = int((~keep).sum())
        if n_bad:
            logger.warning("glinreg: %d of %d dates did not converge and are excluded",
                           n_bad, len(keep))
        feats = graph_features(graphs, U_list)
    X = [f[np.isfinite(y)] for f, y, k in zip(feats, target_list, keep) if k]
    Y = [y[np.isfinite(y)] for y, k in zip(target_list, keep) if k]
    if not X:
        raise ValueError("no converged graph dates to fit on")
    return linreg_fit(np.concatenate(X), np.concatenate(Y))
