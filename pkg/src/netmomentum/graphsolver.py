"""Smooth-signal graph learning by primal-dual splitting.

Edge vectors follow the half-vectorisation ``w = vech(A)``: the strict
upper triangle of ``A`` read row by row, i.e. edges ``(i, j)`` with
``i < j`` in lexicographic order. For N nodes there are E = N(N-1)/2 edges.

The problem solved is

    minimise  2<w, h> - alpha * sum_i log(d_i) + 2 beta ||w||^2,  w >= 0,

where ``d = Dw`` are node degrees and ``h = vech(H)`` holds squared feature
distances. In matrix form, ``2<w, h> = sum_ij A_ij H_ij = 2 tr(V^T L V)`` and
``2 ||w||^2 = ||A||_F^2``, with L = D - A the graph Laplacian.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


class SolverInputError(ValueError):
    pass


def n_edges(n: int) -> int:
    return n * (n - 1) // 2


def n_nodes(e: int) -> int:
    n = int(round((1 + math.sqrt(1 + 8 * e)) / 2))
    if n_edges(n) != e:
        raise SolverInputError(f"{e} is not a triangular edge count")
    return n


@lru_cache(maxsize=64)
def edge_index(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Node pairs ``(i, j)``, ``i < j``, in vech order."""
    i, j = np.triu_indices(n, k=1)
    i.setflags(write=False)
    j.setflags(write=False)
    return i, j


@lru_cache(maxsize=64)
def incidence(n: int) -> np.ndarray:
    """Dense degree operator as an (N, E) 0/1 matrix: ``Dw = incidence @ w``."""
    i, j = edge_index(n)
    mat = np.zeros((n, n_edges(n)))
    k = np.arange(n_edges(n))
    mat[i, k] = 1.0
    mat[j, k] = 1.0
    mat.setflags(write=False)
    return mat


def vech(A: np.ndarray) -> np.ndarray:
    i, j = edge_index(A.shape[-1])
    return A[..., i, j]


def unvech(w: np.ndarray, n: int | None = None) -> np.ndarray:
    """Symmetric matrix with zero diagonal from edge weights (batched over leading axes)."""
    w = np.asarray(w, dtype=float)
    n = n_nodes(w.shape[-1]) if n is None else n
    i, j = edge_index(n)
    A = np.zeros(w.shape[:-1] + (n, n))
    A[..., i, j] = w
    A[..., j, i] = w
    return A


def degree_apply(w: np.ndarray) -> np.ndarray:
    """Node degrees ``Dw`` (sum of incident edge weights)."""
    w = np.asarray(w, dtype=float)
    return w @ incidence(n_nodes(w.shape[-1])).T


def degree_adjoint(v: np.ndarray) -> np.ndarray:
    """``D^T v``: each edge (i, j) receives ``v_i + v_j``."""
    v = np.asarray(v, dtype=float)
    return v @ incidence(v.shape[-1])


@dataclass(frozen=True)
class DistanceVector:
    h: np.ndarray  # normalised distances, mean 1 unless all zero
    scale: float  # h = raw / scale
    raw: np.ndarray


def normalize_distances(raw: np.ndarray) -> DistanceVector:
    raw = np.asarray(raw, dtype=float)
    m = float(raw.mean()) if raw.size else 0.0
    scale = m if m > 0 else 1.0
    return DistanceVector(raw / scale, scale, raw)


def pairwise_distances(V: np.ndarray, names=None) -> DistanceVector:
    """Squared Euclidean distances between rows of V, rescaled to unit mean.

    When every distance is zero the rescaling is skipped and ``scale`` is 1.
    """
    V = np.asarray(V, dtype=float)
    if V.ndim != 2 or V.shape[0] < 2:
        raise SolverInputError("need a 2-D feature matrix with at least 2 rows")
    bad = ~np.all(np.isfinite(V), axis=1)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        who = names[k] if names is not None else f"row {k}"
        raise SolverInputError(f"non-finite features for asset {who}")
    i, j = edge_index(V.shape[0])
    raw = ((V[i] - V[j]) ** 2).sum(axis=1)
    return normalize_distances(raw)


@dataclass(frozen=True)
class SolverConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.1
    max_iters: int = 2000
    tol: float = 1e-6
    max_step_halvings: int = 5
    divergence_window: int = 10

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0 and self.gamma > 0):
            raise SolverInputError("alpha, beta and gamma must be > 0")
        if self.max_iters < 1 or not self.tol > 0:
            raise SolverInputError("max_iters must be >= 1 and tol > 0")


@dataclass
class GraphEstimate:
    A: np.ndarray
    iterations: int = 0
    residual: float = 0.0
    converged: bool = True
    gamma: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def w(self) -> np.ndarray:
        return vech(self.A)

    @property
    def degrees(self) -> np.ndarray:
        return self.A.sum(axis=1)

    def edges(self, names=None, min_weight: float = 0.0):
        i, j = edge_index(self.A.shape[0])
        out = []
        for a, b in zip(i, j):
            wt = float(self.A[a, b])
            if wt > min_weight:
                out.append({"i": names[a] if names is not None else int(a),
                            "j": names[b] if names is not None else int(b),
                            "weight": wt})
        return out

    def to_json(self, date=None, names=None) -> str:
        doc = {
            "date": None if date is None else str(date),
            "n_nodes": int(self.A.shape[0]),
            "iterations": int(self.iterations),
            "residual": float(self.residual),
            "converged": bool(self.converged),
            "edges": self.edges(names),
        }
        doc.update(self.meta)
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str, names=None) -> "GraphEstimate":
        doc = json.loads(text)
        n = doc["n_nodes"]
        pos = {nm: k for k, nm in enumerate(names)} if names is not None else None
        A = np.zeros((n, n))
        for e in doc["edges"]:
            a = pos[e["i"]] if pos else e["i"]
            b = pos[e["j"]] if pos else e["j"]
            A[a, b] = A[b, a] = e["weight"]
        return cls(A, doc["iterations"], doc["residual"], doc["converged"])


def pds_step(w, v, h, alpha, beta, gamma, inc):
    """One primal-dual iteration; returns the new state and all intermediates.

    Arrays may carry leading batch axes: ``w, h`` are (..., E), ``v`` is
    (..., N) and ``alpha, beta, gamma`` broadcast against (..., 1). The
    smooth-part gradient is ``4 beta w + 2 h``, the gradient of
    ``2 <w, h> + 2 beta ||w||^2``.
    """
    Dw = w @ inc.T
    Dtv = v @ inc
    r1 = w - gamma * (4.0 * beta * w + 2.0 * h + Dtv)
    r2 = v + gamma * Dw
    p1 = np.maximum(r1, 0.0)
    root = np.sqrt(r2 * r2 + 4.0 * alpha * gamma)
    p2 = 0.5 * (r2 - root)
    Dtp2 = p2 @ inc
    Dp1 = p1 @ inc.T
    q1 = p1 - gamma * (4.0 * beta * p1 + 2.0 * h + Dtp2)
    q2 = p2 + gamma * Dp1
    w_next = w - r1 + q1
    v_next = v - r2 + q2
    return w_next, v_next, dict(w=w, v=v, Dw=Dw, Dtv=Dtv, r1=r1, r2=r2, p1=p1,
                                root=root, p2=p2, Dtp2=Dtp2, Dp1=Dp1)


def objective(w, h, alpha, beta) -> float:
    """``2<w,h> - alpha * sum(log(Dw)) + 2 beta ||w||^2``; +inf on an isolated node."""
    w = np.asarray(w, dtype=float)
    h = np.asarray(h, dtype=float)
    d = degree_apply(w)
    if alpha > 0:
        if np.any(d <= 0):
            return math.inf
        barrier = -alpha * float(np.log(d).sum())
    else:
        barrier = 0.0
    return 2.0 * float(w @ h) + barrier + 2.0 * beta * float(w @ w)


def solve_batch(h: np.ndarray, cfg: SolverConfig):
    """Solve many independent problems sharing N at once.

    Args:
        h: (B, E) normalised distance vectors.
        cfg: solver settings; the step size is halved per problem when its
            residual grows for ``divergence_window`` consecutive iterations
            while above the first-iteration residual.

    Returns:
        Tuple ``(w, iterations, residual, converged, gamma)`` of per-problem
        arrays. ``w`` is clamped at zero.
    """
    h = np.atleast_2d(np.asarray(h, dtype=float))
    B, E = h.shape
    n = n_nodes(E)
    inc = incidence(n)
    w_out = np.zeros((B, E))
    iters = np.zeros(B, dtype=np.int64)
    resid = np.full(B, np.inf)
    conv = np.zeros(B, dtype=bool)
    gam_out = np.full(B, cfg.gamma)

    active = np.arange(B)
    gamma = np.full(B, cfg.gamma)
    halvings = np.zeros(B, dtype=np.int64)
    w = np.zeros((B, E))
    v = np.zeros((B, n))
    prev_res = np.full(B, np.inf)
    first_res = np.full(B, np.nan)
    growth = np.zeros(B, dtype=np.int64)
    it = np.zeros(B, dtype=np.int64)

    while active.size:
        g = gamma[active, None]
        w_new, v_new, _ = pds_step(w[active], v[active], h[active], cfg.alpha, cfg.beta, g, inc)
        res = np.abs(w_new - w[active]).max(axis=1) if E else np.zeros(active.size)
        w[active], v[active] = w_new, v_new
        it[active] += 1

        # primal-dual transients can rise for a while below the starting
        # residual; only growth past that scale counts towards divergence
        first_res[active] = np.where(np.isnan(first_res[active]), res, first_res[active])
        grew = (res > prev_res[active]) & (res > first_res[active])
        growth[active] = np.where(grew, growth[active] + 1, 0)
        prev_res[active] = res

        done = res < cfg.tol
        exhausted = it[active] >= cfg.max_iters
        bad = ~np.isfinite(res) | (growth[active] >= cfg.divergence_window)
        restart = bad & ~done & (halvings[active] < cfg.max_step_halvings)

        finish = done | exhausted | (bad & ~restart)
        fin = active[finish]
        w_out[fin] = np.where(np.isfinite(w[fin]), w[fin], 0.0)
        iters[fin] = it[fin]
        resid[fin] = res[finish]
        conv[fin] = done[finish]
        gam_out[fin] = gamma[fin]

        rs = active[restart & ~finish]
        if rs.size:
            gamma[rs] *= 0.5
            halvings[rs] += 1
            w[rs] = 0.0
            v[rs] = 0.0
            prev_res[rs] = np.inf
            first_res[rs] = np.nan
            growth[rs] = 0
        active = active[~finish]

    return np.maximum(w_out, 0.0), iters, resid, conv, gam_out


def pds_solve(h, cfg: SolverConfig = SolverConfig()) -> GraphEstimate:
    """Solve one graph-learning problem to ``tol`` from a zero start."""
    hv = h.h if isinstance(h, DistanceVector) else np.asarray(h, dtype=float)
    if hv.ndim != 1:
        raise SolverInputError("h must be a vector")
    w, iters, resid, conv, gam = solve_batch(hv[None, :], cfg)
    return GraphEstimate(unvech(w[0]), int(iters[0]), float(resid[0]), bool(conv[0]), float(gam[0]))
