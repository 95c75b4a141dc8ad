"""Unrolled primal-dual graph learning with per-layer learnable step parameters.

``L`` names the unrolling depth. The loop runs for ``l = 0, ..., L``, so
``L + 1`` iterations execute, each with its own (alpha, beta, gamma). The
parameters are stored as unconstrained logs, and effective values are
``exp(raw)``. The output graph is ``unvech(max(w_{L+1}, 0))``.

Reverse mode is hand written. The tape keeps every intermediate of every
layer (memory O(L * B * E)), and ``unroll_backward`` walks it in reverse.
The subgradient of ``max(x, 0)`` at ``x == 0`` is taken as 0.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .graphsolver import (
    DistanceVector, GraphEstimate, edge_index, incidence, n_nodes,
    pairwise_distances, pds_step, unvech,
)

SCHEMA_VERSION = 1


class NumericError(ArithmeticError):
    pass


@dataclass
class UnrollParams:
    raw_alpha: np.ndarray
    raw_beta: np.ndarray
    raw_gamma: np.ndarray

    def __post_init__(self):
        self.raw_alpha = np.asarray(self.raw_alpha, dtype=float)
        self.raw_beta = np.asarray(self.raw_beta, dtype=float)
        self.raw_gamma = np.asarray(self.raw_gamma, dtype=float)
        n = len(self.raw_alpha)
        if n < 2 or len(self.raw_beta) != n or len(self.raw_gamma) != n:
            raise ValueError("need three equal-length raw vectors of length L+1 >= 2")

    @classmethod
    def init(cls, L: int, alpha: float = 1.0, beta: float = 1.0, gamma: float = 0.1):
        if L < 1:
            raise ValueError(f"unrolling depth L must be >= 1, got {L}")
        k = L + 1
        return cls(np.full(k, math.log(alpha)), np.full(k, math.log(beta)),
                   np.full(k, math.log(gamma)))

    @property
    def L(self) -> int:
        return len(self.raw_alpha) - 1

    @property
    def alpha(self):
        return np.exp(self.raw_alpha)

    @property
    def beta(self):
        return np.exp(self.raw_beta)

    @property
    def gamma(self):
        return np.exp(self.raw_gamma)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.raw_alpha, self.raw_beta, self.raw_gamma])

    @classmethod
    def from_flat(cls, x) -> "UnrollParams":
        x = np.asarray(x, dtype=float)
        k = len(x) // 3
        return cls(x[:k].copy(), x[k:2 * k].copy(), x[2 * k:].copy())

    def copy(self) -> "UnrollParams":
        return UnrollParams(self.raw_alpha.copy(), self.raw_beta.copy(), self.raw_gamma.copy())

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "L": self.L,
                "raw_alpha": self.raw_alpha.tolist(), "raw_beta": self.raw_beta.tolist(),
                "raw_gamma": self.raw_gamma.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "UnrollParams":
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported unroll schema {doc.get('schema_version')!r}")
        p = cls(doc["raw_alpha"], doc["raw_beta"], doc["raw_gamma"])
        if p.L != doc["L"]:
            raise ValueError("L does not match parameter lengths")
        return p

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "UnrollParams":
        return cls.from_dict(json.loads(text))


@dataclass
class UnrollTape:
    h: np.ndarray  # (B, E) distances the layers saw
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    layers: list  # one dict of intermediates per executed iteration
    w_final: np.ndarray  # (B, E) before clamping
    distances: DistanceVector | None = None
    V: np.ndarray | None = None

    def __len__(self):
        return len(self.layers)


def unroll_forward(h, params: UnrollParams, keep_tape: bool = True):
    """Run the L+1 unrolled iterations on a batch of distance vectors.

    Args:
        h: (B, E) or (E,) normalised distances; all rows share N.
        params: per-layer raw parameters.
        keep_tape: store intermediates for ``unroll_backward``.

    Returns:
        ``(w, tape)`` where ``w`` is the clamped (B, E) edge weights and
        ``tape`` is None when ``keep_tape`` is false.
    """
    h = np.atleast_2d(np.asarray(h, dtype=float))
    B, E = h.shape
    n = n_nodes(E)
    inc = incidence(n)
    alpha, beta, gamma = params.alpha, params.beta, params.gamma
    if np.any(alpha * gamma <= 0):
        raise NumericError("alpha * gamma underflowed to zero")
    w = np.zeros((B, E))
    v = np.zeros((B, n))
    layers = []
    for l in range(params.L + 1):
        w, v, mid = pds_step(w, v, h, alpha[l], beta[l], gamma[l], inc)
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(v))):
            raise NumericError(f"non-finite values in unrolled layer {l}")
        if keep_tape:
            layers.append(mid)
    tape = UnrollTape(h, alpha, beta, gamma, layers, w) if keep_tape else None
    return np.maximum(w, 0.0), tape


def unroll_backward(tape: UnrollTape, grad_w: np.ndarray):
    """Reverse pass through the tape.

    Args:
        tape: from ``unroll_forward(..., keep_tape=True)``.
        grad_w: (B, E) gradient with respect to the clamped output weights.

    Returns:
        ``(g_raw, g_h)``: an ``UnrollParams`` of raw-parameter gradients
        (summed over the batch) and the (B, E) gradient with respect to h.
    """
    grad_w = np.atleast_2d(np.asarray(grad_w, dtype=float))
    if grad_w.shape != tape.w_final.shape:
        raise ValueError(f"grad_w has shape {grad_w.shape}, expected {tape.w_final.shape}")
    h = tape.h
    n = n_nodes(h.shape[1])
    inc = incidence(n)
    k = len(tape.layers)
    ga, gb, gg = np.zeros(k), np.zeros(k), np.zeros(k)
    gh = np.zeros_like(h)

    gw = grad_w * (tape.w_final > 0)
    gv = np.zeros((h.shape[0], n))
    for l in range(k - 1, -1, -1):
        m = tape.layers[l]
        a, b, g = tape.alpha[l], tape.beta[l], tape.gamma[l]
        # w' = w - r1 + q1 ; v' = v - r2 + q2
        gq1, gr1 = gw, -gw
        gq2, gr2 = gv, -gv
        gw_in, gv_in = gw.copy(), gv.copy()
        # q2 = p2 + g * D p1
        gp2 = gq2.copy()
        gp1 = g * (gq2 @ inc)
        gg[l] += np.sum(gq2 * m["Dp1"])
        # q1 = p1 - g * (4 b p1 + 2 h + D^T p2)
        gp1 += (1.0 - 4.0 * g * b) * gq1
        gh -= 2.0 * g * gq1
        gp2 -= g * (gq1 @ inc.T)
        gg[l] -= np.sum(gq1 * (4.0 * b * m["p1"] + 2.0 * h + m["Dtp2"]))
        gb[l] -= 4.0 * g * np.sum(gq1 * m["p1"])
        # p2 = (r2 - sqrt(r2^2 + 4 a g)) / 2
        root = m["root"]
        gr2 = gr2 + gp2 * 0.5 * (1.0 - m["r2"] / root)
        g_ag = -np.sum(gp2 / root)
        ga[l] += g_ag * g
        gg[l] += g_ag * a
        # p1 = max(r1, 0)
        gr1 = gr1 + gp1 * (m["r1"] > 0)
        # r2 = v + g * D w
        gv_in += gr2
        gw_in += g * (gr2 @ inc)
        gg[l] += np.sum(gr2 * m["Dw"])
        # r1 = w - g * (4 b w + 2 h + D^T v)
        gw_in += (1.0 - 4.0 * g * b) * gr1
        gh -= 2.0 * g * gr1
        gv_in -= g * (gr1 @ inc.T)
        gg[l] -= np.sum(gr1 * (4.0 * b * m["w"] + 2.0 * h + m["Dtv"]))
        gb[l] -= 4.0 * g * np.sum(gr1 * m["w"])
        gw, gv = gw_in, gv_in

    g_raw = UnrollParams(ga * tape.alpha, gb * tape.beta, gg * tape.gamma)
    return g_raw, gh


def replay(tape: UnrollTape, params: UnrollParams) -> np.ndarray:
    """Re-run the forward pass on the tape's inputs (clamped weights)."""
    w, _ = unroll_forward(tape.h, params, keep_tape=False)
    return w


def forward(V, params: UnrollParams, names=None):
    """Learn a graph from the feature matrix V (N x F).

    Returns:
        ``(GraphEstimate, UnrollTape)``; the tape also holds V and the
        distance normalisation so ``backward`` can reach V.
    """
    V = np.asarray(V, dtype=float)
    dist = pairwise_distances(V, names)
    w, tape = unroll_forward(dist.h[None, :], params)
    tape.distances = dist
    tape.V = V
    est = GraphEstimate(unvech(w[0], V.shape[0]), iterations=params.L + 1,
                        residual=float(np.abs(tape.layers[-1]["w"] - tape.w_final).max()),
                        converged=True)
    return est, tape


def grad_vech(grad_A: np.ndarray) -> np.ndarray:
    """Gradient on edge weights from a gradient on the full symmetric matrix."""
    i, j = edge_index(grad_A.shape[-1])
    return grad_A[..., i, j] + grad_A[..., j, i]


def distance_backward(dist: DistanceVector, V: np.ndarray, g_h: np.ndarray) -> np.ndarray:
    """Chain ``d loss / d h`` back to the rows of V through the unit-mean rescaling."""
    raw = dist.raw
    if raw.mean() > 0:
        g_raw = g_h / dist.scale - np.dot(g_h, raw) / (dist.scale ** 2 * raw.size)
    else:
        g_raw = g_h
    i, j = edge_index(V.shape[0])
    diff = 2.0 * (V[i] - V[j]) * g_raw[:, None]
    gV = np.zeros_like(V)
    np.add.at(gV, i, diff)
    np.add.at(gV, j, -diff)
    return gV


def backward(tape: UnrollTape, grad_A: np.ndarray):
    """Gradients of a scalar loss given ``d loss / d A`` (N x N).

    Returns:
        ``(grad_raw_params, grad_V)``.
    """
    if tape.V is None:
        raise ValueError("tape was not produced by forward()")
    grad_A = np.asarray(grad_A, dtype=float)
    n = tape.V.shape[0]
    if grad_A.shape != (n, n):
        raise ValueError(f"grad_A must be {n}x{n}, got {grad_A.shape}")
    g_raw, g_h = unroll_backward(tape, grad_vech(grad_A)[None, :])
    return g_raw, distance_backward(tape.distances, tape.V, g_h[0])


# ---------------------------------------------------------------------------
# finite-difference check

@dataclass
class GradcheckReport:
    n_checked: int
    n_passed: int
    n_kink: int  # excluded: the +/- eps evaluations cross a max(., 0) kink
    worst_rel_error: float
    worst_coordinate: str
    threshold: float

    @property
    def pass_fraction(self) -> float:
        return self.n_passed / self.n_checked if self.n_checked else 1.0

    @property
    def passed(self) -> bool:
        return self.pass_fraction >= self.threshold

    def to_dict(self) -> dict:
        return {"n_checked": self.n_checked, "n_passed": self.n_passed, "n_kink": self.n_kink,
                "pass_fraction": self.pass_fraction, "worst_rel_error": self.worst_rel_error,
                "worst_coordinate": self.worst_coordinate, "threshold": self.threshold,
                "passed": self.passed}


def _pattern(tape: UnrollTape) -> bytes:
    masks = [m["r1"] > 0 for m in tape.layers] + [tape.w_final > 0]
    return np.concatenate([m.ravel() for m in masks]).tobytes()


def gradcheck(n: int = 5, n_features: int = 4, L: int = 4, n_instances: int = 20, *,
              eps: float = 1e-5, rtol: float = 1e-4, threshold: float = 0.99,
              seed: int = 0, upstream: str = "random", corrupt: float = 0.0) -> GradcheckReport:
    """Central-difference check of ``backward`` on random instances.

    The scalar loss is ``sum(G * A)`` for a random upstream matrix G (all
    zeros with ``upstream="zero"``). Every raw layer parameter and every
    entry of V is perturbed. Coordinates whose two perturbed evaluations
    take a different branch of any ``max(., 0)`` are excluded and counted
    in ``n_kink``. ``corrupt`` scales the analytic gradient by
    ``1 + corrupt`` (fault-injection hook).
    """
    if upstream not in ("random", "zero"):
        raise ValueError(f"unknown upstream mode {upstream!r}")
    rng = np.random.default_rng(seed)
    checked = passed = kinks = 0
    worst, worst_at = 0.0, ""
    for inst in range(n_instances):
        V = rng.normal(size=(n, n_features))
        base = UnrollParams.init(L)
        params = UnrollParams.from_flat(base.flat() + rng.normal(0.0, 0.1, base.flat().size))
        G = rng.normal(size=(n, n)) if upstream == "random" else np.zeros((n, n))

        est, tape = forward(V, params)
        g_raw, g_V = backward(tape, G)
        analytic = np.concatenate([g_raw.flat(), g_V.ravel()]) * (1.0 + corrupt)

        def evaluate(flat_p, V_):
            e, t = forward(V_, UnrollParams.from_flat(flat_p))
            return float(np.sum(G * e.A)), _pattern(t)

        x0 = params.flat()
        k = x0.size
        for c in range(k + V.size):
            xp, xm = x0.copy(), x0.copy()
            Vp, Vm = V.copy(), V.copy()
            if c < k:
                xp[c] += eps
                xm[c] -= eps
                name = f"instance {inst} param {c}"
            else:
                Vp.flat[c - k] += eps
                Vm.flat[c - k] -= eps
                name = f"instance {inst} V{tuple(int(i) for i in np.unravel_index(c - k, V.shape))}"
            fp, pp = evaluate(xp, Vp)
            fm, pm = evaluate(xm, Vm)
            if pp != pm:
                kinks += 1
                continue
            fd = (fp - fm) / (2.0 * eps)
            a = analytic[c]
            scale = max(abs(a), abs(fd))
            rel = 0.0 if scale < 1e-10 else abs(a - fd) / scale
            checked += 1
            if rel <= rtol:
                passed += 1
            if rel > worst:
                worst, worst_at = float(rel), name
    return GradcheckReport(checked, passed, kinks, worst, worst_at, threshold)
