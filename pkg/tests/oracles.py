"""Independent reference computations shared by the unit and acceptance tests."""
import math
from fractions import Fraction

import numpy as np
from scipy.optimize import brentq

from netmomentum.graphsolver import degree_apply, edge_index, n_nodes


def two_node_weight(h, alpha, beta):
    """Positive root of the scalar stationarity condition for a single edge."""
    return (-h + math.sqrt(h * h + 8 * alpha * beta)) / (4 * beta)


def coordinate_descent(h, alpha, beta, sweeps=10_000):
    """Exact per-edge minimisation of the vech objective over w >= 0."""
    n = n_nodes(len(h))
    i, j = edge_index(n)
    w = np.ones(len(h))
    for _ in range(sweeps):
        old = w.copy()
        for k in range(len(w)):
            d = degree_apply(w)
            a, b = d[i[k]] - w[k], d[j[k]] - w[k]

            def g(x):
                return 2 * h[k] + 4 * beta * x - alpha / (a + x) - alpha / (b + x)

            lo = 1e-300 if min(a, b) <= 0 else 0.0
            if g(lo) >= 0:
                w[k] = lo
                continue
            hi = 1.0
            while g(hi) < 0:
                hi *= 2
            w[k] = brentq(g, lo, hi, xtol=1e-15, rtol=1e-15)
        if np.max(np.abs(w - old)) < 1e-14:
            break
    return w


def performance(r):
    """Metric table recomputed from the textbook formulas in plain Python."""
    n = len(r)
    mean = sum(r) / n
    sd = math.sqrt(sum((v - mean) ** 2 for v in r) / n)
    neg = [v for v in r if v < 0]
    pos = [v for v in r if v > 0]
    if neg:
        nm = sum(neg) / len(neg)
        dd = math.sqrt(sum((v - nm) ** 2 for v in neg) / len(neg)) * math.sqrt(252)
    else:
        dd = None
    # exact rational compounding, so the oracle carries no rounding of its own
    eq, peak, best = Fraction(1), Fraction(1), (Fraction(0), 0, 0)
    peak_day = 0
    for day, v in enumerate(r, start=1):
        eq *= 1 + Fraction(v)
        if eq >= peak:
            peak, peak_day = eq, day
        loss = (peak - eq) / peak
        if loss > best[0]:
            best = (loss, peak_day, day)
    mdd = float(best[0])
    ann = mean * 252
    vol = sd * math.sqrt(252)
    return {
        "ret": ann, "vol": vol, "sharpe": ann / vol if vol > 0 else None,
        "downside_deviation": dd, "mdd": mdd, "mdd_duration": (best[2] - best[1]) / n,
        "sortino": ann / dd if dd else None, "calmar": ann / mdd if mdd > 0 else None,
        "hit_rate": len(pos) / n,
        "avg_profit_over_avg_loss": (sum(pos) / len(pos)) / abs(sum(neg) / len(neg))
        if pos and neg else None,
    }


def metric_mismatches(table, r, tol=1e-12):
    """Names of fields of ``table`` that disagree with ``performance(r)``."""
    bad = []
    for k, v in performance(list(r)).items():
        got = getattr(table, k)
        if v is None or got is None:
            if v is not got:
                bad.append(k)
        elif abs(got - v) > tol * max(1.0, abs(v)):
            bad.append(k)
    return bad
