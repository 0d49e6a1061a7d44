"""Slow, explicit re-implementations used as independent test oracles.

Everything here loops over actions with plain comparisons and shares no code
with the package beyond the value types.
"""
import math

import numpy as np


def feasible_b(grid, tb):
    return [i for i in range(len(grid.bitrate)) if grid.bitrate[i] <= tb]


def min_bitrate_action(grid):
    best = 0
    for i in range(len(grid.bitrate)):
        if grid.bitrate[i] < grid.bitrate[best]:
            best = i
    return best


def better(a_key, b_key):
    """Lexicographic 'a strictly better than b' for tuples to minimize."""
    for x, y in zip(a_key, b_key):
        if x < y:
            return True
        if x > y:
            return False
    return False


def argbest(cands, key):
    best = None
    for i in cands:  # ascending index, so ties keep the lowest
        if best is None or better(key(i), key(best)):
            best = i
    return best


def cdbl(grid, space, tau, metric="xpsnr"):
    q = grid.quality(metric)
    res = [space.action(i).resolution for i in range(space.n_actions)]
    picks = []
    for tb in space.target_bitrates:
        ok = feasible_b(grid, tb)
        cands = [i for i in ok if grid.dec_time[i] <= tau]
        if not cands:
            cands = ok
        if not cands:
            picks.append(min_bitrate_action(grid))
            continue
        picks.append(argbest(cands, lambda i: (-q[i], grid.dec_time[i], res[i])))
    return picks


def vexus(grid, space, metric="xpsnr"):
    q = grid.quality(metric)
    picks = []
    prev = None
    for tb in space.target_bitrates:
        ok = feasible_b(grid, tb)
        if not ok:
            i = min_bitrate_action(grid)
        else:
            cands = [i for i in ok if prev is None or q[i] >= prev] or ok
            i = argbest(cands, lambda j: (-q[j], grid.bitrate[j]))
        picks.append(i)
        prev = q[i]
    return picks


def _scaled(values, cands):
    lo = min(values[i] for i in cands)
    hi = max(values[i] for i in cands)
    if hi <= lo:
        return lambda i: 0.0
    return lambda i: (values[i] - lo) / (hi - lo)


def rqtpf(grid, space, alpha):
    picks = []
    lower = 0.0
    for tb in space.target_bitrates:
        band = [i for i in range(space.n_actions) if lower < grid.bitrate[i] <= tb]
        if band:
            st, sb = _scaled(grid.dec_time, band), _scaled(grid.bitrate, band)
            picks.append(argbest(band, lambda i: (alpha * st(i) + (1 - alpha) * sb(i),)))
        else:
            ok = feasible_b(grid, tb)
            picks.append(argbest(ok, lambda i: (-grid.bitrate[i],)) if ok else min_bitrate_action(grid))
        lower = tb
    return picks


def greedy(grid, space, weights, metric="xpsnr"):
    """Fixed switch penalty only."""
    q = grid.quality(metric)
    w1, w2, w3 = weights
    picks = []
    prev_q = prev_r = None
    for tb in space.target_bitrates:
        ok = feasible_b(grid, tb)
        cands = [i for i in ok if prev_q is None or q[i] >= prev_q] or ok or [min_bitrate_action(grid)]
        sq, stt = _scaled(q, cands), _scaled(grid.dec_time, cands)

        def reward(i):
            r = space.action(i).resolution
            delta = 0.0 if prev_r is None or r == prev_r else 1.0
            return w1 * sq(i) - w2 * stt(i) - w3 * delta

        i = argbest(cands, lambda j: (-reward(j),))
        picks.append(i)
        prev_q, prev_r = q[i], space.action(i).resolution
    return picks


def ladder_violations(rows):
    """rows: (tb, bitrate, quality). Pairs (index, kind) for the rate cap and monotonicity."""
    out = []
    for i, (tb, b, q) in enumerate(rows):
        if b > tb:
            out.append((i, "bitrate"))
        if i > 0 and tb > rows[i - 1][0] and q < rows[i - 1][2]:
            out.append((i, "monotonicity"))
        if i > 0 and not tb > rows[i - 1][0]:
            out.append((i, "order"))
    return out


def trapezoid_mean_gap(fa, fb, lo, hi, n=10_000):
    """Mean of fb - fa over [lo, hi] by the composite trapezoid rule."""
    xs = [lo + (hi - lo) * k / (n - 1) for k in range(n)]
    ya, yb = fa(xs), fb(xs)
    total = 0.0
    for k in range(n - 1):
        h = xs[k + 1] - xs[k]
        total += 0.5 * h * ((yb[k] - ya[k]) + (yb[k + 1] - ya[k + 1]))
    return total / (hi - lo)


def isclose(a, b, rel):
    return math.isclose(a, b, rel_tol=rel, abs_tol=1e-12)


def constraint_violations(rows, targets, resolutions, qps):
    """rows: (tb, resolution, qp, bitrate, quality). Pairs (index, kind) over all ladder checks."""
    out = []
    for i, (tb, res, qp, b, q) in enumerate(rows):
        if tb not in targets:
            out.append((i, "target"))
        if res not in resolutions or qp not in qps:
            out.append((i, "action"))
        if i > 0 and not tb > rows[i - 1][0]:
            out.append((i, "order"))
        if b > tb:
            out.append((i, "bitrate"))
        if i > 0 and tb > rows[i - 1][0] and q < rows[i - 1][4]:
            out.append((i, "monotonicity"))
    return out


def trapezoid_integral(f, lo, hi, n=10_000):
    xs = np.linspace(lo, hi, n)
    ys = f(xs)
    return float(np.sum(0.5 * np.diff(xs) * (ys[1:] + ys[:-1])))
