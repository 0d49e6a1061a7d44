"""Ladder construction: agent inference plus the HLS, CDBL, RQT-PF, VEXUS
and one-step greedy reference constructors."""
from __future__ import annotations

import json
import math
import time
from typing import Optional

import numpy as np

from .domain import (ConfigSpace, EncodingOutcome, Ladder, LadderRung, RewardWeights,
                     check_metric, resolution_switch_score, validate_ladder)
from .environment import OutcomeGrid, perturb_grid
from .reward import FIXED, NormBounds, PenaltyPolicy, RewardBreakdown, reward  # noqa: F401

RELAXED_MONOTONICITY = "relaxed_monotonicity"
RELAXED_BITRATE = "relaxed_bitrate"
RELAXED_DEC_TIME = "relaxed_dec_time"
FALLBACK_NEAREST = "nearest_bitrate"

HLS_TEMPLATE = {145: 360, 300: 360, 600: 540, 900: 540, 1600: 540, 2400: 720, 3400: 720,
                4500: 1080, 5800: 1080, 8100: 1440, 11600: 2160, 16800: 2160}

LADDER_FORMAT = "qladder-ladder"
# each noisy query draws fresh Gaussian errors from the caller's generator
NOISE_SAMPLING = "per_query"


def predicted_grid(predictors, features, space: ConfigSpace) -> OutcomeGrid:
    """Predictor outputs packed as an outcome grid; the untracked metric is NaN."""
    b, q, t = predictors.predict_grid(features, space)
    nan = np.full_like(b, np.nan)
    qual = {"xpsnr": nan, "vmaf": nan, predictors.metric: q}
    return OutcomeGrid(features.segment_id, b, qual["xpsnr"], qual["vmaf"], t, np.zeros_like(b))


def _outcome(grid: OutcomeGrid, i: int) -> EncodingOutcome:
    xp, vm = float(grid.xpsnr[i]), float(grid.vmaf[i])
    return EncodingOutcome(float(grid.bitrate[i]), float(grid.dec_time[i]),
                           None if math.isnan(xp) else xp, None if math.isnan(vm) else vm,
                           float(grid.enc_time[i]))


def _rung(space, grid, tb, i, flags=()) -> LadderRung:
    a = space.action(int(i))
    return LadderRung(tb, a.resolution, a.qp, _outcome(grid, i), tuple(flags))


def _first(mask: np.ndarray, *keys) -> int:
    """Index of the best candidate under ``mask``; keys ascend, primary key first.

    Remaining ties go to the lowest action index.
    """
    idx = np.flatnonzero(mask)
    order = np.lexsort(tuple(k[idx] for k in reversed(keys)))
    return int(idx[order[0]])


def _min_bitrate(grid: OutcomeGrid) -> int:
    return int(np.argmin(grid.bitrate))


# -- agent inference --------------------------------------------------------------

def infer_ladder(agent, predictors, features, weights: Optional[RewardWeights] = None,
                 policy: Optional[PenaltyPolicy] = None, noise_pct: float = 0.0, rng=None,
                 grid: Optional[OutcomeGrid] = None, timings: Optional[dict] = None) -> Ladder:
    """Build a ladder greedily from the agent's Q-values over feasible actions.

    Feasibility uses predicted values only: bitrate within the target and
    quality no lower than the previous rung. When nothing qualifies,
    monotonicity is dropped for that rung; when even the bitrate cap cannot be
    met the lowest-bitrate action is taken. Both cases are flagged on the rung.

    With ``noise_pct > 0`` the predicted quality and decoding time are
    perturbed afresh for every rung. ``timings`` (if given) receives
    per-stage wall-clock seconds.
    """
    space = agent.space
    metric = agent.metric
    t0 = time.perf_counter()
    base = grid if grid is not None else predicted_grid(predictors, features, space)
    t_pred = time.perf_counter() - t0
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng

    rungs = []
    decisions = []
    prev = agent.normalizer.sentinel
    prev_q = None
    for tb in space.target_bitrates:
        t1 = time.perf_counter()
        g = perturb_grid(base, noise_pct, rng)
        b, q = g.bitrate, g.quality(metric)
        flags = []
        ok_b = b <= tb
        mask = ok_b if prev_q is None else ok_b & (q >= prev_q)
        if not mask.any():
            if ok_b.any():
                mask = ok_b
                flags.append(RELAXED_MONOTONICITY)
            else:
                mask = np.zeros_like(ok_b)
                mask[_min_bitrate(g)] = True
                flags.append(RELAXED_BITRATE)
        qv = agent.q_values((tb, *prev))
        idx = np.flatnonzero(mask)
        a = int(idx[np.argmax(qv[idx])])
        rung = _rung(space, g, tb, a, flags)
        decisions.append(time.perf_counter() - t1)
        rungs.append(rung)
        prev = (rung.predicted.bitrate_kbps, rung.predicted.quality(metric), rung.predicted.dec_time_s)
        prev_q = prev[1]
    if timings is not None:
        timings["prediction_s"] = t_pred
        timings["decision_s"] = decisions
    w = weights or agent.weights
    p = policy or agent.policy
    return Ladder(features.segment_id, rungs, metric,
                  {"method": "dq", "weights": list(w.as_tuple()), "penalty": p.variant,
                   "noise_pct": noise_pct, "noise_sampling": NOISE_SAMPLING})


# -- fixed template ------------------------------------------------------------------

def hls_ladder(grid: OutcomeGrid, space: ConfigSpace = ConfigSpace(), metric: str = "xpsnr",
               template: Optional[dict] = None) -> Ladder:
    """Fixed resolution per target; each rung takes the lowest QP that fits the target.

    A rung whose resolution cannot meet the target at any QP falls back to the
    highest QP and is flagged.
    """
    template = template or HLS_TEMPLATE
    rungs = []
    qps = np.asarray(space.qps)
    for tb in space.target_bitrates:
        if tb not in template:
            raise ValueError(f"no template resolution for target {tb}")
        r = template[tb]
        ids = np.array([space.action_index(r, qp) for qp in qps])
        fits = grid.bitrate[ids] <= tb
        if fits.any():
            rungs.append(_rung(space, grid, tb, ids[np.flatnonzero(fits)[0]]))
        else:
            rungs.append(_rung(space, grid, tb, ids[-1], [RELAXED_BITRATE]))
    return Ladder(grid.segment_id, rungs, metric, {"method": "hls"})


# -- quality-driven baselines ---------------------------------------------------------

def cdbl_ladder(grid: OutcomeGrid, tau_l: float = 16.0, space: ConfigSpace = ConfigSpace(),
                metric: str = "xpsnr") -> Ladder:
    """Highest quality within the bitrate target and the decoding-time cap ``tau_l``."""
    q = grid.quality(metric)
    res = space.action_resolutions()
    rungs = []
    for tb in space.target_bitrates:
        ok_b = grid.bitrate <= tb
        mask = ok_b & (grid.dec_time <= tau_l)
        flags = []
        if not mask.any():
            if ok_b.any():
                mask, flags = ok_b, [RELAXED_DEC_TIME]
            else:
                rungs.append(_rung(space, grid, tb, _min_bitrate(grid), [RELAXED_BITRATE]))
                continue
        rungs.append(_rung(space, grid, tb, _first(mask, -q, grid.dec_time, res), flags))
    return Ladder(grid.segment_id, rungs, metric, {"method": "cdbl", "tau_l": tau_l})


def vexus_ladder(grid: OutcomeGrid, space: ConfigSpace = ConfigSpace(), metric: str = "xpsnr") -> Ladder:
    """Highest quality within the bitrate target, ties to lower bitrate, monotone quality."""
    q = grid.quality(metric)
    rungs = []
    prev_q = None
    for tb in space.target_bitrates:
        ok_b = grid.bitrate <= tb
        if not ok_b.any():
            i = _min_bitrate(grid)
            rungs.append(_rung(space, grid, tb, i, [RELAXED_BITRATE]))
        else:
            mask = ok_b if prev_q is None else ok_b & (q >= prev_q)
            flags = []
            if not mask.any():
                mask, flags = ok_b, [RELAXED_MONOTONICITY]
            i = _first(mask, -q, grid.bitrate)
            rungs.append(_rung(space, grid, tb, i, flags))
        prev_q = q[i]
    return Ladder(grid.segment_id, rungs, metric, {"method": "vexus"})


def _minmax(v: np.ndarray, mask: np.ndarray) -> np.ndarray:
    lo, hi = v[mask].min(), v[mask].max()
    if not hi > lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def rqtpf_ladder(grid: OutcomeGrid, alpha: float = 0.75, space: ConfigSpace = ConfigSpace(),
                 metric: str = "xpsnr") -> Ladder:
    """Rate/decoding-time trade-off, blind to quality.

    Rung ``i`` considers actions whose bitrate lies in ``(tb[i-1], tb[i]]`` and
    minimizes ``alpha * t + (1 - alpha) * b`` with both terms min-max scaled over
    that band. An empty band falls back to the highest bitrate under the
    target (or the lowest bitrate overall), flagged.
    """
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    rungs = []
    lower = 0.0
    for tb in space.target_bitrates:
        band = (grid.bitrate > lower) & (grid.bitrate <= tb)
        if band.any():
            cost = alpha * _minmax(grid.dec_time, band) + (1 - alpha) * _minmax(grid.bitrate, band)
            rungs.append(_rung(space, grid, tb, _first(band, cost)))
        else:
            ok_b = grid.bitrate <= tb
            if ok_b.any():
                rungs.append(_rung(space, grid, tb, _first(ok_b, -grid.bitrate), [FALLBACK_NEAREST]))
            else:
                rungs.append(_rung(space, grid, tb, _min_bitrate(grid), [RELAXED_BITRATE]))
        lower = tb
    return Ladder(grid.segment_id, rungs, metric, {"method": "rqtpf", "alpha": alpha})


def greedy_ladder(grid: OutcomeGrid, weights: RewardWeights = RewardWeights(),
                  policy: PenaltyPolicy = FIXED, space: ConfigSpace = ConfigSpace(),
                  metric: str = "xpsnr") -> Ladder:
    """One-step oracle: per rung, the feasible action with the highest immediate reward.

    Quality and decoding time are min-max scaled over the rung's feasible set.
    Feasibility and fallbacks follow :func:`infer_ladder`.
    """
    q = grid.quality(metric)
    t = grid.dec_time
    res = space.action_resolutions().astype(float)
    w1, w2, w3 = weights.as_tuple()
    rungs = []
    history = []
    prev_q = None
    for tb in space.target_bitrates:
        ok_b = grid.bitrate <= tb
        mask = ok_b if prev_q is None else ok_b & (q >= prev_q)
        flags = []
        if not mask.any():
            if ok_b.any():
                mask, flags = ok_b, [RELAXED_MONOTONICITY]
            else:
                mask = np.zeros_like(ok_b)
                mask[_min_bitrate(grid)] = True
                flags = [RELAXED_BITRATE]
        delta = np.array([policy.delta(r, history) for r in space.resolutions])
        d = delta[np.searchsorted(space.resolutions, res)]
        total = w1 * _minmax(q, mask) - w2 * _minmax(t, mask) - w3 * d
        i = _first(mask, -total)
        rungs.append(_rung(space, grid, tb, i, flags))
        history.append(int(res[i]))
        prev_q = q[i]
    return Ladder(grid.segment_id, rungs, metric,
                  {"method": "greedy", "weights": list(weights.as_tuple()), "penalty": policy.variant})


# -- measurement and summaries -----------------------------------------------------------

def measured_ladder(ladder: Ladder, grid: OutcomeGrid, space: ConfigSpace = ConfigSpace()) -> Ladder:
    """Same rungs, with measured outcomes in place of whatever the ladder carried."""
    if grid.segment_id != ladder.segment_id:
        raise ValueError(f"grid for {grid.segment_id!r} does not match ladder {ladder.segment_id!r}")
    rungs = [LadderRung(r.tb, r.resolution, r.qp,
                        grid.outcome(space.action_index(r.resolution, r.qp)), r.flags)
             for r in ladder.rungs]
    return Ladder(ladder.segment_id, rungs, ladder.metric, dict(ladder.meta))


def ladder_summary(ladder: Ladder, grid: OutcomeGrid, space: ConfigSpace = ConfigSpace()) -> dict:
    """Measured means and constraint counts for one ladder."""
    m = measured_ladder(ladder, grid, space)
    return {
        "quality": float(np.mean([r.predicted.quality(ladder.metric) for r in m.rungs])),
        "dec_time_s": float(np.mean([r.predicted.dec_time_s for r in m.rungs])),
        "bitrate_kbps": float(np.mean([r.predicted.bitrate_kbps for r in m.rungs])),
        "switch": resolution_switch_score(ladder),
        "violations_predicted": len(validate_ladder(ladder, space)),
        "violations_measured": len(validate_ladder(m, space)),
        "flagged_rungs": sum(1 for r in ladder.rungs if r.flags),
    }


# -- serialization ------------------------------------------------------------------

def ladder_to_dict(ladder: Ladder) -> dict:
    return {
        "format": LADDER_FORMAT,
        "segment_id": ladder.segment_id,
        "metric": ladder.metric,
        "meta": ladder.meta,
        "rungs": [{"tb": r.tb, "resolution": r.resolution, "qp": r.qp,
                   "bitrate_kbps": r.predicted.bitrate_kbps,
                   "quality": r.predicted.quality(ladder.metric),
                   "dec_time_s": r.predicted.dec_time_s,
                   "flags": list(r.flags)} for r in ladder.rungs],
    }


def ladder_from_dict(d: dict) -> Ladder:
    if d.get("format") != LADDER_FORMAT:
        raise ValueError(f"not a ladder document (format={d.get('format')!r})")
    metric = check_metric(d["metric"])
    rungs = [LadderRung(r["tb"], r["resolution"], r["qp"],
                        EncodingOutcome(r["bitrate_kbps"], r["dec_time_s"], **{metric: r["quality"]}),
                        tuple(r["flags"])) for r in d["rungs"]]
    return Ladder(d["segment_id"], rungs, metric, d.get("meta", {}))


def ladder_json(ladder: Ladder) -> str:
    return json.dumps(ladder_to_dict(ladder), indent=1, sort_keys=True) + "\n"
