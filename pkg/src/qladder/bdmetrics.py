"""Bjontegaard deltas over monotone piecewise-cubic Hermite interpolants,
and per-segment ladder comparison reports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .domain import ConfigSpace, resolution_switch_score, validate_ladder

MIN_POINTS = 4
GAUSS_NODES = 32
REPORT_HEADER = ["segment_id", "bd_rate_pct", "bd_metric", "bd_entime_s", "bd_detime_s",
                 "switch_A", "switch_B", "violations_A", "violations_B"]

_NODES, _WEIGHTS = np.polynomial.legendre.leggauss(GAUSS_NODES)


@dataclass(frozen=True)
class RdCurve:
    """Anchor points (rate in kbps, value) with strictly increasing rate."""
    rates: tuple
    values: tuple
    repairs: int = 0

    def __post_init__(self):
        r = np.asarray(self.rates, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if r.shape != v.shape or r.ndim != 1:
            raise ValueError("rates and values must be 1-D and equally long")
        if len(r) < MIN_POINTS:
            raise ValueError(f"need at least {MIN_POINTS} points, got {len(r)}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(v))):
            raise ValueError("curve points must be finite")
        if np.any(r <= 0) or np.any(np.diff(r) <= 0):
            raise ValueError("rates must be positive and strictly increasing")

    @classmethod
    def from_points(cls, rates, values, repair: bool = True) -> "RdCurve":
        """Sort by rate, merge duplicate rates (keeping the best value) and,
        when ``repair`` is set, lift dips with a running maximum."""
        r = np.asarray(rates, dtype=float)
        v = np.asarray(values, dtype=float)
        order = np.lexsort((-v, r))
        r, v = r[order], v[order]
        keep = np.ones(len(r), dtype=bool)
        keep[1:] = r[1:] != r[:-1]
        r, v = r[keep], v[keep]
        repairs = 0
        if repair:
            fixed = np.maximum.accumulate(v)
            repairs = int(np.count_nonzero(fixed != v))
            v = fixed
        return cls(tuple(r.tolist()), tuple(v.tolist()), repairs)

    @property
    def log_rates(self) -> np.ndarray:
        return np.log10(np.asarray(self.rates))

    def value_interpolant(self) -> PchipInterpolator:
        return PchipInterpolator(self.log_rates, np.asarray(self.values))

    def rate_interpolant(self) -> PchipInterpolator:
        """log10(rate) as a function of value; flat stretches keep their lowest rate."""
        v = np.asarray(self.values)
        keep = np.ones(len(v), dtype=bool)
        keep[1:] = np.diff(v) > 0
        if np.any(np.diff(v) < 0):
            raise ValueError("values must be nondecreasing to invert the curve")
        if keep.sum() < MIN_POINTS:
            raise ValueError(f"need at least {MIN_POINTS} distinct values, got {int(keep.sum())}")
        return PchipInterpolator(v[keep], self.log_rates[keep])


def integrate(f: PchipInterpolator, lo: float, hi: float) -> float:
    """Integral of ``f`` over [lo, hi], Gauss-Legendre on every piece inside it."""
    knots = np.asarray(f.x)
    edges = np.concatenate(([lo], knots[(knots > lo) & (knots < hi)], [hi]))
    a, b = edges[:-1, None], edges[1:, None]
    x = 0.5 * (b - a) * _NODES + 0.5 * (a + b)
    return float(np.sum(0.5 * (b - a) * (_WEIGHTS * f(x))))


def _overlap(xa: np.ndarray, xb: np.ndarray) -> tuple:
    lo, hi = max(xa.min(), xb.min()), min(xa.max(), xb.max())
    if not hi > lo:
        raise ValueError("curves do not overlap")
    return lo, hi


def _mean_gap(fa: PchipInterpolator, fb: PchipInterpolator) -> float:
    lo, hi = _overlap(np.asarray(fa.x), np.asarray(fb.x))
    return (integrate(fb, lo, hi) - integrate(fa, lo, hi)) / (hi - lo)


def bd_rate(reference: RdCurve, test: RdCurve) -> float:
    """Average bitrate change (%) of ``test`` at equal quality; negative saves bits."""
    return (10.0 ** _mean_gap(reference.rate_interpolant(), test.rate_interpolant()) - 1.0) * 100.0


def bd_metric(reference: RdCurve, test: RdCurve) -> float:
    """Average value difference (test minus reference) over the shared log-rate range."""
    return _mean_gap(reference.value_interpolant(), test.value_interpolant())


def bd_time(reference: RdCurve, test: RdCurve) -> float:
    """Average time difference in seconds over the shared log-rate range.

    Build the curves with ``repair=False``; times need not rise with rate.
    """
    return bd_metric(reference, test)


# -- ladder comparison -------------------------------------------------------------------

@dataclass
class ComparisonRow:
    segment_id: str
    bd_rate_pct: float
    bd_metric: float
    bd_entime_s: float
    bd_detime_s: float
    switch_A: float
    switch_B: float
    violations_A: float
    violations_B: float

    def values(self) -> list:
        return [getattr(self, k) for k in REPORT_HEADER]


@dataclass
class ComparisonReport:
    rows: list
    metric: str
    repairs: dict = field(default_factory=dict)

    @property
    def mean(self) -> ComparisonRow:
        cols = [np.array([getattr(r, k) for r in self.rows], dtype=float) for k in REPORT_HEADER[1:]]
        return ComparisonRow("mean", *[_nanmean(c) for c in cols])

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for row in [*self.rows, self.mean]:
            w.writerow([row.segment_id] + [_fmt(v) for v in row.values()[1:]])
        return buf.getvalue()


def _nanmean(a: np.ndarray) -> float:
    a = a[~np.isnan(a)]
    return float(a.mean()) if a.size else math.nan


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


def _safe(fn, *args) -> float:
    try:
        return fn(*args)
    except ValueError:
        # too few distinct anchors or no overlap: excluded from means
        return math.nan


def _curves(measured, metric: str):
    b = [r.predicted.bitrate_kbps for r in measured.rungs]
    return (RdCurve.from_points(b, [r.predicted.quality(metric) for r in measured.rungs]),
            RdCurve.from_points(b, [r.predicted.enc_time_s for r in measured.rungs], repair=False),
            RdCurve.from_points(b, [r.predicted.dec_time_s for r in measured.rungs], repair=False))


def compare_ladders(log, ladders_a: Sequence, ladders_b: Sequence, metric: str = "xpsnr",
                    space: ConfigSpace = ConfigSpace()) -> ComparisonReport:
    """Score ladder set B against reference set A on measured outcomes.

    Violation columns are measured-side violation rates (violations per rung).
    """
    from .ladder import measured_ladder

    a_by = {l.segment_id: l for l in ladders_a}
    b_by = {l.segment_id: l for l in ladders_b}
    if set(a_by) != set(b_by):
        raise ValueError("ladder sets cover different segments")
    rows = []
    repairs = {}
    for sid in sorted(a_by):
        ma = measured_ladder(a_by[sid], log.grid(sid), space)
        mb = measured_ladder(b_by[sid], log.grid(sid), space)
        if [r.tb for r in ma.rungs] != [r.tb for r in mb.rungs]:
            raise ValueError(f"segment {sid}: ladders use different target bitrates")
        try:
            qa, ea, da = _curves(ma, metric)
            qb, eb, db = _curves(mb, metric)
            cells = [_safe(bd_rate, qa, qb), _safe(bd_metric, qa, qb),
                     _safe(bd_time, ea, eb), _safe(bd_time, da, db)]
            repairs[sid] = (qa.repairs, qb.repairs)
        except ValueError:
            cells = [math.nan] * 4
        rows.append(ComparisonRow(
            sid, *cells, resolution_switch_score(ma), resolution_switch_score(mb),
            len(validate_ladder(ma, space)) / len(ma), len(validate_ladder(mb, space)) / len(mb)))
    return ComparisonReport(rows, metric, repairs)


def read_curve_csv(text: str) -> dict:
    """Columns ``rate`` plus any value columns; returns column name -> array."""
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows or "rate" not in rows[0]:
        raise ValueError("curve CSV needs a 'rate' column")
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}
