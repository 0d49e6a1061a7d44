"""Value types shared across the package.

Units are canonical everywhere: bitrates in kbps, times in seconds,
resolutions as vertical pixel counts (16:9 frames).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

METRICS = ("xpsnr", "vmaf")

DEFAULT_RESOLUTIONS = (360, 540, 720, 1080, 1440, 2160)
DEFAULT_QPS = tuple(range(10, 51))
DEFAULT_TARGET_BITRATES = (145, 300, 600, 900, 1600, 2400, 3400,
                           4500, 5800, 8100, 11600, 16800)


def _strictly_increasing(values: Sequence[float]) -> bool:
    return all(b > a for a, b in zip(values, values[1:]))


def check_metric(metric: str) -> str:
    if metric not in METRICS:
        raise ValueError(f"unknown quality metric {metric!r}, expected one of {METRICS}")
    return metric


def pixel_count(resolution: int) -> float:
    """Pixels per frame for a 16:9 picture of the given height."""
    return resolution * resolution * 16.0 / 9.0


@dataclass(frozen=True)
class SegmentFeatures:
    segment_id: str
    e_y: float
    h: float
    l_y: float

    def __post_init__(self):
        for name in ("e_y", "h", "l_y"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v!r}")


@dataclass(frozen=True)
class ConfigSpace:
    resolutions: tuple = DEFAULT_RESOLUTIONS
    qps: tuple = DEFAULT_QPS
    target_bitrates: tuple = DEFAULT_TARGET_BITRATES

    def __post_init__(self):
        object.__setattr__(self, "resolutions", tuple(int(r) for r in self.resolutions))
        object.__setattr__(self, "qps", tuple(int(q) for q in self.qps))
        object.__setattr__(self, "target_bitrates", tuple(float(t) for t in self.target_bitrates))
        for name in ("resolutions", "qps", "target_bitrates"):
            values = getattr(self, name)
            if not values:
                raise ValueError(f"{name} must not be empty")
            if not _strictly_increasing(values):
                raise ValueError(f"{name} must be strictly increasing")

    @property
    def n_actions(self) -> int:
        return len(self.resolutions) * len(self.qps)

    @property
    def shape(self) -> tuple:
        return (len(self.resolutions), len(self.qps))

    def action_index(self, resolution: int, qp: int) -> int:
        try:
            ri = self.resolutions.index(int(resolution))
            qi = self.qps.index(int(qp))
        except ValueError:
            raise ValueError(f"action ({resolution}, {qp}) outside the configured space") from None
        return ri * len(self.qps) + qi

    def action(self, index: int) -> "Action":
        ri, qi = divmod(int(index), len(self.qps))
        return Action(self.resolutions[ri], self.qps[qi])

    def actions(self) -> list:
        return [Action(r, q) for r in self.resolutions for q in self.qps]

    def action_resolutions(self) -> np.ndarray:
        """Resolution of every flat action index."""
        return np.repeat(np.asarray(self.resolutions, dtype=float), len(self.qps))

    def action_qps(self) -> np.ndarray:
        return np.tile(np.asarray(self.qps, dtype=float), len(self.resolutions))

    def to_dict(self) -> dict:
        return {"resolutions": list(self.resolutions), "qps": list(self.qps),
                "target_bitrates": list(self.target_bitrates)}

    @classmethod
    def from_dict(cls, d: dict) -> "ConfigSpace":
        return cls(tuple(d["resolutions"]), tuple(d["qps"]), tuple(d["target_bitrates"]))


@dataclass(frozen=True)
class Action:
    resolution: int
    qp: int


@dataclass(frozen=True)
class EncodingOutcome:
    """Measured or predicted result of one (segment, resolution, qp) encode.

    Either quality slot may be ``None`` when that metric is not tracked.
    """
    bitrate_kbps: float
    dec_time_s: float
    xpsnr: Optional[float] = None
    vmaf: Optional[float] = None
    enc_time_s: float = 0.0

    def __post_init__(self):
        if not self.bitrate_kbps > 0:
            raise ValueError(f"bitrate_kbps must be > 0, got {self.bitrate_kbps!r}")
        if not self.dec_time_s > 0:
            raise ValueError(f"dec_time_s must be > 0, got {self.dec_time_s!r}")
        if self.vmaf is not None:
            object.__setattr__(self, "vmaf", min(100.0, max(0.0, float(self.vmaf))))

    def quality(self, metric: str = "xpsnr") -> float:
        value = getattr(self, check_metric(metric))
        if value is None:
            raise ValueError(f"outcome carries no {metric} value")
        return value


@dataclass(frozen=True)
class AgentState:
    tb: float
    prev_bitrate: float
    prev_quality: float
    prev_dec_time: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tb, self.prev_bitrate, self.prev_quality, self.prev_dec_time])


@dataclass(frozen=True)
class RewardWeights:
    """Independent reward weights; they need not sum to one."""
    lambda1: float = 0.8
    lambda2: float = 0.6
    lambda3: float = 0.1

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v!r}")

    def as_tuple(self) -> tuple:
        return (self.lambda1, self.lambda2, self.lambda3)

    @classmethod
    def parse(cls, text: str) -> "RewardWeights":
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 3:
            raise ValueError(f"expected three comma-separated weights, got {text!r}")
        return cls(*parts)


@dataclass(frozen=True)
class LadderRung:
    tb: float
    resolution: int
    qp: int
    predicted: EncodingOutcome
    flags: tuple = ()


@dataclass(frozen=True)
class Ladder:
    segment_id: str
    rungs: tuple
    metric: str = "xpsnr"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "rungs", tuple(self.rungs))
        check_metric(self.metric)

    def __len__(self):
        return len(self.rungs)

    @property
    def resolutions(self) -> list:
        return [r.resolution for r in self.rungs]

    @property
    def flagged(self) -> bool:
        return any(r.flags for r in self.rungs)


@dataclass(frozen=True)
class Violation:
    index: int
    constraint: str
    detail: str = ""


def validate_ladder(ladder: Ladder, space: ConfigSpace) -> list:
    """Check the rate cap, quality monotonicity and ordering of a ladder.

    Uses whatever outcome values the rungs carry. Returns an empty list when
    the ladder is valid.
    """
    if not ladder.rungs:
        raise ValueError("ladder has no rungs")
    targets = set(space.target_bitrates)
    violations = []
    prev = None
    for i, rung in enumerate(ladder.rungs):
        if rung.tb not in targets:
            violations.append(Violation(i, "target", f"tb={rung.tb} not a configured target"))
        if rung.resolution not in space.resolutions or rung.qp not in space.qps:
            violations.append(Violation(i, "action", f"({rung.resolution}, {rung.qp}) outside space"))
        if prev is not None and not rung.tb > prev.tb:
            violations.append(Violation(i, "order", f"tb={rung.tb} after tb={prev.tb}"))
        if rung.predicted.bitrate_kbps > rung.tb:
            violations.append(Violation(
                i, "bitrate", f"bitrate {rung.predicted.bitrate_kbps:.6g} > tb {rung.tb:.6g}"))
        if prev is not None and rung.tb > prev.tb:
            q, q_prev = rung.predicted.quality(ladder.metric), prev.predicted.quality(ladder.metric)
            if q < q_prev:
                violations.append(Violation(i, "monotonicity", f"quality {q:.6g} < {q_prev:.6g}"))
        prev = rung
    return violations


def resolution_switch_score(ladder_or_resolutions) -> float:
    """Mean absolute difference between consecutive rung resolutions."""
    if isinstance(ladder_or_resolutions, Ladder):
        res = ladder_or_resolutions.resolutions
    else:
        res = list(ladder_or_resolutions)
    if len(res) < 2:
        raise ValueError("switch score needs at least two rungs")
    diffs = [abs(b - a) for a, b in zip(res, res[1:])]
    return float(sum(diffs)) / len(diffs)


def feature_vectors(features: SegmentFeatures, space: ConfigSpace) -> np.ndarray:
    """Predictor inputs (e_y, h, l_y, resolution, qp) for every action, flat-index order."""
    n = space.n_actions
    X = np.empty((n, 5))
    X[:, 0] = features.e_y
    X[:, 1] = features.h
    X[:, 2] = features.l_y
    X[:, 3] = space.action_resolutions()
    X[:, 4] = space.action_qps()
    return X

