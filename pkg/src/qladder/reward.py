"""Per-rung reward: weighted normalized quality, decoding time and switch penalty."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from .domain import RewardWeights

PENALTY_VARIANTS = ("fixed", "history")


@dataclass(frozen=True)
class NormBounds:
    """Min-max bounds used to normalize quality and decoding time to [0, 1]."""
    q_min: float
    q_max: float
    t_min: float
    t_max: float

    def q_norm(self, q: float) -> float:
        return _normalize(q, self.q_min, self.q_max)

    def t_norm(self, t: float) -> float:
        return _normalize(t, self.t_min, self.t_max)

    @classmethod
    def from_values(cls, q, t) -> "NormBounds":
        return cls(float(min(q)), float(max(q)), float(min(t)), float(max(t)))


def _normalize(v: float, lo: float, hi: float) -> float:
    # degenerate range: every candidate is equivalent, report 0
    if not hi > lo:
        return 0.0
    return min(1.0, max(0.0, (v - lo) / (hi - lo)))


@dataclass(frozen=True)
class PenaltyPolicy:
    """Resolution-switch penalty.

    ``fixed`` charges 1 for any change from the previous rung. ``history``
    charges only when the new resolution differs from both of the two most
    recent ones, scaled by its distance to the nearer of them over
    ``resolution_range``.
    """
    variant: str = "fixed"
    resolution_range: float = 1800.0

    def __post_init__(self):
        if self.variant not in PENALTY_VARIANTS:
            raise ValueError(f"penalty variant must be one of {PENALTY_VARIANTS}, got {self.variant!r}")
        if not self.resolution_range > 0:
            raise ValueError("resolution_range must be > 0")

    def delta(self, r: float, history: Sequence[float]) -> float:
        if not history:
            return 0.0
        if self.variant == "fixed":
            return 1.0 if r != history[-1] else 0.0
        recent = list(history[-2:])
        if r in recent:
            return 0.0
        nearest = min(recent, key=lambda x: (abs(r - x), x))
        return min(1.0, abs(r - nearest) / self.resolution_range)


FIXED = PenaltyPolicy("fixed")


@dataclass(frozen=True)
class RewardBreakdown:
    q_norm: float
    t_norm: float
    delta: float
    total: float


def reward(q: float, t: float, r: float, prev_r: Optional[float], bounds: NormBounds,
           weights: RewardWeights, policy: PenaltyPolicy = FIXED,
           history: Optional[Sequence[float]] = None) -> RewardBreakdown:
    """``lambda1 * q_norm - lambda2 * t_norm - lambda3 * delta``.

    ``history`` lists earlier rung resolutions, most recent last; when omitted
    it is ``[prev_r]`` (or empty for the first rung).
    """
    if history is None:
        history = [] if prev_r is None else [prev_r]
    qn = bounds.q_norm(q)
    tn = bounds.t_norm(t)
    d = policy.delta(r, history)
    total = weights.lambda1 * qn - weights.lambda2 * tn - weights.lambda3 * d
    return RewardBreakdown(qn, tn, d, total)
