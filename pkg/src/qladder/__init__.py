"""Per-segment adaptive-streaming bitrate ladders chosen by a deep Q-network."""
from .domain import (ConfigSpace, EncodingOutcome, Ladder, LadderRung, RewardWeights,
                     SegmentFeatures, resolution_switch_score, validate_ladder)

__all__ = ["ConfigSpace", "EncodingOutcome", "Ladder", "LadderRung", "RewardWeights",
           "SegmentFeatures", "resolution_switch_score", "validate_ladder"]
__version__ = "0.1.0"
