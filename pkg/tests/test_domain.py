import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qladder.domain import (DEFAULT_QPS, DEFAULT_RESOLUTIONS, DEFAULT_TARGET_BITRATES, AgentState,
                            ConfigSpace, EncodingOutcome, RewardWeights, SegmentFeatures,
                            feature_vectors, resolution_switch_score, validate_ladder)

from conftest import make_ladder


def test_default_space_matches_configuration_table():
    s = ConfigSpace()
    assert s.resolutions == (360, 540, 720, 1080, 1440, 2160)
    assert s.qps == tuple(range(10, 51))
    assert s.target_bitrates == (145, 300, 600, 900, 1600, 2400, 3400, 4500, 5800, 8100, 11600, 16800)
    assert s.n_actions == 246


def test_action_index_round_trip():
    s = ConfigSpace()
    for i in range(s.n_actions):
        a = s.action(i)
        assert s.action_index(a.resolution, a.qp) == i
    with pytest.raises(ValueError):
        s.action_index(480, 30)
    with pytest.raises(ValueError):
        s.action_index(360, 9)


@pytest.mark.parametrize("kw", [dict(resolutions=(540, 360)), dict(qps=(10, 10)),
                                dict(target_bitrates=(300, 145))])
def test_space_rejects_unordered_values(kw):
    with pytest.raises(ValueError):
        ConfigSpace(**kw)


def test_space_dict_round_trip():
    s = ConfigSpace(resolutions=(360, 720), qps=(20, 30, 40), target_bitrates=(100, 200))
    assert ConfigSpace.from_dict(s.to_dict()) == s


@pytest.mark.parametrize("bad", [-1.0, math.inf, math.nan])
def test_features_must_be_finite_nonnegative(bad):
    with pytest.raises(ValueError):
        SegmentFeatures("x", bad, 1.0, 1.0)


def test_outcome_invariants():
    with pytest.raises(ValueError):
        EncodingOutcome(0.0, 1.0)
    with pytest.raises(ValueError):
        EncodingOutcome(10.0, 0.0)
    assert EncodingOutcome(10.0, 1.0, vmaf=104.0).vmaf == 100.0
    assert EncodingOutcome(10.0, 1.0, vmaf=-3.0).vmaf == 0.0
    with pytest.raises(ValueError):
        EncodingOutcome(10.0, 1.0, xpsnr=30.0).quality("vmaf")


def test_weights_need_not_sum_to_one():
    w = RewardWeights.parse("1,1,1")
    assert w.as_tuple() == (1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        RewardWeights(-0.1, 0, 0)
    with pytest.raises(ValueError):
        RewardWeights.parse("1,2")


def test_agent_state_array_order():
    assert AgentState(145, 100, 30, 2).as_array().tolist() == [145, 100, 30, 2]


def test_feature_vectors_cover_every_action():
    s = ConfigSpace()
    X = feature_vectors(SegmentFeatures("a", 1.0, 2.0, 3.0), s)
    assert X.shape == (246, 5)
    assert X[0].tolist() == [1.0, 2.0, 3.0, 360, 10]
    assert X[-1].tolist() == [1.0, 2.0, 3.0, 2160, 50]


# -- validate_ladder --------------------------------------------------------------

def test_hls_ladder_with_monotone_qualities_is_valid(space):
    from qladder.ladder import HLS_TEMPLATE
    rows = [(tb, HLS_TEMPLATE[tb], 30, 0.9 * tb, 30.0 + i) for i, tb in enumerate(space.target_bitrates)]
    assert validate_ladder(make_ladder(rows), space) == []


def test_bitrate_equal_to_target_is_admitted(space):
    assert validate_ladder(make_ladder([(145, 360, 30, 145.0, 30.0)]), space) == []


def test_quality_dip_gives_one_violation_at_second_rung(space):
    lad = make_ladder([(145, 360, 30, 100, 30), (300, 360, 28, 200, 29), (600, 540, 30, 500, 31)])
    v = validate_ladder(lad, space)
    assert len(v) == 1
    assert v[0].index == 1 and v[0].constraint == "monotonicity"


def test_bitrate_over_target_and_ordering_flagged(space):
    lad = make_ladder([(300, 360, 30, 301, 30), (145, 360, 30, 100, 31)])
    kinds = sorted(v.constraint for v in validate_ladder(lad, space))
    assert kinds == ["bitrate", "order"]


def test_unknown_target_and_action_flagged(space):
    lad = make_ladder([(150, 480, 30, 100, 30)])
    kinds = sorted(v.constraint for v in validate_ladder(lad, space))
    assert kinds == ["action", "target"]


def test_empty_ladder_rejected(space):
    from qladder.domain import Ladder
    with pytest.raises(ValueError):
        validate_ladder(Ladder("x", ()), space)


# -- switch score -------------------------------------------------------------------

@pytest.mark.parametrize("res,expected", [((360, 360, 360), 0.0), ((360, 360, 540), 90.0),
                                          ((360, 2160), 1800.0)])
def test_switch_score_examples(res, expected):
    assert resolution_switch_score(res) == expected


def test_switch_score_needs_two_rungs():
    with pytest.raises(ValueError):
        resolution_switch_score([360])


@given(st.lists(st.sampled_from(DEFAULT_RESOLUTIONS), min_size=2, max_size=20))
def test_switch_score_times_pairs_is_total_variation(res):
    total = sum(abs(b - a) for a, b in zip(res, res[1:]))
    assert resolution_switch_score(res) * (len(res) - 1) == pytest.approx(total, abs=1e-9)
