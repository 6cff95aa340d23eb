"""Knowledge-layer rules: ladder, EWMA reset, classification, power control."""

import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from crossmac.cla import (
    ACK_SUCCESS,
    COLLISION_LIKELY,
    CSMA,
    MULTI_CHANNEL,
    OUT_OF_REACH,
    TDMA,
    ClaParams,
    ClaPolicy,
    FlowStats,
    KnowledgeBase,
    PowerControlState,
    classify_ack_timeout,
    mesb_base_range,
    mesb_effective_range,
    min_power_to_reach,
    power_adjust,
    reset_stage,
    select_protocol,
    update_collision_ewma,
)
from crossmac.frames import DATA, Frame
from crossmac.kernel import Kernel
from crossmac.mac import MacTimings

LADDER = [(0, 15), (16, 31), (32, 63), (64, 127), (128, 255), (256, 511), (512, 1023)]


def mw(dbm):
    return 10.0 ** (dbm / 10.0)


# -- mEsB ranges -----------------------------------------------------------------


def test_mesb_ladder_enumeration():
    assert [mesb_base_range(s) for s in range(7)] == LADDER
    assert mesb_base_range(8) == (512, 1023)   # saturated: repeats the top range
    assert mesb_base_range(40) == (512, 1023)


def test_mesb_ranges_disjoint_and_cover():
    covered = []
    for lo, hi in LADDER:
        covered.extend(range(lo, hi + 1))
    assert covered == list(range(1024))  # disjoint, gap-free, exactly [0, 1023]


def test_mesb_effective_range_examples():
    assert mesb_effective_range(32, 63, 8, 8) == (32, 63)    # clamp at 1
    assert mesb_effective_range(32, 63, 12, 8) == (32, 63)
    assert mesb_effective_range(32, 63, 2, 8) == (32, 40)    # 32 + ceil(31/4)
    assert mesb_effective_range(32, 63, 0, 8) == (32, 32)    # degenerate


@given(stage=st.integers(0, 10), n=st.integers(0, 40), n_ref=st.integers(1, 16))
def test_mesb_effective_within_base_and_monotone(stage, n, n_ref):
    lo, hi = mesb_base_range(stage)
    elo, ehi = mesb_effective_range(lo, hi, n, n_ref)
    assert elo == lo and lo <= ehi <= hi
    assert ehi >= mesb_effective_range(lo, hi, max(0, n - 1), n_ref)[1]


# -- collision prediction -----------------------------------------------------------


def test_ewma_examples():
    assert update_collision_ewma(0.2, 1, 0.25) == pytest.approx(0.4)
    assert update_collision_ewma(0.7, 0, 1.0) == 0.0  # alpha 1: identity with observed
    value = 1.0
    for _ in range(18):
        value = update_collision_ewma(value, 0, 0.25)
    assert value <= 0.01


@given(st.lists(st.integers(0, 1), max_size=60), st.floats(0.01, 1.0))
def test_ewma_stays_in_unit_interval(stream, alpha):
    value = 0.5
    for obs in stream:
        value = update_collision_ewma(value, obs, alpha)
        assert 0.0 <= value <= 1.0


def test_reset_stage_examples():
    assert reset_stage(0.0, 5, 6) == 0
    assert reset_stage(0.5, 6, 6) == 3
    assert reset_stage(1.0, 2, 6) == 2   # never above the current stage
    assert reset_stage(0.25, 6, 6) == 2  # 1.5 rounds half away from zero


@given(st.floats(0.0, 1.0), st.integers(0, 8), st.integers(1, 8))
def test_reset_stage_never_exceeds_current(ewma, current, max_stage):
    assert 0 <= reset_stage(ewma, current, max_stage) <= current


# -- estimators --------------------------------------------------------------------


def test_slot_utilization_counts():
    kb = KnowledgeBase(window_slots=100)
    assert kb.slot_utilization() == 0.0
    kb.observe_slots(True, 25)
    kb.observe_slots(False, 75)
    assert kb.slot_utilization() == 0.25
    kb2 = KnowledgeBase(window_slots=100)
    kb2.observe_slots(False, 100)
    kb2.observe_slots(True, 100)
    assert kb2.slot_utilization() == 1.0  # old idle run aged out of the window


def test_active_neighbor_estimate():
    kb = KnowledgeBase()
    sec = 1_000_000_000
    assert kb.active_neighbors(10 * sec, sec) == 0
    for src, t in [(1, 10), (2, 10), (3, 10), (4, 2), (5, 1)]:
        kb.heard_frame(src, -70.0, 20.0, t * sec)
    assert kb.active_neighbors(10 * sec, sec) == 3
    for _ in range(50):
        kb.heard_frame(1, -70.0, 20.0, 10 * sec)
    assert kb.active_neighbors(10 * sec, sec) == 3  # distinct sources only


def test_classify_ack_timeout_rules():
    assert classify_ack_timeout([mw(-96.0)] * 5, -90.0) == OUT_OF_REACH
    assert classify_ack_timeout([mw(-96.0)] * 9 + [mw(-70.0)], -90.0) == COLLISION_LIKELY
    assert classify_ack_timeout([], -90.0) == COLLISION_LIKELY


@given(st.lists(st.floats(-96.0, -40.0), min_size=1, max_size=20),
       st.integers(0, 19), st.floats(0.1, 30.0))
def test_classification_monotone_in_noise(samples, idx, bump):
    before = classify_ack_timeout([mw(s) for s in samples], -90.0)
    raised = list(samples)
    raised[idx % len(raised)] = raised[idx % len(raised)] + bump
    after = classify_ack_timeout([mw(s) for s in raised], -90.0)
    assert not (before == COLLISION_LIKELY and after == OUT_OF_REACH)


# -- power control -------------------------------------------------------------------


def make_power(p=20.0):
    return PowerControlState(tx_power_dbm=p, pt_min_dbm=10.03, pt_max_dbm=23.03)


def test_out_of_reach_doubles_linear_power():
    st_ = make_power(15.0)
    power_adjust(st_, OUT_OF_REACH, -96.0)
    assert st_.tx_power_dbm == pytest.approx(18.01, abs=0.005)
    st_.tx_power_dbm = 23.03
    power_adjust(st_, OUT_OF_REACH, -96.0)
    assert st_.tx_power_dbm == 23.03  # clamp at the top


def test_noisy_success_streak_decays_power():
    st_ = make_power(20.0)
    st_.success_streak = 3
    power_adjust(st_, ACK_SUCCESS, -80.0, dst_floor_dbm=16.05)
    assert st_.tx_power_dbm == pytest.approx(19.0)
    assert st_.success_streak == 0


def test_quiet_success_only_builds_streak():
    st_ = make_power(20.0)
    for expect in (1, 2, 3):
        power_adjust(st_, ACK_SUCCESS, -95.0)
        assert st_.tx_power_dbm == 20.0 and st_.success_streak == expect


def test_collision_decay_respects_destination_floor():
    st_ = make_power(16.2)
    power_adjust(st_, COLLISION_LIKELY, -80.0, dst_floor_dbm=16.05)
    assert st_.tx_power_dbm == pytest.approx(16.05)  # floored, not -1 dB
    power_adjust(st_, COLLISION_LIKELY, -92.0)
    assert st_.tx_power_dbm == pytest.approx(16.05)  # quiet vicinity: no decay


@given(st.lists(st.tuples(st.sampled_from([OUT_OF_REACH, COLLISION_LIKELY, ACK_SUCCESS]),
                          st.floats(-96.0, -60.0),
                          st.one_of(st.none(), st.floats(5.0, 40.0))),
                max_size=80))
def test_power_always_within_bounds(triggers):
    # dst floors may exceed pt_max (a link that needs more than the radio has)
    st_ = make_power(20.0)
    for trig, noise, floor in triggers:
        power_adjust(st_, trig, noise, floor)
        assert 10.03 <= st_.tx_power_dbm <= 23.03


def test_min_power_to_reach_examples():
    assert min_power_to_reach(-70.0, 20.0, 22.05, -96.0, 3.0) == pytest.approx(19.05)
    required = -96.0 + 22.05
    assert min_power_to_reach(required, 17.0, 22.05, -96.0, 0.0) == pytest.approx(17.0)
    assert min_power_to_reach(required + 10.0, 17.0, 22.05, -96.0, 0.0) == pytest.approx(7.0)


# -- policy glue ----------------------------------------------------------------------


def make_policy():
    kernel = Kernel()
    pol = ClaPolicy(MacTimings(), ClaParams(), 10.03, 23.03, kernel)
    return kernel, pol


def test_policy_range_shrinks_with_few_neighbors():
    kernel, pol = make_policy()
    assert pol.attempt_range(2) == (32, 32)  # nobody heard: degenerate range
    for src in (1, 2):
        pol.kb.heard_frame(src, -70.0, 23.03, kernel.now)
    assert pol.attempt_range(2) == (32, 40)


def test_policy_timeout_classifies_and_adjusts():
    kernel, pol = make_policy()
    frame = Frame(DATA, 0, 1, 7)
    label = pol.on_timeout(frame, [mw(-96.0)], 0)
    assert label == OUT_OF_REACH
    assert pol.power.tx_power_dbm == pytest.approx(23.03)  # clamped at max already
    assert pol.kb.collision_ewma == 0.0  # out-of-reach is not a contention event
    label = pol.on_timeout(frame, [mw(-70.0)], 0)
    assert label == COLLISION_LIKELY
    assert pol.kb.collision_ewma == pytest.approx(0.25)


def test_policy_ack_resets_stage_by_prediction():
    kernel, pol = make_policy()
    frame = Frame(DATA, 0, 1, 7)
    for _ in range(4):
        pol.on_timeout(frame, [mw(-70.0)], 0)  # ewma -> 0.684
    new_stage = pol.on_ack(frame, [mw(-96.0)], 0, stage=6)
    # ewma after the success observation: 0.513 -> round(3.08) = 3
    assert new_stage == 3


def test_select_protocol_rules():
    cbr = FlowStats(mean_rate_bps=2048 * 8 / 0.025, interarrival_cov=0.0)
    assert select_protocol(cbr) == TDMA
    assert select_protocol(FlowStats(1e6, 0.1, realtime=True)) == MULTI_CHANNEL
    assert select_protocol(FlowStats(20_000.0, 1.5)) == CSMA
    assert select_protocol(cbr) == select_protocol(cbr)  # pure
