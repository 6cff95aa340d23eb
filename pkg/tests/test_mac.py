"""DCF machinery: backoff ranges, draws, power nudges, and access timelines."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crossmac.channel import Channel, ChannelParams, PhyTimings
from crossmac.frames import ACK, DATA, Frame
from crossmac.kernel import MS, SEC, US, Kernel, derive_stream
from crossmac.mac import (
    BasicPcPolicy,
    DcfPolicy,
    Mac,
    MacTimings,
    backoff_draw,
    basic_pc_adjust,
    beb_next_range,
)

DIFS = 50 * US
SIFS = 10 * US
SLOT = 20 * US


# -- pure pieces -----------------------------------------------------------------


def test_beb_range_ladder():
    assert beb_next_range(0) == (0, 15)
    assert beb_next_range(3) == (0, 127)
    assert beb_next_range(9) == (0, 1023)  # clamped at CWmax


@given(st.integers(min_value=0, max_value=32))
def test_beb_range_always_within_bounds(stage):
    lo, hi = beb_next_range(stage)
    assert lo == 0 and 15 <= hi <= 1023
    assert beb_next_range(stage + 1)[1] >= hi


def test_backoff_draw_degenerate_and_mean():
    rng = derive_stream(7, 0, "backoff")
    assert backoff_draw(rng, 0, 0) == 0
    draws = [backoff_draw(rng, 0, 15) for _ in range(100_000)]
    assert np.mean(draws) == pytest.approx(7.5, abs=0.1)
    assert min(draws) == 0 and max(draws) == 15


def test_backoff_draw_reproducible():
    a = [backoff_draw(derive_stream(3, 1, "backoff"), 0, 1023) for _ in range(1)]
    b = [backoff_draw(derive_stream(3, 1, "backoff"), 0, 1023) for _ in range(1)]
    assert a == b


def test_basic_pc_adjust_rules():
    assert basic_pc_adjust(23.03, False, 10.03, 23.03) == 23.03  # ceiling
    assert basic_pc_adjust(10.03, True, 10.03, 23.03) == 10.03   # floor
    mid = 16.0
    after_pair = basic_pc_adjust(basic_pc_adjust(mid, True, 10.03, 23.03), False, 10.03, 23.03)
    assert after_pair == pytest.approx(mid + 1.0)  # net +1 dB per success/failure pair


def test_timings_validation_and_max_stage():
    MacTimings().validate()
    assert MacTimings().max_stage == 6
    with pytest.raises(ValueError):
        MacTimings(difs_us=40).validate()


# -- state-machine timelines ---------------------------------------------------


class FixedRng:
    """Backoff stub: returns scripted draws (holds the last one forever)."""

    def __init__(self, *values):
        self.values = list(values)

    def integers(self, lo, hi):
        return self.values.pop(0) if len(self.values) > 1 else self.values[0]


def build_net(positions, rngs=None, timings=None, power=23.03):
    params = ChannelParams(sigma_db=0.0)
    kernel = Kernel()
    shadow = [derive_stream(1, i, "shadowing") for i in range(len(positions))]
    channel = Channel(kernel, params, PhyTimings(), np.array(positions, float), shadow)
    timings = timings or MacTimings()
    macs, log = [], []
    for i in range(len(positions)):
        rng = rngs[i] if rngs else derive_stream(1, i, "backoff")
        m = Mac(i, kernel, channel, timings, DcfPolicy(timings, power), rng)
        m.deliver_hook = lambda f, s, now, i=i: log.append(("rx", i, f.seq, now))
        m.ack_hook = lambda f, now, i=i: log.append(("ack", i, f.seq, now))
        m.drop_hook = lambda f, r, now, i=i: log.append(("drop", i, r, now))
        m.timeout_hook = lambda f, lab, now, i=i: log.append(("timeout", i, f.seq, now))
        macs.append(m)
    return kernel, channel, macs, log


def pick(log, kind, node):
    return [e for e in log if e[0] == kind and e[1] == node]


def test_single_frame_timeline_is_analytic():
    draw = 5
    kernel, ch, macs, log = build_net([(0, 0), (30, 0)], rngs=[FixedRng(draw), FixedRng(0)])
    phy = ch.phy
    frame = Frame(DATA, 0, 1, 1, payload_bytes=2048)
    kernel.schedule(0, lambda _: macs[0].enqueue(frame))
    kernel.run_until(SEC)
    data_at = DIFS + draw * SLOT
    rx = pick(log, "rx", 1)
    assert rx == [("rx", 1, 1, data_at + phy.airtime_ns(frame))]
    ack_done = data_at + phy.airtime_ns(frame) + SIFS + phy.airtime_ns(Frame(ACK, 1, 0, 1))
    assert pick(log, "ack", 0) == [("ack", 0, 1, ack_done)]


def test_zero_draw_transmits_right_after_difs():
    kernel, ch, macs, log = build_net([(0, 0), (30, 0)], rngs=[FixedRng(0), FixedRng(0)])
    frame = Frame(DATA, 0, 1, 1, payload_bytes=64)
    kernel.schedule(1000, lambda _: macs[0].enqueue(frame))
    kernel.run_until(SEC)
    assert pick(log, "rx", 1)[0][3] == 1000 + DIFS + ch.phy.airtime_ns(frame)


def test_unreachable_destination_retries_then_drops():
    # receiver 2 km away: below sensitivity, never ACKs
    kernel, ch, macs, log = build_net([(0, 0), (2000, 0)], rngs=[FixedRng(2), FixedRng(0)])
    kernel.schedule(0, lambda _: macs[0].enqueue(Frame(DATA, 0, 1, 1, payload_bytes=64)))
    kernel.run_until(5 * SEC)
    assert len(pick(log, "timeout", 0)) == 8  # initial attempt + 7 retries
    drops = pick(log, "drop", 0)
    assert drops == [("drop", 0, "retry_limit", drops[0][3])]
    assert macs[0].state == "idle" and not macs[0].queue


def test_stage_escalates_then_resets_on_drop():
    kernel, ch, macs, log = build_net([(0, 0), (2000, 0)], rngs=[FixedRng(0), FixedRng(0)])
    stages = []
    macs[0].timeout_hook = lambda f, lab, now: stages.append(macs[0].stage)
    kernel.schedule(0, lambda _: macs[0].enqueue(Frame(DATA, 0, 1, 1, payload_bytes=64)))
    kernel.run_until(5 * SEC)
    # hook runs before escalation: stage seen at each timeout, capped at 6
    assert stages == [0, 1, 2, 3, 4, 5, 6, 6]
    assert macs[0].stage == 0  # reset after the drop


def test_simultaneous_zero_draws_collide_then_recover():
    # both contenders commit at the same slot boundary; first attempts collide
    kernel, ch, macs, log = build_net(
        [(0, 0), (20, 0), (40, 0)],
        rngs=[FixedRng(0, 4), FixedRng(0, 9), FixedRng(0)],
    )
    kernel.schedule(0, lambda _: macs[0].enqueue(Frame(DATA, 0, 1, 1, payload_bytes=256)))
    kernel.schedule(0, lambda _: macs[2].enqueue(Frame(DATA, 2, 1, 2, payload_bytes=256)))
    kernel.run_until(SEC)
    assert len(pick(log, "timeout", 0)) == 1
    assert len(pick(log, "timeout", 2)) == 1
    assert {e[2] for e in pick(log, "rx", 1)} == {1, 2}  # retries both land


def test_contender_freezes_during_tx_and_resumes_after_ack():
    kernel, ch, macs, log = build_net(
        [(0, 0), (30, 0), (15, 10)], rngs=[FixedRng(0), FixedRng(0), FixedRng(3)]
    )
    phy = ch.phy
    a = Frame(DATA, 0, 1, 1, payload_bytes=512)
    b = Frame(DATA, 2, 1, 2, payload_bytes=512)
    kernel.schedule(0, lambda _: macs[0].enqueue(a))
    # node 2 enqueues mid-frame: defers, then waits out the ACK exchange
    kernel.schedule(DIFS + 5000, lambda _: macs[2].enqueue(b))
    kernel.run_until(SEC)
    ack_end = DIFS + phy.airtime_ns(a) + SIFS + phy.airtime_ns(Frame(ACK, 1, 0, 1))
    want_b_rx = ack_end + DIFS + 3 * SLOT + phy.airtime_ns(b)
    assert ("rx", 1, 2, want_b_rx) in log


def test_queue_cap_drops_tail():
    timings = MacTimings(queue_cap=3)
    kernel, ch, macs, log = build_net([(0, 0), (30, 0)], rngs=[FixedRng(0), FixedRng(0)],
                                      timings=timings)

    def stuff(_):
        for seq in range(5):
            macs[0].enqueue(Frame(DATA, 0, 1, seq, payload_bytes=64))

    kernel.schedule(0, stuff)
    kernel.run_until(SEC)
    assert [e for e in log if e[0] == "drop"] == [
        ("drop", 0, "queue_full", 0), ("drop", 0, "queue_full", 0)]
    assert len(pick(log, "rx", 1)) == 3


def test_rts_cts_exchange_delivers_and_reserves():
    timings = MacTimings(rts_threshold_bytes=0)
    kernel, ch, macs, log = build_net(
        [(0, 0), (30, 0), (60, 0)], rngs=[FixedRng(0), FixedRng(0), FixedRng(0)],
        timings=timings,
    )
    phy = ch.phy
    frame = Frame(DATA, 0, 1, 1, payload_bytes=2048)
    kernel.schedule(0, lambda _: macs[0].enqueue(frame))
    kernel.run_until(SEC)
    rts_end = DIFS + phy.airtime_ns(Frame("RTS", 0, 1, 1))
    cts_end = rts_end + SIFS + phy.airtime_ns(Frame("CTS", 1, 0, 1))
    data_end = cts_end + SIFS + phy.airtime_ns(frame)
    assert ("rx", 1, 1, data_end) in log
    assert pick(log, "ack", 0)[0][3] == data_end + SIFS + phy.airtime_ns(Frame(ACK, 1, 0, 1))
    # the bystander decoded the RTS and held its virtual carrier through the ACK
    assert ch.radios[2].nav_until == pick(log, "ack", 0)[0][3]


def test_basic_pc_policy_walks_power():
    timings = MacTimings()
    pol = BasicPcPolicy(timings, 10.03, 23.03)
    pol.on_ack(None, [], 0)
    assert pol.power_dbm == pytest.approx(22.03)
    pol.on_timeout(None, [], 0)
    assert pol.power_dbm == pytest.approx(23.03)  # clamped back up


def test_back_to_back_frames_each_wait_difs_and_backoff():
    kernel, ch, macs, log = build_net([(0, 0), (30, 0)], rngs=[FixedRng(2), FixedRng(0)])
    phy = ch.phy
    f1 = Frame(DATA, 0, 1, 1, payload_bytes=64)
    f2 = Frame(DATA, 0, 1, 2, payload_bytes=64)
    kernel.schedule(0, lambda _: (macs[0].enqueue(f1), macs[0].enqueue(f2)))
    kernel.run_until(SEC)
    cycle = DIFS + 2 * SLOT + phy.airtime_ns(f1) + SIFS + phy.airtime_ns(Frame(ACK, 1, 0, 1))
    assert pick(log, "ack", 0) == [("ack", 0, 1, cycle), ("ack", 0, 2, 2 * cycle)]
