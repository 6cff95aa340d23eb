"""Event loop ordering, cancellation, and seeded stream derivation."""

import pytest

from crossmac.errors import HandlerPanic, PastTime
from crossmac.kernel import MS, SEC, US, Kernel, derive_stream, s_from_ticks, ticks_from_s


def test_time_helpers_round_trip():
    assert ticks_from_s(1.5) == 1_500_000_000
    assert s_from_ticks(SEC) == 1.0
    assert US == 1_000 and MS == 1_000_000


def test_events_fire_in_time_then_insertion_order():
    k = Kernel()
    fired = []
    k.schedule(20, fired.append, "b")
    k.schedule(10, fired.append, "a")
    k.schedule(20, fired.append, "c")  # same tick as "b", scheduled later
    k.run_until(100)
    assert fired == ["a", "b", "c"]
    assert k.now == 100


def test_run_until_is_inclusive():
    k = Kernel()
    fired = []
    k.schedule(50, fired.append, "edge")
    k.run_until(50)
    assert fired == ["edge"]


def test_past_scheduling_rejected():
    k = Kernel()
    k.run_until(100)
    with pytest.raises(PastTime):
        k.schedule(99, lambda _: None)


def test_cancel_is_lazy_but_effective():
    k = Kernel()
    fired = []
    eid = k.schedule(10, fired.append, "x")
    assert k.cancel(eid) is True
    assert k.cancel(eid) is False  # second cancel is a no-op
    k.run_until(20)
    assert fired == []
    assert k.pending() == 0


def test_handler_exception_becomes_panic_with_context():
    k = Kernel()

    def boom(_):
        raise ValueError("broken")

    k.schedule(30, boom, None, target="node-7", kind="timer")
    with pytest.raises(HandlerPanic) as exc:
        k.run_until(100)
    assert exc.value.tick == 30
    assert exc.value.target == "node-7"


def test_handlers_can_schedule_followups():
    k = Kernel()
    fired = []

    def chain(depth):
        fired.append(k.now)
        if depth:
            k.schedule(k.now + 5, chain, depth - 1)

    k.schedule(0, chain, 3)
    k.run_until(SEC)
    assert fired == [0, 5, 10, 15]


def test_trace_records_fired_events(tmp_path):
    path = tmp_path / "events.log"
    k = Kernel()
    with open(path, "w") as fh:
        k.trace = fh
        k.schedule(7, lambda _: None, None, target="a", kind="k1")
        k.run_until(10)
        k.trace = None
    line = path.read_text().strip().split("\t")
    assert line[0] == "7" and line[2] == "a" and line[3] == "k1"


class TestStreamDerivation:
    def test_same_identity_same_draws(self):
        a = derive_stream(42, 3, "backoff").integers(0, 1024, 8)
        b = derive_stream(42, 3, "backoff").integers(0, 1024, 8)
        assert list(a) == list(b)

    def test_purposes_are_independent(self):
        a = derive_stream(42, 3, "backoff").integers(0, 1 << 30, 8)
        b = derive_stream(42, 3, "traffic").integers(0, 1 << 30, 8)
        assert list(a) != list(b)

    def test_nodes_are_independent(self):
        a = derive_stream(42, 3, "backoff").integers(0, 1 << 30, 8)
        b = derive_stream(42, 4, "backoff").integers(0, 1 << 30, 8)
        assert list(a) != list(b)

    def test_derivation_order_does_not_matter(self):
        # deriving (0, traffic) before or after (5, backoff) leaves both unchanged
        first = derive_stream(9, 5, "backoff").integers(0, 1 << 30, 4)
        _ = derive_stream(9, 0, "traffic")
        second = derive_stream(9, 5, "backoff").integers(0, 1 << 30, 4)
        assert list(first) == list(second)

    def test_unknown_purpose_rejected(self):
        with pytest.raises(KeyError):
            derive_stream(1, 0, "lottery")
