"""Metric math: throughput, lifetimes, delay, aggregation, gains."""

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossmac.errors import MixedScenarios, ZeroBaseline
from crossmac.metrics import (NodeStats, RunResult, Summary, aggregate,
                              gain_percent, lifetimes, mean_delay_s,
                              summarize_values, throughput_mbps)


def make_result(scenario_hash="abc", protocol="dcf", received=100, collisions=0,
                delay=0.002, energy=1.0, fnd=None, lnd=None, rcvd=99.0):
    per_node = [NodeStats(node=0, collisions=collisions, drops=0,
                          energy_j=energy, packets_rx=received)]
    return RunResult(packets_sent=received, packets_received=received,
                     throughput_mbps=received * 2048 * 8 / 100 / 1e6,
                     packets_per_s=received / 100,
                     fnd_s=fnd, lnd_s=lnd, lifetime_rcvd_s=rcvd,
                     mean_delay_s=delay, per_node=per_node,
                     metadata={"scenario_hash": scenario_hash, "protocol": protocol,
                               "seed": 1, "sim_time_s": 100.0})


def test_throughput_examples():
    assert throughput_mbps(0, 100.0) == 0.0
    assert throughput_mbps(4000 * 2048 * 8, 100.0) == pytest.approx(0.65536)
    assert throughput_mbps(2048 * 8, 1.0) == pytest.approx(0.016384)
    with pytest.raises(ValueError):
        throughput_mbps(1, 0.0)


def test_mean_delay():
    assert mean_delay_s([]) is None
    assert mean_delay_s([5_000_000]) == pytest.approx(0.005)
    assert mean_delay_s([1_000_000, 2_000_000, 3_000_000]) == pytest.approx(0.002)


def test_lifetimes_no_deaths():
    fnd, lnd, rcvd = lifetimes([], [], [42_000_000_000])
    assert fnd is None and lnd is None
    assert rcvd == 42.0


def test_lifetimes_single_flow_dst_death():
    deaths = [(50_000_000_000, True)]
    viability = [(50_000_000_000, False)]
    fnd, lnd, rcvd = lifetimes(deaths, viability, [49_000_000_000])
    assert fnd == 50.0 and lnd == 50.0 and rcvd == 49.0


def test_fnd_skips_inactive_nodes():
    deaths = [(10_000_000_000, False), (30_000_000_000, True)]
    viability = [(10_000_000_000, True), (30_000_000_000, True)]
    fnd, lnd, _ = lifetimes(deaths, viability, [])
    assert fnd == 30.0
    assert lnd is None


def test_summary_of_two_values():
    s = summarize_values([10.0, 20.0])
    assert s.mean == 15.0
    assert s.stddev == pytest.approx(7.0711, abs=1e-4)


def test_single_run_has_no_ci():
    s = summarize_values([3.5])
    assert s.mean == 3.5 and s.stddev is None and s.ci95_half is None


def test_twenty_run_ci_uses_t_table():
    values = [float(i) for i in range(20)]
    s = summarize_values(values)
    sd = math.sqrt(sum((v - s.mean) ** 2 for v in values) / 19)
    assert s.ci95_half == pytest.approx(2.093 * sd / math.sqrt(20), rel=1e-3)


def test_aggregate_refuses_mixed():
    with pytest.raises(MixedScenarios):
        aggregate([make_result("aaa"), make_result("bbb")])
    with pytest.raises(MixedScenarios):
        aggregate([make_result(protocol="dcf"), make_result(protocol="cla-amac")])


def test_aggregate_skips_absent_metrics():
    summary = aggregate([make_result(fnd=None), make_result(fnd=None)])
    assert "fnd_s" not in summary.metrics
    assert summary.metrics["packets_received"].mean == 100.0
    assert summary.run_count == 2


def test_gain_identity_is_zero():
    s = aggregate([make_result(collisions=7, fnd=40.0, lnd=90.0),
                   make_result(collisions=9, fnd=45.0, lnd=95.0)])
    for metric in s.metrics:
        assert gain_percent(s, s, metric) == 0.0


def test_gain_orientation():
    base = aggregate([make_result(collisions=100)])
    var = aggregate([make_result(collisions=80)])
    assert gain_percent(base, var, "collisions") == pytest.approx(20.0)
    t_base = aggregate([make_result(received=1000)])
    t_var = aggregate([make_result(received=1200)])
    assert gain_percent(t_base, t_var, "throughput_mbps") == pytest.approx(20.0)
    d_base = aggregate([make_result(delay=0.002)])
    d_var = aggregate([make_result(delay=0.003)])
    assert gain_percent(d_base, d_var, "mean_delay_s") == pytest.approx(-50.0)


def test_gain_zero_baseline_raises():
    base = aggregate([make_result(collisions=0)])
    var = aggregate([make_result(collisions=5)])
    with pytest.raises(ZeroBaseline):
        gain_percent(base, var, "collisions")


def test_gain_mixed_hash_raises():
    a = aggregate([make_result("aaa")])
    b = aggregate([make_result("bbb")])
    with pytest.raises(MixedScenarios):
        gain_percent(a, b, "collisions")


@given(st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=2, max_size=40))
@settings(max_examples=150, deadline=None)
def test_summary_matches_reference_stats(values):
    import statistics
    s = summarize_values(values)
    assert s.mean == pytest.approx(statistics.fmean(values), abs=1e-6)
    assert s.stddev == pytest.approx(statistics.stdev(values), abs=1e-6)


def test_run_result_round_trip_dict():
    r = make_result()
    d = r.to_dict()
    assert d["per_node"][0]["collisions"] == 0
    assert d["metadata"]["protocol"] == "dcf"
    r.check()
