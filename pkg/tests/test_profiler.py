import csv
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from stairnet.nn import GroupSpec, NetworkSpec
from stairnet.profiler import (FakeTimer, HarnessConfig, LatencyProfile, LayerConfig, Sample,
                               bench_layer, detect_steps, profile_network, prunable_layers,
                               read_points_csv, read_profiles_csv, step_positions, sweep,
                               time_workload, write_points_csv, write_profiles_csv)


def profile_of(latencies, start=1):
    return LatencyProfile(0, (1, 1, 1), 1, [Sample(start + i, float(t), 0.0)
                                            for i, t in enumerate(latencies)])


def oracle_steps(t, sigma=3.0):
    """Hand-rolled mean/std with explicit loops."""
    d = [t[i + 1] - t[i] for i in range(len(t) - 1)]
    mean = sum(d) / len(d)
    std = math.sqrt(sum((x - mean) ** 2 for x in d) / len(d))
    return [i for i, x in enumerate(d) if x > mean + sigma * std]


def toy_spec(widths=(16, 32, 64), hw=8):
    groups = tuple(GroupSpec(1, w, 1 if i == 0 else 2) for i, w in enumerate(widths))
    return NetworkSpec((3, hw, hw), 10, 16, groups, widths)


# -- harness -----------------------------------------------------------------

class SequenceClock:
    """Each timed run takes the next duration from ``durations``."""

    def __init__(self, durations):
        self.durations = list(durations)
        self.now = 0
        self.calls = 0

    def __call__(self):
        self.calls += 1
        if self.calls % 2 == 0:  # end of a timed run
            self.now += self.durations[self.calls // 2 - 1]
        return self.now


def test_fake_clock_median_is_sequence_median():
    durations = [5000, 1000, 9000, 3000, 7000, 2000, 8000]
    h = HarnessConfig(warmup=3, repeats=len(durations), clock=SequenceClock(durations),
                      clock_resolution_ns=1.0)
    t = time_workload(lambda: None, h)
    assert t.median_ns == sorted(durations)[3] == 5000
    assert t.iqr_ns == np.percentile(durations, 75) - np.percentile(durations, 25)
    assert not t.flagged


def test_coarse_clock_is_flagged():
    h = HarnessConfig(warmup=0, repeats=3, clock=SequenceClock([100, 100, 100]),
                      clock_resolution_ns=50.0)
    assert time_workload(lambda: None, h).flagged


def test_bench_layer_repeatable_on_host():
    cfg = LayerConfig(16, 32, (16, 16))
    h = HarnessConfig(warmup=10, repeats=30)
    a, b = bench_layer(cfg, h), bench_layer(cfg, h)
    spread = max(a.iqr_ns, b.iqr_ns, 0.02 * a.median_ns)
    assert abs(a.median_ns - b.median_ns) <= 3 * spread


def test_bench_layer_sanity_trend():
    h = HarnessConfig(warmup=5, repeats=15)
    small = bench_layer(LayerConfig(16, 1, (16, 16)), h).median_ns
    big = bench_layer(LayerConfig(16, 64, (16, 16)), h).median_ns
    assert big >= 0.5 * small > 0
    with pytest.raises(ValueError):
        bench_layer(LayerConfig(16, 0, (16, 16)), h)


# -- sweep -------------------------------------------------------------------

def test_sweep_cardinality_and_fake_staircase():
    spec = toy_spec()
    h = FakeTimer.parse("ceil:8:100").harness(warmup=2, repeats=5)
    for layer, width in enumerate(spec.widths):
        prof = sweep(spec, layer, h)
        assert prof.channels == list(range(1, width + 1))
        np.testing.assert_array_equal(prof.latencies, [math.ceil(c / 8) * 100 for c in prof.channels])
    with pytest.raises(KeyError):
        sweep(spec, 7, h)


def test_interleaved_passes_visit_widths_round_robin():
    spec = toy_spec()
    order = []

    def workload(cfg, rng, threads=1, backend=None):
        return lambda: order.append(cfg.out_ch)

    h = HarnessConfig(warmup=1, repeats=2, passes=3, layer_workload=workload)
    prof = sweep(spec, 0, h)
    width = spec.widths[0]
    warm = list(range(1, width + 1))
    one_pass = [c for c in warm for _ in range(2)]
    assert order == warm + one_pass * 3
    assert len(prof.samples) == width


def test_passes_pool_samples():
    # the fake timer charges a fixed cost per run, so pooling changes nothing
    spec = toy_spec()
    one = sweep(spec, 1, FakeTimer.parse("ceil:8:100").harness(warmup=0, repeats=3))
    many = sweep(spec, 1, FakeTimer.parse("ceil:8:100").harness(warmup=0, repeats=3, passes=4))
    np.testing.assert_array_equal(one.latencies, many.latencies)


def test_sweep_ignores_pruned_widths():
    spec = toy_spec()
    h = FakeTimer.parse("linear:10").harness(warmup=0, repeats=1)
    assert len(sweep(spec.with_widths((3, 4, 5)), 2, h).samples) == 64


def test_sweep_order_independent():
    spec = toy_spec()
    h = FakeTimer.parse("ceil:8").harness(warmup=1, repeats=3)
    first = [sweep(spec, i, h).latencies for i in (0, 1, 2)]
    second = [sweep(spec, i, h).latencies for i in (2, 1, 0)][::-1]
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a, b)


def test_fake_timer_parse():
    assert FakeTimer.parse("ceil:8").cost(LayerConfig(1, 9, (1, 1))) == 2000
    assert FakeTimer.parse("ceil:4:10").cost(LayerConfig(1, 9, (1, 1))) == 30
    assert FakeTimer.parse("linear:5").cost(LayerConfig(1, 9, (1, 1))) == 45
    assert FakeTimer.parse("const:7").cost(LayerConfig(1, 9, (1, 1))) == 7
    for bad in ("ceil", "ceil:x", "square:3", "linear:1:2"):
        with pytest.raises(ValueError):
            FakeTimer.parse(bad)


# -- step detection ------------------------------------------------------------

def test_detect_steps_examples():
    assert detect_steps(profile_of([100.0] * 20)).points == ()
    assert detect_steps(profile_of([10.0 * c for c in range(1, 21)])).points == ()
    two = [100.0] * 10 + [200.0] * 10
    op = detect_steps(profile_of(two))
    assert op.points == (10,) and op.step_heights == (100.0,)
    d = np.diff(two)
    assert d.mean() == pytest.approx(5.263, abs=1e-3)
    assert d.std() == pytest.approx(22.33, abs=1e-2)


def test_detect_steps_needs_three_samples():
    with pytest.raises(ValueError):
        detect_steps(profile_of([1.0, 2.0]))


def test_staircase_detectability_boundary():
    # a perfect staircase of period P over W widths is detected iff the step
    # fraction p satisfies 1 > p + 3 sqrt(p (1 - p)), i.e. p < 0.1
    for period, width, found in [(8, 32, True), (16, 256, True), (8, 64, False), (4, 16, False)]:
        t = [math.ceil(c / period) for c in range(1, width + 1)]
        expect = list(range(period, width, period)) if found else []
        assert list(detect_steps(profile_of(t)).points) == expect
        assert [i + 1 for i in oracle_steps(t)] == expect


latency_lists = st.lists(st.floats(1.0, 1e6, allow_nan=False), min_size=3, max_size=80)


@settings(max_examples=150, deadline=None)
@given(latency_lists)
def test_detect_matches_loop_oracle(t):
    t = [round(x) for x in t]  # integer latencies keep the comparison exact
    assert step_positions(t) == oracle_steps(t)


@settings(max_examples=150, deadline=None)
@given(latency_lists, st.floats(-1e5, 1e5), st.sampled_from([0.5, 2.0, 3.0, 1000.0]))
def test_detect_shift_and_scale_invariant(t, c, k):
    t = np.round(np.array(t))
    d = np.diff(t)
    base = step_positions(t)
    # keep clear of ties at the threshold, which rounding could flip
    margin = np.abs(d - (d.mean() + 3 * d.std()))
    assume(d.size == 0 or margin.min() > 1e-6 * max(1.0, np.abs(d).max()))
    assert step_positions(t + c) == base
    assert step_positions(t * k) == base
    op = detect_steps(profile_of(t))
    assert set(op.points) <= set(range(1, len(t) + 1))
    assert list(op.points) == sorted(set(op.points))


# -- whole network -------------------------------------------------------------

def test_profile_network_fake_timer_matches_oracle():
    spec = toy_spec((16, 32, 24))
    fake = FakeTimer.parse("ceil:8:100")
    prof = profile_network(spec.with_widths((2, 3, 4)), fake.harness(warmup=1, repeats=3))
    for layer, width in enumerate(spec.widths):
        t = [math.ceil(c / 8) * 100 for c in range(1, width + 1)]
        assert list(prof.points[layer].points) == [i + 1 for i in oracle_steps(t)]
    assert prof.points[1].points == (8, 16, 24)
    # network = fixed cost + prunable layers at teacher width
    assert prof.network_ns == 100 + 200 + 400 + 300
    assert prof.fixed_ns == 100


def test_profile_network_without_prunable_layers():
    spec = NetworkSpec((3, 8, 8), 10, 4, (), ())
    prof = profile_network(spec, HarnessConfig(warmup=1, repeats=3))
    assert prof.profiles == {} and prof.points == {}
    assert prof.network_ns > 0


def test_width_one_layer_has_no_points():
    spec = toy_spec((1, 32, 64))
    prof = profile_network(spec, FakeTimer.parse("ceil:8").harness(warmup=0, repeats=1))
    assert len(prof.profiles[0].samples) == 1
    assert prof.points[0].points == ()


def test_prunable_layer_geometry():
    layers = prunable_layers(toy_spec(hw=16))
    assert layers[0] == LayerConfig(16, 16, (16, 16), 3, 1)
    assert layers[1] == LayerConfig(16, 32, (16, 16), 3, 2)
    assert layers[2] == LayerConfig(32, 64, (8, 8), 3, 2)


def test_profile_csv_round_trip(tmp_path):
    spec = toy_spec()
    prof = profile_network(spec, FakeTimer.parse("ceil:8:100").harness(warmup=0, repeats=2))
    order = sorted(prof.profiles)
    write_profiles_csv(tmp_path / "p.csv", [prof.profiles[i] for i in order])
    write_points_csv(tmp_path / "o.csv", [prof.points[i] for i in order])
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows[0] == ["layer_id", "channels", "median_ns", "iqr_ns", "flagged"]
    assert rows[1] == ["0", "1", "100.0", "0.0", "0"]
    assert len(rows) == 1 + sum(spec.widths)
    assert list(csv.reader(open(tmp_path / "o.csv")))[0] == ["layer_id", "channel_count"]
    back = read_profiles_csv(tmp_path / "p.csv", spec)
    np.testing.assert_array_equal(back[2].latencies, prof.profiles[2].latencies)
    assert read_points_csv(tmp_path / "o.csv") == {0: (8,), 1: (8, 16, 24)}


def test_profile_rejects_gaps():
    with pytest.raises(ValueError):
        LatencyProfile(0, (1, 1, 1), 1, [Sample(1, 1.0, 0), Sample(3, 1.0, 0)])
