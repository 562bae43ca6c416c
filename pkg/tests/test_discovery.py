import math

import pytest
from hypothesis import given, settings, strategies as st

from stairnet.discovery import (FALLBACK, OPTIMAL, DiscoveryError, StudentSpec, discover,
                                estimate_latency, nearest_point, snapping_points)
from stairnet.nn import GroupSpec, NetworkSpec
from stairnet.profiler import FakeTimer, profile_network


def spec_of(teacher_widths, widths=None):
    groups = tuple(GroupSpec(1, w, 1 if i == 0 else 2) for i, w in enumerate(teacher_widths))
    return NetworkSpec((3, 8, 8), 10, 16, groups, widths or teacher_widths)


def test_nearest_point_examples():
    assert nearest_point(100, (64, 128)) == 128
    assert nearest_point(64, (64, 128)) == 64
    assert nearest_point(96, (64, 128)) == 128
    assert nearest_point(5, ()) == 5
    with pytest.raises(DiscoveryError):
        nearest_point(0, (1, 2))


def test_discover_fixture():
    teacher = spec_of((128, 64, 16))
    fisher = teacher.with_widths((100, 30, 7))
    student = discover(teacher, fisher, {0: (64, 128), 1: (), 2: (8, 16)})
    assert student.spec.widths == (128, 30, 8)
    assert [c.origin for c in student.provenance] == [OPTIMAL, FALLBACK, OPTIMAL]
    assert [c.fisher_width for c in student.provenance] == [100, 30, 7]
    assert student.spec.groups == teacher.groups


def test_discover_fixed_point_and_fallback():
    teacher = spec_of((16, 32, 64))
    assert discover(teacher, teacher, [(16,), (32,), (64,)]).spec == teacher
    fisher = teacher.with_widths((3, 9, 27))
    assert discover(teacher, fisher, {}).spec == fisher
    assert discover(teacher, fisher, [(), (), ()]).spec == fisher


def test_discover_errors():
    teacher = spec_of((16, 32, 64))
    with pytest.raises(DiscoveryError):
        discover(teacher, spec_of((16, 32)), {})
    with pytest.raises(DiscoveryError):
        discover(teacher, teacher, {0: (8,), 5: (8,)})
    with pytest.raises(DiscoveryError):
        discover(teacher, teacher, {0: (8,)})
    with pytest.raises(DiscoveryError):
        discover(spec_of((16, 32, 64)), spec_of((16, 32, 128), (16, 32, 100)), {})


@st.composite
def fixtures(draw):
    teacher_widths = draw(st.lists(st.integers(1, 64), min_size=1, max_size=4))
    fisher = [draw(st.integers(1, w)) for w in teacher_widths]
    points = [sorted(draw(st.sets(st.integers(1, w), max_size=6))) for w in teacher_widths]
    return spec_of(tuple(teacher_widths)), tuple(fisher), points


@settings(max_examples=100, deadline=None)
@given(fixtures())
def test_discover_properties(fx):
    teacher, fisher_widths, points = fx
    student = discover(teacher, teacher.with_widths(fisher_widths), points)
    for layer, choice in enumerate(student.provenance):
        assert choice.chosen_width in set(points[layer]) | {fisher_widths[layer]}
        assert 1 <= choice.chosen_width <= teacher.teacher_widths[layer]
        assert (choice.origin == FALLBACK) == (not points[layer])
        if points[layer]:
            d = abs(choice.chosen_width - fisher_widths[layer])
            assert d == min(abs(p - fisher_widths[layer]) for p in points[layer])
    again = discover(teacher, student.spec, points)
    assert again.spec == student.spec


def test_student_spec_round_trip(tmp_path):
    teacher = spec_of((128, 64, 16))
    student = discover(teacher, teacher.with_widths((100, 30, 7)), {0: (64, 128), 1: (), 2: (8, 16)})
    student.save(tmp_path / "s.json")
    assert StudentSpec.load(tmp_path / "s.json") == student


def test_snapping_points_close_top_tread():
    teacher = spec_of((16, 32, 64))
    got = snapping_points({0: (), 1: (16,), 2: (16, 32, 48)}, teacher)
    assert got == {0: (), 1: (16, 32), 2: (16, 32, 48, 64)}


def test_estimate_latency():
    teacher = spec_of((16, 32, 24))
    prof = profile_network(teacher, FakeTimer.parse("ceil:8:100").harness(warmup=0, repeats=1))
    assert estimate_latency(teacher, prof) == prof.network_ns
    at = teacher.with_widths((3, 17, 24))
    assert estimate_latency(at, prof) == 100 + 100 + 300 + 300
    # snapping stays on the same tread, so the estimate moves by less than a step
    fisher = teacher.with_widths((5, 23, 15))
    student = discover(teacher, fisher, snapping_points(prof.point_sets(), teacher))
    assert student.spec.widths == (8, 24, 16)
    step = min(h for op in prof.points.values() for h in op.step_heights)
    assert abs(estimate_latency(student.spec, prof) - estimate_latency(fisher, prof)) < step
    assert student.spec.param_count() > fisher.param_count()
    with pytest.raises(DiscoveryError):
        estimate_latency(teacher.with_widths((3, 40, 4)), prof)
    prof.profiles.clear()
    with pytest.raises(DiscoveryError):
        estimate_latency(teacher, prof)
