import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glclab.track import (EndOfPath, FeasibilityError, MalformedTrackError, TrackParseError, chicane,
                          classify_segments, desired_waypoint, figure_eight, frenet_coordinate,
                          generate_synthetic_track, load_track, oval, parse_generator_spec,
                          path_from_points, random_circuit, waypoint_after, wrap_angle)


def straight(n=11):
    return path_from_points(np.column_stack([np.arange(n, dtype=float), np.zeros(n)]), closed=False)


def circle(r=50.0, step_deg=1.0):
    a = np.deg2rad(np.arange(0.0, 360.0, step_deg))
    return path_from_points(np.column_stack([r * np.cos(a), r * np.sin(a)]), closed=True, spacing=None)


def brute_projection(path, p, samples=20001):
    """Dense sampling of every segment; independent of the vectorised projector."""
    best = None
    wp = path.waypoints
    n = len(wp) if path.closed else len(wp) - 1
    t = np.linspace(0.0, 1.0, samples)
    s0 = 0.0
    for i in range(n):
        a, b = wp[i], wp[(i + 1) % len(wp)]
        seg = np.linalg.norm(b - a)
        q = a + t[:, None] * (b - a)
        dist = np.hypot(*(p - q).T)
        k = int(np.argmin(dist))
        if best is None or dist[k] < best[0] - 1e-12:
            cross = (b - a)[0] * (p - q[k])[1] - (b - a)[1] * (p - q[k])[0]
            best = (dist[k], s0 + t[k] * seg, math.copysign(dist[k], cross))
        s0 += seg
    return best[1], best[2]


def test_csv_collinear(tmp_path):
    f = tmp_path / "line.csv"
    f.write_text("x,y\n0,0\n1,0\n2,0\n")
    p = load_track(f, closed=False)
    np.testing.assert_allclose(p.cumulative_distance, [0, 1, 2])
    np.testing.assert_allclose(p.headings, 0.0, atol=1e-12)
    np.testing.assert_allclose(p.curvatures, 0.0, atol=1e-12)


def test_csv_errors(tmp_path):
    f = tmp_path / "one.csv"
    f.write_text("x,y\n0,0\n")
    with pytest.raises(MalformedTrackError):
        load_track(f)
    g = tmp_path / "nan.csv"
    g.write_text("x,y\n0,0\nnan,1\n2,0\n")
    with pytest.raises(TrackParseError):
        load_track(g)
    h = tmp_path / "bad.csv"
    h.write_text("a,b\n0,0\n1,1\n")
    with pytest.raises(TrackParseError):
        load_track(h)


def test_circle_curvature():
    p = circle(50.0)
    np.testing.assert_allclose(p.curvatures, 0.02, atol=1e-3)


@pytest.mark.parametrize("r", [10.0, 25.0, 60.0])
def test_resampled_circle_within_five_percent(r):
    a = np.linspace(0, 2 * np.pi, 2000, endpoint=False)
    p = path_from_points(np.column_stack([r * np.cos(a), r * np.sin(a)]), closed=True, spacing=1.0)
    assert np.all(np.abs(p.curvatures - 1 / r) < 0.05 / r)


def test_generator_spec_oval():
    p = load_track("oval(r=30, straight=200)")
    assert p.closed
    assert np.max(np.abs(p.curvatures)) == pytest.approx(1 / 30, rel=0.02)
    assert parse_generator_spec("oval:r=30,straight=200") == ("oval", {"r": 30.0, "straight": 200.0})
    assert parse_generator_spec("random_circuit:seed=1")[1] == {"seed": 1}
    with pytest.raises(TrackParseError):
        parse_generator_spec("hexagon:r=3")


def test_oval_turn_fraction():
    r, L = 30.0, 200.0
    p = oval(r, L)
    labels = classify_segments(p)
    want = 2 * math.pi * r / (2 * math.pi * r + 2 * L)
    assert np.mean(labels == "Turn") == pytest.approx(want, abs=0.01)


def test_oval_classes_by_construction():
    p = oval(30.0, 200.0)
    labels = classify_segments(p)
    on_straight = np.abs(p.waypoints[:, 1]) < 1e-6  # lower straight, away from its ends
    inner = on_straight & (p.waypoints[:, 0] > 2) & (p.waypoints[:, 0] < 198)
    assert np.all(labels[inner] == "Straight")
    beyond = (p.waypoints[:, 0] > 201) | (p.waypoints[:, 0] < -1)
    assert np.all(labels[beyond] == "Turn")


def test_figure_eight_two_sign_changes():
    p = figure_eight(40.0)
    k = p.curvatures[np.abs(p.curvatures) > 1e-6]
    sign = np.sign(k)
    changes = np.sum(sign != np.roll(sign, 1))
    assert changes == 2


def test_random_circuit_deterministic_and_bounded():
    a, b = random_circuit(seed=7), random_circuit(seed=7)
    np.testing.assert_array_equal(a.waypoints, b.waypoints)
    assert not np.array_equal(a.waypoints, random_circuit(seed=8).waypoints)
    assert np.max(np.abs(a.curvatures)) < 0.05 * 1.1


def test_feasibility_rejected():
    with pytest.raises(FeasibilityError):
        oval(r=5.0)
    with pytest.raises(FeasibilityError):
        generate_synthetic_track("random_circuit", kappa_max=0.5)
    with pytest.raises(ValueError):
        generate_synthetic_track("zigzag")


def test_chicane_curvature_signs():
    p = chicane()
    assert p.curvatures.min() < -0.03 and p.curvatures.max() > 0.03


def test_frenet_straight_signs():
    p = straight()
    assert frenet_coordinate(p, (5, 2)) == pytest.approx((5, 2))
    assert frenet_coordinate(p, (5, -2)) == pytest.approx((5, -2))


def test_frenet_inside_ccw_circle_is_left():
    # driving counter-clockwise, the centre lies to the left: left-positive gives d = +1
    p = circle(50.0)
    s, d = frenet_coordinate(p, (0.0, 49.0))
    s_ref, d_ref = brute_projection(p, np.array([0.0, 49.0]))
    assert d == pytest.approx(1.0, abs=0.01)
    assert d == pytest.approx(d_ref, abs=1e-6)
    assert s == pytest.approx(s_ref, abs=1e-3)
    assert s == pytest.approx(50 * math.pi / 2, rel=1e-3)


@settings(max_examples=40, deadline=None)
@given(st.floats(-60, 60), st.floats(-60, 60))
def test_frenet_matches_brute_force(x, y):
    p = circle(30.0, step_deg=10.0)
    s, d = frenet_coordinate(p, (x, y))
    s_ref, d_ref = brute_projection(p, np.array([x, y]))
    assert abs(d) == pytest.approx(abs(d_ref), abs=1e-5)
    if abs(d_ref) > 1e-3 and math.hypot(x, y) > 1.0:  # centre is equidistant to every segment
        assert d == pytest.approx(d_ref, abs=1e-5)


def test_waypoint_round_trip():
    p = oval()
    for i in range(0, len(p), 7):
        s, d = frenet_coordinate(p, p.waypoints[i])
        assert abs(d) < 1e-9
        assert abs(p.ds(s, p.cumulative_distance[i])) <= p.spacing


def test_s_monotone_along_path():
    p = oval()
    prev = None
    for s in np.arange(0.0, p.total_length, 0.37):
        q = p.point_at(s) + 0.3 * np.array([-math.sin(p.heading_at(s)), math.cos(p.heading_at(s))])
        got = frenet_coordinate(p, q, s_hint=s).s
        if prev is not None:
            assert p.ds(got, prev) >= -1e-9
        prev = got


def test_algorithm1_examples():
    p = path_from_points(np.column_stack([np.arange(5.0), np.zeros(5)]), closed=False, spacing=None)
    np.testing.assert_allclose(p.cumulative_distance, [0, 1, 2, 3, 4])
    assert waypoint_after(p, 2.5).index == 3
    assert waypoint_after(p, 0.0).index == 1
    assert waypoint_after(p, 2.0).index == 3
    with pytest.raises(EndOfPath):
        waypoint_after(p, 4.0)


def test_algorithm1_wraps_on_closed_path():
    p = oval()
    assert waypoint_after(p, p.total_length - 0.1).index == 0


def test_algorithm1_against_linear_scan():
    p = oval()
    rng = np.random.default_rng(3)
    for s in rng.uniform(0, p.total_length, 1000):
        want = next((i for i, c in enumerate(p.cumulative_distance) if c > s), 0)
        assert waypoint_after(p, s).index == want


def test_desired_waypoint_returns_stored_heading():
    p = oval()
    wp = desired_waypoint(p, np.array([10.2, 0.3, 0.0, 10.0]))
    assert wp.index == 11
    assert wp.heading == p.headings[11]
    np.testing.assert_array_equal(wp.position, p.waypoints[11])


def test_classification_threshold_strict():
    p = straight()
    p.curvatures[:] = [0.0, 0.03, 0.0299, -0.03, 0.1, 0, 0, 0, 0, 0, 0]
    labels = classify_segments(p)
    assert list(labels[:5]) == ["Straight", "Turn", "Straight", "Turn", "Turn"]


@given(st.lists(st.floats(-0.2, 0.2), min_size=2, max_size=50))
def test_classes_partition(kappa):
    n = len(kappa)
    p = path_from_points(np.column_stack([np.arange(n, dtype=float), np.zeros(n)]), closed=False,
                         spacing=None)
    p.curvatures[:] = kappa
    labels = classify_segments(p)
    assert set(labels) <= {"Straight", "Turn"}
    assert np.all((labels == "Straight") == (np.abs(p.curvatures) < 0.03))


def test_path_invariants():
    for p in (oval(), figure_eight(), chicane(), random_circuit(seed=2)):
        assert p.cumulative_distance[0] == 0
        assert np.all(np.diff(p.cumulative_distance) > 0)
        assert len(p.headings) == len(p.curvatures) == len(p.velocities) == len(p.waypoints)


def test_wrap_angle():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
