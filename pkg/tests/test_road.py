import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from urbanmpc.road import (CentrelineSegment, FitError, OutOfMapError, RoadMap,
                           fit_from_polyline, road_from_dict)


def arc_points(radius, angle, n=200, start=(0.0, 0.0)):
    phi = np.linspace(0.0, angle, n)
    return np.column_stack([start[0] + radius * np.sin(phi),
                            start[1] + radius * (1.0 - np.cos(phi))])


def constant_curvature_road(kappa=0.02, length=100.0):
    return RoadMap([CentrelineSegment(0.0, length, (0.0, kappa, 0.0, 0.0), 0.0, 0.0)])


def test_straight_road_geometry():
    road = RoadMap.straight(100.0)
    s = np.linspace(0, 100, 11)
    assert np.all(road.heading_at(s) == 0.0) and np.all(road.curvature_at(s) == 0.0)


def test_linear_heading_gives_constant_curvature():
    road = constant_curvature_road(0.02)
    assert np.allclose(road.curvature_at(np.linspace(0, 100, 7)), 0.02)


def test_constant_width_boundaries():
    road = RoadMap.straight(50.0, 3.5, -3.5)
    yl, yr = road.boundaries_at(np.array([0.0, 25.0, 50.0]))
    assert np.all(yl == 3.5) and np.all(yr == -3.5)


def test_linear_widening():
    seg = CentrelineSegment(0.0, 40.0, (0.0, 0.0, 0.0, 0.0), 0.0, 0.0,
                            (0.0, 0.0, 0.05, 3.0), (0.0, 0.0, 0.0, -3.0))
    yl, _ = RoadMap([seg]).boundaries_at(np.array([0.0, 20.0, 40.0]))
    assert np.allclose(yl, [3.0, 4.0, 5.0])


def test_lookups_broadcast_over_2d_abscissae():
    road = constant_curvature_road()
    s = np.linspace(0, 90, 12).reshape(3, 4)
    assert road.heading_at(s).shape == (3, 4)
    yl, yr = road.boundaries_at(s)
    assert yl.shape == yr.shape == (3, 4)


def test_out_of_map():
    with pytest.raises(OutOfMapError):
        RoadMap.straight(10.0).heading_at(10.5)


def test_segments_must_join():
    a = CentrelineSegment(0.0, 10.0, (0.0, 0.1, 0.0, 0.0), 0.0, 0.0)
    b = CentrelineSegment(10.0, 20.0, (0.0, 0.0, 0.0, 0.0), 0.0, 0.0)
    with pytest.raises(ValueError):
        RoadMap([a, b])


def test_centreline_pose_on_axis():
    road = constant_curvature_road(0.01)
    X, Y, psi = road.curvilinear_to_global(30.0, 0.0, 0.0)
    assert psi == pytest.approx(0.3)
    # centreline of constant curvature is a circle arc of radius 100 from the origin
    assert X == pytest.approx(100 * math.sin(0.3), abs=1e-9)
    assert Y == pytest.approx(100 * (1 - math.cos(0.3)), abs=1e-9)


def test_straight_road_mapping():
    assert RoadMap.straight(50.0).curvilinear_to_global(10.0, 2.0, 0.0) == (10.0, 2.0, 0.0)


def test_curvature_is_derivative_of_heading():
    seg = CentrelineSegment(0.0, 60.0, (0.1, 0.01, -2e-4, 1e-6), 0.0, 0.0)
    road = RoadMap([seg])
    s = np.linspace(1, 59, 30)
    eps = 1e-5
    fd = (road.heading_at(s + eps) - road.heading_at(s - eps)) / (2 * eps)
    assert np.allclose(road.curvature_at(s), fd, atol=1e-6)


S_CURVE = RoadMap([CentrelineSegment(0.0, 60.0, (0.0, 0.02, -3e-4, 0.0), 5.0, -2.0,
                                     (0.0, 0.0, 0.0, 4.0), (0.0, 0.0, 0.0, -4.0))])


@given(s=st.floats(5.0, 55.0), y=st.floats(-3.5, 3.5), xi=st.floats(-1.0, 1.0))
def test_curvilinear_round_trip(s, y, xi):
    X, Y, psi = S_CURVE.curvilinear_to_global(s, y, xi)
    s2, y2, xi2 = S_CURVE.global_to_curvilinear(X, Y, psi, s_guess=s + 1.0)
    assert s2 == pytest.approx(s, abs=1e-7)
    assert y2 == pytest.approx(y, abs=1e-7)
    assert xi2 == pytest.approx(xi, abs=1e-9)


def test_round_trip_thousand_poses():
    rng = np.random.default_rng(0)
    s = rng.uniform(5, 55, 1000)
    y = rng.uniform(-3.5, 3.5, 1000)
    xi = rng.uniform(-1, 1, 1000)
    X, Y, psi = S_CURVE.curvilinear_to_global(s, y, xi)
    back = np.array([S_CURVE.global_to_curvilinear(a, b, c, s_guess=g)
                     for a, b, c, g in zip(X, Y, psi, s)])
    assert np.abs(back[:, 0] - s).max() < 1e-7
    assert np.abs(back[:, 1] - y).max() < 1e-7
    X2, Y2, _ = S_CURVE.curvilinear_to_global(back[:, 0], back[:, 1], back[:, 2])
    assert np.hypot(X2 - X, Y2 - Y).max() < 1e-7


def test_fit_collinear_points():
    pts = np.column_stack([np.linspace(0, 20, 21), np.zeros(21)])
    road = fit_from_polyline(pts, 3.0, 3.0)
    assert len(road.segments) == 1
    assert np.allclose(road.segments[0].theta, 0.0, atol=1e-12)


def test_fit_arc_radius_fifty():
    road = fit_from_polyline(arc_points(50.0, 1.0), 3.5, 3.5)
    s = np.linspace(road.s_min + 1, road.s_max - 1, 40)
    assert np.allclose(road.curvature_at(s), 0.02, atol=1e-3)


def test_fit_quarter_circle_radius_thirty():
    road = fit_from_polyline(arc_points(30.0, math.pi / 2, n=300), 3.5, 3.5)
    s = np.linspace(road.s_min + 2, road.s_max - 2, 50)
    assert np.allclose(road.curvature_at(s), 1 / 30, rtol=0.05)
    assert road.fit_residual_width < 0.05


def test_fit_s_curve_changes_sign():
    # two arcs of radius 40 m joined tangentially: curvature +1/40 then -1/40
    ds = 0.2
    s = np.arange(0.0, 64.0 + ds, ds)
    heading = np.where(s < 32.0, s / 40.0, 0.8 - (s - 32.0) / 40.0)
    pts = np.column_stack([np.concatenate([[0.0], np.cumsum(np.cos(heading[:-1]) * ds)]),
                           np.concatenate([[0.0], np.cumsum(np.sin(heading[:-1]) * ds)])])
    road = fit_from_polyline(pts, 3.5, 3.5, segment_length=16.0, overlap=2.0)
    k = road.curvature_at(np.linspace(road.s_min + 3, road.s_max - 3, 60))
    assert k[0] > 0 and k[-1] < 0
    assert np.count_nonzero(np.diff(np.sign(k))) <= 3


def test_fit_follows_polyline_order():
    pts = arc_points(50.0, 1.0)
    road = fit_from_polyline(pts, 3.5, 3.5)
    s = [road.global_to_curvilinear(x, y, 0.0)[0] for x, y in pts[5:-5:10]]
    assert np.all(np.diff(s) > 0)


def test_fit_rejects_degenerate_input():
    with pytest.raises(FitError):
        fit_from_polyline([[0, 0], [1, 0]], 3.0, 3.0)


def test_road_document_layouts():
    road = road_from_dict({"straight": {"length": 80.0, "left": 5.0, "right": -2.0}})
    assert road.boundaries_at(10.0) == (5.0, -2.0)
    again = road_from_dict(road.to_dict())
    assert again.s_max == 80.0
    with pytest.raises(ValueError):
        road_from_dict({"circle": 1})
