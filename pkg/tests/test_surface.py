import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orbigeo.errors import BadSheet, OutOfChart, PoleEvaluation, SchemaError
from orbigeo.surface import (Bump, ConeSurface, distance, flat_cone, football, gauss_curvature,
                             lift_to_cover, load_surface, metric_at, neck_spindle, round_sphere,
                             shipped_surfaces, sine_profile, surface_from_dict)


def test_metric_round_sphere_equator(sphere):
    np.testing.assert_allclose(metric_at(sphere, (0.5 * math.pi, 0.0)), np.eye(2), atol=1e-15)


def test_metric_round_sphere_quarter(sphere):
    np.testing.assert_allclose(metric_at(sphere, (0.25 * math.pi, 0.0)), np.diag([1.0, 0.5]), atol=1e-15)


def test_metric_flat_cone_p2():
    np.testing.assert_allclose(metric_at(flat_cone(2), (2.0, 1.0)), np.eye(2), atol=1e-15)


def test_metric_at_pole_is_rejected(sphere):
    with pytest.raises(PoleEvaluation):
        metric_at(sphere, (0.0, 0.0))


@pytest.mark.parametrize("r", [0.05, 0.2, 0.7, 1.5, 2.9, 3.1])
def test_curvature_round_sphere(sphere, r):
    assert gauss_curvature(sphere, (r, 0.3)) == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("r", [0.1, 1.0, 3.5])
def test_curvature_flat_cone(r):
    assert gauss_curvature(flat_cone(3), (r, 2.0)) == pytest.approx(0.0, abs=1e-10)


def _fd_curvature(s, r, th, h=2.5e-4):
    """Brioschi formula for an orthogonal metric, derivatives by central differences."""
    def EG(rr, tt):
        g = metric_at(s, (rr, tt))
        return g[0, 0], g[1, 1]

    def a_r(rr, tt):
        E, G = EG(rr, tt)
        Gr = (EG(rr + h, tt)[1] - EG(rr - h, tt)[1]) / (2 * h)
        return Gr / math.sqrt(E * G)

    def a_t(rr, tt):
        E, G = EG(rr, tt)
        Et = (EG(rr, tt + h)[0] - EG(rr, tt - h)[0]) / (2 * h)
        return Et / math.sqrt(E * G)

    E, G = EG(r, th)
    d1 = (a_r(r + h, th) - a_r(r - h, th)) / (2 * h)
    d2 = (a_t(r, th + h) - a_t(r, th - h)) / (2 * h)
    return -(d1 + d2) / (2 * math.sqrt(E * G))


@pytest.mark.parametrize("pt", [(1.7, 0.2), (1.95, 1.1), (2.3, 2.5)])
def test_curvature_with_bump_matches_finite_differences(pt):
    s = round_sphere()
    s = ConeSurface(s.coefficients, s.L, 1, 1, Bump(0.08, 1.9, 0.6, 2, 0.3))
    assert gauss_curvature(s, pt) == pytest.approx(_fd_curvature(s, *pt), abs=1e-5)


def test_lift_examples(sphere):
    fc2, fc3 = flat_cone(2), flat_cone(3)
    assert lift_to_cover(fc2.chart("north"), (0.5, math.pi), 0)[1] == pytest.approx(0.5 * math.pi)
    assert lift_to_cover(fc3.chart("north"), (0.5, 0.0), 2)[1] == pytest.approx(4 * math.pi / 3)
    assert lift_to_cover(sphere.chart("north"), (0.1, 0.7), 0)[1] == pytest.approx(0.7)


def test_lift_contracts():
    ch = flat_cone(3).chart("north")
    with pytest.raises(BadSheet):
        lift_to_cover(ch, (0.5, 0.0), 3)
    with pytest.raises(OutOfChart):
        lift_to_cover(ch, (10.0, 0.0), 0)


@settings(max_examples=60, deadline=None)
@given(p=st.integers(1, 7), th=st.floats(0, 2 * math.pi, exclude_max=True), data=st.data())
def test_lift_projects_back(p, th, data):
    ch = flat_cone(p).chart("north")
    sheet = data.draw(st.integers(0, p - 1))
    rr, phi = lift_to_cover(ch, (0.3, th), sheet)
    r2, th2 = ch.project((rr, phi))
    assert r2 == 0.3
    assert abs(((th2 - th) + math.pi) % (2 * math.pi) - math.pi) < 1e-12


def test_distance_examples(sphere):
    assert distance(sphere, (0.5 * math.pi, 0.0), (0.5 * math.pi, 0.5 * math.pi)) == pytest.approx(0.5 * math.pi, abs=1e-6)
    assert distance(sphere, (1.0, 1.0), (1.0, 1.0)) == 0.0
    assert distance(flat_cone(2), (1.0, 0.4), (2.0, 0.4)) == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("p,q", [(3, 1), (2, 1), (3, 2), (5, 2), (7, 3)])
def test_sine_profile_cone_angles(p, q):
    s = ConeSurface(sine_profile(p, q, math.pi), math.pi, p, q)
    assert s.df(0.0) == pytest.approx(1.0 / p, abs=1e-13)
    assert s.df(math.pi) == pytest.approx(-1.0 / q, abs=1e-13)


def test_football_waist_frozen(fb31):
    r, f = fb31.waist()
    assert r == pytest.approx(1.9455307, abs=1e-6)
    assert 2 * math.pi * f == pytest.approx(4.6115118905427, abs=1e-9)


def test_neck_critical_radii_frozen(neck):
    rs = [r for r, _ in neck.critical_radii()]
    np.testing.assert_allclose(rs, [2.1599, 4.5465, 7.7179], atol=1e-4)
    assert [s for _, s in neck.critical_radii()] == [-1.0, 1.0, -1.0]


def test_neck_default_is_positive():
    neck_spindle()
    with pytest.raises(SchemaError):
        neck_spindle(depth=0.6)


def test_schema_rejects_bad_definitions():
    base = {"profile": {"kind": "preset", "name": "football"}, "p": 3, "q": 1, "L": math.pi, "bump": None}
    surface_from_dict(base)
    with pytest.raises(SchemaError):
        surface_from_dict({**base, "colour": "red"})
    with pytest.raises(SchemaError):
        surface_from_dict({**base, "profile": {"kind": "sine", "coefficients": [1.0]}})
    with pytest.raises(SchemaError):
        surface_from_dict({**base, "bump": {"amplitude": 0.1, "center": 0.2, "width": 0.5}})
    with pytest.raises(SchemaError):
        surface_from_dict({**base, "p": 2.5})


def test_shipped_surfaces_roundtrip(tmp_path):
    assert shipped_surfaces() == ["bumped_spindle", "football31", "neck", "round"]
    for name in shipped_surfaces():
        s = load_surface(name)
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(s.to_dict()))
        t = load_surface(str(path))
        assert t.params.tolist() == s.params.tolist()


def test_missing_surface_file():
    with pytest.raises(SchemaError):
        load_surface("/nonexistent/surface.json")


def test_simply_connected_check():
    assert football(3, 1).simply_connected_check(strict=True)
    s = ConeSurface(sine_profile(2, 4, math.pi), math.pi, 2, 4)
    assert not s.simply_connected_check(strict=False)
