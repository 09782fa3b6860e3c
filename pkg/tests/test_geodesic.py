import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orbigeo.errors import NoConvergence, NotSymmetric, PreconditionError
from orbigeo.geodesic import (TOL_CLOSE, LoopCurve, check_return_condition, clairaut_invariant,
                              closed_from_parallel, closure_defect, find_closed_geodesic,
                              first_return, has_conjugate_pair, jacobi_index, ode_residual, shoot,
                              _closure_residual)
from orbigeo.surface import flat_cone


def test_equator_closes_without_events(sphere):
    path = shoot(sphere, (0.5 * math.pi, 0.0), 0.5 * math.pi, 2 * math.pi)
    r, th, b = path.end_state()
    assert abs(r - 0.5 * math.pi) + abs(((th + math.pi) % (2 * math.pi)) - math.pi) < 1e-8
    assert path.events == []


def test_apex_ray_odd_order_passes_through():
    path = shoot(flat_cone(3), (1.0, 0.4), math.pi, 2.0)
    (ev,) = path.events
    assert ev.kind == "PassThrough"
    d = (ev.theta_out - ev.theta_in - math.pi) % (2 * math.pi)
    assert min(d, 2 * math.pi - d) < 1e-9


def test_apex_ray_even_order_reflects_and_retraces():
    path = shoot(flat_cone(2), (1.0, 0.4), math.pi, 2.0)
    (ev,) = path.events
    assert ev.kind == "Reflect"
    r, th, _ = path.end_state()
    assert r == pytest.approx(1.0, abs=1e-9)
    assert abs(((th - 0.4) + math.pi) % (2 * math.pi) - math.pi) < 1e-9


@settings(max_examples=40, deadline=None)
@given(p=st.integers(2, 7), r0=st.floats(0.5, 2.0), th0=st.floats(0.0, 2 * math.pi))
def test_apex_parity(p, r0, th0):
    path = shoot(flat_cone(p), (r0, th0), math.pi, r0 + 0.7)
    assert [e.kind for e in path.events] == ["Reflect" if p % 2 == 0 else "PassThrough"]
    assert path.end_state()[0] == pytest.approx(0.7, abs=1e-9)


def test_clairaut_random_sphere_geodesic(sphere):
    rng = np.random.default_rng(7)
    start = (float(rng.uniform(0.6, 2.5)), float(rng.uniform(0, 2 * math.pi)))
    path = shoot(sphere, start, float(rng.uniform(0, 2 * math.pi)), 10.0)
    assert clairaut_invariant(sphere, path) < 1e-7


def test_clairaut_meridian_and_waist(fb31, waist):
    mer = shoot(fb31, (1.0, 0.3), 0.0, 1.5)
    assert clairaut_invariant(fb31, mer) < 1e-12
    assert clairaut_invariant(fb31, waist.path) < 1e-10


def test_clairaut_refuses_bumped(bumped):
    with pytest.raises(NotSymmetric):
        clairaut_invariant(bumped, shoot(bumped, (1.0, 0.0), 1.0, 1.0))


def test_ode_residual_small(fb31):
    assert ode_residual(shoot(fb31, (1.2, 0.0), 0.9, 8.0)) < 1e-6


def test_tilted_great_circle(sphere):
    g = find_closed_geodesic(sphere, ((0.5 * math.pi, 0.0), 0.5 * math.pi - 0.3, 6.2))
    assert g.length == pytest.approx(2 * math.pi, abs=1e-8)
    assert g.defect < TOL_CLOSE


def test_football_waist_length(fb31, waist):
    assert waist.length == pytest.approx(2 * math.pi * fb31.waist()[1], abs=1e-8)
    assert waist.separating and waist.in_regular_part and waist.embedded


def test_bad_seed_never_silently_wrong(fb31):
    try:
        g = find_closed_geodesic(fb31, ((1.0, 0.0), 1.2, 5.0))
    except NoConvergence:
        return
    assert g.defect < TOL_CLOSE
    res, _ = _closure_residual(fb31, g.start, g.beta, g.length, 1e-12)
    assert closure_defect(res) < 10 * TOL_CLOSE


def test_equator_index(sphere, equator):
    j1 = jacobi_index(sphere, equator, 1)
    assert (j1.index, j1.nullity) == (1, 2)
    assert j1.conjugate_parameters[0] == pytest.approx(math.pi, abs=1e-8)
    assert jacobi_index(sphere, equator, 2).index == 3


def test_waist_index_frozen(fb31, waist):
    assert (waist.jacobi.index, waist.jacobi.nullity) == (1, 0)
    assert has_conjugate_pair(fb31, waist)


def test_negatively_curved_neck(neck, neck_geodesic):
    assert neck_geodesic.length == pytest.approx(1.5486, abs=1e-4)
    assert (neck_geodesic.jacobi.index, neck_geodesic.jacobi.nullity) == (0, 0)
    assert not has_conjugate_pair(neck, neck_geodesic)


def test_jacobi_rejects_zero_iterate(sphere, equator):
    with pytest.raises(PreconditionError):
        jacobi_index(sphere, equator, 0)


def test_return_condition_sphere(sphere, equator):
    assert check_return_condition(sphere, equator, 6, 4 * math.pi).kind == "AllReturn"
    assert check_return_condition(sphere, equator, 0, 4 * math.pi).kind == "AllReturn"


def test_return_condition_finds_escaper(neck):
    c = closed_from_parallel(neck, max(r for r, s in neck.critical_radii() if s < 0))
    rc = check_return_condition(neck, c, 8, 10 * c.length)
    assert rc.kind == "Escaper"
    # Clairaut: the escaping ray is trapped when f(c) |cos alpha| exceeds f at the neck
    fn = neck.f(min(neck.critical_radii(), key=lambda x: abs(x[0] - 4.5))[0])
    assert rc.alpha == pytest.approx(math.pi - math.acos(fn / neck.f(c.start[0])), abs=1e-3)


def test_first_return_sphere_antipode(sphere, equator):
    loop = LoopCurve(sphere, equator)
    found, _ = first_return(sphere, loop, 1.0, 0.8, 4 * math.pi, count=2)
    assert found[0][1] == pytest.approx((1.0 + math.pi) % (2 * math.pi), abs=1e-8)
    assert found[1][1] == pytest.approx(1.0, abs=1e-8)
    assert found[1][2] == pytest.approx(0.8, abs=1e-8)
