import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orbigeo.csf import Budget
from orbigeo.errors import BracketNotFound, PreconditionError
from orbigeo.geodesic import has_conjugate_pair
from orbigeo.search import (BrokenLoop, cascade, convexity_radius, default_subdivision, relax_broken,
                            shorter_side_loop, sweep_radius, sweep_separating_geodesic)
from orbigeo.surface import ConeSurface, flat_cone, football, sine_profile


def test_sweep_radius_endpoints(fb31):
    assert sweep_radius(fb31, 0.0) == pytest.approx(fb31.r_guard)
    assert sweep_radius(fb31, 1.0) == pytest.approx(fb31.L - fb31.r_guard)


def test_sweep_round_sphere(sphere):
    res = sweep_separating_geodesic(sphere)
    assert res["geodesic"].length == pytest.approx(2 * math.pi, abs=1e-4)
    assert res["geodesic"].embedded


@pytest.mark.slow
def test_sweep_football_waist(fb31):
    res = sweep_separating_geodesic(fb31)
    assert res["geodesic"].length == pytest.approx(2 * math.pi * fb31.waist()[1], abs=1e-5)
    assert res["trace"]


def test_sweep_bumped(bumped, bumped_geodesic):
    g = bumped_geodesic
    assert g.separating and g.in_regular_part
    assert g.defect < 1e-6
    # frozen from the calibration run of the shipped surface
    assert g.length == pytest.approx(4.614394, abs=1e-5)


def test_sweep_one_pole_config_reports_trace():
    with pytest.raises(BracketNotFound) as ei:
        sweep_separating_geodesic(flat_cone(3))
    assert ei.value.diagnostics["trace"]


def test_sweep_refuses_non_simply_connected():
    s = ConeSurface(sine_profile(2, 4, math.pi), math.pi, 2, 4)
    with pytest.raises(PreconditionError):
        sweep_separating_geodesic(s, budget=Budget(max_time=0.1))


def test_convexity_radius(sphere, fb31):
    assert convexity_radius(sphere) == pytest.approx(0.25 * math.pi)
    assert default_subdivision(sphere, 2 * math.pi) == 32


def test_energy_of_geodesic_polygon(sphere, equator):
    bl = BrokenLoop.from_geodesic(sphere, equator, 16)
    assert bl.length() == pytest.approx(2 * math.pi, abs=1e-10)
    assert bl.energy() == pytest.approx(4 * math.pi ** 2, abs=1e-9)
    assert np.linalg.norm(bl.gradient()) < 1e-9


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_gradient_matches_energy_differences(seed):
    s = football(3, 1)
    rng = np.random.default_rng(seed)
    th = np.linspace(0, 2 * math.pi, 12, endpoint=False)
    bl = BrokenLoop.from_points(s, 1.6 + 0.1 * rng.standard_normal(12), th)
    v = rng.standard_normal(24)
    v /= np.linalg.norm(v)
    eps = 1e-6
    fd = (bl.moved(eps * v).energy() - bl.moved(-eps * v).energy()) / (2 * eps)
    assert fd == pytest.approx(float(bl.gradient() @ v), abs=1e-5)


def test_relax_equator_matches_jacobi(sphere, equator):
    bl = BrokenLoop.from_geodesic(sphere, equator, 16)
    rng = np.random.default_rng(16)
    bl = bl.with_points(bl.r + 0.01 * rng.standard_normal(16), bl.theta)
    res = relax_broken(sphere, bl)
    assert (res.index, res.nullity) == (1, 2)
    assert res.loop.length() == pytest.approx(2 * math.pi, abs=1e-8)


def test_relax_waist_is_already_critical(fb31, waist):
    bl = BrokenLoop.from_geodesic(fb31, waist, 24)
    assert np.linalg.norm(bl.gradient()) < 1e-9
    res = relax_broken(fb31, bl, "MidpointShortening")
    assert (res.index, res.nullity) == (1, 0)


def test_relax_small_loop_degenerates(sphere):
    th = np.linspace(0, 2 * math.pi, 12, endpoint=False)
    bl = BrokenLoop.from_points(sphere, 0.5 * math.pi + 0.2 * np.cos(th), 0.2 * np.sin(th))
    res = relax_broken(sphere, bl)
    assert res.degenerate
    assert res.loop.length() < 1e-3


def test_relax_energy_monotone_in_descent(fb31):
    th = np.linspace(0, 2 * math.pi, 16, endpoint=False)
    bl = BrokenLoop.from_points(fb31, 1.2 + 0.05 * np.cos(2 * th), th)
    res = relax_broken(fb31, bl, "MidpointShortening")
    hist = np.array(res.energy_history)
    desc = np.array(res.descent_steps, dtype=bool)
    assert np.all(np.diff(hist)[desc[: len(hist) - 1]] <= 1e-12)


def test_relax_rejects_unknown_mode(sphere, equator):
    with pytest.raises(PreconditionError):
        relax_broken(sphere, BrokenLoop.from_geodesic(sphere, equator, 8), "Teleport")


def test_side_loop_on_equator(sphere, equator):
    sl = shorter_side_loop(sphere, equator, 1, 0.1)
    assert sl.length < 2 * math.pi
    assert sl.min_distance > 0.05
    assert sl.loop.embedded


def test_side_loop_bumped(bumped, bumped_geodesic):
    sl = shorter_side_loop(bumped, bumped_geodesic, 1, 0.1)
    assert bumped_geodesic.length - sl.length > 1e-6
    assert sl.min_distance > 0.05


def test_side_loop_needs_conjugate_pair(neck, neck_geodesic):
    assert not has_conjugate_pair(neck, neck_geodesic)
    with pytest.raises(PreconditionError):
        shorter_side_loop(neck, neck_geodesic, 1, 0.1)


@pytest.mark.slow
def test_cascade_on_neck(neck):
    from orbigeo.acceptance import neck_bulge_geodesic
    c = neck_bulge_geodesic(neck)
    res = cascade(neck, c)
    lengths = [g.length for g in res["geodesics"]]
    assert len(res["stages"]) >= 1
    assert all(b < a for a, b in zip(lengths, lengths[1:]))
    assert lengths[-1] == pytest.approx(1.548574, abs=1e-5)
    assert res["terminal_conjugate_pair"] is False


def test_cascade_needs_conjugate_pair(neck, neck_geodesic):
    with pytest.raises(PreconditionError):
        cascade(neck, neck_geodesic)
