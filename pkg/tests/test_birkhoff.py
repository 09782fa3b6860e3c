import math

import numpy as np
import pytest

from orbigeo import birkhoff as bk
from orbigeo.errors import ConjugateDataMissing, NoSecondReturn, PreconditionError
from orbigeo.geodesic import LoopCurve, closed_from_parallel, shoot
from orbigeo.surface import ConeSurface, sine_profile


@pytest.fixture(scope="module")
def sphere_sample(sphere, equator):
    return bk.sample_annulus(sphere, equator, 8, 8)


@pytest.fixture(scope="module")
def waist_sample(fb31, waist):
    return bk.sample_annulus(fb31, waist, 16, 16)


@pytest.mark.parametrize("t,a", [(0.3, 0.2), (2.0, 1.0), (4.5, 2.9), (6.0, 0.5 * math.pi)])
def test_sphere_map_is_identity(sphere, equator, t, a):
    t1, a1, s = bk.birkhoff_point(sphere, equator, t, a)
    assert bk._wrap_len(t1 - t, equator.length) == pytest.approx(0.0, abs=1e-8)
    assert a1 == pytest.approx(a, abs=1e-8)
    assert s == pytest.approx(2 * math.pi, abs=1e-8)


def test_meridian_fixed_on_smooth_revolution_surface():
    s = ConeSurface(sine_profile(1, 1, math.pi, (0.0, 0.05)), math.pi, 1, 1)
    c = closed_from_parallel(s, s.waist()[0])
    for t in (0.1, 1.7, 4.0):
        t1, a1, _ = bk.birkhoff_point(s, c, t, 0.5 * math.pi)
        assert bk._wrap_len(t1 - t, c.length) == pytest.approx(0.0, abs=1e-8)
        assert a1 == pytest.approx(0.5 * math.pi, abs=1e-8)


@pytest.mark.parametrize("a", [0.0, math.pi, -0.1])
def test_boundary_angles_rejected(sphere, equator, a):
    with pytest.raises(PreconditionError):
        bk.birkhoff_point(sphere, equator, 1.0, a)


def test_short_horizon_reports_no_second_return(sphere, equator):
    with pytest.raises(NoSecondReturn):
        bk.birkhoff_point(sphere, equator, 1.0, 1.0, horizon=4.0)


def test_crossing_set_stable_under_tolerance(fb31, waist):
    loop = LoopCurve(fb31, waist)
    a = loop.crossings(shoot(fb31, waist.start, waist.beta + 0.7, 30.0, rtol=1e-10, atol=1e-10))
    b = loop.crossings(shoot(fb31, waist.start, waist.beta + 0.7, 30.0, rtol=5e-11, atol=5e-11))
    assert len(a) == len(b) > 4
    np.testing.assert_allclose([x[1] for x in a], [x[1] for x in b], atol=1e-7)


def test_sphere_sample_identity(sphere_sample):
    smp = sphere_sample
    assert not smp.partial
    dt = (smp.t_prime - smp.t[:, None] + math.pi) % (2 * math.pi) - math.pi
    assert np.max(np.abs(dt)) < 1e-4
    assert np.max(np.abs(smp.alpha_prime - smp.alpha[None, :])) < 1e-4
    assert np.max(np.abs(smp.jac_det - 1.0)) < 1e-4
    assert len(smp.rows()) == 64


def test_grid_uniform_in_cosine(sphere_sample):
    u = np.cos(sphere_sample.alpha)
    np.testing.assert_allclose(np.diff(u), -2.0 / 8, atol=1e-14)


def test_waist_sample(waist_sample, fb31, waist):
    smp = waist_sample
    assert not smp.partial
    assert np.mean(np.abs(smp.jac_det - 1.0) < 1e-3) >= 0.99
    for t in smp.t[::4]:
        t1, a1, _ = bk.birkhoff_point(fb31, waist, t, 0.5 * math.pi)
        assert abs(bk._wrap_len(t1 - t, waist.length)) < 1e-5
        assert abs(a1 - 0.5 * math.pi) < 1e-5


def test_sphere_boundary_rows(sphere, equator, sphere_sample):
    rows = bk.extend_boundary(sphere, equator, sphere_sample)
    assert rows["status"] == "Jacobi"
    np.testing.assert_allclose(rows["alpha0"], sphere_sample.t, atol=1e-6)
    assert bk.boundary_inverse_check(sphere_sample) < 1e-6


def test_waist_boundary_inverse(fb31, waist, waist_sample):
    rows = bk.extend_boundary(fb31, waist, waist_sample)
    assert rows["disagreement"] < 1e-3
    assert bk.boundary_inverse_check(waist_sample) < 1e-4


def test_bumped_boundary_rows(bumped, bumped_geodesic):
    smp = bk.sample_annulus(bumped, bumped_geodesic, 6, 6)
    rows = bk.extend_boundary(bumped, bumped_geodesic, smp)
    assert rows["status"] in ("Jacobi", "Extrapolated")
    assert rows["status"] == ("Extrapolated" if rows["disagreement"] > 1e-3 else "Jacobi")
    assert bk.boundary_inverse_check(smp) < 1e-4


def test_missing_conjugate_data(neck, neck_geodesic):
    with pytest.raises(ConjugateDataMissing):
        bk.extend_boundary(neck, neck_geodesic, None, ts=np.array([0.1]))


def test_undefined_rows_rejected(sphere_sample):
    empty = bk.AnnulusSample(**{**sphere_sample.__dict__, "boundary": {}})
    with pytest.raises(PreconditionError):
        bk.boundary_inverse_check(empty)


def test_sphere_periodic_points_collapse_to_one_family(sphere, equator, sphere_sample):
    res = bk.find_periodic_points(sphere, equator, sphere_sample, 2)
    assert res["distinct"] == 1
    assert all(p["geodesic"].length == pytest.approx(2 * math.pi * p["period"], abs=1e-6)
               for p in res["points"])


def test_waist_fixed_points_are_meridians(fb31, waist, waist_sample):
    res = bk.find_periodic_points(fb31, waist, waist_sample, 1)
    assert res["distinct"] >= 1
    assert all(p["geodesic"].length == pytest.approx(2 * math.pi, abs=1e-6) for p in res["points"])
    assert all(p["alpha"] == pytest.approx(0.5 * math.pi, abs=1e-6) for p in res["points"])


@pytest.mark.slow
def test_bumped_periodic_points(bumped, bumped_geodesic):
    smp = bk.sample_annulus(bumped, bumped_geodesic, 16, 16)
    assert np.mean(np.abs(smp.jac_det[smp.complete] - 1.0) < 1e-3) >= 0.99
    res = bk.find_periodic_points(bumped, bumped_geodesic, smp, 3)
    assert res["distinct"] >= 2
    for p in res["points"]:
        assert p["defect"] < 1e-10
        assert p["crossings"] == 2 * p["period"]
    lengths = sorted({round(p["geodesic"].length, 6) for p in res["points"] if p["iterate_of"] is None})
    # frozen from the calibration run: the two meridian-type period-1 geodesics
    assert lengths[:2] == pytest.approx([6.212225, 6.357096], abs=1e-5)
