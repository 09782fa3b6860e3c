"""Acceptance criteria 1 to 11. The suite runs once per session (twice, for the replay check)."""

import json
import math

import pytest

from orbigeo.acceptance import CRITERIA, PERIODIC_FLOOR, run_suite

IDS = [str(i) for i in range(1, 12)]


@pytest.fixture(scope="session")
def suite():
    res = run_suite(threads=1, replay=True)
    return {r.cid: r for r in res["results"]}, res


@pytest.fixture
def result(suite, request, capsys):
    r = suite[0][request.param]
    with capsys.disabled():
        print("\n" + r.line())
    return r


def _check(cid, r):
    m = r.metrics
    if cid == "1":
        assert len(m["runs"]) == 9
        assert all(x["verdict"] == "ConeCollapse" for x in m["runs"])
        assert all(abs(x["T"] - 0.5 * x["R"] ** 2) < 0.02 * x["R"] ** 2 for x in m["runs"])
    elif cid == "2":
        assert len(m["runs"]) >= 20
        assert all(x["consistent"] for x in m["runs"])
        assert set(m["counts"]) <= {"ConeCollapse", "RoundPoint", "LimitGeodesic", "BudgetExhausted"}
    elif cid == "3":
        assert len(m["pairs"]) == 10 and not any(x["violated"] for x in m["pairs"])
    elif cid == "4":
        assert m["a"]["error"] < 1e-5
        assert m["b"]["separating"] and m["b"]["in_regular_part"] and m["b"]["residual"] < 1e-6
    elif cid == "5":
        assert m["rays"] >= 1000 and m["misclassified"] == 0 and m["max_development_defect"] < 1e-9
    elif cid == "6":
        assert [x["index"] for x in m["iterates"]] == [2 * k - 1 for k in range(1, 7)]
        assert m["iterates"][0]["nullity"] == 2
    elif cid == "7":
        assert sorted({x["k"] for x in m["runs"]}) == [16, 32, 64]
        assert all(x["discrete"] == x["jacobi"] for x in m["runs"])
    elif cid == "8":
        assert m["a"]["identity_error"] < 1e-4
        assert m["b"]["meridian_row_error"] < 1e-5
        assert m["b"]["jacobian_fraction"] >= 0.99
        assert m["b"]["boundary_inverse"] < 1e-4
    elif cid == "9":
        assert PERIODIC_FLOOR == 2
        assert m["distinct"] >= PERIODIC_FLOOR
        prim = [p for p in m["points"] if p["iterate_of"] is None]
        assert all(p["defect"] < 1e-10 for p in prim)
    elif cid == "10":
        assert m["stages"] >= 1 and not m["terminal_conjugate_pair"]
        assert all(b < a for a, b in zip(m["lengths"], m["lengths"][1:]))
    elif cid == "11":
        assert m["identical"]


@pytest.mark.slow
@pytest.mark.parametrize("result", IDS, indirect=True, ids=[f"criterion_{i}" for i in IDS])
def test_criterion(result):
    assert result.passed, result.note
    assert result.in_time, f"runtime {result.runtime:.1f}s over limit {result.limit:.0f}s"
    _check(result.cid, result)


@pytest.mark.slow
def test_report_is_plain_json(suite):
    by_id, res = suite
    data = json.loads(res["report"])
    assert [c["id"] for c in data["criteria"]] == list(CRITERIA)
    assert "runtime" not in res["report"]
    assert set(res["timings"]) == set(IDS)
    assert all(math.isfinite(t["runtime"]) for t in res["timings"].values())
