import json
import math

import numpy as np
import pytest

from orbigeo import __version__, io
from orbigeo.cli import main, resolve
from orbigeo.errors import SchemaError

FLAT2 = {"profile": {"kind": "preset", "name": "flat_cone"}, "p": 2, "q": 0, "L": 4.0, "bump": None}
FLAT3 = {**FLAT2, "p": 3}
WAIST = 1.9455307


def run(tmp_path, command, cfg, name="out", extra=()):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / name
    code = main([command, "--config", str(path), "--out", str(out), "--threads", "1", *extra])
    return code, out


def test_jsonable_handles_numpy_and_nonfinite():
    obj = {"a": np.float64(1.5), "b": np.arange(3), "c": math.nan, "d": math.inf, "e": np.bool_(True),
           1: (np.int32(4),)}
    assert io.jsonable(obj) == {"a": 1.5, "b": [0, 1, 2], "c": None, "d": "inf", "e": True, "1": [4]}


def test_dumps_is_sorted_and_stable():
    assert io.dumps({"b": 1, "a": 2}) == io.dumps({"a": 2, "b": 1})


def test_csv_round_trips_floats(tmp_path):
    xs = [0.1, 1 / 3, 2.0 ** -40]
    p = io.write_csv(tmp_path / "x.csv", ["x"], ([x] for x in xs))
    back = [float(line) for line in p.read_text().splitlines()[1:]]
    assert back == xs


def test_unknown_config_key_rejected(tmp_path):
    with pytest.raises(SchemaError):
        resolve("trace", {"surface": "round", "bogus": 1})
    code, out = run(tmp_path, "trace", {"surface": "round", "bogus": 1})
    assert code == 2
    assert json.loads((out / "error.json").read_text())["error"] == "SchemaError"


def test_wall_clock_budget_rejected(tmp_path):
    cfg = {"surface": FLAT3, "loop": {"kind": "parallel", "r": 0.5}, "budget": {"max_wall": 1}}
    assert run(tmp_path, "csf", cfg)[0] == 2


def test_trace_equator(tmp_path):
    cfg = {"surface": "round", "start": [math.pi / 2, 0.0], "direction": math.pi / 2,
           "length": 2 * math.pi, "closed": True}
    code, out = run(tmp_path, "trace", cfg, extra=("--svg",))
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["length"] == pytest.approx(2 * math.pi, abs=1e-8)
    assert (out / "trajectory.csv").exists() and (out / "trajectory.svg").exists()
    assert (out / "VERSION").read_text().strip() == f"orbigeo {__version__}"
    conf = json.loads((out / "config.json").read_text())
    assert conf["command"] == "trace" and "threads" not in conf and "surface_resolved" in conf


def test_trace_malformed_surface(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"profile": {"kind": "preset", "name": "round"}, "p": "x"}')
    code, out = run(tmp_path, "trace", {"surface": str(bad), "start": [1, 0], "direction": 0, "length": 1})
    assert code == 2
    assert json.loads((out / "error.json").read_text())["exit_code"] == 2


def test_trace_apex_reflects(tmp_path):
    cfg = {"surface": FLAT2, "start": [1.0, 0.4], "direction": math.pi, "length": 2.0}
    code, out = run(tmp_path, "trace", cfg)
    assert code == 0
    events = json.loads((out / "report.json").read_text())["events"]
    assert [e["kind"] for e in events] == ["Reflect"]


def test_csf_cone_collapse(tmp_path):
    cfg = {"surface": FLAT3, "loop": {"kind": "parallel", "r": 0.5}}
    code, out = run(tmp_path, "csf", cfg)
    assert code == 0
    v = json.loads((out / "verdict.json").read_text())
    assert v["verdict"] == "ConeCollapse"
    assert v["collapse_time"] == pytest.approx(0.125, abs=3e-3)


def test_csf_waist_is_limit(tmp_path):
    cfg = {"surface": "football31", "loop": {"kind": "parallel", "r": WAIST}, "n": 128}
    code, out = run(tmp_path, "csf", cfg)
    assert code == 0
    assert json.loads((out / "verdict.json").read_text())["verdict"] == "LimitGeodesic"


def test_csf_tiny_budget_is_honest(tmp_path):
    cfg = {"surface": "football31", "loop": {"kind": "parallel", "r": 1.0}, "budget": {"max_steps": 5}}
    code, out = run(tmp_path, "csf", cfg)
    assert code == 0
    assert json.loads((out / "verdict.json").read_text())["verdict"] == "BudgetExhausted"


def test_sweep_round(tmp_path):
    code, out = run(tmp_path, "sweep", {"surface": "round", "n_vertices": 96})
    assert code == 0
    assert json.loads((out / "geodesic.json").read_text())["length"] == pytest.approx(2 * math.pi, abs=1e-4)


def test_sweep_one_pole_collapse(tmp_path):
    code, out = run(tmp_path, "sweep", {"surface": FLAT3})
    assert code == 3
    assert json.loads((out / "error.json").read_text())["error"] == "BracketNotFound"
    assert isinstance(json.loads((out / "trace.json").read_text()), list)


@pytest.mark.parametrize("command,cfg,files", [
    ("birkhoff", {"surface": "football31", "geodesic": {"waist": True}, "n_t": 6, "n_alpha": 6},
     ["annulus.csv", "boundary.csv", "summary.json"]),
    ("relax", {"surface": "round", "geodesic": {"parallel": math.pi / 2}, "noise": 0.01, "seed": 3},
     ["relax.json", "control_points.csv"]),
])
def test_replay_is_byte_identical(tmp_path, command, cfg, files):
    c1, a = run(tmp_path, command, cfg, "a")
    c2, b = run(tmp_path, command, cfg, "b")
    assert c1 == c2 == 0
    for f in files + ["config.json", "VERSION"]:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_suite_unknown_criterion(tmp_path):
    assert run(tmp_path, "suite", {"criteria": ["99"]})[0] == 2


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out
