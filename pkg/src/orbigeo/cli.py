"""Command-line runner: ``orbigeo <command> --config cfg.json --out dir``."""

import argparse
import json
import math
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from . import __version__
from . import birkhoff as bk
from . import io
from .csf import Budget, LoopState, evolve
from .errors import ContractError, NumericalFailure, OrbigeoError, SchemaError
from .geodesic import closed_from_parallel, find_closed_geodesic, shoot
from .search import BrokenLoop, cascade, relax_broken, sweep_separating_geodesic
from .surface import ConeSurface, load_surface

COMMANDS = ("trace", "csf", "sweep", "birkhoff", "cascade", "relax", "suite")

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "trace": {"start": None, "direction": None, "length": None, "closed": False, "samples": 1000},
    "csf": {"loop": None, "n": 256, "budget": {}, "c_cfl": 0.4, "eps_stat": 1e-5, "stat_window": 50,
            "history_stride": None},
    "sweep": {"n_coarse": 9, "n_vertices": 128, "s_tol": 1e-4, "budget": {}},
    "birkhoff": {"geodesic": {"sweep": True}, "n_t": 32, "n_alpha": 32, "horizon": None,
                 "boundary": True, "max_period": 0, "portrait_rows": 8, "portrait_iterates": 200},
    "cascade": {"geodesic": None, "fan_size": 8, "horizon_factor": 10.0, "max_stages": 5,
                "delta": 0.1, "n_vertices": 128},
    "relax": {"geodesic": None, "k": None, "mode": "GradientDescent", "noise": 0.0, "max_iter": 500},
    "suite": {"criteria": None, "replay": True},
}


# ---------------------------------------------------------------------------
# config


def load_config(path: Optional[str]) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError as exc:
        raise SchemaError(f"config file {path!r} not found") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"config file {path!r} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise SchemaError("config must be a JSON object")
    return cfg


def resolve(command: str, cfg: Dict[str, Any]) -> Dict[str, Any]:
    """Merge defaults and check for unknown keys."""
    allowed = set(DEFAULTS[command]) | {"surface", "seed", "command"}
    extra = set(cfg) - allowed
    if extra:
        raise SchemaError(f"unknown config keys for {command!r}: {sorted(extra)}")
    out = {"command": command, "seed": 0, **DEFAULTS[command], **cfg}
    out["command"] = command
    return out


def surface_of(cfg: Dict[str, Any]) -> ConeSurface:
    if "surface" not in cfg:
        raise SchemaError("config needs a 'surface' (shipped name, JSON path or inline object)")
    return load_surface(cfg["surface"])


def geodesic_of(surface: ConeSurface, spec: Any, cfg: Dict[str, Any]):
    """Closed geodesic from {"parallel": r}, {"waist": true}, {"sweep": true} or {"seed": [[r, th], beta, len]}."""
    if not isinstance(spec, dict) or len(spec) != 1:
        raise SchemaError("geodesic: expected one of parallel, waist, sweep, seed")
    (key, val), = spec.items()
    if key == "parallel":
        return closed_from_parallel(surface, float(val))
    if key == "waist":
        return closed_from_parallel(surface, surface.waist()[0])
    if key == "sweep":
        return sweep_separating_geodesic(surface, threads=cfg.get("threads", 1))["geodesic"]
    if key == "seed":
        try:
            (r, th), beta, ell = val
        except (TypeError, ValueError) as exc:
            raise SchemaError("geodesic.seed: expected [[r, theta], beta, length]") from exc
        return find_closed_geodesic(surface, ((float(r), float(th)), float(beta), float(ell)))
    raise SchemaError(f"geodesic: unknown kind {key!r}")


def loop_of(surface: ConeSurface, spec: Any, n: int) -> LoopState:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise SchemaError("loop: expected an object with a 'kind'")
    kind = spec["kind"]
    try:
        if kind == "parallel":
            return LoopState.parallel(surface, float(spec["r"]), n)
        if kind == "graph":
            r0, a, m = float(spec["r"]), float(spec.get("amplitude", 0.0)), int(spec.get("mode", 2))
            return LoopState.graph(surface, lambda th: r0 + a * np.cos(m * th), n)
        if kind == "circle":
            return LoopState.geodesic_circle(surface, tuple(spec["center"]), float(spec["radius"]), n)
        if kind == "points":
            return LoopState(surface, np.array(spec["r"], float), np.array(spec["theta"], float))
    except KeyError as exc:
        raise SchemaError(f"loop: missing key {exc}") from exc
    raise SchemaError(f"loop: unknown kind {kind!r}")


def _budget(d: Dict[str, Any]) -> Budget:
    extra = set(d) - {"max_time", "max_steps"}
    if extra:
        raise SchemaError(f"budget: unknown keys {sorted(extra)} (wall-clock limits are not replayable)")
    return Budget(max_time=float(d.get("max_time", math.inf)), max_steps=int(d.get("max_steps", 5_000_000)))


def _geod_rows(g, n: int = 1000):
    s = np.linspace(0.0, g.length, n + 1)
    st = g.path.states(s)
    return zip(s, st["r"], st["theta"], st["beta"])


# ---------------------------------------------------------------------------
# commands


def cmd_trace(cfg, out: Path, svg: bool):
    s = surface_of(cfg)
    if cfg["start"] is None or cfg["direction"] is None or cfg["length"] is None:
        raise SchemaError("trace needs start, direction and length")
    start = tuple(float(x) for x in cfg["start"])
    if cfg["closed"]:
        g = find_closed_geodesic(s, (start, cfg["direction"], float(cfg["length"])))
        path, length = g.path, g.length
        report = {"closed": True, **g.report()}
    else:
        length = float(cfg["length"])
        path = shoot(s, start, cfg["direction"], length)
        r1, th1, b1 = path.end_state()
        report = {"closed": False, "length": length, "end": [r1, th1], "end_direction": b1,
                  "events": [e.to_dict() for e in path.events]}
    sv = np.linspace(0.0, length, int(cfg["samples"]) + 1)
    st = path.states(sv)
    io.write_csv(out / "trajectory.csv", ["s", "r", "theta", "beta"],
                 zip(sv, st["r"], st["theta"], st["beta"]))
    io.write_json(out / "report.json", report)
    if svg:
        io.curves_svg(out / "trajectory.svg", [np.column_stack([st["r"], st["theta"]])], s)


def cmd_csf(cfg, out: Path, svg: bool):
    s = surface_of(cfg)
    loop = loop_of(s, cfg["loop"], int(cfg["n"]))
    res = evolve(s, loop, _budget(cfg["budget"]), c_cfl=float(cfg["c_cfl"]), eps_stat=float(cfg["eps_stat"]),
                 stat_window=int(cfg["stat_window"]), history_stride=cfg["history_stride"])
    rows = []
    for k, fr in enumerate(res.history):
        rows.extend((k, fr.t, i, r, th) for i, (r, th) in enumerate(zip(fr.r, fr.theta)))
    io.write_csv(out / "history.csv", ["frame", "t", "vertex", "r", "theta"], rows)
    io.write_csv(out / "lengths.csv", ["t", "length"], res.lengths)
    io.write_json(out / "verdict.json", res.summary())
    if svg:
        io.curves_svg(out / "history.svg", [np.column_stack([f.r, f.theta]) for f in res.history], s,
                      closed=[True] * len(res.history))


def cmd_sweep(cfg, out: Path, svg: bool):
    s = surface_of(cfg)
    budget = _budget(cfg["budget"]) if cfg["budget"] else None
    try:
        res = sweep_separating_geodesic(s, int(cfg["n_coarse"]), budget, n_vertices=int(cfg["n_vertices"]),
                                        s_tol=float(cfg["s_tol"]), threads=cfg.get("threads", 1))
    except NumericalFailure as exc:
        io.write_json(out / "trace.json", exc.diagnostics.get("trace", []))
        raise
    g = res["geodesic"]
    io.write_json(out / "geodesic.json", {**g.report(), "residual": res["residual"],
                                          "criterion": res["criterion"]})
    io.write_json(out / "trace.json", res["trace"])
    io.write_csv(out / "geodesic.csv", ["s", "r", "theta", "beta"], _geod_rows(g))
    if svg:
        io.curves_svg(out / "geodesic.svg", [g.samples(1000)], s, closed=[True])


def cmd_birkhoff(cfg, out: Path, svg: bool):
    s = surface_of(cfg)
    c = geodesic_of(s, cfg["geodesic"], cfg)
    smp = bk.sample_annulus(s, c, int(cfg["n_t"]), int(cfg["n_alpha"]), cfg["horizon"],
                            threads=cfg.get("threads", 1))
    summary: Dict[str, Any] = {"geodesic": c.report(), "annulus": smp.summary()}
    if smp.partial:
        summary["note"] = ("nodes without a second crossing inside the horizon: the return hypothesis "
                           "fails there and the sample is partial")
    if cfg["boundary"]:
        try:
            b = bk.extend_boundary(s, c, smp)
            summary["boundary"] = {"status": b["status"], "method": b["method"],
                                   "disagreement": b.get("disagreement"),
                                   "inverse_check": bk.boundary_inverse_check(smp)}
            io.write_csv(out / "boundary.csv", ["t", "alpha0_image", "alphapi_image"],
                         zip(b["t"], b["alpha0"], b["alphapi"]))
        except ContractError as exc:
            summary["boundary"] = {"status": type(exc).__name__, "message": str(exc)}
    io.write_csv(out / "annulus.csv", ["t", "alpha", "t_prime", "alpha_prime", "jac_det", "status"], smp.rows())
    if int(cfg["max_period"]) > 0:
        pp = bk.find_periodic_points(s, c, smp, int(cfg["max_period"]))
        summary["periodic"] = {"distinct": pp["distinct"], "stats": pp["stats"],
                               "points": [{k: v for k, v in p.items() if k != "geodesic"}
                                          | {"length": p["geodesic"].length} for p in pp["points"]]}
    io.write_json(out / "summary.json", summary)
    if svg:
        orbits = []
        for j in np.linspace(0, len(smp.alpha) - 1, int(cfg["portrait_rows"])).astype(int):
            t, a = float(smp.t[0]), float(smp.alpha[j])
            orb = [(t, a)]
            for _ in range(int(cfg["portrait_iterates"])):
                try:
                    t, a, _ = bk.birkhoff_point(s, c, t, a, smp.horizon)
                except OrbigeoError:
                    break
                orb.append((t, a))
            orbits.append(np.array(orb))
        io.phase_portrait_svg(out / "portrait.svg", orbits, c.length)


def cmd_cascade(cfg, out: Path, svg: bool):
    s = surface_of(cfg)
    if cfg["geodesic"] is None:
        raise SchemaError("cascade needs a starting geodesic")
    c = geodesic_of(s, cfg["geodesic"], cfg)
    try:
        res = cascade(s, c, fan_size=int(cfg["fan_size"]), horizon_factor=float(cfg["horizon_factor"]),
                      max_stages=int(cfg["max_stages"]), delta=float(cfg["delta"]),
                      n_vertices=int(cfg["n_vertices"]))
    except NumericalFailure as exc:
        io.write_json(out / "cascade.json", {"error": str(exc), "trace": exc.diagnostics.get("trace", [])})
        raise
    io.write_json(out / "cascade.json", {"stages": res["stages"], "trace": res["trace"],
                                         "lengths": [g.length for g in res["geodesics"]],
                                         "terminal_conjugate_pair": res["terminal_conjugate_pair"]})
    if svg:
        io.curves_svg(out / "cascade.svg", [g.samples(1000) for g in res["geodesics"]], s,
                      closed=[True] * len(res["geodesics"]))


def cmd_relax(cfg, out: Path, svg: bool):
    s = surface_of(cfg)
    if cfg["geodesic"] is None:
        raise SchemaError("relax needs a geodesic to build the broken loop from")
    c = geodesic_of(s, cfg["geodesic"], cfg)
    from .search import default_subdivision
    k = int(cfg["k"]) if cfg["k"] is not None else default_subdivision(s, c.length)
    bl = BrokenLoop.from_geodesic(s, c, k)
    if cfg["noise"]:
        rng = np.random.default_rng(int(cfg["seed"]))
        bl = bl.with_points(bl.r + float(cfg["noise"]) * rng.standard_normal(k), bl.theta)
    res = relax_broken(s, bl, cfg["mode"], max_iter=int(cfg["max_iter"]))
    jd = c.jacobi
    io.write_json(out / "relax.json", {**res.report(), "jacobi_index": jd.index, "jacobi_nullity": jd.nullity,
                                       "eigenvalues": res.eigenvalues, "energy_history": res.energy_history})
    io.write_csv(out / "control_points.csv", ["i", "r", "theta"],
                 zip(range(k), res.loop.r, res.loop.theta))


def cmd_suite(cfg, out: Path, svg: bool) -> int:
    from . import acceptance
    ids = [str(x) for x in cfg["criteria"]] if cfg["criteria"] else None
    if ids is not None and not set(ids) <= set(acceptance.CRITERIA):
        raise SchemaError(f"unknown criteria {sorted(set(ids) - set(acceptance.CRITERIA))}")
    res = acceptance.run_suite(ids, threads=cfg.get("threads", 1), replay=bool(cfg["replay"]),
                               echo=lambda line: print(line, flush=True))
    (out / "report.json").write_text(acceptance.report_text(res["results"]))
    io.write_json(out / "timings.json", res["timings"])
    (out / "table.txt").write_text("\n".join(r.line() for r in res["results"]) + "\n")
    return 0 if res["all_passed"] else 3


HANDLERS = {"trace": cmd_trace, "csf": cmd_csf, "sweep": cmd_sweep, "birkhoff": cmd_birkhoff,
            "cascade": cmd_cascade, "relax": cmd_relax, "suite": cmd_suite}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="orbigeo", description=__doc__)
    ap.add_argument("--version", action="version", version=f"orbigeo {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", default=f"runs/{name}", help="output directory")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        p.add_argument("--svg", action="store_true", help="also write SVG figures")
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        cfg = resolve(args.command, load_config(args.config))
        if args.command != "suite" and cfg.get("surface") is not None:
            cfg["surface_resolved"] = surface_of(cfg).to_dict()
        out.mkdir(parents=True, exist_ok=True)
        # thread count changes scheduling only, never results, so it stays out of the replayable config
        io.write_run_meta(out, cfg)
        cfg["threads"] = max(1, int(args.threads))
        code = HANDLERS[args.command](cfg, out, args.svg)
        return int(code or 0)
    except OrbigeoError as exc:
        code = getattr(exc, "exit_code", 3)
        out.mkdir(parents=True, exist_ok=True)
        io.write_json(out / "error.json", {"error": type(exc).__name__, "message": str(exc),
                                           "diagnostics": exc.diagnostics, "exit_code": code})
        print(f"orbigeo {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
