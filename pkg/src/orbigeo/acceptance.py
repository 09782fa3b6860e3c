"""Acceptance suite: one function per criterion, each returning metrics and a verdict.

The report written by :func:`run_suite` contains only deterministic content.
Wall-clock runtimes are kept apart (``timings``) so two runs can be compared
byte for byte.
"""

import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from . import birkhoff as bk
from .csf import FlowOutcome, Budget, LoopState, avoidance_check, evolve
from .geodesic import closed_from_parallel, has_conjugate_pair, jacobi_index, shoot
from .io import dumps
from .search import BrokenLoop, cascade, relax_broken, sweep_separating_geodesic
from .surface import flat_cone, football, load_surface, round_sphere


@dataclass
class CriterionResult:
    cid: str
    title: str
    passed: bool
    metrics: Dict[str, Any]
    limit: float
    runtime: float = 0.0
    note: str = ""

    @property
    def in_time(self) -> bool:
        return self.runtime <= self.limit

    @property
    def ok(self) -> bool:
        return self.passed and self.in_time

    def line(self) -> str:
        tag = "PASS" if self.ok else "FAIL"
        extra = "" if self.in_time else " (over time limit)"
        return f"[{tag}] {self.cid:>2} {self.title}: {self.note}  [{self.runtime:.1f}s / {self.limit:.0f}s]{extra}"

    def to_dict(self) -> Dict[str, Any]:
        return {"id": self.cid, "title": self.title, "passed": self.passed, "note": self.note,
                "metrics": self.metrics, "time_limit": self.limit}


# ---------------------------------------------------------------------------


def crit_1(ctx) -> CriterionResult:
    rows = []
    worst = 0.0
    for p in (2, 3, 5):
        s = flat_cone(p)
        for R in (0.25, 0.5, 1.0):
            out = evolve(s, LoopState.parallel(s, R, 256))
            T = out.collapse_time if out.collapse_time is not None else math.nan
            rel = abs(T - 0.5 * R * R) / (R * R)
            worst = max(worst, rel) if math.isfinite(rel) else math.inf
            rows.append({"p": p, "R": R, "verdict": out.verdict, "T": T, "rel_err": rel})
    ok = worst < 0.02 and all(r["verdict"] == "ConeCollapse" for r in rows)
    return CriterionResult("1", "cone-collapse law", ok, {"runs": rows, "max_rel_err": worst}, 30,
                           note=f"max |T - R^2/2|/R^2 = {worst:.2e} (< 2e-2)")


def regression_loops() -> List[Dict[str, Any]]:
    """Loops on simply connected spindles used for the trichotomy check."""
    surf = {"fb31": football(3, 1), "fb21": football(2, 1), "fb32": football(3, 2),
            "fb52": football(5, 2), "neck": load_surface("neck"),
            "bump": load_surface("bumped_spindle"), "round": round_sphere()}
    cases = []
    for k in ("fb31", "fb21", "fb32", "fb52", "neck", "bump"):
        for frac in (0.12, 0.5, 0.88):
            cases.append((k, "parallel", frac))
    for k in ("fb31", "fb32", "neck", "bump"):
        for frac in (0.35, 0.7):
            cases.append((k, "wave", frac))
    cases += [("round", "parallel", 0.3), ("round", "wave", 0.5), ("fb31", "waist", None),
              ("fb32", "waist", None)]
    out = []
    for k, kind, frac in cases:
        s = surf[k]
        if kind == "parallel":
            lp = LoopState.parallel(s, frac * s.L, 128)
        elif kind == "wave":
            lp = LoopState.graph(s, lambda th, s=s, f=frac: s.L * (f + 0.04 * np.cos(2 * th)), 128)
        else:
            lp = LoopState.from_geodesic(s, closed_from_parallel(s, s.waist()[0]), 128)
        out.append({"name": f"{k}/{kind}/{frac}", "surface": s, "loop": lp})
    return out


def trichotomy_check(s, out: FlowOutcome) -> Dict[str, Any]:
    """Consistency of a verdict with the parity barrier: ending next to a cone point means collapsing into it."""
    near = out.final.min_cone_distance() < 0.01 * s.L
    ok = out.verdict in FlowOutcome.VERDICTS
    if out.verdict == "ConeCollapse":
        pole = out.collapse_pole
        ok &= out.cone_point is not None and pole is not None and near
    elif out.verdict == "LimitGeodesic":
        ok &= out.geodesic is not None and out.geodesic.in_regular_part and not near
    elif out.verdict == "RoundPoint":
        ok &= not near
    else:
        ok &= not near
    return {"verdict": out.verdict, "cone_point": out.cone_point, "near_cone": near, "consistent": ok}


def crit_2(ctx) -> CriterionResult:
    rows = []
    for case in regression_loops():
        out = evolve(case["surface"], case["loop"], Budget(max_time=30.0))
        rows.append({"case": case["name"], **trichotomy_check(case["surface"], out)})
    ok = len(rows) >= 20 and all(r["consistent"] for r in rows)
    counts: Dict[str, int] = {}
    for r in rows:
        counts[r["verdict"]] = counts.get(r["verdict"], 0) + 1
    note = f"{sum(r['consistent'] for r in rows)}/{len(rows)} consistent, " + \
        ", ".join(f"{k}={v}" for k, v in sorted(counts.items()))
    return CriterionResult("2", "trichotomy and parity barrier", ok, {"runs": rows, "counts": counts},
                           300, note=note)


def avoidance_pairs() -> List[Dict[str, Any]]:
    rs, fb, fb32 = round_sphere(), football(3, 1), football(3, 2)
    fb52, neck, bump, fc = football(5, 2), load_surface("neck"), load_surface("bumped_spindle"), flat_cone(3)
    n = 96
    waist = LoopState.from_geodesic(fb, closed_from_parallel(fb, fb.waist()[0]), 128)

    def par(s, r, m=n):
        return LoopState.parallel(s, r, m)

    def wave(s, r, a, m=n):
        return LoopState.graph(s, lambda th: r + a * np.cos(2 * th), m)

    return [
        {"name": "sphere latitudes", "surface": rs, "a": par(rs, 0.8), "b": par(rs, 1.2)},
        {"name": "sphere cap and wave", "surface": rs, "a": par(rs, 0.5), "b": wave(rs, 1.0, 0.05)},
        {"name": "football nested at cone", "surface": fb, "a": par(fb, 0.5), "b": par(fb, 1.0)},
        {"name": "football loop vs waist", "surface": fb, "a": par(fb, 1.0), "b": waist, "static_b": True},
        {"name": "football smooth cap", "surface": fb, "a": par(fb, 2.4), "b": par(fb, 2.8)},
        {"name": "(3,2) nested", "surface": fb32, "a": par(fb32, 0.6), "b": par(fb32, 1.2)},
        {"name": "(5,2) south cone", "surface": fb52, "a": par(fb52, 2.2), "b": par(fb52, 2.7)},
        {"name": "neck north bulge", "surface": neck, "a": par(neck, 1.0), "b": par(neck, 2.0)},
        {"name": "bumped wave", "surface": bump, "a": par(bump, 0.8), "b": wave(bump, 1.3, 0.05)},
        {"name": "flat cone circles", "surface": fc, "a": par(fc, 0.4), "b": par(fc, 0.8)},
    ]


def crit_3(ctx) -> CriterionResult:
    rows = []
    for pr in avoidance_pairs():
        res = avoidance_check(pr["surface"], pr["a"], pr["b"], static_b=pr.get("static_b", False))
        rows.append({"pair": pr["name"], "violated": res["violated"], "min_distance": res["min_distance"],
                     "fates": res["fates"]})
    ok = len(rows) == 10 and not any(r["violated"] for r in rows)
    return CriterionResult("3", "avoidance", ok, {"pairs": rows}, 120,
                           note=f"{sum(not r['violated'] for r in rows)}/{len(rows)} pairs disjoint")


def _bumped_sweep(ctx):
    if "bumped_sweep" not in ctx:
        ctx["bumped_sweep"] = sweep_separating_geodesic(load_surface("bumped_spindle"),
                                                        threads=ctx.get("threads", 1))
    return ctx["bumped_sweep"]


def crit_4(ctx) -> CriterionResult:
    fb = football(3, 1)
    ra = sweep_separating_geodesic(fb, threads=ctx.get("threads", 1))
    target = 2 * math.pi * fb.waist()[1]
    err_a = abs(ra["geodesic"].length - target)
    rb = _bumped_sweep(ctx)
    g = rb["geodesic"]
    ok_b = g.separating and g.in_regular_part and rb["residual"] < 1e-6
    ok = err_a < 1e-5 and ok_b
    m = {"a": {"length": ra["geodesic"].length, "target": target, "error": err_a},
         "b": {"length": g.length, "residual": rb["residual"], "separating": g.separating,
               "in_regular_part": g.in_regular_part, "criterion": rb["criterion"]}}
    return CriterionResult("4", "separating geodesic", ok, m, 600,
                           note=f"(a) |len - 2pi max f| = {err_a:.1e}; (b) residual {rb['residual']:.1e}, "
                                f"separating={g.separating}, regular={g.in_regular_part}")


def cone_rays(n_total: int = 1002) -> List[Dict[str, Any]]:
    """Rays aimed at the apex of flat cones of order 2..7; the cover is flat so the development is a line."""
    orders = range(2, 8)
    per = n_total // len(orders)
    rows = []
    rng = np.random.default_rng(20240601)
    for p in orders:
        s = flat_cone(p)
        for _ in range(per):
            r0 = float(rng.uniform(0.5, 2.0))
            th0 = float(rng.uniform(0.0, 2 * math.pi))
            ell = r0 + float(rng.uniform(0.3, 1.5))
            path = shoot(s, (r0, th0), math.pi, ell)
            ev = path.events
            r1, th1, _ = path.end_state()
            # straight development: exit radius ell - r0, exit angle theta0 + pi/p (mod 2 pi / p symmetry)
            dev = abs(r1 - (ell - r0))
            rows.append({"p": p, "kinds": [e.kind for e in ev], "radial_defect": dev,
                         "cover_defect": max([e.cover_defect for e in ev], default=math.inf)})
    return rows


def crit_5(ctx) -> CriterionResult:
    rows = cone_rays()
    bad = 0
    worst = 0.0
    for r in rows:
        want = "Reflect" if r["p"] % 2 == 0 else "PassThrough"
        if r["kinds"] != [want]:
            bad += 1
        worst = max(worst, r["radial_defect"], r["cover_defect"])
    ok = bad == 0 and worst < 1e-9 and len(rows) >= 1000
    return CriterionResult("5", "cone-event parity", ok,
                           {"rays": len(rows), "misclassified": bad, "max_development_defect": worst}, 60,
                           note=f"{len(rows) - bad}/{len(rows)} rays classified, development defect {worst:.1e}")


def crit_6(ctx) -> CriterionResult:
    s = round_sphere()
    c = closed_from_parallel(s, 0.5 * math.pi)
    rows = []
    for m in range(1, 7):
        jd = jacobi_index(s, c, m)
        rows.append({"m": m, "index": jd.index, "nullity": jd.nullity})
    ok = all(r["index"] == 2 * r["m"] - 1 for r in rows) and rows[0]["nullity"] == 2
    return CriterionResult("6", "index growth", ok, {"iterates": rows}, 10,
                           note="ind(c^m) = " + ",".join(str(r["index"]) for r in rows)
                                + f"; nullity(c) = {rows[0]['nullity']}")


def crit_7(ctx) -> CriterionResult:
    rows = []
    rs, fb = round_sphere(), football(3, 1)
    cases = [("equator", rs, closed_from_parallel(rs, 0.5 * math.pi), "GradientDescent", 0.01),
             ("spindle waist", fb, closed_from_parallel(fb, fb.waist()[0]), "MidpointShortening", 0.0)]
    for name, s, c, mode, noise in cases:
        want = (c.jacobi.index, c.jacobi.nullity)
        for k in (16, 32, 64):
            bl = BrokenLoop.from_geodesic(s, c, k)
            if noise:
                rng = np.random.default_rng(k)
                bl = bl.with_points(bl.r + noise * rng.standard_normal(k), bl.theta)
            res = relax_broken(s, bl, mode)
            rows.append({"case": name, "k": k, "discrete": [res.index, res.nullity], "jacobi": list(want),
                         "grad_norm": res.grad_norm})
    ok = all(tuple(r["discrete"]) == tuple(r["jacobi"]) for r in rows)
    return CriterionResult("7", "broken-geodesic equality", ok, {"runs": rows}, 120,
                           note=f"{sum(tuple(r['discrete']) == tuple(r['jacobi']) for r in rows)}/{len(rows)} "
                                "(index, nullity) pairs match")


def crit_8(ctx) -> CriterionResult:
    th = ctx.get("threads", 1)
    rs = round_sphere()
    c = closed_from_parallel(rs, 0.5 * math.pi)
    sa = bk.sample_annulus(rs, c, 32, 32, threads=th)
    ok_a = not sa.partial
    dt = np.abs((sa.t_prime - sa.t[:, None] + 0.5 * c.length) % c.length - 0.5 * c.length)
    da = np.abs(sa.alpha_prime - sa.alpha[None, :])
    id_err = float(max(dt.max(), da.max())) if ok_a else math.inf
    ok_a &= id_err < 1e-4

    fb = football(3, 1)
    w = closed_from_parallel(fb, fb.waist()[0])
    sb = bk.sample_annulus(fb, w, 32, 32, threads=th)
    row = 0.0
    for t in sb.t:
        t1, a1, _ = bk.birkhoff_point(fb, w, t, 0.5 * math.pi)
        row = max(row, abs(bk._wrap_len(t1 - t, w.length)), abs(a1 - 0.5 * math.pi))
    dev = np.abs(sb.jac_det[sb.complete] - 1.0)
    frac = float(np.mean(dev < 1e-3)) * float(np.mean(sb.complete))
    bk.extend_boundary(fb, w, sb)
    inv = bk.boundary_inverse_check(sb)
    ok_b = row < 1e-5 and frac >= 0.99 and inv < 1e-4
    m = {"a": {"identity_error": id_err, "partial": sa.partial},
         "b": {"meridian_row_error": row, "jacobian_fraction": frac, "jacobian_max_dev": float(dev.max()),
               "boundary_inverse": inv, "boundary_status": sb.boundary["status"]}}
    return CriterionResult("8", "Birkhoff structure", ok_a and ok_b, m, 600,
                           note=f"(a) identity err {id_err:.1e}; (b) row {row:.1e}, "
                                f"|det J - 1| < 1e-3 at {100 * frac:.1f}%, inverse {inv:.1e}")


PERIODIC_FLOOR = 2


def crit_9(ctx) -> CriterionResult:
    s = load_surface("bumped_spindle")
    c = _bumped_sweep(ctx)["geodesic"]
    smp = bk.sample_annulus(s, c, 16, 16, threads=ctx.get("threads", 1))
    res = bk.find_periodic_points(s, c, smp, 3)
    prim = [p for p in res["points"] if p["iterate_of"] is None]
    rows = [{"period": p["period"], "length": p["geodesic"].length, "defect": p["defect"],
             "crossings": p["crossings"], "iterate_of": p["iterate_of"]} for p in res["points"]]
    ok = (len(prim) >= PERIODIC_FLOOR and all(p["defect"] < 1e-10 for p in prim)
          and all(p["crossings"] == 2 * p["period"] for p in res["points"]))
    return CriterionResult("9", "periodic points", ok, {"points": rows, "distinct": len(prim),
                                                        "floor": PERIODIC_FLOOR}, 900,
                           note=f"{len(prim)} distinct geodesics (floor {PERIODIC_FLOOR}), "
                                f"max defect {max([p['defect'] for p in prim], default=math.nan):.1e}")


def neck_bulge_geodesic(s):
    """Closed parallel on the southern bulge of the neck spindle."""
    r = max(r for r, sgn in s.critical_radii() if sgn < 0)
    return closed_from_parallel(s, r)


def crit_10(ctx) -> CriterionResult:
    s = load_surface("neck")
    c = neck_bulge_geodesic(s)
    res = cascade(s, c)
    lengths = [g.length for g in res["geodesics"]]
    last = res["geodesics"][-1]
    no_pair = not has_conjugate_pair(s, last)
    dec = all(b < a for a, b in zip(lengths, lengths[1:]))
    ok = len(res["stages"]) >= 1 and no_pair and dec
    return CriterionResult("10", "cascade step", ok,
                           {"lengths": lengths, "stages": len(res["stages"]), "terminal_conjugate_pair": not no_pair},
                           900, note=f"{len(res['stages'])} stage(s), lengths "
                                     + " > ".join(f"{x:.4f}" for x in lengths)
                                     + f", terminal conjugate pair: {not no_pair}")


CRITERIA: Dict[str, Callable] = {"1": crit_1, "2": crit_2, "3": crit_3, "4": crit_4, "5": crit_5,
                                 "6": crit_6, "7": crit_7, "8": crit_8, "9": crit_9, "10": crit_10}


def run_criterion(cid: str, ctx: Optional[dict] = None) -> CriterionResult:
    ctx = {} if ctx is None else ctx
    t0 = time.perf_counter()
    try:
        res = CRITERIA[cid](ctx)
    except Exception as exc:  # a crash is a failed criterion, reported honestly
        res = CriterionResult(cid, CRITERIA[cid].__name__, False, {"error": f"{type(exc).__name__}: {exc}"},
                              math.inf, note=f"raised {type(exc).__name__}: {exc}")
    res.runtime = time.perf_counter() - t0
    return res


def report_text(results: List[CriterionResult]) -> str:
    return dumps({"criteria": [r.to_dict() for r in results]})


def run_suite(ids: Optional[List[str]] = None, *, threads: int = 1, replay: bool = True,
              echo: Optional[Callable[[str], None]] = None) -> Dict[str, Any]:
    """Run criteria 1..10 and, with ``replay``, a second pass compared byte for byte (criterion 11)."""
    ids = list(ids or CRITERIA)
    ctx: Dict[str, Any] = {"threads": threads}
    results = []
    for cid in ids:
        r = run_criterion(cid, ctx)
        results.append(r)
        if echo:
            echo(r.line())
    text = report_text(results)
    out = {"results": results, "report": text}
    if replay:
        t0 = time.perf_counter()
        ctx2: Dict[str, Any] = {"threads": threads}
        text2 = report_text([run_criterion(cid, ctx2) for cid in ids])
        same = text == text2
        r11 = CriterionResult("11", "replay determinism", same,
                              {"bytes": len(text), "identical": same}, 2 * sum(r.runtime for r in results) + 60,
                              runtime=time.perf_counter() - t0,
                              note="reports byte-identical" if same else "reports differ")
        results.append(r11)
        if echo:
            echo(r11.line())
    out["timings"] = {r.cid: {"runtime": r.runtime, "limit": r.limit, "in_time": r.in_time} for r in results}
    out["all_passed"] = all(r.ok for r in results)
    return out
