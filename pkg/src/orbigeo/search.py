"""Existence machinery: sweep-out bisection, broken-geodesic relaxation and the cascade."""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from . import _kernels as kr
from .csf import Budget, FlowOutcome, LoopState, evolve, hausdorff
from .errors import (BracketNotFound, DegenerateToPoint, NoShorterLoop, OrbigeoError,
                     PreconditionError, StageFailure, SubdivisionTooCoarse)
from .geodesic import (TWO_PI, ClosedGeodesic, LoopCurve, check_return_condition,
                       find_closed_geodesic, has_conjugate_pair, ode_residual, shoot)
from .surface import ConeSurface, gauss_curvature

S_TOL = 1e-4
DIST_TOL = 1e-4
GRAD_TOL = 1e-9
NSUB = 8


# ---------------------------------------------------------------------------
# sweep-out


def sweep_radius(surface: ConeSurface, s: float) -> float:
    """Member s of the latitude family: r_guard at s = 0 up to L - r_guard at s = 1."""
    a = float(surface.r_guard)
    return a + s * (surface.L - 2.0 * a)


def _sweep_run(surface: ConeSurface, s: float, n: int, budget) -> Dict[str, Any]:
    loop = LoopState.parallel(surface, sweep_radius(surface, s), n)
    out = evolve(surface, loop, budget, history_stride=0.02 * surface.L ** 2 / TWO_PI)
    rec = {"s": float(s), "verdict": out.verdict, "collapse_pole": out.collapse_pole,
           "T": out.collapse_time, "final_time": out.final_time}
    return {"record": rec, "outcome": out}


def _least_curved_frame(surface: ConeSurface, out: FlowOutcome) -> LoopState:
    from .csf import curvature_normal
    best, kbest = None, math.inf
    for fr in out.history:
        if fr.n < 16:
            continue
        k = float(np.max(curvature_normal(surface, fr)["k"]))
        if k < kbest:
            best, kbest = fr, k
    if best is None:
        raise DegenerateToPoint("no usable frame in the flow history")
    return best


def sweep_separating_geodesic(surface: ConeSurface, n_coarse: int = 9, budget=None, *,
                              n_vertices: int = 128, s_tol: float = S_TOL,
                              threads: int = 1) -> Dict[str, Any]:
    """Bisect the latitude sweep-out between runs collapsing toward opposite poles."""
    surface.simply_connected_check(strict=True)
    budget = budget or Budget(max_time=50.0 * surface.L ** 2)
    ss = (np.arange(n_coarse) + 1.0) / (n_coarse + 1.0)
    runs = _map(lambda s: _sweep_run(surface, float(s), n_vertices, budget), ss, threads)
    trace = [r["record"] for r in runs]

    def finish(run, how):
        out = run["outcome"]
        src = out.final if out.verdict == "LimitGeodesic" else _least_curved_frame(surface, out)
        c = out.geodesic if out.geodesic is not None else _polish_frame(src)
        _verify_separating(surface, c)
        return {"geodesic": c, "trace": trace, "criterion": how,
                "residual": ode_residual(c.path)}

    for run in runs:
        if run["outcome"].verdict == "LimitGeodesic" and run["outcome"].geodesic is not None \
                and run["outcome"].geodesic.separating:
            return finish(run, "limit geodesic on the coarse grid")
    bracket = None
    for a, b in zip(runs[:-1], runs[1:]):
        pa, pb = a["record"]["collapse_pole"], b["record"]["collapse_pole"]
        if pa and pb and pa != pb and a["outcome"].verdict != "LimitGeodesic":
            bracket = [a, b]
            break
    if bracket is None:
        raise BracketNotFound("no adjacent sweep members collapse toward opposite poles",
                              {"trace": trace})
    lo, hi = bracket
    while hi["record"]["s"] - lo["record"]["s"] > s_tol:
        mid = _sweep_run(surface, 0.5 * (lo["record"]["s"] + hi["record"]["s"]), n_vertices, budget)
        trace.append(mid["record"])
        v = mid["outcome"]
        if v.verdict == "LimitGeodesic" and v.geodesic is not None:
            return finish(mid, "limit geodesic during bisection")
        if v.collapse_pole == lo["record"]["collapse_pole"]:
            lo = mid
        elif v.collapse_pole == hi["record"]["collapse_pole"]:
            hi = mid
        else:
            break
    longest = max((lo, hi), key=lambda r: r["outcome"].final_time)
    return finish(longest, "pole attribution bracket below s_tol; longest run polished")


def _polish_frame(frame: LoopState) -> ClosedGeodesic:
    from .csf import _polish
    return _polish(frame)


def _verify_separating(surface: ConeSurface, c: ClosedGeodesic):
    if not (c.separating and c.in_regular_part):
        raise BracketNotFound("polished geodesic is not separating in the regular part",
                              {"report": c.report()})


def _map(fn, items, threads: int):
    items = list(items)
    if threads and threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


# ---------------------------------------------------------------------------
# broken geodesics


def convexity_radius(surface: ConeSurface, n: int = 400) -> float:
    """Conservative convexity radius pi / (2 sqrt(K_max)), capped at L / 4."""
    rs = np.linspace(surface.r_guard, surface.L - surface.r_guard, n)
    ths = np.linspace(0.0, TWO_PI, 16, endpoint=False) if surface.has_bump else [0.0]
    kmax = max(gauss_curvature(surface, (r, t)) for r in rs for t in ths)
    cap = 0.25 * surface.L
    return cap if kmax <= 0 else min(cap, 0.5 * math.pi / math.sqrt(kmax))


@dataclass
class BrokenLoop:
    """k control points joined by shortest geodesic segments, each run over time 1/k."""

    surface: ConeSurface
    r: np.ndarray
    theta: np.ndarray
    winding: int = 1
    _V: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.r = np.ascontiguousarray(self.r, dtype=float)
        self.theta = np.ascontiguousarray(self.theta, dtype=float)
        if len(self.r) < 4:
            raise PreconditionError("a broken loop needs at least 4 control points")
        lo = self.surface.params[kr.RHO_N] * kr.HYST
        hi = self.surface.L - self.surface.params[kr.RHO_S] * kr.HYST
        if np.any(self.r <= lo) or np.any(self.r >= hi):
            raise PreconditionError("control points must stay in the base chart")

    @property
    def k(self) -> int:
        return len(self.r)

    @property
    def shift(self) -> float:
        return TWO_PI * self.winding

    def _solve(self):
        if self._V is None:
            V = np.zeros((self.k, 4))
            nxt = np.append(self.theta[1:], self.theta[0] + self.shift)
            V[:, 0] = np.roll(self.r, -1) - self.r
            V[:, 1] = nxt - self.theta
            self._V = V
        lens, ok = kr.broken_segments(self.surface.params, self.r, self.theta, self.shift, NSUB, self._V)
        if not ok:
            raise SubdivisionTooCoarse("a segment boundary problem failed to converge")
        return lens

    def segment_lengths(self) -> np.ndarray:
        return self._solve()

    def energy(self) -> float:
        lens = self._solve()
        return float(self.k * np.sum(lens ** 2))

    def length(self) -> float:
        return float(np.sum(self._solve()))

    def gradient(self) -> np.ndarray:
        self._solve()
        G = np.empty(2 * self.k)
        kr.broken_gradient(self.surface.params, self.r, self.theta, self._V, G)
        return G

    def hessian(self, eps: float = 1e-6) -> np.ndarray:
        self._solve()
        H, ok = kr.broken_hessian(self.surface.params, self.r, self.theta, self.shift, NSUB,
                                  self._V.copy(), eps)
        if not ok:
            raise SubdivisionTooCoarse("segment problems failed while differentiating")
        return 0.5 * (H + H.T)

    def moved(self, step: np.ndarray) -> "BrokenLoop":
        """Displace control points by orthonormal-frame components ``step`` (length 2k)."""
        P = self.surface.params
        dr = np.empty(self.k)
        dt = np.empty(self.k)
        for i in range(self.k):
            f = kr.profile(P, self.r[i])[0]
            e = math.exp(-kr.bump(P, self.r[i], self.theta[i])[0])
            dr[i] = step[2 * i] * e
            dt[i] = step[2 * i + 1] * e / f
        V = None if self._V is None else self._V.copy()
        return BrokenLoop(self.surface, self.r + dr, self.theta + dt, self.winding, V)

    def with_points(self, r, theta) -> "BrokenLoop":
        V = None if self._V is None else self._V.copy()
        return BrokenLoop(self.surface, r, theta, self.winding, V)

    def polygon(self, per_segment: int = 8) -> LoopState:
        """Dense polygon through the segments (as a flow state)."""
        self._solve()
        P = self.surface.params
        rs, ts = [], []
        for i in range(self.k):
            y = np.array([self.r[i], self.theta[i], self._V[i, 0], self._V[i, 1]])
            rs.append(self.r[i])
            ts.append(self.theta[i])
            for j in range(1, per_segment):
                e = kr.fixed_dp5(0, y, j / per_segment, NSUB, P)
                rs.append(e[0])
                ts.append(e[1])
        return LoopState(self.surface, np.array(rs), np.array(ts))

    @classmethod
    def from_geodesic(cls, surface: ConeSurface, c: ClosedGeodesic, k: int, offset: float = 0.0):
        s = (np.arange(k) + offset) * c.length / k
        st = c.path.states(s)
        th = np.unwrap(st["theta"])
        return cls(surface, st["r"], th, int(round(c.winding)) or 1)

    @classmethod
    def from_points(cls, surface: ConeSurface, r, theta):
        th = np.unwrap(np.asarray(theta, dtype=float))
        return cls(surface, r, th, int(round(kr.winding(th))))


def default_subdivision(surface: ConeSurface, length: float) -> int:
    return int(math.ceil(4.0 * length / convexity_radius(surface)))


@dataclass
class RelaxResult:
    loop: BrokenLoop
    index: Optional[int]
    nullity: Optional[int]
    eigenvalues: Optional[np.ndarray]
    energy_history: List[float]
    grad_norm: float
    iterations: int
    newton_iterations: int
    degenerate: bool
    mode: str
    descent_steps: List[bool] = field(default_factory=list)

    def report(self) -> Dict[str, Any]:
        return {"k": self.loop.k, "index": self.index, "nullity": self.nullity,
                "energy": self.energy_history[-1], "length": self.loop.length(),
                "grad_norm": self.grad_norm, "iterations": self.iterations,
                "newton_iterations": self.newton_iterations, "degenerate": self.degenerate,
                "mode": self.mode}


def _check_convex(loop: BrokenLoop, rc: float):
    lens = loop.segment_lengths()
    if np.max(lens) >= rc:
        raise SubdivisionTooCoarse("a segment is longer than the convexity radius",
                                   {"max_segment": float(np.max(lens)), "convexity_radius": rc})


def midpoint_half_sweep(loop: BrokenLoop, parity: int) -> BrokenLoop:
    """Replace every control point of the given parity by the midpoint of its neighbours' segment.

    A replacement is kept only when it does not raise the energy, so the
    energy sequence is non-increasing by construction.
    """
    P = loop.surface.params
    r = loop.r.copy()
    th = loop.theta.copy()
    k = loop.k
    shift = loop.shift
    for i in range(parity, k, 2):
        im, ip = (i - 1) % k, (i + 1) % k
        t_im = th[im] - (shift if i == 0 else 0.0)
        t_ip = th[ip] + (shift if ip == 0 else 0.0)
        vr, vt, _, _, ok = kr.seg_solve(P, r[im], t_im, r[ip], t_ip, r[ip] - r[im], t_ip - t_im, NSUB)
        if not ok:
            continue
        mr, mt = kr.seg_midpoint(P, r[im], t_im, vr, vt, NSUB)
        if i == 0:
            mt += shift
        old = _local_energy(P, r, th, i, shift, k)
        keep_r, keep_t = r[i], th[i]
        r[i], th[i] = mr, mt
        if _local_energy(P, r, th, i, shift, k) > old:
            r[i], th[i] = keep_r, keep_t
    return loop.with_points(r, th)


def _local_energy(P, r, th, i, shift, k) -> float:
    im, ip = (i - 1) % k, (i + 1) % k
    tot = 0.0
    for a, b in ((im, i), (i, ip)):
        ta, tb = th[a], th[b] + (shift if b == 0 else 0.0)
        vr, vt, _, _, ok = kr.seg_solve(P, r[a], ta, r[b], tb, r[b] - r[a], tb - ta, NSUB)
        ex, ey = kr._ortho(P, r[a], ta, vr, vt)
        tot += ex * ex + ey * ey
    return tot


def relax_broken(surface: ConeSurface, loop: BrokenLoop, mode: str = "GradientDescent", *,
                 max_iter: int = 500, grad_tol: float = GRAD_TOL, max_newton: int = 30,
                 spectrum: bool = True) -> RelaxResult:
    """Relax a broken loop to a critical point of the discrete energy.

    Critical points of interest are usually saddles, which descent alone
    cannot reach, so a Newton iteration on the gradient is tried first.  If it
    does not converge the chosen descent mode runs (energy never increases in
    this phase) and Newton is tried again.  The discrete index and nullity come
    from the finite-difference Hessian; one kernel direction (sliding the
    control points along the loop) is discounted from the nullity.
    """
    if mode not in ("GradientDescent", "MidpointShortening"):
        raise PreconditionError(f"unknown relaxation mode {mode!r}")
    rc = convexity_radius(surface)
    _check_convex(loop, rc)
    L_min = 1e-6 * surface.L
    hist = [loop.energy()]
    descent = [True]
    polished, g, nit = _newton(loop, grad_tol, max_newton, 0.5 * rc)
    it = 0
    if polished is None:
        g = loop.gradient()
        while np.linalg.norm(g) > grad_tol and it < max_iter:
            it += 1
            if mode == "MidpointShortening":
                loop = midpoint_half_sweep(midpoint_half_sweep(loop, 0), 1)
            else:
                loop = _armijo(loop, g, hist[-1])
            _check_convex(loop, rc)
            hist.append(loop.energy())
            descent.append(True)
            g = loop.gradient()
            if loop.length() < L_min:
                return RelaxResult(loop, None, None, None, hist, float(np.linalg.norm(g)), it, nit,
                                   True, mode, descent)
        if np.linalg.norm(g) > grad_tol:
            polished, g, n2 = _newton(loop, grad_tol, max_newton, 0.5 * rc)
            nit += n2
    if polished is not None:
        loop = polished
        hist.append(loop.energy())
        descent.append(False)
    _check_convex(loop, rc)
    index = nullity = ev = None
    if spectrum:
        H = loop.hessian()
        ev = np.linalg.eigvalsh(H)
        tol = 1e-6 * np.max(np.abs(ev))
        index = int(np.sum(ev < -tol))
        nullity = int(np.sum(np.abs(ev) <= tol)) - 1
    return RelaxResult(loop, index, nullity, ev, hist, float(np.linalg.norm(g)), it, nit,
                       loop.length() < L_min, mode, descent)


def _newton(loop: BrokenLoop, grad_tol: float, max_newton: int, max_disp: float):
    """Newton on the gradient; returns (loop or None, gradient, iterations)."""
    g = loop.gradient()
    if np.linalg.norm(g) <= grad_tol:
        return loop, g, 0
    start_r, start_t = loop.r.copy(), loop.theta.copy()
    cur = loop
    for nit in range(1, max_newton + 1):
        H = cur.hessian()
        step = np.linalg.lstsq(H, -g, rcond=1e-6)[0]
        cap = 0.25 * float(np.min(cur.segment_lengths()))
        if np.max(np.abs(step)) > cap:
            step *= cap / np.max(np.abs(step))
        gn = np.linalg.norm(g)
        lam = 1.0
        trial, gt = None, None
        while lam >= 1e-3:
            try:
                trial = cur.moved(lam * step)
                gt = trial.gradient()
                if np.linalg.norm(gt) < gn:
                    break
            except (SubdivisionTooCoarse, PreconditionError):
                pass
            trial = None
            lam *= 0.5
        if trial is None:
            return None, g, nit
        cur, g = trial, gt
        if np.max(np.abs(cur.r - start_r)) > max_disp:
            return None, loop.gradient(), nit
        if np.linalg.norm(g) <= grad_tol:
            return cur, g, nit
    return None, loop.gradient(), max_newton


def _armijo(loop: BrokenLoop, g: np.ndarray, E0: float) -> BrokenLoop:
    lam = 1.0 / (4.0 * loop.k)
    gg = float(g @ g)
    for _ in range(40):
        try:
            trial = loop.moved(-lam * g)
            if trial.energy() <= E0 - 1e-4 * lam * gg:
                return trial
        except (SubdivisionTooCoarse, PreconditionError):
            pass
        lam *= 0.5
    return loop


# ---------------------------------------------------------------------------
# one-sided shortening and the cascade


@dataclass
class SideLoop:
    broken: BrokenLoop
    loop: LoopState
    length: float
    min_distance: float
    delta: float
    side: int
    attempts: int

    def report(self) -> Dict[str, Any]:
        return {"length": self.length, "min_distance": self.min_distance, "delta": self.delta,
                "side": self.side, "attempts": self.attempts}


def _offset_points(surface: ConeSurface, c: ClosedGeodesic, k: int, side: int, delta: float):
    s = np.arange(k) * c.length / k
    st = c.path.states(s)
    rs, ts = [], []
    for r, th, b in zip(st["r"], st["theta"], st["beta"]):
        rr, tt, _ = shoot(surface, (r, th), b + side * 0.5 * math.pi, delta).end_state()
        rs.append(rr)
        ts.append(tt)
    return np.array(rs), np.unwrap(np.array(ts))


def shorter_side_loop(surface: ConeSurface, c: ClosedGeodesic, side: int = 1, delta: float = 0.1, *,
                      k: Optional[int] = None, margin: float = 1e-6, max_steps: int = 200,
                      check_conjugate: bool = True) -> SideLoop:
    """An embedded loop on one side of c (side +1 = left of c's direction), shorter than c."""
    if side not in (1, -1):
        raise PreconditionError("side must be +1 or -1")
    if check_conjugate and not has_conjugate_pair(surface, c):
        raise PreconditionError("c has no conjugate pair within the horizon")
    curve = LoopCurve(surface, c)
    sgn = side * curve.left_sign()
    P = surface.params
    cs = c.samples(1024)
    k = k or max(16, default_subdivision(surface, c.length))
    d = float(delta)
    for attempt in range(1, 8):
        try:
            r, th = _offset_points(surface, c, k, side, d)
            bl = BrokenLoop(surface, r, th, int(round(kr.winding(th))))
            E = bl.energy()
            for step in range(max_steps):
                if step >= 3 and bl.length() < c.length - margin:
                    break
                g = bl.gradient()
                nb = _armijo(bl, g, E)
                nb = _project_side(nb, curve, sgn, 0.5 * d)
                En = nb.energy()
                if En > E:
                    break
                bl, E = nb, En
            poly = bl.polygon(8)
            md = float(kr.polyline_min_distance(P, poly.r, poly.theta, cs[:, 0].copy(), cs[:, 1].copy()))
            if bl.length() < c.length - margin and md > 0.5 * d and poly.embedded:
                return SideLoop(bl, poly, bl.length(), md, d, side, attempt)
        except (SubdivisionTooCoarse, PreconditionError):
            pass
        d *= 0.5
    raise NoShorterLoop("no shorter loop found on the requested side",
                        {"delta_final": d, "length_c": c.length})


def _project_side(bl: BrokenLoop, curve: LoopCurve, sgn: int, gap: float) -> BrokenLoop:
    sig = sgn * curve.sigma(bl.r, bl.theta)
    if np.all(sig >= gap):
        return bl
    r = bl.r.copy()
    bad = sig < gap
    r[bad] = r[bad] + sgn * (gap - sig[bad])
    return bl.with_points(r, bl.theta)


def reversed_geodesic(surface: ConeSurface, c: ClosedGeodesic) -> ClosedGeodesic:
    return find_closed_geodesic(surface, (c.start, c.beta + math.pi, c.length))


def _find_escaper(surface: ConeSurface, c: ClosedGeodesic, fan_size: int, horizon: float):
    for cc in (c, reversed_geodesic(surface, c)):
        rc = check_return_condition(surface, cc, fan_size, horizon)
        if rc.kind == "Escaper":
            return cc, rc
    return None, None


def cascade(surface: ConeSurface, c: ClosedGeodesic, budget=None, *, fan_size: int = 8,
            horizon_factor: float = 10.0, max_stages: int = 5, delta: float = 0.1,
            n_vertices: int = 128) -> Dict[str, Any]:
    """Iterate: shorter side loop toward an escaper, flow it, polish the limit geodesic."""
    if not has_conjugate_pair(surface, c):
        raise PreconditionError("cascade needs a geodesic with a conjugate pair")
    stages: List[Dict[str, Any]] = []
    found = [c]
    cur = c
    budget = budget or Budget(max_time=100.0 * surface.L ** 2)
    trace: List[Dict[str, Any]] = [{"stage": 0, **_stage_record(surface, c)}]
    for stage in range(1, max_stages + 1):
        horizon = horizon_factor * cur.length
        oriented, rc = _find_escaper(surface, cur, fan_size, horizon)
        if oriented is None:
            if stage == 1:
                raise PreconditionError("every fan ray returns within the horizon: no escaper",
                                        {"horizon": horizon})
            trace.append({"stage": stage, "stop": "no escaper within horizon", "horizon": horizon})
            break
        try:
            side = shorter_side_loop(surface, oriented, 1, delta, check_conjugate=False)
            start = _resample_loop(side.loop, n_vertices)
            out = evolve(surface, start, budget)
            if out.verdict != "LimitGeodesic" or out.geodesic is None:
                raise StageFailure(f"flow ended with {out.verdict}", {"summary": out.summary()})
            g = out.geodesic
            rec = _stage_record(surface, g)
            dist = min(hausdorff(surface, g.samples(256), f.samples(256)) for f in found)
            if not g.separating:
                raise StageFailure("limit geodesic is not separating", rec)
            if dist <= DIST_TOL:
                raise StageFailure("limit geodesic repeats an earlier one", {"distance": dist})
            if g.length >= cur.length - 1e-6:
                raise StageFailure("limit geodesic is not shorter", rec)
        except OrbigeoError as exc:
            if isinstance(exc, StageFailure):
                exc.diagnostics.setdefault("trace", trace)
                raise
            raise StageFailure(f"stage {stage} failed: {exc}", {"trace": trace}) from exc
        rec.update(stage=stage, escaper={"t": rc.t, "alpha": rc.alpha, "horizon": horizon},
                   side_loop=side.report(), distance_to_previous=dist)
        trace.append(rec)
        stages.append(rec)
        found.append(g)
        cur = g
        if not rec["conjugate_pair"]:
            break
    return {"stages": stages, "trace": trace, "geodesics": found,
            "terminal_conjugate_pair": bool(trace[-1].get("conjugate_pair", True)) if stages else None}


def _stage_record(surface: ConeSurface, g: ClosedGeodesic) -> Dict[str, Any]:
    jd = g.jacobi
    return {"length": g.length, "index": None if jd is None else jd.index,
            "nullity": None if jd is None else jd.nullity, "separating": g.separating,
            "conjugate_pair": has_conjugate_pair(surface, g)}


def _resample_loop(loop: LoopState, n: int) -> LoopState:
    from .csf import resample
    return resample(loop, n)
