"""Discrete curve-shortening flow on the regular part of a cone surface.

Loops are polygons stored as radii ``r`` and unwrapped angles ``theta``.  Each
vertex is moved in its own chart (base chart or the smooth cover around the
nearest pole) by a second-order exponential-map step of ``dt * k N``, with a
small tangential redistribution term that keeps spacings even.  The stepping
itself lives in :func:`orbigeo._kernels.csf_advance`; this module adds the
bookkeeping: resampling, coarsening, history, verdicts and diagnostics.
"""

import math
import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.interpolate import CubicSpline

from . import _kernels as kr
from .errors import (EmbeddingLost, PreconditionError, StepRejected)
from .geodesic import (ClosedGeodesic, TWO_PI, azimuthal_projection, find_closed_geodesic, shoot)
from .surface import ConeSurface

C_CFL = 0.4
EPS_STAT = 1e-5
STAT_WINDOW = 50
ROUND_TOL = 0.1
MU_TANGENT = 0.2
LEN_TOL = 1e-9
CHUNK = 200
N_MIN = 32
COARSEN_AT = 0.7

_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)


# ---------------------------------------------------------------------------
# area and enclosure


def _area_primitive(surface: ConeSurface, r, theta) -> np.ndarray:
    """G(r, theta) = integral of e^{2u} f from the north pole out to r."""
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if surface.kind == "flat_cone":
        return r * r / (2.0 * surface.p)
    om = surface.omega
    G = np.zeros_like(r)
    for j, b in enumerate(surface.coefficients, start=1):
        G += b * (1.0 - np.cos(j * om * r)) / (j * om)
    if surface.has_bump:
        bp = surface.bump
        lo, hi = bp.support()
        top = np.clip(r, lo, hi)
        half = 0.5 * (top - lo)
        nodes = lo + half[..., None] * (_GL_X + 1.0)
        u = bp.amplitude * _psi_np((nodes - bp.center) / bp.width) * np.cos(
            bp.mode * (theta[..., None] - bp.phase))
        G += half * np.sum(_GL_W * (np.exp(2.0 * u) - 1.0) * surface.f(nodes), axis=-1)
    return G


def _psi_np(x):
    out = np.zeros_like(x)
    m = np.abs(x) < 1.0
    out[m] = np.exp(1.0 - 1.0 / (1.0 - x[m] ** 2))
    return out


def total_area(surface: ConeSurface) -> float:
    if surface.kind == "flat_cone":
        return math.inf
    th = np.linspace(0.0, TWO_PI, 256, endpoint=False)
    return float(np.mean(_area_primitive(surface, np.full_like(th, surface.L), th)) * TWO_PI)


def signed_north_area(surface: ConeSurface, r: np.ndarray, theta: np.ndarray) -> float:
    """Green's-theorem sum of G dtheta over the closed polygon (midpoint rule)."""
    t_next = np.append(theta[1:], theta[0] + TWO_PI * round(kr.winding(theta)))
    dth = t_next - theta
    rm = 0.5 * (r + np.roll(r, -1))
    return float(np.sum(_area_primitive(surface, rm, theta + 0.5 * dth) * dth))


# ---------------------------------------------------------------------------
# loop state


@dataclass
class LoopState:
    """A closed polygon in the regular part (vertex radii, unwrapped angles) at time t."""

    surface: ConeSurface
    r: np.ndarray
    theta: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.r = np.ascontiguousarray(self.r, dtype=float)
        self.theta = np.ascontiguousarray(self.theta, dtype=float)
        if self.r.shape != self.theta.shape or self.r.ndim != 1 or len(self.r) < 3:
            raise PreconditionError("a loop needs matching 1-D vertex arrays with >= 3 vertices")

    @property
    def n(self) -> int:
        return len(self.r)

    @property
    def length(self) -> float:
        return float(kr.loop_length(self.surface.params, self.r, self.theta))

    @property
    def winding(self) -> int:
        return int(round(kr.winding(self.theta)))

    @property
    def embedded(self) -> bool:
        if abs(self.winding) > 1:
            return False
        x, y = azimuthal_projection(self.surface, self.r, self.theta)
        return not kr.closed_polyline_self_intersects(x, y)

    def spacings(self) -> np.ndarray:
        n = self.n
        KX, KY, SP = np.empty(n), np.empty(n), np.empty(n)
        kr.loop_curvature(self.surface.params, self.r, self.theta, KX, KY, SP)
        return SP

    def diameter(self) -> float:
        return float(kr.loop_diameter(self.surface.params, self.r, self.theta))

    def min_cone_distance(self) -> float:
        d = [self.r if c.pole_id == "north" else self.surface.L - self.r
             for c in self.surface.singular_points]
        return float(min(np.min(x) for x in d)) if d else math.inf

    def components(self) -> Dict[str, Any]:
        """Areas of the two complementary components and the pole on the smaller side."""
        s = self.surface
        w = self.winding
        a_n = abs(signed_north_area(s, self.r, self.theta))
        if w == 0:
            return {"winding": 0, "small_area": a_n, "small_pole": None, "other_area": None}
        if s.q == 0:
            return {"winding": w, "small_area": a_n, "small_pole": s.cone_north, "other_area": math.inf}
        a_s = total_area(s) - a_n
        pole = s.cone_north if a_n <= a_s else s.cone_south
        return {"winding": w, "small_area": min(a_n, a_s), "small_pole": pole,
                "other_area": max(a_n, a_s)}

    @property
    def enclosed_cones(self) -> List[str]:
        """Cone points (order >= 2) inside the smaller complementary component."""
        pole = self.components()["small_pole"]
        return [pole.pole_id] if pole is not None and pole.singular else []

    def isoperimetric_ratio(self) -> float:
        """length^2 / (4 pi area) with the area weighted by the order of an enclosed pole."""
        comp = self.components()
        order = comp["small_pole"].order_p if comp["small_pole"] is not None else 1
        A = comp["small_area"]
        return math.inf if A <= 0 else self.length ** 2 * order / (4.0 * math.pi * A)

    def copy(self) -> "LoopState":
        return LoopState(self.surface, self.r.copy(), self.theta.copy(), self.t)

    def to_dict(self) -> Dict[str, Any]:
        return {"t": self.t, "n": self.n, "length": self.length,
                "r": self.r.tolist(), "theta": self.theta.tolist()}

    # -- constructors ---------------------------------------------------
    @classmethod
    def parallel(cls, surface: ConeSurface, r0: float, n: int = 256, phase: float = 0.0) -> "LoopState":
        th = phase + np.linspace(0.0, TWO_PI, n, endpoint=False)
        return cls(surface, np.full(n, float(r0)), th)

    @classmethod
    def graph(cls, surface: ConeSurface, radius_fn, n: int = 256) -> "LoopState":
        """Loop r = radius_fn(theta) winding once around the north pole."""
        th = np.linspace(0.0, TWO_PI, n, endpoint=False)
        return cls(surface, np.asarray(radius_fn(th), dtype=float), th)

    @classmethod
    def geodesic_circle(cls, surface: ConeSurface, center, radius: float, n: int = 256) -> "LoopState":
        """Endpoints of n geodesics of length ``radius`` fanned out from ``center``."""
        pts = []
        for b in np.linspace(0.0, TWO_PI, n, endpoint=False):
            r, th, _ = shoot(surface, center, float(b), radius).end_state()
            pts.append((r, th))
        r, th = np.array(pts).T
        return cls(surface, r, _unwrap_loop(th))

    @classmethod
    def from_geodesic(cls, surface: ConeSurface, c: ClosedGeodesic, n: int = 256) -> "LoopState":
        s = np.linspace(0.0, c.length, n, endpoint=False)
        st = c.path.states(s)
        return cls(surface, st["r"], _unwrap_loop(st["theta"]))


def _unwrap_loop(theta: np.ndarray) -> np.ndarray:
    return np.unwrap(np.asarray(theta, dtype=float))


# ---------------------------------------------------------------------------
# single-step operations


def curvature_normal(surface: ConeSurface, loop: LoopState) -> Dict[str, np.ndarray]:
    """Curvature vectors k N per vertex in the orthonormal frame of each vertex.

    Also returns |k| and the curvature signed against the left normal of the
    polygon direction.
    """
    n = loop.n
    KX, KY, SP = np.empty(n), np.empty(n), np.empty(n)
    kr.loop_curvature(surface.params, loop.r, loop.theta, KX, KY, SP)
    tx, ty = _frame_tangents(surface, loop)
    signed = -KX * ty + KY * tx
    return {"kx": KX, "ky": KY, "k": np.hypot(KX, KY), "k_signed": signed, "spacing": SP}


def _frame_tangents(surface: ConeSurface, loop: LoopState):
    n = loop.n
    P = surface.params
    tx, ty = np.empty(n), np.empty(n)
    for i in range(n):
        out = kr.local_frame_points(P, loop.r, loop.theta, i, (i - 1) % n, (i + 1) % n)
        dx, dy = out[7] - out[5], out[8] - out[6]
        h = math.hypot(dx, dy)
        tx[i], ty[i] = (dx / h, dy / h) if h > 0 else (0.0, 0.0)
    return tx, ty


def resample(loop: LoopState, n: Optional[int] = None) -> LoopState:
    """Uniform-in-arclength resampling through a periodic cubic spline.

    Interpolation runs in the planar azimuthal picture centred on the pole
    farther from the loop, which is smooth across either cover chart.
    """
    s = loop.surface
    n = loop.n if n is None else int(n)
    sp = loop.spacings()
    cum = np.concatenate([[0.0], np.cumsum(sp)])
    total = cum[-1]
    south = s.q > 0 and np.mean(loop.r) < 0.5 * s.L
    rho = s.L - loop.r if south else loop.r
    x, y = rho * np.cos(loop.theta), rho * np.sin(loop.theta)
    pts = np.column_stack([np.append(x, x[0]), np.append(y, y[0])])
    spl = CubicSpline(cum, pts, bc_type="periodic")
    q = spl(np.linspace(0.0, total, n, endpoint=False))
    rho_n = np.hypot(q[:, 0], q[:, 1])
    th = np.arctan2(q[:, 1], q[:, 0])
    th = loop.theta[0] + np.unwrap(np.concatenate([[_wrap0(loop.theta[0])], th]))[1:] - _wrap0(loop.theta[0])
    r_n = s.L - rho_n if south else rho_n
    return LoopState(s, r_n, th, loop.t)


def _wrap0(a: float) -> float:
    return (a + math.pi) % TWO_PI - math.pi


def coarsen(loop: LoopState) -> LoopState:
    return LoopState(loop.surface, loop.r[::2].copy(), loop.theta[::2].copy(), loop.t)


def dt_max(loop: LoopState, c_cfl: float = C_CFL) -> float:
    return c_cfl * float(np.min(loop.spacings())) ** 2


def flow_step(surface: ConeSurface, loop: LoopState, dt: float, *, mu: float = MU_TANGENT,
              c_cfl: float = C_CFL) -> LoopState:
    """One explicit step of size dt followed by a spacing check and, if needed, resampling."""
    lim = dt_max(loop, c_cfl)
    if dt > lim * (1 + 1e-12):
        raise PreconditionError("dt exceeds the parabolic stability limit", {"dt": dt, "dt_max": lim})
    n = loop.n
    Rn, Tn, KM, SP = np.empty(n), np.empty(n), np.empty(n), np.empty(n)
    CH, XY, G = np.empty(n, dtype=np.int64), np.empty((n, 2)), np.empty((n, 6))
    _, l0 = kr.csf_step(surface.params, loop.r, loop.theta, dt, mu, Rn, Tn, KM, SP, CH, XY, G)
    new = LoopState(surface, Rn, Tn, loop.t + dt)
    sp = new.spacings()
    mean = float(np.mean(sp))
    if sp.min() < 0.5 * mean or sp.max() > 2.0 * mean:
        new = resample(new)
    l1 = new.length
    if l1 > l0 + LEN_TOL:
        raise StepRejected("length increased during a flow step", {"before": l0, "after": l1, "dt": dt})
    return new


# ---------------------------------------------------------------------------
# evolution


@dataclass
class FlowOutcome:
    """Verdict of an evolved loop plus run diagnostics and sampled history."""

    verdict: str
    final: LoopState
    collapse_time: Optional[float] = None
    point: Optional[Tuple[float, float]] = None
    cone_point: Optional[str] = None
    geodesic: Optional[ClosedGeodesic] = None
    final_time: float = 0.0
    steps: int = 0
    history: List[LoopState] = field(default_factory=list)
    lengths: List[Tuple[float, float]] = field(default_factory=list)
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    VERDICTS = ("RoundPoint", "ConeCollapse", "LimitGeodesic", "BudgetExhausted")

    @property
    def collapse_pole(self) -> Optional[str]:
        """Pole the loop shrank toward (only for collapse verdicts that sit at a pole)."""
        return self.diagnostics.get("collapse_pole")

    def summary(self) -> Dict[str, Any]:
        out = {"verdict": self.verdict, "final_time": self.final_time, "steps": self.steps,
               "final_length": self.final.length, "final_vertices": self.final.n}
        if self.collapse_time is not None:
            out["collapse_time"] = self.collapse_time
        if self.point is not None:
            out["point"] = list(self.point)
        if self.cone_point is not None:
            out["cone_point"] = self.cone_point
        if self.geodesic is not None:
            out["geodesic"] = self.geodesic.report()
        out["diagnostics"] = self.diagnostics
        return out


@dataclass
class Budget:
    max_time: float = math.inf
    max_steps: int = 5_000_000
    max_wall: float = math.inf


def _as_budget(budget) -> Budget:
    if budget is None:
        return Budget()
    if isinstance(budget, Budget):
        return budget
    return Budget(**budget)


def _check_input(loop: LoopState):
    s = loop.surface
    if np.any(loop.r <= 0) or np.any(loop.r >= s.L):
        raise PreconditionError("loop vertices must lie strictly inside (0, L)")
    if loop.min_cone_distance() <= 1e-9 * s.L:
        raise PreconditionError("loop touches a cone point")
    if abs(kr.winding(loop.theta)) > 1.5:
        raise PreconditionError("winding of magnitude >= 2: loop is not embedded")
    if not loop.embedded:
        raise PreconditionError("initial loop is not embedded")


def _collapse_outcome(loop: LoopState, steps: int, history, lengths, diag) -> FlowOutcome:
    s = loop.surface
    comp = loop.components()
    pole = comp["small_pole"]
    order = pole.order_p if pole is not None else 1
    T = loop.t + comp["small_area"] * order / TWO_PI
    diag = dict(diag, iso_ratio=loop.isoperimetric_ratio(), small_area=comp["small_area"])
    if pole is not None and pole.singular:
        diag["collapse_pole"] = pole.pole_id
        return FlowOutcome("ConeCollapse", loop, collapse_time=T, point=(pole.position, 0.0),
                           cone_point=pole.pole_id, final_time=loop.t, steps=steps,
                           history=history, lengths=lengths, diagnostics=diag)
    if pole is not None:
        pt = (pole.position, 0.0)
        diag["collapse_pole"] = pole.pole_id
    else:
        pt = _centroid(loop)
        diag["collapse_pole"] = "north" if pt[0] < 0.5 * s.L else "south"
    if abs(diag["iso_ratio"] - 1.0) > ROUND_TOL:
        diag["note"] = "diameter fell below the stop value but the loop is not round"
        return FlowOutcome("BudgetExhausted", loop, final_time=loop.t, steps=steps, history=history,
                           lengths=lengths, diagnostics=diag)
    return FlowOutcome("RoundPoint", loop, collapse_time=T, point=pt, final_time=loop.t, steps=steps,
                       history=history, lengths=lengths, diagnostics=diag)


def _centroid(loop: LoopState) -> Tuple[float, float]:
    s = loop.surface
    south = s.q > 0 and np.mean(loop.r) > 0.5 * s.L
    rho = s.L - loop.r if south else loop.r
    x, y = np.mean(rho * np.cos(loop.theta)), np.mean(rho * np.sin(loop.theta))
    rc = math.hypot(x, y)
    return (s.L - rc if south else rc), math.atan2(y, x)


def _polish(loop: LoopState) -> ClosedGeodesic:
    """Seed the closure Newton from the vertex farthest from both poles."""
    s = loop.surface
    i = int(np.argmax(np.minimum(loop.r, s.L - loop.r)))
    n = loop.n
    out = kr.local_frame_points(s.params, loop.r, loop.theta, i, (i - 1) % n, (i + 1) % n)
    if out[0] != 0:
        raise PreconditionError("no vertex of the loop lies in the base chart")
    beta = math.atan2(out[8] - out[6], out[7] - out[5])
    return find_closed_geodesic(s, ((loop.r[i], loop.theta[i]), beta, loop.length))


def hausdorff(surface: ConeSurface, a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Hausdorff distance between closed polygons given as (r, theta) rows."""
    a = np.ascontiguousarray(a, dtype=float)
    b = np.ascontiguousarray(b, dtype=float)
    return float(kr.polyline_hausdorff(surface.params, a[:, 0].copy(), a[:, 1].copy(),
                                       b[:, 0].copy(), b[:, 1].copy()))


def evolve(surface: ConeSurface, loop: LoopState, budget=None, *, c_cfl: float = C_CFL,
           mu: float = MU_TANGENT, eps_stat: float = EPS_STAT, stat_window: int = STAT_WINDOW,
           history_stride: Optional[float] = None, polish: bool = True,
           coarsen_vertices: bool = True) -> FlowOutcome:
    """Run the flow until collapse, stationarity or budget exhaustion.

    Collapse times use the area law for the tail below the stop diameter:
    T = t + area * order / (2 pi), with ``order`` the order of the enclosed
    pole (1 when none).
    """
    b = _as_budget(budget)
    _check_input(loop)
    try:
        return _evolve(surface, loop, b, c_cfl, mu, eps_stat, stat_window, history_stride,
                       polish, coarsen_vertices)
    except EmbeddingLost as exc:
        refined = resample(loop, 2 * loop.n)
        out = _evolve(surface, refined, b, 0.5 * c_cfl, mu, eps_stat, stat_window, history_stride,
                      polish, coarsen_vertices)
        out.diagnostics["refined_after"] = str(exc)
        return out


def _evolve(surface, loop, b: Budget, c_cfl, mu, eps_stat, stat_window, history_stride,
            polish, coarsen_vertices) -> FlowOutcome:
    P = surface.params
    L = surface.L
    eps_pt = 1e-3 * L
    loop = loop.copy()
    R, T, t = loop.r, loop.theta, loop.t
    w0 = kr.winding(T)
    h_ref = loop.length / loop.n
    history = [loop.copy()]
    lengths = [(t, loop.length)]
    last_len = lengths[0][1]
    last_hist_t = t
    steps = 0
    stat = 0
    prev_len = -1.0
    retries = 0
    resamples = 0
    coarsenings = 0
    min_cone = loop.min_cone_distance()
    wall0 = time.perf_counter()
    diag: Dict[str, Any] = {}

    def state():
        return LoopState(surface, R, T, t)

    while True:
        if steps >= b.max_steps or t >= b.max_time or time.perf_counter() - wall0 > b.max_wall:
            diag.update(reason="budget", min_cone_distance=min_cone, resamples=resamples,
                        coarsenings=coarsenings)
            return FlowOutcome("BudgetExhausted", state(), final_time=t, steps=steps,
                               history=history, lengths=lengths, diagnostics=diag)
        near = last_len < 40.0 * eps_pt
        chunk = int(min(4 if near else CHUNK, b.max_steps - steps))
        h_c = COARSEN_AT * h_ref if (coarsen_vertices and len(R) >= 2 * N_MIN) else 0.0
        cf = c_cfl * 0.5 ** retries
        R2, T2, t2, k, reason, kmax, stat, ln = kr.csf_advance(
            P, R, T, t, b.max_time, chunk, mu, cf, eps_stat, stat_window, stat, eps_pt,
            0.5, 2.0, LEN_TOL, min(10, chunk), h_c)
        if reason == 6 and k == 0:
            retries += 1
            if retries > 6:
                raise StepRejected("length keeps increasing after halving dt", {"t": t})
            continue
        retries = 0
        R, T, t = R2, T2, t2
        steps += k
        prev_len = ln
        cur = state()
        if not np.all((R > 0) & (R < L)):
            raise EmbeddingLost("a vertex left the surface chart", {"t": t})
        min_cone = min(min_cone, cur.min_cone_distance())
        if reason == 5 or (steps % 1000 < k and not cur.embedded):
            raise EmbeddingLost("loop lost embeddedness", {"t": t, "steps": steps})
        cur_len = cur.length
        if cur_len < (0.93 if near else 0.85) * last_len or (history_stride and t - last_hist_t >= history_stride):
            history.append(cur.copy())
            lengths.append((t, cur_len))
            last_len = cur_len
            last_hist_t = t
        if reason == 1:
            diag.update(reason="time budget", min_cone_distance=min_cone)
            return FlowOutcome("BudgetExhausted", cur, final_time=t, steps=steps, history=history,
                               lengths=lengths, diagnostics=diag)
        if reason == 2:
            history.append(cur.copy())
            lengths.append((t, cur_len))
            diag.update(min_cone_distance=min_cone, final_diameter=cur.diameter(),
                        resamples=resamples, coarsenings=coarsenings)
            return _collapse_outcome(cur, steps, history, lengths, diag)
        if reason == 3:
            diag.update(min_cone_distance=min_cone, kmax=kmax)
            history.append(cur.copy())
            lengths.append((t, cur_len))
            if not polish:
                return FlowOutcome("LimitGeodesic", cur, final_time=t, steps=steps, history=history,
                                   lengths=lengths, diagnostics=diag)
            try:
                c = _polish(cur)
            except Exception as exc:  # polishing failure downgrades the verdict
                diag["polish_failure"] = f"{type(exc).__name__}: {exc}"
                return FlowOutcome("BudgetExhausted", cur, final_time=t, steps=steps,
                                   history=history, lengths=lengths, diagnostics=diag)
            diag["hausdorff_to_polished"] = hausdorff(
                surface, np.column_stack([cur.r, cur.theta]), c.samples(512))
            return FlowOutcome("LimitGeodesic", cur, geodesic=c, final_time=t, steps=steps,
                               history=history, lengths=lengths, diagnostics=diag)
        if reason == 4:
            cur = resample(cur)
            R, T = cur.r, cur.theta
            resamples += 1
        elif reason == 7:
            cur = coarsen(cur)
            R, T = cur.r, cur.theta
            coarsenings += 1
        if abs(kr.winding(T) - w0) > 0.5:
            # sliding across a smooth pole is harmless; across a cone point it is not
            pole = surface.cone_north if np.mean(R) < 0.5 * L else surface.cone_south
            if pole is None or pole.singular:
                raise EmbeddingLost("winding number changed", {"t": t})
            w0 = kr.winding(T)


# ---------------------------------------------------------------------------
# avoidance and blow-up


def avoidance_check(surface: ConeSurface, loop_a: LoopState, loop_b: LoopState, budget=None, *,
                    static_b: bool = False, c_cfl: float = C_CFL) -> Dict[str, Any]:
    """Evolve two loops in lockstep and track their minimum distance.

    With ``static_b`` the second curve is held fixed (use it for a closed
    geodesic, which is stationary under the flow).
    """
    b = _as_budget(budget)
    P = surface.params
    _check_input(loop_a)
    if not static_b:
        _check_input(loop_b)
    d0 = float(kr.loops_min_distance(P, loop_a.r, loop_a.theta, loop_b.r, loop_b.theta))
    mean_sp = max(loop_a.length / loop_a.n, loop_b.length / loop_b.n)
    if d0 <= 2.0 * mean_sp:
        raise PreconditionError("loops are not disjoint enough to start",
                                {"distance": d0, "required": 2.0 * mean_sp})
    eps_touch = 1e-4 * surface.L
    eps_pt = 1e-3 * surface.L
    loops = [loop_a.copy(), loop_b.copy()]
    done = [False, static_b]
    refs = [l.length / l.n for l in loops]
    t = 0.0
    dists = [(0.0, d0)]
    steps = 0
    wall0 = time.perf_counter()
    stat = [0, 0]
    fates: List[Optional[str]] = [None, "static" if static_b else None]
    while not all(done):
        if steps >= b.max_steps or t >= b.max_time or time.perf_counter() - wall0 > b.max_wall:
            break
        active = [i for i in range(2) if not done[i]]
        dt = min(c_cfl * float(np.min(loops[i].spacings())) ** 2 for i in active)
        t_next = min(t + CHUNK * dt, b.max_time)
        for i in active:
            lp = loops[i]
            while lp.t < t_next and not done[i]:
                h_c = COARSEN_AT * refs[i] if lp.n >= 2 * N_MIN else 0.0
                R, T, tt, k, reason, _, stat[i], _ = kr.csf_advance(
                    P, lp.r, lp.theta, lp.t, t_next, 10 * CHUNK, MU_TANGENT, c_cfl, EPS_STAT,
                    STAT_WINDOW, stat[i], eps_pt, 0.5, 2.0, LEN_TOL, 10, h_c)
                steps += k
                lp = LoopState(surface, R, T, tt)
                if reason == 4:
                    lp = resample(lp)
                elif reason == 7:
                    lp = coarsen(lp)
                elif reason == 2:
                    done[i] = True
                    fates[i] = "collapse"
                elif reason == 3:
                    done[i] = True
                    fates[i] = "stationary"
                elif reason in (5, 6):
                    done[i] = True
                    fates[i] = f"stopped(reason={reason})"
                if k == 0 and reason == 0:
                    break
            loops[i] = lp
        t = t_next
        d = float(kr.loops_min_distance(P, loops[0].r, loops[0].theta, loops[1].r, loops[1].theta))
        dists.append((t, d))
        if d < eps_touch or any(done[i] for i in range(2) if fates[i] != "static"):
            break
    ds = np.array([d for _, d in dists])
    return {"min_distance": float(ds.min()), "violated": bool(ds.min() < eps_touch),
            "eps_touch": eps_touch, "final_time": t, "fates": fates,
            "distance_monotone": bool(np.all(np.diff(ds) <= 1e-12) or np.all(np.diff(ds) >= -1e-12)),
            "distances": dists}


def blowup_diagnostic(outcome: FlowOutcome, min_frames: int = 10) -> Dict[str, Any]:
    """Classify the rescaled collapse by the isoperimetric ratio of the last frames."""
    if outcome.verdict not in ("RoundPoint", "ConeCollapse"):
        raise PreconditionError("blow-up analysis needs a collapse verdict")
    eps_pt = 1e-3 * outcome.final.surface.L
    frames = [h for h in outcome.history if h.diameter() < 10.0 * eps_pt]
    if len(frames) < min_frames:
        return {"class": "Inconclusive", "frames": len(frames),
                "reason": f"need at least {min_frames} frames inside 10 * eps_pt"}
    T = outcome.collapse_time
    ratios = np.array([f.isoperimetric_ratio() for f in frames])
    scale = np.array([f.length / math.sqrt(max(T - f.t, 1e-300)) for f in frames])
    tail = ratios[-min_frames:]
    if np.all(np.abs(tail - 1.0) < 0.05):
        cls = "SelfShrinkingCircle"
    elif np.all(np.isfinite(tail)) and tail[-1] > 2.0 * tail[0] and tail[-1] > 3.0:
        cls = "StaticLine"
    else:
        cls = "Inconclusive"
    return {"class": cls, "frames": len(frames), "iso_ratios": ratios.tolist(),
            "rescaled_lengths": scale.tolist(), "max_ratio_deviation": float(np.max(np.abs(tail - 1.0)))}
