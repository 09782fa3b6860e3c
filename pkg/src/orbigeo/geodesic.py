"""Orbifold geodesic tracing, closed-geodesic polishing and Jacobi analysis.

Directions are angles ``beta`` in the orthonormal frame (e_r, e_theta) of the
base chart, so ``dr/ds = e^{-u} cos(beta)`` and
``dtheta/ds = e^{-u} sin(beta) / f``.  Inside a cover chart the tracer
integrates the smooth lifted geodesic in Cartesian coordinates; when the lift
passes within ``eps_hit`` of the centre of a cover of order >= 2 a
``ConeEvent`` is recorded.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from . import _kernels as kr
from .errors import (DegenerateToPoint, NoConvergence, NotSymmetric, OutOfChart,
                     PreconditionError, StepFailure, TangentialEncounter)
from .surface import ConePoint, ConeSurface

TWO_PI = 2.0 * math.pi
TOL_ODE = 1e-10
TOL_CLOSE = 1e-10
TOL_NULL = 1e-7
POLISH_TOL = 1e-12


def wrap(a):
    """Wrap angles to [-pi, pi)."""
    return (np.asarray(a) + math.pi) % TWO_PI - math.pi


def _wrap_f(a: float) -> float:
    return (a + math.pi) % TWO_PI - math.pi


@dataclass(frozen=True)
class ConeEvent:
    cone_point: ConePoint
    s: float
    theta_in: float
    theta_out: float
    kind: str
    miss_distance: float
    cover_defect: float

    def to_dict(self) -> Dict[str, Any]:
        return {"pole": self.cone_point.pole_id, "order": self.cone_point.order_p, "s": self.s,
                "theta_in": self.theta_in, "theta_out": self.theta_out, "kind": self.kind,
                "miss_distance": self.miss_distance, "cover_defect": self.cover_defect}


@dataclass(frozen=True)
class Arc:
    start: Tuple[float, float]
    direction: float
    s_start: float
    length: float
    samples: np.ndarray


class _Segment:
    __slots__ = ("chart", "S", "Y", "Q", "theta", "phi", "order")

    def __init__(self, chart, S, Y, Q, theta, phi, order):
        self.chart = chart
        self.S = S
        self.Y = Y
        self.Q = Q
        self.theta = theta
        self.phi = phi
        self.order = order

    def dense(self, s: np.ndarray) -> np.ndarray:
        S = self.S
        i = np.clip(np.searchsorted(S, s, side="right") - 1, 0, len(S) - 2)
        h = S[i + 1] - S[i]
        th = np.where(h > 0, (s - S[i]) / np.where(h > 0, h, 1.0), 0.0)
        Q = self.Q[i]
        poly = Q[:, :, 0] * th[:, None] + Q[:, :, 1] * th[:, None] ** 2 \
            + Q[:, :, 2] * th[:, None] ** 3 + Q[:, :, 3] * th[:, None] ** 4
        return self.Y[i] + h[:, None] * poly, i


class GeodesicPath:
    """A traced geodesic: chart segments plus the cone events met on the way."""

    def __init__(self, surface: ConeSurface, rtol: float, atol: float, jacobi: bool):
        self.surface = surface
        self.rtol = rtol
        self.atol = atol
        self.jacobi = jacobi
        self.segments: List[_Segment] = []
        self.events: List[ConeEvent] = []
        self._tail = None
        self.total_length = 0.0

    # -- tracing ----------------------------------------------------------
    def _trace(self, chart: int, y: np.ndarray, s0: float, s_end: float, theta0: float, h: float):
        surf = self.surface
        P = surf.params
        eps_hit = 1e-9 * surf.L
        s = s0
        while True:
            S, Y, Q, nst, code, h_next = kr.integrate(chart, y, s, s_end, h, self.rtol, self.atol, P,
                                                      2_000_000, True)
            if code in (kr.CODE_STEPFAIL, kr.CODE_MAXSTEPS):
                raise StepFailure("adaptive integrator failed", {"s": float(S[-1]), "chart": chart})
            seg = self._make_segment(chart, S, Y, Q, theta0)
            if nst > 0:
                self.segments.append(seg)
                if chart != 0:
                    self._detect_events(seg, eps_hit)
            s = float(S[-1])
            y = Y[-1].copy()
            h = max(h_next, 1e-6 * surf.L)
            theta_last = float(seg.theta[-1])
            if code == kr.CODE_DONE:
                self._tail = (chart, y, theta_last, h, s)
                self.total_length = s
                return
            # chart switch
            if chart == 0:
                r = y[0]
                if r < 0.5 * surf.L:
                    new = 1
                elif surf.q > 0:
                    new = 2
                else:
                    raise OutOfChart("geodesic left the flat cone patch", {"s": s})
                X, Yc, VX, VY = kr.base_to_cover(P, new, y[0], y[1], y[2], y[3], 0)
                y[0], y[1], y[2], y[3] = X, Yc, VX, VY
                theta0 = theta_last
                chart = new
            else:
                if P[kr.KIND] == 1.0:
                    raise OutOfChart("geodesic left the flat cone patch", {"s": s})
                r, phi, vr, vt = kr.cover_to_base(P, chart, y[0], y[1], y[2], y[3])
                th = theta_last + seg.order * _wrap_f(phi - seg.phi[-1])
                y[0], y[1], y[2], y[3] = r, th, vr, vt
                theta0 = th
                chart = 0

    def _make_segment(self, chart, S, Y, Q, theta0) -> _Segment:
        if chart == 0:
            return _Segment(0, S, Y, Q, Y[:, 1].copy(), None, 1)
        o = self.surface.p if chart == 1 else self.surface.q
        phi_raw = np.arctan2(Y[:, 1], Y[:, 0])
        phi = np.unwrap(phi_raw)
        theta = theta0 + o * (phi - phi[0])
        return _Segment(chart, S, Y, Q, theta, phi_raw, o)

    def _detect_events(self, seg: _Segment, eps_hit: float):
        if seg.order < 2:
            return
        Y = seg.Y
        xv = Y[:, 0] * Y[:, 2] + Y[:, 1] * Y[:, 3]
        idx = np.nonzero((xv[:-1] < 0.0) & (xv[1:] >= 0.0))[0]
        for i in idx:
            def g(s):
                st = seg.dense(np.array([s]))[0][0]
                return st[0] * st[2] + st[1] * st[3]
            a, b = seg.S[i], seg.S[i + 1]
            s_star = brentq(g, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps) if g(b) != 0.0 else b
            st = seg.dense(np.array([s_star]))[0][0]
            miss = math.hypot(st[0], st[1])
            if miss >= eps_hit:
                continue
            o = seg.order
            vx, vy = st[2], st[3]
            th_in = (o * math.atan2(-vy, -vx)) % TWO_PI
            th_out = (o * math.atan2(vy, vx)) % TWO_PI
            kind = "Reflect" if abs(_wrap_f(th_out - th_in)) < 0.5 * math.pi else "PassThrough"
            v0 = Y[i, 2:4]
            v1 = Y[i + 1, 2:4]
            defect = abs(math.atan2(v0[0] * v1[1] - v0[1] * v1[0], v0[0] * v1[0] + v0[1] * v1[1]))
            cone = self.surface.cone_north if seg.chart == 1 else self.surface.cone_south
            self.events.append(ConeEvent(cone, float(s_star), th_in, th_out, kind, miss, defect))

    def extend(self, extra: float):
        """Continue the geodesic by ``extra`` arclength."""
        chart, y, theta, h, s = self._tail
        self._trace(chart, y.copy(), s, s + extra, theta, h)

    # -- evaluation ---------------------------------------------------------
    def raw_states(self, s) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Chart ids, chart states and base theta for the arclength values ``s``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        starts = np.array([seg.S[0] for seg in self.segments])
        k = np.clip(np.searchsorted(starts, s, side="right") - 1, 0, len(self.segments) - 1)
        n = self.segments[0].Y.shape[1]
        out = np.empty((len(s), n))
        charts = np.empty(len(s), dtype=int)
        theta = np.empty(len(s))
        for kk in np.unique(k):
            m = k == kk
            seg = self.segments[kk]
            st, i = seg.dense(s[m])
            out[m] = st
            charts[m] = seg.chart
            if seg.chart == 0:
                theta[m] = st[:, 1]
            else:
                phi = np.arctan2(st[:, 1], st[:, 0])
                theta[m] = seg.theta[i] + seg.order * wrap(phi - seg.phi[i])
        return charts, out, theta

    def states(self, s) -> Dict[str, np.ndarray]:
        """Base-chart quantities r, theta, vr, vt, beta (and Jacobi columns) at ``s``."""
        charts, st, theta = self.raw_states(s)
        P = self.surface.params
        L = self.surface.L
        r = np.empty(len(charts))
        vr = np.empty(len(charts))
        vt = np.empty(len(charts))
        base = charts == 0
        r[base] = st[base, 0]
        vr[base] = st[base, 2]
        vt[base] = st[base, 3]
        for c in (1, 2):
            m = charts == c
            if not np.any(m):
                continue
            o = P[kr.P_N] if c == 1 else P[kr.Q_S]
            X, Y, VX, VY = st[m, 0], st[m, 1], st[m, 2], st[m, 3]
            rr = np.hypot(X, Y)
            with np.errstate(invalid="ignore", divide="ignore"):
                vrr = (X * VX + Y * VY) / rr
                dphi = (X * VY - Y * VX) / (rr * rr)
            r[m] = rr if c == 1 else L - rr
            vr[m] = vrr if c == 1 else -vrr
            vt[m] = o * dphi
        f = self.surface.f(r)
        beta = np.arctan2(f * vt, vr)
        out = {"r": r, "theta": theta, "vr": vr, "vt": vt, "beta": beta, "chart": charts}
        if st.shape[1] > 4:
            out["jac"] = st[:, 4:8]
        return out

    def position(self, s: float) -> Tuple[float, float]:
        st = self.states([s])
        return float(st["r"][0]), float(st["theta"][0])

    def direction(self, s: float) -> float:
        return float(self.states([s])["beta"][0])

    def knots(self) -> np.ndarray:
        return np.unique(np.concatenate([seg.S for seg in self.segments]))

    def sample_grid(self, per_step: int = 4) -> np.ndarray:
        """Knots refined with ``per_step - 1`` interior points in every step."""
        parts = []
        for seg in self.segments:
            S = seg.S
            frac = np.arange(per_step) / per_step
            parts.append((S[:-1, None] + np.diff(S)[:, None] * frac[None, :]).ravel())
        parts.append([self.total_length])
        return np.unique(np.concatenate(parts))

    def samples(self, n: int) -> Dict[str, np.ndarray]:
        s = np.linspace(0.0, self.total_length, n)
        d = self.states(s)
        d["s"] = s
        return d

    @property
    def arcs(self) -> List[Arc]:
        cuts = [0.0] + [e.s for e in self.events] + [self.total_length]
        arcs = []
        for k, (a, b) in enumerate(zip(cuts[:-1], cuts[1:])):
            grid = self.sample_grid(1)
            grid = np.unique(np.concatenate([[a, b], grid[(grid > a) & (grid < b)]]))
            st = self.states(grid)
            samples = np.column_stack([grid, st["r"], st["theta"]])
            if k == 0:
                start = (float(st["r"][0]), float(st["theta"][0]))
                beta = float(st["beta"][0])
            else:
                ev = self.events[k - 1]
                start = (ev.cone_point.position, ev.theta_out)
                beta = 0.0 if ev.cone_point.pole_id == "north" else math.pi
            arcs.append(Arc(start, beta, a, b - a, samples))
        return arcs

    def end_state(self) -> Tuple[float, float, float]:
        st = self.states([self.total_length])
        return float(st["r"][0]), float(st["theta"][0]), float(st["beta"][0])


def _direction_angle(direction) -> float:
    if np.ndim(direction) == 0:
        return float(direction)
    d = np.asarray(direction, dtype=float)
    if d.shape != (2,) or not np.all(np.isfinite(d)) or np.hypot(*d) == 0:
        raise PreconditionError("direction must be an angle or a nonzero 2-vector (e_r, e_theta)")
    return math.atan2(d[1], d[0])


def initial_state(surface: ConeSurface, start, beta: float, jacobi: bool = False):
    r, th = float(start[0]), float(start[1])
    if not 0.0 < r < surface.L:
        raise PreconditionError(f"start r = {r} must lie strictly inside (0, L)")
    P = surface.params
    u = kr.bump(P, r, th)[0]
    f = surface.f(r)
    vr = math.exp(-u) * math.cos(beta)
    vt = math.exp(-u) * math.sin(beta) / f
    if r < P[kr.RHO_N]:
        chart = 1
    elif surface.q > 0 and surface.L - r < P[kr.RHO_S]:
        chart = 2
    else:
        chart = 0
    if chart == 0:
        y = [r, th, vr, vt]
    else:
        y = list(kr.base_to_cover(P, chart, r, th, vr, vt, 0))
    if jacobi:
        y += [1.0, 0.0, 0.0, 1.0]
    return chart, np.array(y, dtype=float), th


def shoot(surface: ConeSurface, start, direction, length: float, *, rtol: float = TOL_ODE,
          atol: float = TOL_ODE, jacobi: bool = False) -> GeodesicPath:
    """Trace the unit-speed orbifold geodesic from ``start`` over ``length``."""
    if not length > 0:
        raise PreconditionError("length must be positive")
    beta = _direction_angle(direction)
    chart, y, th = initial_state(surface, start, beta, jacobi)
    path = GeodesicPath(surface, rtol, atol, jacobi)
    path._trace(chart, y, 0.0, float(length), th, 1e-3 * surface.L)
    return path


def clairaut_invariant(surface: ConeSurface, path: GeodesicPath, n_samples: int = 4000) -> float:
    """Max deviation of f(r) sin(psi) from its initial value along the path."""
    if surface.has_bump:
        raise NotSymmetric("Clairaut's relation needs a rotationally symmetric metric without bump")
    s = np.unique(np.concatenate([np.linspace(0, path.total_length, n_samples), path.knots()]))
    st = path.states(s)
    f = surface.f(st["r"])
    J = f * np.sin(st["beta"])
    ok = np.isfinite(J)
    return float(np.max(np.abs(J[ok] - J[0])))


def ode_residual(path: GeodesicPath, h_rel: float = 1e-3) -> float:
    """Scaled residual of the geodesic equation at every dense-output step midpoint.

    The acceleration is taken by central differences of the dense velocity and
    compared with the Christoffel term evaluated in the same chart.
    """
    P = path.surface.params
    worst = 0.0
    for seg in path.segments:
        S = seg.S
        mids = 0.5 * (S[:-1] + S[1:])
        h = h_rel * np.diff(S)
        yp, _ = seg.dense(mids + h)
        ym, _ = seg.dense(mids - h)
        y0, _ = seg.dense(mids)
        for k in range(len(mids)):
            afd = (yp[k, 2:4] - ym[k, 2:4]) / (2 * h[k])
            vfd = (yp[k, 0:2] - ym[k, 0:2]) / (2 * h[k])
            ax, ay = kr.accel(seg.chart, P, y0[k, 0], y0[k, 1], y0[k, 2], y0[k, 3])
            a = np.array([ax, ay])
            res = np.linalg.norm(afd - a) / max(1.0, np.linalg.norm(a))
            res = max(res, np.linalg.norm(vfd - y0[k, 2:4]) / max(1.0, np.linalg.norm(y0[k, 2:4])))
            worst = max(worst, res)
    return float(worst)


def path_energy(path: GeodesicPath, n: int = 2001) -> float:
    """Energy of the path reparametrized over [0, 1]: E = L^2 * mean |c'|^2."""
    st = path.states(np.linspace(0.0, path.total_length, n))
    P = path.surface.params
    u = np.array([kr.bump(P, r, t)[0] for r, t in zip(st["r"], st["theta"])])
    f = path.surface.f(st["r"])
    speed2 = np.exp(2 * u) * (st["vr"] ** 2 + (f * st["vt"]) ** 2)
    from scipy.integrate import simpson
    return float(path.total_length ** 2 * simpson(speed2, dx=1.0 / (n - 1)))


# ---------------------------------------------------------------------------
# Jacobi fields along a closed geodesic


@dataclass
class JacobiData:
    index: int
    nullity: int
    conjugate_parameters: List[float]
    monodromy: np.ndarray
    zero_count: int
    concavity: int
    iterate: int = 1

    def to_dict(self) -> Dict[str, Any]:
        return {"index": self.index, "nullity": self.nullity, "iterate": self.iterate,
                "conjugate_parameters": [float(x) for x in self.conjugate_parameters],
                "zero_count": self.zero_count, "concavity": self.concavity,
                "monodromy": self.monodromy.tolist()}


class JacobiAlongLoop:
    """Fundamental solution of y'' + K y = 0 along one period, extended by monodromy."""

    def __init__(self, surface: ConeSurface, start, beta: float, length: float,
                 rtol: float = POLISH_TOL, atol: float = POLISH_TOL):
        self.length = float(length)
        path = shoot(surface, start, beta, length, rtol=rtol, atol=atol, jacobi=True)
        self.grid = path.sample_grid(8)
        jac = path.states(self.grid)["jac"]
        self.phi = np.stack([np.stack([jac[:, 0], jac[:, 2]], -1),
                             np.stack([jac[:, 1], jac[:, 3]], -1)], 1)
        self.M = self.phi[-1].copy()
        self.path = path

    def fundamental(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        k = np.floor(s / self.length).astype(int)
        sig = s - k * self.length
        sig = np.clip(sig, 0.0, self.length)
        # dense values inside one period
        jac = self.path.states(sig)["jac"]
        phi = np.stack([np.stack([jac[:, 0], jac[:, 2]], -1),
                        np.stack([jac[:, 1], jac[:, 3]], -1)], 1)
        out = np.empty_like(phi)
        for kk in np.unique(k):
            Mk = np.linalg.matrix_power(self.M, kk) if kk >= 0 else \
                np.linalg.matrix_power(np.linalg.inv(self.M), -kk)
            m = k == kk
            out[m] = phi[m] @ Mk
        return out

    def field_through(self, t: float) -> np.ndarray:
        """Initial data (y(0), y'(0)) of the Jacobi field vanishing at s = t."""
        ph = self.fundamental([t])[0]
        return np.array([ph[0, 1], -ph[0, 0]])

    def values(self, coef: np.ndarray, s) -> np.ndarray:
        ph = self.fundamental(s)
        return ph[:, 0, :] @ coef

    def zeros(self, coef: np.ndarray, a: float, b: float, exclude: float = 1e-7) -> List[float]:
        """Zeros of the field on the open interval (a, b), sorted by distance from a."""
        lo, hi = min(a, b), max(a, b)
        k0 = int(math.floor(lo / self.length))
        k1 = int(math.floor(hi / self.length))
        grid = np.concatenate([self.grid + k * self.length for k in range(k0, k1 + 1)])
        grid = grid[(grid > lo) & (grid < hi)]
        grid = np.unique(np.concatenate([[lo], grid, [hi]]))
        v = self.values(coef, grid)
        out = []
        tol = exclude * max(self.length, 1.0)
        for i in np.nonzero(np.sign(v[:-1]) * np.sign(v[1:]) < 0)[0]:
            g = lambda s: float(self.values(coef, [s])[0])
            try:
                z = brentq(g, grid[i], grid[i + 1], xtol=1e-14)
            except ValueError:
                z = _bisect(g, grid[i], grid[i + 1], v[i])
            if lo + tol < z < hi - tol:
                out.append(z)
        for i in np.nonzero(v == 0.0)[0]:
            if lo + tol < grid[i] < hi - tol:
                out.append(float(grid[i]))
        out = sorted(set(out), key=lambda z: abs(z - a))
        return out


def _bisect(g, a: float, b: float, ga: float, xtol: float = 1e-14) -> float:
    """Sign-change bisection that trusts the caller's sign at ``a``."""
    sa = math.copysign(1.0, ga)
    for _ in range(200):
        if b - a <= xtol * max(1.0, abs(a)):
            break
        m = 0.5 * (a + b)
        gm = g(m)
        if gm == 0.0:
            return m
        if math.copysign(1.0, gm) == sa:
            a = m
        else:
            b = m
    return 0.5 * (a + b)


def _jacobi_data(jl: JacobiAlongLoop, m: int) -> JacobiData:
    ell = jl.length
    y1 = np.array([0.0, 1.0])
    zeros = sorted(jl.zeros(y1, 0.0, m * ell))
    Mm = np.linalg.matrix_power(jl.M, m)
    sv = np.linalg.svd(Mm - np.eye(2), compute_uv=False)
    nullity = int(2 - np.sum(sv > TOL_NULL))
    y0e, y1e = Mm[0, 0], Mm[0, 1]
    y0pe, y1pe = Mm[1, 0], Mm[1, 1]
    concavity = 0
    if abs(y1e) > TOL_NULL:
        beta = (1.0 - y0e) / y1e
        Qf = y0pe + beta * y1pe - beta
        concavity = 1 if Qf < -TOL_NULL else 0
    return JacobiData(index=len(zeros) + concavity, nullity=nullity, conjugate_parameters=zeros,
                      monodromy=Mm, zero_count=len(zeros), concavity=concavity, iterate=m)


# ---------------------------------------------------------------------------
# closed geodesics


@dataclass
class ClosedGeodesic:
    path: GeodesicPath
    length: float
    defect: float
    start: Tuple[float, float]
    beta: float
    in_regular_part: bool
    embedded: bool
    separating: bool
    winding: int
    jacobi: Optional[JacobiData] = None
    newton_iterations: int = 0
    min_cone_distance: float = math.inf

    @property
    def events(self) -> List[ConeEvent]:
        return self.path.events

    def samples(self, n: int = 1024) -> np.ndarray:
        st = self.path.states(np.linspace(0.0, self.length, n, endpoint=False))
        return np.column_stack([st["r"], st["theta"]])

    def report(self) -> Dict[str, Any]:
        jd = self.jacobi
        return {"length": self.length, "defect": self.defect,
                "index": None if jd is None else jd.index,
                "nullity": None if jd is None else jd.nullity,
                "conjugate_parameters": [] if jd is None else [float(x) for x in jd.conjugate_parameters],
                "separating": self.separating, "in_regular_part": self.in_regular_part,
                "embedded": self.embedded, "winding": self.winding,
                "start": list(self.start), "beta": self.beta,
                "events": [e.to_dict() for e in self.events]}


def _closure_residual(surface: ConeSurface, start, beta: float, ell: float, rtol: float):
    path = shoot(surface, start, beta, ell, rtol=rtol, atol=rtol)
    r, th, b = path.end_state()
    P = surface.params
    u = kr.bump(P, r, th)[0]
    res = np.array([math.exp(u) * (r - start[0]),
                    math.exp(u) * surface.f(r) * _wrap_f(th - start[1]),
                    _wrap_f(b - beta)])
    return res, path


def closure_defect(res: np.ndarray) -> float:
    return float(math.hypot(res[0], res[1]) + abs(res[2]))


def azimuthal_projection(surface: ConeSurface, r: np.ndarray, theta: np.ndarray):
    """Planar picture centred on the pole farther from the samples."""
    if surface.q > 0 and np.mean(r) < 0.5 * surface.L:
        rho = surface.L - r
    else:
        rho = r
    return rho * np.cos(theta), rho * np.sin(theta)


def classify_loop(surface: ConeSurface, path: GeodesicPath, length: float,
                  n_samples: int = 2048) -> Dict[str, Any]:
    """Embedding, winding, regular-part and separation checks for a closed path."""
    s = np.linspace(0.0, length, n_samples, endpoint=False)
    st = path.states(np.concatenate([s, [length]]))
    r, th = st["r"], st["theta"]
    winding = int(round((th[-1] - th[0]) / TWO_PI))
    r, th = r[:-1], th[:-1]
    x, y = azimuthal_projection(surface, r, th)
    embedded = not kr.closed_polyline_self_intersects(x, y) and abs(winding) <= 1
    sing = surface.singular_points
    knots = path.sample_grid(4)
    rk = path.states(knots[knots <= length])["r"]
    dmin = math.inf
    for c in sing:
        d = rk if c.pole_id == "north" else surface.L - rk
        dmin = min(dmin, float(np.min(d)))
    eps_hit = 1e-9 * surface.L
    regular = dmin > eps_hit and not any(e.s <= length for e in path.events)
    separating = bool(embedded and regular and (winding != 0 or len(sing) <= 1))
    return {"embedded": bool(embedded), "winding": winding, "in_regular_part": bool(regular),
            "separating": separating, "min_cone_distance": dmin}


def find_closed_geodesic(surface: ConeSurface, seed, *, tol: float = TOL_CLOSE, max_newton: int = 50,
                         fd_step: float = 1e-6, rtol: float = POLISH_TOL,
                         with_jacobi: bool = True) -> ClosedGeodesic:
    """Newton polish of a closed geodesic from ``seed = (start, direction, approx_length)``."""
    start, direction, ell0 = seed
    r0, th0 = float(start[0]), float(start[1])
    beta0 = _direction_angle(direction)
    P = surface.params
    ell_min = 1e-6 * surface.L
    u0 = kr.bump(P, r0, th0)[0]
    f0 = surface.f(r0)
    nb = beta0 + 0.5 * math.pi
    nr, nt = math.exp(-u0) * math.cos(nb), math.exp(-u0) * math.sin(nb) / f0

    def start_of(sig):
        return (r0 + sig * nr, th0 + sig * nt)

    def F(z):
        if z[2] < ell_min:
            raise DegenerateToPoint("closed-geodesic length collapsed", {"length": float(z[2])})
        rs = start_of(z[0])[0]
        if not 0 < rs < surface.L:
            return np.full(3, np.inf)
        return _closure_residual(surface, start_of(z[0]), z[1], z[2], rtol)[0]

    z = np.array([0.0, beta0, float(ell0)])
    res = F(z)
    dfc = closure_defect(res)
    history = [dfc]
    it = 0
    while dfc >= tol:
        if it >= max_newton:
            raise NoConvergence("closure Newton did not converge", {"defect_history": history})
        it += 1
        J = np.empty((3, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = fd_step * (max(1.0, z[2]) if k == 2 else 1.0)
            J[:, k] = (F(z + e) - F(z - e)) / (2 * e[k])
        step = np.linalg.lstsq(J, -res, rcond=1e-10)[0]
        lam = 1.0
        while True:
            zt = z + lam * step
            rt = F(zt)
            dt = closure_defect(rt)
            if dt < dfc or lam < 1.0 / 64:
                break
            lam *= 0.5
        if not np.isfinite(dt):
            raise NoConvergence("closure Newton left the surface", {"defect_history": history})
        z, res, dfc = zt, rt, dt
        history.append(dfc)
        if it >= 8 and dfc > 0.5 * history[-8] and dfc > 1e3 * tol:
            raise NoConvergence("closure Newton stalled", {"defect_history": history})
    st = start_of(z[0])
    ell = float(z[2])
    _, path = _closure_residual(surface, st, z[1], ell, rtol)
    info = classify_loop(surface, path, ell)
    cg = ClosedGeodesic(path=path, length=ell, defect=dfc, start=(float(st[0]), float(st[1])),
                        beta=float(z[1]), in_regular_part=info["in_regular_part"],
                        embedded=info["embedded"], separating=info["separating"],
                        winding=info["winding"], newton_iterations=it,
                        min_cone_distance=info["min_cone_distance"])
    if with_jacobi:
        cg.jacobi = jacobi_index(surface, cg, 1)
    return cg


def closed_from_parallel(surface: ConeSurface, r: float, theta0: float = 0.0) -> ClosedGeodesic:
    """Polish the parallel at radius r (a geodesic when f'(r) = 0 and u = 0)."""
    ell = TWO_PI * surface.f(r)
    return find_closed_geodesic(surface, ((r, theta0), 0.5 * math.pi, ell))


def jacobi_index(surface: ConeSurface, c: ClosedGeodesic, m: int = 1) -> JacobiData:
    """Index and nullity of the m-th iterate from the scalar Jacobi equation.

    index = (zeros of the field with y(0)=0, y'(0)=1 on (0, m*length))
            + (concavity term of the periodic problem).
    """
    if m < 1:
        raise PreconditionError("iterate count must be >= 1")
    if c.defect >= TOL_CLOSE * 10:
        raise PreconditionError("closed geodesic is not polished", {"defect": c.defect})
    jl = getattr(c, "_jl", None)
    if jl is None:
        jl = JacobiAlongLoop(surface, c.start, c.beta, c.length)
        c._jl = jl
    return _jacobi_data(jl, m)


def jacobi_along(surface: ConeSurface, c: ClosedGeodesic) -> JacobiAlongLoop:
    jl = getattr(c, "_jl", None)
    if jl is None:
        jl = JacobiAlongLoop(surface, c.start, c.beta, c.length)
        c._jl = jl
    return jl


def conjugate_pair_report(surface: ConeSurface, c: ClosedGeodesic, m_max: int = 8,
                          n_base: int = 8) -> Dict[str, Any]:
    jl = jacobi_along(surface, c)
    found = []
    for t in np.arange(n_base) * c.length / n_base:
        coef = jl.field_through(t)
        z = jl.zeros(coef, t, t + m_max * c.length)
        if z:
            found.append({"base": float(t), "first_zero": float(z[0])})
    return {"has_pair": bool(found), "horizon_periods": m_max, "base_points": n_base,
            "witnesses": found}


def has_conjugate_pair(surface: ConeSurface, c: ClosedGeodesic, m_max: int = 8) -> bool:
    """True when some Jacobi field vanishing at a base point vanishes again within m_max periods."""
    return conjugate_pair_report(surface, c, m_max)["has_pair"]


# ---------------------------------------------------------------------------
# crossings with a closed curve


class LoopCurve:
    """A closed geodesic viewed as a radial graph r = R(theta), used to detect crossings."""

    def __init__(self, surface: ConeSurface, c: ClosedGeodesic):
        self.surface = surface
        self.c = c
        self.length = c.length
        if abs(c.winding) != 1:
            raise PreconditionError("crossing detection needs a loop winding once around the poles")
        s = np.unique(np.concatenate([c.path.sample_grid(8), [c.length]]))
        s = s[s <= c.length]
        st = c.path.states(s)
        th = st["theta"]
        if not (np.all(np.diff(th) > 0) or np.all(np.diff(th) < 0)):
            raise PreconditionError("loop is not a radial graph over theta")
        P = surface.params
        lo = P[kr.RHO_N] * kr.HYST
        hi = surface.L - P[kr.RHO_S] * kr.HYST if surface.q > 0 else surface.L
        if np.min(st["r"]) <= lo or np.max(st["r"]) >= hi:
            raise PreconditionError("loop must stay in the base chart region")
        self.orient = 1 if th[-1] > th[0] else -1
        self.s = s
        self.theta0 = th[0]
        tt = (th - th[0]) * self.orient
        tt[-1] = TWO_PI
        rr = st["r"].copy()
        rr[-1] = rr[0]
        self._R = CubicSpline(tt, rr, bc_type="periodic")
        ss = s.copy()
        self._T = CubicSpline(tt, ss)

    def _tt(self, theta):
        return ((np.asarray(theta) - self.theta0) * self.orient) % TWO_PI

    def sigma(self, r, theta):
        """Signed offset r - R(theta); negative on the north side."""
        return np.asarray(r) - self._R(self._tt(theta))

    def param_guess(self, theta) -> np.ndarray:
        return self._T(self._tt(theta))

    def left_sign(self) -> int:
        """Sign of sigma on the left of the oriented loop."""
        return -self.orient

    def crossings(self, path: GeodesicPath, s_from: float = 0.0, s_skip: float = 1e-6,
                  max_count: Optional[int] = None) -> List[Tuple[float, float, float]]:
        """Transversal crossings of ``path`` with the loop: (s, t, alpha) with alpha oriented from c'."""
        out = []
        for seg in path.segments:
            if seg.chart != 0 or seg.S[-1] <= s_from:
                continue
            S = seg.S
            frac = np.arange(4) / 4.0
            grid = np.unique(np.concatenate([(S[:-1, None] + np.diff(S)[:, None] * frac).ravel(), S[-1:]]))
            grid = grid[grid >= max(s_from, S[0])]
            if len(grid) < 2:
                continue
            st, _ = seg.dense(grid)
            sg = self.sigma(st[:, 0], st[:, 1])
            for i in np.nonzero(np.sign(sg[:-1]) * np.sign(sg[1:]) < 0)[0]:
                a, b = grid[i], grid[i + 1]
                sc, t = self._refine(seg, a, b)
                if sc < s_skip:
                    continue
                alpha = self._angle(path, sc, t)
                out.append((sc, t, alpha))
                if max_count is not None and len(out) >= max_count:
                    return out
        return out

    def _refine(self, seg: _Segment, a: float, b: float) -> Tuple[float, float]:
        def g(s):
            st = seg.dense(np.array([s]))[0][0]
            return float(self.sigma(st[0], st[1]))
        s = brentq(g, a, b, xtol=1e-13)
        st = seg.dense(np.array([s]))[0][0]
        t = float(self.param_guess(st[1]))
        cpath = self.c.path
        for _ in range(6):
            ray = seg.dense(np.array([s]))[0][0]
            cs = cpath.states([t])
            G = np.array([ray[0] - cs["r"][0], _wrap_f(ray[1] - cs["theta"][0])])
            if np.max(np.abs(G)) < 1e-14:
                break
            Jm = np.array([[ray[2], -cs["vr"][0]], [ray[3], -cs["vt"][0]]])
            try:
                d = np.linalg.solve(Jm, -G)
            except np.linalg.LinAlgError:
                break
            s = min(max(s + d[0], a - (b - a)), b + (b - a))
            t = t + d[1]
        return float(s), float(t % self.length)

    def _angle(self, path: GeodesicPath, s: float, t: float) -> float:
        b_ray = path.direction(s)
        b_c = self.c.path.direction(t)
        return _wrap_f(b_ray - b_c)

    def point(self, t: float) -> Tuple[Tuple[float, float], float]:
        """Base point and direction angle of the loop at parameter t."""
        st = self.c.path.states([t % self.length])
        return (float(st["r"][0]), float(st["theta"][0])), float(st["beta"][0])


@dataclass
class ReturnCheck:
    kind: str
    t: Optional[float] = None
    alpha: Optional[float] = None
    path: Optional[GeodesicPath] = None
    n_rays: int = 0
    horizon: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "t": self.t, "alpha": self.alpha, "n_rays": self.n_rays,
                "horizon": self.horizon}


def first_return(surface: ConeSurface, loop: LoopCurve, t: float, alpha: float, horizon: float,
                 count: int = 1, chunk: Optional[float] = None):
    """Shoot from c(t) at angle alpha and collect up to ``count`` crossings within the horizon."""
    (r, th), bc = loop.point(t)
    chunk = chunk or 0.5 * loop.length
    path = shoot(surface, (r, th), bc + alpha, min(chunk, horizon))
    found: List[Tuple[float, float, float]] = []
    while True:
        found = loop.crossings(path, 0.0, max_count=count)
        if len(found) >= count or path.total_length >= horizon - 1e-12:
            return found[:count], path
        path.extend(min(chunk, horizon - path.total_length))


def check_return_condition(surface: ConeSurface, c: ClosedGeodesic, fan_size: int,
                           horizon_length: float, refine: bool = True,
                           refine_iters: int = 80) -> ReturnCheck:
    """Fan test: every ray from c into its left side must cross c again within the horizon.

    Escapers sit near separatrices and form thin angular windows, so when the
    fan finds none and ``refine`` is set, the angle with the longest return at
    each base point is refined by golden-section search on the return length.
    """
    if fan_size <= 0:
        return ReturnCheck("AllReturn", n_rays=0, horizon=horizon_length)
    loop = LoopCurve(surface, c)
    ts = (np.arange(fan_size) + 0.5) * c.length / fan_size
    alphas = (np.arange(fan_size) + 1.0) * math.pi / (fan_size + 1)
    n = 0
    table = np.empty((fan_size, fan_size))
    for i, t in enumerate(ts):
        for j, a in enumerate(alphas):
            n += 1
            found, path = first_return(surface, loop, float(t), float(a), horizon_length)
            if not found:
                return ReturnCheck("Escaper", float(t), float(a), path, n, horizon_length)
            table[i, j] = found[0][0]
    if not refine:
        return ReturnCheck("AllReturn", n_rays=n, horizon=horizon_length)
    i, j = np.unravel_index(int(np.argmax(table)), table.shape)
    grid = np.concatenate([[0.0], alphas, [math.pi]])
    lo, hi = float(grid[j]), float(grid[j + 2])
    t = float(ts[i])
    cache: Dict[float, float] = {}

    def ret(a):
        nonlocal n
        if a not in cache:
            n += 1
            found, path = first_return(surface, loop, t, a, horizon_length)
            if not found:
                raise _Escaped(a, path)
            cache[a] = found[0][0]
        return cache[a]

    g = 0.5 * (math.sqrt(5.0) - 1.0)
    try:
        x1, x2 = hi - g * (hi - lo), lo + g * (hi - lo)
        for _ in range(refine_iters):
            if hi - lo < 1e-15:
                break
            if ret(x1) >= ret(x2):
                hi, x2 = x2, x1
                x1 = hi - g * (hi - lo)
            else:
                lo, x1 = x1, x2
                x2 = lo + g * (hi - lo)
    except _Escaped as e:
        return ReturnCheck("Escaper", t, e.alpha, e.path, n, horizon_length)
    return ReturnCheck("AllReturn", n_rays=n, horizon=horizon_length)


class _Escaped(Exception):
    def __init__(self, alpha, path):
        super().__init__()
        self.alpha = float(alpha)
        self.path = path
