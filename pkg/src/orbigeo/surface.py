"""Cone-surface metric models.

A surface is a warped product ``e^{2u} (dr^2 + f(r)^2 dtheta^2)`` on
``(0, L) x S^1`` with cone points at ``r = 0`` (order p) and ``r = L``
(order q).  The profile is a finite sine series

    f(r) = sum_j b_j sin(j * omega * r),   omega = pi / L,

which is odd about both poles, so the p- and q-fold branched covers are
smooth.  The conformal factor ``u`` is a compactly supported bump kept away
from the poles by ``r_guard``.  Near each pole the geometry is handled in a
Cartesian cover chart of radius ``rho``.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels as kr
from .errors import (BadSheet, ConvergenceFailure, OutOfChart, PoleEvaluation,
                     PreconditionError, SchemaError)

logger = logging.getLogger(__name__)

Point = Tuple[float, float]


@dataclass(frozen=True)
class ConePoint:
    pole_id: str
    order_p: int
    position: float

    def __post_init__(self):
        if self.pole_id not in ("north", "south"):
            raise SchemaError(f"pole_id must be north or south, got {self.pole_id!r}")
        if int(self.order_p) != self.order_p or self.order_p < 1:
            raise SchemaError(f"cone order must be an integer >= 1, got {self.order_p}")

    @property
    def cone_angle(self) -> float:
        return 2.0 * math.pi / self.order_p

    @property
    def singular(self) -> bool:
        return self.order_p >= 2


@dataclass(frozen=True)
class Bump:
    """u(r, theta) = A * psi((r - center) / width) * cos(mode * (theta - phase))."""

    amplitude: float
    center: float
    width: float
    mode: int = 0
    phase: float = 0.0

    def support(self) -> Tuple[float, float]:
        return self.center - self.width, self.center + self.width


@dataclass(frozen=True)
class ConeSurface:
    coefficients: Tuple[float, ...]
    L: float
    p: int
    q: int
    bump: Optional[Bump] = None
    r_guard: Optional[float] = None
    rho: Optional[float] = None
    kind: str = "sine"
    name: str = "custom"

    def __post_init__(self):
        if self.kind not in ("sine", "flat_cone"):
            raise SchemaError(f"unknown profile kind {self.kind!r}")
        if not (self.L > 0 and math.isfinite(self.L)):
            raise SchemaError("L must be a positive finite number")
        if self.r_guard is None:
            object.__setattr__(self, "r_guard", 0.15 * self.L)
        if self.kind == "flat_cone":
            if self.q != 0 or self.bump is not None:
                raise SchemaError("flat cone patches have q = 0 and no bump")
            object.__setattr__(self, "rho", self.L)
            return
        if self.rho is None:
            object.__setattr__(self, "rho", 0.1 * self.L)
        if len(self.coefficients) == 0 or len(self.coefficients) > kr.MAX_MODES:
            raise SchemaError(f"need between 1 and {kr.MAX_MODES} sine coefficients")
        if self.q < 1:
            raise SchemaError("closed surfaces need q >= 1")
        if not 0 < self.rho * kr.HYST <= self.r_guard < 0.5 * self.L:
            raise SchemaError("need 0 < 1.05 rho <= r_guard < L/2")
        om = self.omega
        j = np.arange(1, len(self.coefficients) + 1)
        b = np.asarray(self.coefficients, dtype=float)
        d0 = om * float(np.sum(j * b))
        dL = om * float(np.sum(j * b * (-1.0) ** j))
        if abs(d0 - 1.0 / self.p) > 1e-12 or abs(dL + 1.0 / self.q) > 1e-12:
            raise SchemaError("profile violates cone-angle consistency",
                              {"f'(0)": d0, "1/p": 1.0 / self.p, "f'(L)": dL, "-1/q": -1.0 / self.q})
        rs = np.linspace(0.0, self.L, 2001)[1:-1]
        if np.min(self.f(rs)) <= 0.0:
            raise SchemaError("profile must be positive on (0, L)")
        if self.bump is not None:
            lo, hi = self.bump.support()
            if lo < self.r_guard or hi > self.L - self.r_guard or self.bump.width <= 0:
                raise SchemaError("bump support must stay outside r_guard of both poles",
                                  {"support": [lo, hi], "r_guard": self.r_guard})
            if int(self.bump.mode) != self.bump.mode or self.bump.mode < 0:
                raise SchemaError("bump mode must be a nonnegative integer")

    # -- basic data -------------------------------------------------------
    @property
    def omega(self) -> float:
        return math.pi / self.L

    @property
    def cone_north(self) -> ConePoint:
        return ConePoint("north", self.p, 0.0)

    @property
    def cone_south(self) -> Optional[ConePoint]:
        if self.q == 0:
            return None
        return ConePoint("south", self.q, self.L)

    @property
    def cone_points(self) -> List[ConePoint]:
        return [c for c in (self.cone_north, self.cone_south) if c is not None]

    @property
    def singular_points(self) -> List[ConePoint]:
        return [c for c in self.cone_points if c.singular]

    @property
    def symmetric(self) -> bool:
        return self.bump is None or self.bump.amplitude == 0.0 or self.bump.mode == 0

    @property
    def has_bump(self) -> bool:
        return self.bump is not None and self.bump.amplitude != 0.0

    def simply_connected_check(self, strict: bool) -> bool:
        """Return True when gcd(p, q) = 1; raise in strict mode otherwise."""
        ok = self.q == 0 or math.gcd(self.p, self.q) == 1
        if not ok and strict:
            raise PreconditionError(f"S^2({self.p},{self.q}) is not simply connected (gcd != 1)")
        if not ok:
            logger.warning("orders %d, %d are not coprime; proceeding without the simply-connected guarantee",
                           self.p, self.q)
        return ok

    def chart(self, pole: str) -> "CoverChart":
        if pole == "north":
            return CoverChart(self.cone_north, float(self.rho))
        if self.cone_south is None:
            raise PreconditionError("surface has no south pole")
        return CoverChart(self.cone_south, float(self.rho))

    # -- compiled parameter vector -----------------------------------------
    @cached_property
    def params(self) -> np.ndarray:
        P = np.zeros(kr.NPARAM)
        P[kr.KIND] = 1.0 if self.kind == "flat_cone" else 0.0
        P[kr.LEN] = self.L
        P[kr.OMEGA] = self.omega
        P[kr.P_N] = self.p
        P[kr.Q_S] = self.q
        P[kr.RHO_N] = self.rho
        P[kr.RHO_S] = self.rho if self.q > 0 else 0.0
        if self.has_bump:
            P[kr.AMP] = self.bump.amplitude
            P[kr.RC] = self.bump.center
            P[kr.WID] = self.bump.width
            P[kr.MODE] = self.bump.mode
            P[kr.PHASE] = self.bump.phase
        P[kr.RSER_N] = P[kr.RSER_S] = 0.02 / self.omega
        if self.kind == "sine":
            b = np.asarray(self.coefficients, dtype=float)
            P[kr.NMODES] = len(b)
            P[kr.BCO:kr.BCO + len(b)] = b
            j = np.arange(1, len(b) + 1)
            bs = b * (-1.0) ** (j + 1)
            for k in range(1, 5):
                fact = math.factorial(2 * k + 1)
                tn = (-1) ** k * np.sum(b * (j * self.omega) ** (2 * k + 1)) / fact
                ts = (-1) ** k * np.sum(bs * (j * self.omega) ** (2 * k + 1)) / fact
                P[kr.CN + k - 1] = self.p * tn
                P[kr.CS + k - 1] = self.q * ts
        P.setflags(write=False)
        return P

    # -- profile evaluation -------------------------------------------------
    def f(self, r):
        return self._profile(r, 0)

    def df(self, r):
        return self._profile(r, 1)

    def d2f(self, r):
        return self._profile(r, 2)

    def _profile(self, r, order: int):
        r = np.asarray(r, dtype=float)
        if self.kind == "flat_cone":
            vals = [r / self.p, np.full_like(r, 1.0 / self.p), np.zeros_like(r)]
            out = vals[order]
        else:
            out = np.zeros_like(r)
            for jj, b in enumerate(self.coefficients, start=1):
                k = jj * self.omega
                if order == 0:
                    out = out + b * np.sin(k * r)
                elif order == 1:
                    out = out + b * k * np.cos(k * r)
                else:
                    out = out - b * k * k * np.sin(k * r)
        return out if out.ndim else float(out)

    def waist(self) -> Tuple[float, float]:
        """Radius of the global maximum of f and the value there."""
        from scipy.optimize import minimize_scalar

        rs = np.linspace(0.0, self.L, 4001)
        i = int(np.argmax(self.f(rs)))
        lo, hi = rs[max(i - 1, 0)], rs[min(i + 1, len(rs) - 1)]
        res = minimize_scalar(lambda r: -self.f(r), bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-14})
        return float(res.x), float(self.f(res.x))

    def critical_radii(self) -> List[Tuple[float, float]]:
        """All interior zeros of f' with the sign of f'' there (parallel geodesics)."""
        from scipy.optimize import brentq

        rs = np.linspace(0.0, self.L, 4001)
        d = self.df(rs)
        out = []
        for a, b, da, db in zip(rs[:-1], rs[1:], d[:-1], d[1:]):
            if da == 0.0 or da * db < 0:
                r0 = a if da == 0.0 else brentq(self.df, a, b, xtol=1e-15)
                out.append((float(r0), float(np.sign(self.d2f(r0)))))
        return out

    def to_dict(self) -> Dict[str, Any]:
        prof: Dict[str, Any]
        if self.kind == "flat_cone":
            prof = {"kind": "preset", "name": "flat_cone"}
        else:
            prof = {"kind": "sine", "coefficients": [float(c) for c in self.coefficients]}
        bump = None
        if self.bump is not None:
            bump = {"amplitude": self.bump.amplitude, "center": self.bump.center,
                    "width": self.bump.width, "mode": self.bump.mode, "phase": self.bump.phase}
        return {"profile": prof, "p": self.p, "q": self.q, "L": self.L, "bump": bump,
                "r_guard": self.r_guard, "rho": self.rho}


@dataclass(frozen=True)
class CoverChart:
    center: ConePoint
    radius: float

    @property
    def sheet_count(self) -> int:
        return self.center.order_p

    def distance_to_center(self, base_point: Point, L: float) -> float:
        r = base_point[0]
        return r if self.center.pole_id == "north" else L - r

    def project(self, cover_point: Point) -> Point:
        """Cover (r, phi) to base (distance from pole, theta)."""
        rr, phi = cover_point
        return rr, (self.sheet_count * phi) % (2.0 * math.pi)


def lift_to_cover(chart: CoverChart, base_point: Point, sheet: int) -> Point:
    """Lift a base point given as (distance to the chart's pole, theta)."""
    rr, th = base_point
    if rr >= chart.radius:
        raise OutOfChart(f"r = {rr} is outside the chart radius {chart.radius}")
    if int(sheet) != sheet or not 0 <= sheet < chart.sheet_count:
        raise BadSheet(f"sheet {sheet} not in [0, {chart.sheet_count})")
    return rr, (th + 2.0 * math.pi * sheet) / chart.sheet_count


def _check_regular(surface: ConeSurface, r: float):
    if not 0.0 < r < surface.L:
        raise PoleEvaluation(f"r = {r} is a pole or outside (0, L); use a cover chart")


def metric_at(surface: ConeSurface, point: Point) -> np.ndarray:
    r, th = float(point[0]), float(point[1])
    _check_regular(surface, r)
    u = kr.bump(surface.params, r, th)[0]
    f = surface.f(r)
    e = math.exp(2.0 * u)
    return np.array([[e, 0.0], [0.0, e * f * f]])


def gauss_curvature(surface: ConeSurface, point: Point) -> float:
    r, th = float(point[0]), float(point[1])
    _check_regular(surface, r)
    P = surface.params
    rser = P[kr.RSER_N]
    if r < rser:
        return float(kr.cover_curvature(P, 1, r))
    if surface.q > 0 and surface.L - r < rser:
        return float(kr.cover_curvature(P, 2, surface.L - r))
    return float(kr.base_curvature(P, r, th))


def _wrap(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def distance(surface: ConeSurface, a: Point, b: Point, tol: float = 1e-10) -> float:
    """Riemannian distance between two base points."""
    (r1, t1), (r2, t2) = (float(a[0]), float(a[1])), (float(b[0]), float(b[1]))
    for r in (r1, r2):
        if not 0.0 <= r <= surface.L:
            raise PreconditionError(f"r = {r} outside [0, L]")
    dth = _wrap(t2 - t1)
    if r1 == r2 and dth == 0.0:
        return 0.0
    if surface.kind == "flat_cone":
        ang = abs(dth) / surface.p
        if ang >= math.pi:
            return r1 + r2
        return math.sqrt(max(r1 * r1 + r2 * r2 - 2.0 * r1 * r2 * math.cos(ang), 0.0))
    if not surface.has_bump and (dth == 0.0 or min(r1, r2) == 0.0
                                 or (surface.q > 0 and max(r1, r2) == surface.L)):
        return abs(r1 - r2)
    return _shooting_distance(surface, (r1, t1), (r2, t2), tol)


def _shooting_distance(surface: ConeSurface, a: Point, b: Point, tol: float) -> float:
    from .geodesic import shoot

    P = surface.params
    r1, t1 = a
    r2, t2 = b
    u1 = kr.bump(P, r1, t1)[0]
    f1 = surface.f(r1)
    best = math.inf
    diag: Dict[str, Any] = {"attempts": []}

    def endpoint_error(beta: float, ell: float) -> np.ndarray:
        path = shoot(surface, (r1, t1), beta, ell, rtol=1e-12, atol=1e-12)
        r, th = path.position(ell)
        u = kr.bump(P, r, th)[0]
        ff = surface.f(r)
        return np.array([math.exp(u) * (r - r2), math.exp(u) * ff * _wrap(th - t2)])

    for shift in (0.0, 2.0 * math.pi, -2.0 * math.pi):
        d = np.array([math.exp(u1) * (r2 - r1), math.exp(u1) * f1 * (_wrap(t2 - t1) + shift)])
        z = np.array([math.atan2(d[1], d[0]), float(np.hypot(*d))])
        ok = False
        for _ in range(40):
            res = endpoint_error(z[0], z[1])
            if np.linalg.norm(res) < tol:
                ok = True
                break
            J = np.empty((2, 2))
            for k, hk in enumerate((1e-7, 1e-7 * max(z[1], 1.0))):
                e = np.zeros(2)
                e[k] = hk
                J[:, k] = (endpoint_error(*(z + e)) - endpoint_error(*(z - e))) / (2 * hk)
            step = np.linalg.lstsq(J, -res, rcond=1e-12)[0]
            lam = 1.0
            while lam > 1e-3 and z[1] + lam * step[1] <= 0:
                lam *= 0.5
            z = z + lam * step
        diag["attempts"].append({"shift": shift, "converged": ok, "length": float(z[1])})
        if ok and z[1] < best:
            best = float(z[1])
    if not math.isfinite(best):
        raise ConvergenceFailure("distance shooting did not converge", diag)
    return best


# ---------------------------------------------------------------------------
# presets


def sine_profile(p: int, q: int, L: float, extra: Sequence[float] = ()) -> Tuple[float, ...]:
    """Solve for b1, b2 so that the cone-angle constraints hold, given b3, b4, ..."""
    om = math.pi / L
    extra = np.asarray(extra, dtype=float)
    j = np.arange(3, 3 + len(extra))
    s_odd = float(np.sum(j * extra * (j % 2 == 1)))
    s_even = float(np.sum(j * extra * (j % 2 == 0)))
    # om*(b1 + 2 b2 + s_odd + s_even) = 1/p ; om*(-b1 + 2 b2 - s_odd + s_even) = -1/q
    b1 = (1.0 / p + 1.0 / q) / (2.0 * om) - s_odd
    b2 = (1.0 / p - 1.0 / q) / (4.0 * om) - s_even / 2.0
    return (b1, b2) + tuple(float(x) for x in extra)


def round_sphere(L: float = math.pi) -> ConeSurface:
    return ConeSurface(coefficients=(L / math.pi,), L=L, p=1, q=1, name="round")


def football(p: int = 3, q: int = 1, L: float = math.pi, bump: Optional[Bump] = None) -> ConeSurface:
    return ConeSurface(coefficients=sine_profile(p, q, L), L=L, p=p, q=q, bump=bump,
                       name=f"football({p},{q})")


def neck_spindle(p: int = 3, q: int = 2, L: float = 10.0, depth: float = 0.2) -> ConeSurface:
    """Two bulges joined by a negatively curved neck; depth sets the third mode."""
    om = math.pi / L
    sigma = (1.0 / p + 1.0 / q) / (2.0 * om)
    return ConeSurface(coefficients=sine_profile(p, q, L, (depth * sigma,)), L=L, p=p, q=q,
                       name=f"neck({p},{q})")


def flat_cone(p: int, L: float = 4.0) -> ConeSurface:
    return ConeSurface(coefficients=(), L=L, p=p, q=0, kind="flat_cone", name=f"flat_cone({p})")


_KNOWN_TOP = {"profile", "p", "q", "L", "bump", "r_guard", "rho", "name"}
_KNOWN_BUMP = {"amplitude", "center", "width", "mode", "phase"}


def _expect(d: Dict[str, Any], allowed: set, required: set, where: str):
    if not isinstance(d, dict):
        raise SchemaError(f"{where}: expected an object")
    extra = set(d) - allowed
    if extra:
        raise SchemaError(f"{where}: unknown keys {sorted(extra)}")
    missing = required - set(d)
    if missing:
        raise SchemaError(f"{where}: missing keys {sorted(missing)}")


def _num(d: Dict[str, Any], key: str, where: str, integer: bool = False):
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(f"{where}.{key}: expected a number")
    if integer and int(v) != v:
        raise SchemaError(f"{where}.{key}: expected an integer")
    return int(v) if integer else float(v)


def surface_from_dict(d: Dict[str, Any]) -> ConeSurface:
    """Strict parser for the surface definition schema (see README)."""
    _expect(d, _KNOWN_TOP, {"profile", "p", "q", "L", "bump"}, "surface")
    p = _num(d, "p", "surface", integer=True)
    q = _num(d, "q", "surface", integer=True)
    L = _num(d, "L", "surface")
    opt = {k: _num(d, k, "surface") for k in ("r_guard", "rho") if k in d and d[k] is not None}
    bump = None
    if d["bump"] is not None:
        bd = d["bump"]
        _expect(bd, _KNOWN_BUMP, {"amplitude", "center", "width"}, "bump")
        bump = Bump(_num(bd, "amplitude", "bump"), _num(bd, "center", "bump"),
                    _num(bd, "width", "bump"),
                    _num(bd, "mode", "bump", integer=True) if "mode" in bd else 0,
                    _num(bd, "phase", "bump") if "phase" in bd else 0.0)
    prof = d["profile"]
    if not isinstance(prof, dict) or "kind" not in prof:
        raise SchemaError("profile: expected an object with a 'kind'")
    name = d.get("name", "custom")
    if not isinstance(name, str):
        raise SchemaError("surface.name: expected a string")
    if prof["kind"] == "sine":
        _expect(prof, {"kind", "coefficients"}, {"coefficients"}, "profile")
        co = prof["coefficients"]
        if not isinstance(co, list) or not all(isinstance(c, (int, float)) and not isinstance(c, bool)
                                               for c in co):
            raise SchemaError("profile.coefficients: expected a list of numbers")
        return ConeSurface(tuple(float(c) for c in co), L, p, q, bump, name=name, **opt)
    if prof["kind"] != "preset":
        raise SchemaError(f"profile.kind must be 'preset' or 'sine', got {prof['kind']!r}")
    _expect(prof, {"kind", "name", "depth"}, {"name"}, "profile")
    pname = prof["name"]
    if pname == "round":
        if p != 1 or q != 1 or bump is not None:
            raise SchemaError("round preset requires p = q = 1 and no bump")
        s = round_sphere(L)
    elif pname == "football":
        s = ConeSurface(sine_profile(p, q, L), L, p, q, bump, name=name)
    elif pname == "neck":
        depth = _num(prof, "depth", "profile") if "depth" in prof else 0.2
        base = neck_spindle(p, q, L, depth)
        s = ConeSurface(base.coefficients, L, p, q, bump, name=name)
    elif pname == "flat_cone":
        if q != 0 or bump is not None:
            raise SchemaError("flat_cone preset requires q = 0 and no bump")
        return flat_cone(p, L)
    else:
        raise SchemaError(f"unknown preset {pname!r}")
    if opt:
        s = ConeSurface(s.coefficients, s.L, s.p, s.q, s.bump, name=name, **opt)
    return s


def load_surface(source) -> ConeSurface:
    """Load from a dict, a JSON file path, or the name of a shipped surface."""
    if isinstance(source, ConeSurface):
        return source
    if isinstance(source, dict):
        return surface_from_dict(source)
    text = str(source)
    if text in shipped_surfaces():
        data = json.loads(resources.files("orbigeo").joinpath("surfaces", text + ".json").read_text())
        return surface_from_dict(data)
    try:
        with open(text) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise SchemaError(f"surface file {text!r} not found") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"surface file {text!r} is not valid JSON: {exc}") from exc
    return surface_from_dict(data)


def shipped_surfaces() -> List[str]:
    folder = resources.files("orbigeo").joinpath("surfaces")
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))
