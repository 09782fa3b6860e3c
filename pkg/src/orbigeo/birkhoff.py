"""Second-return (annulus) map of a separating closed geodesic.

A point (t, alpha) of the open annulus is the geodesic leaving c(t) at angle
alpha from c'(t) into the left side of c.  Its image is the base parameter
and incidence angle of the second transversal crossing with c.  Jacobians are
taken in the coordinates (t, cos alpha).
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from . import _kernels as kr
from .errors import (ConjugateDataMissing, NoConvergence, NoSecondReturn, OrbigeoError,
                     PreconditionError, TangentialEncounter)
from .geodesic import (TWO_PI, ClosedGeodesic, LoopCurve, find_closed_geodesic, first_return,
                       has_conjugate_pair, jacobi_along)
from .surface import ConeSurface

ALPHA_MIN = 1e-6
DIST_TOL = 1e-4


def _loop(surface: ConeSurface, c: ClosedGeodesic) -> LoopCurve:
    lc = getattr(c, "_loopcurve", None)
    if lc is None:
        lc = LoopCurve(surface, c)
        c._loopcurve = lc
    return lc


def _wrap_len(x: float, ell: float) -> float:
    return (x + 0.5 * ell) % ell - 0.5 * ell


def birkhoff_point(surface: ConeSurface, c: ClosedGeodesic, t: float, alpha: float,
                   horizon: Optional[float] = None) -> Tuple[float, float, float]:
    """Image (t', alpha', return length) of (t, alpha) under the second-return map."""
    if not 0.0 < alpha < math.pi:
        raise PreconditionError("alpha must lie strictly between 0 and pi; use extend_boundary")
    horizon = 10.0 * c.length if horizon is None else horizon
    loop = _loop(surface, c)
    found, _ = first_return(surface, loop, t % c.length, alpha, horizon, count=2)
    if len(found) < 2:
        raise NoSecondReturn("no second encounter with c within the horizon",
                             {"t": t, "alpha": alpha, "horizon": horizon, "crossings": len(found)})
    s2, t2, a2 = found[1]
    a2 = a2 % TWO_PI
    if min(a2, math.pi - a2) < ALPHA_MIN or a2 > math.pi:
        raise TangentialEncounter("second crossing is tangential or on the wrong side",
                                  {"t": t, "alpha": alpha, "alpha_prime": a2})
    return float(t2 % c.length), float(a2), float(s2)


@dataclass
class AnnulusSample:
    """Return map sampled on an n_t x n_alpha grid, uniform in t and in cos(alpha)."""

    length: float
    t: np.ndarray
    alpha: np.ndarray
    t_prime: np.ndarray
    alpha_prime: np.ndarray
    return_length: np.ndarray
    jac_det: np.ndarray
    status: np.ndarray
    stencil: Tuple[float, float]
    horizon: float
    boundary: Dict[str, Any] = field(default_factory=dict)

    @property
    def complete(self) -> np.ndarray:
        return self.status == "ok"

    @property
    def partial(self) -> bool:
        return not bool(np.all(self.complete))

    def failures(self) -> List[Dict[str, Any]]:
        out = []
        for i, j in zip(*np.nonzero(~self.complete)):
            out.append({"t": float(self.t[i]), "alpha": float(self.alpha[j]), "status": str(self.status[i, j])})
        return out

    def rows(self) -> List[Tuple]:
        out = []
        for i in range(len(self.t)):
            for j in range(len(self.alpha)):
                out.append((self.t[i], self.alpha[j], self.t_prime[i, j], self.alpha_prime[i, j],
                            self.jac_det[i, j], self.status[i, j]))
        return out

    def summary(self) -> Dict[str, Any]:
        ok = self.complete
        dev = np.abs(self.jac_det[ok] - 1.0)
        return {"n_t": len(self.t), "n_alpha": len(self.alpha), "length": self.length,
                "horizon": self.horizon, "partial": self.partial, "failed_nodes": self.failures(),
                "stencil": list(self.stencil),
                "jacobian_max_dev": float(dev.max()) if dev.size else None,
                "jacobian_frac_within_1e-3": float(np.mean(dev < 1e-3)) if dev.size else None,
                "boundary": {k: v for k, v in self.boundary.items() if k in ("method", "status", "disagreement")}}


def _grid(ell: float, n_t: int, n_a: int):
    t = (np.arange(n_t) + 0.5) * ell / n_t
    u = 1.0 - (2.0 * np.arange(n_a) + 1.0) / n_a
    return t, np.arccos(u)


def sample_annulus(surface: ConeSurface, c: ClosedGeodesic, n_t: int = 32, n_alpha: int = 32,
                   horizon: Optional[float] = None, *, stencil_frac: float = 1e-3,
                   threads: int = 1) -> AnnulusSample:
    """Fill the grid and central-difference Jacobians in (t, cos alpha).

    The stencil steps are ``stencil_frac`` times the grid spacings.
    """
    ell = c.length
    horizon = 10.0 * ell if horizon is None else horizon
    ts, als = _grid(ell, n_t, n_alpha)
    ht = stencil_frac * ell / n_t
    hu = stencil_frac * 2.0 / n_alpha
    _loop(surface, c)

    def node(ij):
        i, j = ij
        t, a = ts[i], als[j]
        u = math.cos(a)
        try:
            t1, a1, s1 = birkhoff_point(surface, c, t, a, horizon)
            pts = [birkhoff_point(surface, c, t + ht, a, horizon),
                   birkhoff_point(surface, c, t - ht, a, horizon),
                   birkhoff_point(surface, c, t, math.acos(u + hu), horizon),
                   birkhoff_point(surface, c, t, math.acos(u - hu), horizon)]
        except OrbigeoError as exc:
            return (math.nan, math.nan, math.nan, math.nan, type(exc).__name__)
        dtt = _wrap_len(pts[0][0] - pts[1][0], ell) / (2 * ht)
        dut = (math.cos(pts[0][1]) - math.cos(pts[1][1])) / (2 * ht)
        dtu = _wrap_len(pts[2][0] - pts[3][0], ell) / (2 * hu)
        duu = (math.cos(pts[2][1]) - math.cos(pts[3][1])) / (2 * hu)
        return (t1, a1, s1, dtt * duu - dtu * dut, "ok")

    idx = [(i, j) for i in range(n_t) for j in range(n_alpha)]
    res = _map(node, idx, threads)
    shape = (n_t, n_alpha)
    tp, ap, rl, jd = (np.array([r[k] for r in res]).reshape(shape) for k in range(4))
    st = np.array([r[4] for r in res], dtype=object).reshape(shape)
    return AnnulusSample(ell, ts, als, tp, ap, rl, jd, st, (ht, hu), horizon)


def _map(fn, items, threads: int):
    if threads and threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


# ---------------------------------------------------------------------------
# boundary rows


def _second_conjugate(jl, t: float, forward: bool, m_max: int) -> Optional[float]:
    coef = jl.field_through(t)
    span = m_max * jl.length
    z = jl.zeros(coef, t, t + span if forward else t - span)
    return z[1] if len(z) >= 2 else None


def extend_boundary(surface: ConeSurface, c: ClosedGeodesic, sample: Optional[AnnulusSample] = None,
                    *, ts: Optional[np.ndarray] = None, m_max: int = 8, cross_check: bool = True,
                    alphas: Tuple[float, ...] = (4e-3, 2e-3, 1e-3), tol: float = 1e-3) -> Dict[str, Any]:
    """Boundary rows from second conjugate points, cross-checked against the interior limit.

    Row alpha = 0 maps t to the second conjugate point of c(t) forward along c;
    row alpha = pi uses the second conjugate point backward.
    """
    if not has_conjugate_pair(surface, c, m_max):
        raise ConjugateDataMissing("c has no conjugate points within the horizon")
    if ts is None:
        ts = sample.t if sample is not None else (np.arange(32) + 0.5) * c.length / 32
    ts = np.asarray(ts, dtype=float)
    jl = jacobi_along(surface, c)
    ell = c.length
    rows = {}
    status = "Jacobi"
    for name, fwd in (("alpha0", True), ("alphapi", False)):
        vals = []
        for t in ts:
            z = _second_conjugate(jl, float(t), fwd, m_max)
            vals.append(math.nan if z is None else z % ell)
        rows[name] = np.array(vals)
    if np.any(~np.isfinite(rows["alpha0"])) or np.any(~np.isfinite(rows["alphapi"])):
        raise ConjugateDataMissing("a base point has fewer than two conjugate points within the horizon")
    # composition evaluated exactly at the nodes: the field through t vanishes at its image
    back = []
    for t in ts:
        z = _second_conjugate(jl, float(t), True, m_max)
        w = _second_conjugate(jl, z, False, m_max)
        back.append(math.nan if w is None else abs(_wrap_len(w - t, ell)))
    out: Dict[str, Any] = {"t": ts, "length": ell, "alpha0": rows["alpha0"], "alphapi": rows["alphapi"],
                           "method": "second conjugate point", "inverse_residuals": np.array(back)}
    if cross_check:
        lim0 = np.array([_richardson(surface, c, float(t), alphas) for t in ts])
        limpi = np.array([_richardson(surface, c, float(t), tuple(math.pi - a for a in alphas)) for t in ts])
        dis = max(_max_circle_dev(lim0, rows["alpha0"], ell), _max_circle_dev(limpi, rows["alphapi"], ell))
        out["limit_alpha0"] = lim0
        out["limit_alphapi"] = limpi
        out["disagreement"] = dis
        if dis > tol:
            status = "Extrapolated"
            out["alpha0"], out["alphapi"] = lim0, limpi
            out.pop("inverse_residuals")
            out["method"] = "Richardson limit of interior rows (conjugate-point rows disagreed)"
    out["status"] = status
    if sample is not None:
        sample.boundary = out
    return out


def _richardson(surface, c, t, alphas) -> float:
    """Quadratic extrapolation of t'(alpha) to the boundary row from three interior angles."""
    ell = c.length
    vals = [birkhoff_point(surface, c, t, a)[0] for a in alphas]
    base = vals[0]
    v = np.array([base + _wrap_len(x - base, ell) for x in vals])
    d = np.array([min(a, math.pi - a) for a in alphas])
    V = np.vander(d, 3)
    coef = np.linalg.solve(V, v)
    return float(coef[-1] % ell)


def _max_circle_dev(a: np.ndarray, b: np.ndarray, ell: float) -> float:
    return float(np.max(np.abs([_wrap_len(x - y, ell) for x, y in zip(a, b)])))


def boundary_inverse_check(sample_or_rows, n_fine: int = 512) -> float:
    """Max deviation of (alpha = pi row) after (alpha = 0 row) from the identity, mod length.

    Conjugate-point rows are composed exactly at the nodes; extrapolated rows
    are composed through a periodic spline of the row data.
    """
    rows = sample_or_rows.boundary if isinstance(sample_or_rows, AnnulusSample) else sample_or_rows
    if not rows or rows.get("alpha0") is None or rows.get("alphapi") is None:
        raise PreconditionError("both boundary rows must be defined")
    if rows.get("inverse_residuals") is not None:
        res = np.asarray(rows["inverse_residuals"])
        if np.any(~np.isfinite(res)):
            raise PreconditionError("boundary rows are undefined at some nodes")
        return float(res.max())
    ts = np.asarray(rows["t"])
    ell = rows.get("length") or _infer_length(sample_or_rows, ts)
    f0 = _circle_interp(ts, np.asarray(rows["alpha0"]), ell)
    fpi = _circle_interp(ts, np.asarray(rows["alphapi"]), ell)
    x = np.linspace(0.0, ell, n_fine, endpoint=False)
    comp = fpi(f0(x))
    return float(np.max(np.abs(((comp - x) + 0.5 * ell) % ell - 0.5 * ell)))


def _infer_length(obj, ts) -> float:
    if isinstance(obj, AnnulusSample):
        return obj.length
    raise PreconditionError("boundary rows need a 'length' entry")


def _circle_interp(ts: np.ndarray, vals: np.ndarray, ell: float):
    """Periodic interpolation of a degree-one circle map given on a grid."""
    from scipy.interpolate import CubicSpline
    lift = ts[0] + np.unwrap((vals - ts[0]) * TWO_PI / ell) * ell / TWO_PI
    disp = lift - ts
    off = np.round((disp - disp[0]) / ell) * ell
    disp = disp - off
    tt = np.append(ts, ts[0] + ell)
    dd = np.append(disp, disp[0])
    spl = CubicSpline(tt, dd, bc_type="periodic")
    return lambda x: (x + spl((x - ts[0]) % ell + ts[0])) % ell


# ---------------------------------------------------------------------------
# periodic points


def _iterate(surface, c, t, a, n, horizon):
    total = 0.0
    for _ in range(n):
        t, a, s = birkhoff_point(surface, c, t, a, horizon)
        total += s
    return t, a, total


def _displacement(surface, c, x, n, horizon):
    t, u = x
    t1, a1, s = _iterate(surface, c, t, math.acos(u), n, horizon)
    return np.array([_wrap_len(t1 - t, c.length), math.cos(a1) - u]), s


def _newton_periodic(surface, c, x0, n, horizon, tol=1e-9, max_it=25, h=1e-6):
    x = np.array(x0, dtype=float)
    F, s = _displacement(surface, c, x, n, horizon)
    for _ in range(max_it):
        if np.max(np.abs(F)) < tol:
            return x, s
        J = np.empty((2, 2))
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            J[:, k] = (_displacement(surface, c, x + e, n, horizon)[0] -
                       _displacement(surface, c, x - e, n, horizon)[0]) / (2 * h)
        step = np.linalg.lstsq(J, -F, rcond=1e-10)[0]
        lam = 1.0
        while True:
            xt = x + lam * step
            xt[1] = min(max(xt[1], -1 + 1e-9), 1 - 1e-9)
            try:
                Ft, st = _displacement(surface, c, xt, n, horizon)
                if np.max(np.abs(Ft)) < np.max(np.abs(F)) or lam < 1e-3:
                    break
            except OrbigeoError:
                if lam < 1e-3:
                    raise
            lam *= 0.5
        x, F, s = xt, Ft, st
    if np.max(np.abs(F)) < tol:
        return x, s
    raise NoConvergence("periodic-point Newton did not converge", {"residual": float(np.max(np.abs(F)))})


def crossing_parameters(surface: ConeSurface, c: ClosedGeodesic, g: ClosedGeodesic,
                        n: int = 8192) -> np.ndarray:
    """Sorted parameters on c where g crosses it over one period of g."""
    loop = _loop(surface, c)
    # offset grid: the start point of g often lies on c
    s = (np.arange(n) + 0.5) * g.length / n
    st = g.path.states(s)
    sg = loop.sigma(st["r"], st["theta"])
    j = np.nonzero(np.sign(sg) != np.sign(np.roll(sg, -1)))[0]
    out = []
    for i in j:
        k = (i + 1) % n
        w = sg[i] / (sg[i] - sg[k])
        th = st["theta"][i] + w * _wrap_len(st["theta"][k] - st["theta"][i], TWO_PI)
        out.append(float(loop.param_guess(th)) % c.length)
    return np.sort(np.array(out))


def crossing_count(surface: ConeSurface, c: ClosedGeodesic, g: ClosedGeodesic, n: int = 8192) -> int:
    """Transversal crossings of g with c over one period."""
    return len(crossing_parameters(surface, c, g, n))


def find_periodic_points(surface: ConeSurface, c: ClosedGeodesic, sample: AnnulusSample,
                         max_period: int = 3, *, max_seeds: int = 24,
                         dist_tol: float = DIST_TOL) -> Dict[str, Any]:
    """Periodic points of the return map up to ``max_period`` and their closed geodesics."""
    horizon = sample.horizon
    ell = c.length
    ok = sample.complete
    results: List[Dict[str, Any]] = []
    geods: List[ClosedGeodesic] = []
    stats = {"seeds": {}, "converged": {}, "polished": {}, "duplicates": 0, "failures": []}
    n_t, n_a = ok.shape
    U = np.cos(sample.alpha)
    # images of the grid under B^n, built iteratively from B^(n-1)
    cur_t = np.where(ok, sample.t_prime, np.nan)
    cur_a = np.where(ok, sample.alpha_prime, np.nan)
    for n in range(1, max_period + 1):
        if n > 1:
            nt, na = np.full_like(cur_t, np.nan), np.full_like(cur_a, np.nan)
            for i in range(n_t):
                for j in range(n_a):
                    if not np.isfinite(cur_t[i, j]):
                        continue
                    try:
                        nt[i, j], na[i, j], _ = birkhoff_point(surface, c, cur_t[i, j], cur_a[i, j], horizon)
                    except OrbigeoError:
                        pass
            cur_t, cur_a = nt, na
        Dt = np.vectorize(lambda x: _wrap_len(x, ell))(cur_t - sample.t[:, None])
        Du = np.cos(cur_a) - U[None, :]
        seeds = _seed_cells(sample.t, U, Dt, Du, ell)
        seeds = seeds[:max_seeds]
        stats["seeds"][n] = len(seeds)
        stats["converged"][n] = 0
        stats["polished"][n] = 0
        for x0 in seeds:
            try:
                x, s = _newton_periodic(surface, c, x0, n, horizon)
            except OrbigeoError as exc:
                stats["failures"].append({"n": n, "seed": list(map(float, x0)), "error": type(exc).__name__})
                continue
            stats["converged"][n] += 1
            loop = _loop(surface, c)
            (r0, th0), bc = loop.point(x[0])
            try:
                g = find_closed_geodesic(surface, ((r0, th0), bc + math.acos(x[1]), s))
            except OrbigeoError as exc:
                stats["failures"].append({"n": n, "point": list(map(float, x)), "error": type(exc).__name__})
                continue
            stats["polished"][n] += 1
            sig = crossing_parameters(surface, c, g)
            dup, it_of = _classify(g, sig, geods, ell, dist_tol)
            if dup is not None:
                stats["duplicates"] += 1
                continue
            geods.append((g, sig))
            results.append({"period": n, "t": float(x[0] % ell), "alpha": float(math.acos(x[1])),
                            "return_length": float(s), "geodesic": g, "defect": g.defect,
                            "crossings": len(sig), "iterate_of": it_of,
                            "nullity": None if g.jacobi is None else g.jacobi.nullity})
    results.sort(key=lambda r: (r["period"], r["t"]))
    distinct = sum(1 for r in results if r["iterate_of"] is None)
    return {"points": results, "stats": stats, "distinct": distinct}


def _seed_cells(ts, U, Dt, Du, ell) -> List[np.ndarray]:
    """Cell centres where both displacement components change sign, plus near-fixed nodes."""
    n_t, n_a = Dt.shape
    cand = []
    for i in range(n_t):
        i2 = (i + 1) % n_t
        for j in range(n_a - 1):
            a = np.array([Dt[i, j], Dt[i2, j], Dt[i, j + 1], Dt[i2, j + 1]])
            b = np.array([Du[i, j], Du[i2, j], Du[i, j + 1], Du[i2, j + 1]])
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                continue
            if np.max(np.abs(a)) > 0.25 * ell:
                continue
            if (a.min() < 0 < a.max()) and (b.min() < 0 < b.max()):
                tc = ts[i] + 0.5 * ((ts[i2] - ts[i]) % ell)
                cand.append((float(np.max(np.abs(a)) + np.max(np.abs(b))), tc, 0.5 * (U[j] + U[j + 1])))
    for i in range(n_t):
        for j in range(n_a):
            if np.isfinite(Dt[i, j]) and abs(Dt[i, j]) < 1e-7 and abs(Du[i, j]) < 1e-7:
                cand.append((float(abs(Dt[i, j]) + abs(Du[i, j])), ts[i], U[j]))
    cand.sort()
    return [np.array([c[1], c[2]]) for c in cand]


def _classify(g: ClosedGeodesic, sig: np.ndarray, found, ell: float, dist_tol: float):
    """Return (index of a duplicate or None, index of a geodesic this one iterates or None).

    Two geodesics are the same trajectory (in either orientation) when they have the
    same length and cross c at the same parameters.
    """
    it_of = None
    for k, (h, hsig) in enumerate(found):
        if abs(g.length - h.length) < 1e-6 * max(1.0, h.length):
            if len(sig) == len(hsig) and _circ_match(sig, hsig, ell, dist_tol):
                return k, None
            if (g.jacobi is not None and h.jacobi is not None and g.jacobi.nullity > 0
                    and h.jacobi.nullity > 0):
                return k, None
        ratio = g.length / h.length
        if round(ratio) >= 2 and abs(ratio - round(ratio)) < 1e-4:
            it_of = k
    return None, it_of


def _circ_match(a: np.ndarray, b: np.ndarray, ell: float, tol: float) -> bool:
    d = np.abs((a[:, None] - b[None, :] + 0.5 * ell) % ell - 0.5 * ell)
    return bool(np.all(d.min(axis=1) < tol) and np.all(d.min(axis=0) < tol))
