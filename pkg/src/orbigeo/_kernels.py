"""Compiled geometry and integration kernels.

Every surface is flattened into a float64 parameter vector (layout below) so
that the hot loops can run under numba without Python objects.  Charts:
0 is the base chart (r, theta), 1 the north cover chart and 2 the south cover
chart, both in Cartesian cover coordinates (X, Y).
"""

import math

import numpy as np
from numba import njit
from scipy.integrate import RK45

KIND = 0
LEN = 1
OMEGA = 2
P_N = 3
Q_S = 4
RHO_N = 5
RHO_S = 6
AMP = 7
RC = 8
WID = 9
MODE = 10
PHASE = 11
NMODES = 12
RSER_N = 13
RSER_S = 14
CN = 15
CS = 19
BCO = 23
MAX_MODES = 16
NPARAM = BCO + MAX_MODES

HYST = 1.05

_C = np.ascontiguousarray(RK45.C, dtype=np.float64)
_A = np.ascontiguousarray(RK45.A, dtype=np.float64)
_B = np.ascontiguousarray(RK45.B, dtype=np.float64)
_E = np.ascontiguousarray(RK45.E, dtype=np.float64)
_PD = np.ascontiguousarray(RK45.P, dtype=np.float64)

CODE_DONE = 0
CODE_LEFT = 1
CODE_STEPFAIL = 3
CODE_MAXSTEPS = 4


@njit(cache=True)
def profile(P, r):
    """Return f, f', f'', f''' at r."""
    if P[KIND] == 1.0:
        return r / P[P_N], 1.0 / P[P_N], 0.0, 0.0
    om = P[OMEGA]
    f = 0.0
    f1 = 0.0
    f2 = 0.0
    f3 = 0.0
    s1 = math.sin(om * r)
    c1 = math.cos(om * r)
    s = s1
    c = c1
    for j in range(int(P[NMODES])):
        if j > 0:
            s, c = s * c1 + c * s1, c * c1 - s * s1
        b = P[BCO + j]
        if b == 0.0:
            continue
        k = (j + 1) * om
        f += b * s
        f1 += b * k * c
        f2 -= b * k * k * s
        f3 -= b * k * k * k * c
    return f, f1, f2, f3


@njit(cache=True)
def _psi(x):
    if abs(x) >= 1.0:
        return 0.0, 0.0, 0.0
    d = 1.0 - x * x
    v = math.exp(1.0 - 1.0 / d)
    g1 = -2.0 * x / (d * d)
    g2 = (-2.0 * d - 8.0 * x * x) / (d * d * d)
    return v, v * g1, v * (g1 * g1 + g2)


@njit(cache=True)
def bump(P, r, th):
    """Conformal factor u and its derivatives (u, ur, ut, urr, urt, utt)."""
    A = P[AMP]
    if A == 0.0:
        return 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
    w = P[WID]
    x = (r - P[RC]) / w
    if abs(x) >= 1.0:
        return 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
    s0, s1, s2 = _psi(x)
    m = P[MODE]
    a = m * (th - P[PHASE])
    ca = math.cos(a)
    sa = math.sin(a)
    return (A * s0 * ca, A * s1 / w * ca, -A * s0 * m * sa,
            A * s2 / (w * w) * ca, -A * s1 / w * m * sa, -A * s0 * m * m * ca)


@njit(cache=True)
def base_accel(P, r, th, vr, vt):
    f, f1, _, _ = profile(P, r)
    _, ur, ut, _, _, _ = bump(P, r, th)
    ar = -(ur * vr * vr + 2.0 * ut * vr * vt - (ur * f * f + f * f1) * vt * vt)
    at = -(-ut / (f * f) * vr * vr + 2.0 * (ur + f1 / f) * vr * vt + ut * vt * vt)
    return ar, at


@njit(cache=True)
def base_curvature(P, r, th):
    f, f1, f2, _ = profile(P, r)
    u, ur, _, urr, _, utt = bump(P, r, th)
    k0 = -f2 / f
    lap = urr + f1 / f * ur + utt / (f * f)
    return math.exp(-2.0 * u) * (k0 - lap)


@njit(cache=True)
def pole_F(P, pole, rr):
    """Cover profile F = order * f expressed in the distance rr from the pole."""
    if pole == 1:
        f, f1, f2, _ = profile(P, rr)
        o = P[P_N]
        return o * f, o * f1, o * f2
    f, f1, f2, _ = profile(P, P[LEN] - rr)
    o = P[Q_S]
    return o * f, -o * f1, o * f2


@njit(cache=True)
def cover_terms(P, pole, rr):
    """w(r) = (F^2 - r^2) / r^4 and W1 = w'(r) / r."""
    base = CN if pole == 1 else CS
    if rr < (P[RSER_N] if pole == 1 else P[RSER_S]):
        c3 = P[base]
        c5 = P[base + 1]
        c7 = P[base + 2]
        c9 = P[base + 3]
        a0 = 2.0 * c3
        a1 = c3 * c3 + 2.0 * c5
        a2 = 2.0 * c7 + 2.0 * c3 * c5
        a3 = 2.0 * c9 + 2.0 * c3 * c7 + c5 * c5
        r2 = rr * rr
        w = a0 + r2 * (a1 + r2 * (a2 + r2 * a3))
        W1 = 2.0 * a1 + r2 * (4.0 * a2 + r2 * 6.0 * a3)
        return w, W1
    F, F1, _ = pole_F(P, pole, rr)
    r2 = rr * rr
    r4 = r2 * r2
    w = (F * F - r2) / r4
    dw = (2.0 * F * F1 - 2.0 * rr) / r4 - 4.0 * (F * F - r2) / (r4 * rr)
    return w, dw / rr


@njit(cache=True)
def cover_accel(P, pole, X, Y, VX, VY):
    rr = math.sqrt(X * X + Y * Y)
    w, W1 = cover_terms(P, pole, rr)
    j = X * VY - Y * VX
    xv = X * VX + Y * VY
    Rx = 0.5 * W1 * j * j * X + 2.0 * w * j * VY + W1 * xv * j * Y
    Ry = 0.5 * W1 * j * j * Y - 2.0 * w * j * VX - W1 * xv * j * X
    c = w / (1.0 + w * rr * rr)
    d = -Y * Rx + X * Ry
    return Rx + c * Y * d, Ry - c * X * d


@njit(cache=True)
def cover_curvature(P, pole, rr):
    base = CN if pole == 1 else CS
    if rr < (P[RSER_N] if pole == 1 else P[RSER_S]):
        c3 = P[base]
        c5 = P[base + 1]
        c7 = P[base + 2]
        c9 = P[base + 3]
        r2 = rr * rr
        num = 6.0 * c3 + r2 * (20.0 * c5 + r2 * (42.0 * c7 + r2 * 72.0 * c9))
        den = 1.0 + r2 * (c3 + r2 * (c5 + r2 * (c7 + r2 * c9)))
        return -num / den
    F, _, F2 = pole_F(P, pole, rr)
    return -F2 / F


@njit(cache=True)
def accel(chart, P, a, b, va, vb):
    if chart == 0:
        return base_accel(P, a, b, va, vb)
    return cover_accel(P, chart, a, b, va, vb)


@njit(cache=True)
def curvature(chart, P, a, b):
    if chart == 0:
        return base_curvature(P, a, b)
    return cover_curvature(P, chart, math.sqrt(a * a + b * b))


@njit(cache=True)
def rhs(chart, y, P, out):
    ax, ay = accel(chart, P, y[0], y[1], y[2], y[3])
    out[0] = y[2]
    out[1] = y[3]
    out[2] = ax
    out[3] = ay
    n = y.shape[0]
    if n > 4:
        K = curvature(chart, P, y[0], y[1])
        for k in range(4, n, 2):
            out[k] = y[k + 1]
            out[k + 1] = -K * y[k]


@njit(cache=True)
def exit_radius(P, chart):
    if chart == 1:
        if P[KIND] == 1.0:
            return P[LEN]
        return P[RHO_N] * HYST
    return P[RHO_S] * HYST


@njit(cache=True)
def chart_margin(chart, y, P):
    """Positive while the state is inside the chart's working region."""
    if chart == 0:
        r = y[0]
        lo = r - P[RHO_N]
        if P[Q_S] > 0.0:
            hi = (P[LEN] - P[RHO_S]) - r
        else:
            hi = P[LEN] - r
        return min(lo, hi)
    return exit_radius(P, chart) - math.sqrt(y[0] * y[0] + y[1] * y[1])


@njit(cache=True)
def dense_eval(y0, h, Q, th, out):
    n = y0.shape[0]
    for i in range(n):
        acc = 0.0
        tp = th
        for k in range(4):
            acc += Q[i, k] * tp
            tp *= th
        out[i] = y0[i] + h * acc


@njit(cache=True)
def _dp_step(chart, y, f0, h, P, K, ynew, err):
    n = y.shape[0]
    ytmp = np.empty(n)
    for i in range(n):
        K[0, i] = f0[i]
    for s in range(1, 6):
        for i in range(n):
            acc = 0.0
            for j in range(s):
                acc += _A[s, j] * K[j, i]
            ytmp[i] = y[i] + h * acc
        rhs(chart, ytmp, P, K[s])
    for i in range(n):
        acc = 0.0
        for j in range(6):
            acc += _B[j] * K[j, i]
        ynew[i] = y[i] + h * acc
    rhs(chart, ynew, P, K[6])
    for i in range(n):
        acc = 0.0
        for j in range(7):
            acc += _E[j] * K[j, i]
        err[i] = h * acc


@njit(cache=True)
def _dense_coeffs(K, Q):
    n = Q.shape[0]
    for i in range(n):
        for k in range(4):
            acc = 0.0
            for j in range(7):
                acc += K[j, i] * _PD[j, k]
            Q[i, k] = acc


@njit(cache=True)
def integrate(chart, y0, s0, s_end, h0, rtol, atol, P, max_steps, watch_chart):
    """Adaptive Dormand-Prince 5(4) run inside one chart.

    Stops at s_end, or (if watch_chart) at the first point where the chart
    margin becomes zero.  Returns knots S, states Y, dense coefficients Q,
    the step count and a status code.
    """
    n = y0.shape[0]
    cap = 256
    S = np.empty(cap + 1)
    Y = np.empty((cap + 1, n))
    Q = np.empty((cap, n, 4))
    S[0] = s0
    Y[0] = y0
    K = np.empty((7, n))
    f0 = np.empty(n)
    ynew = np.empty(n)
    err = np.empty(n)
    ytry = np.empty(n)
    rhs(chart, y0, P, f0)
    y = y0.copy()
    s = s0
    h = h0
    nst = 0
    code = CODE_DONE
    while s < s_end:
        if nst >= max_steps:
            code = CODE_MAXSTEPS
            break
        if h < 1e-14 * (1.0 + abs(s)):
            code = CODE_STEPFAIL
            break
        last = False
        if s + h >= s_end:
            h = s_end - s
            last = True
        _dp_step(chart, y, f0, h, P, K, ynew, err)
        en = 0.0
        for i in range(n):
            sc = atol + rtol * max(abs(y[i]), abs(ynew[i]))
            en += (err[i] / sc) ** 2
        en = math.sqrt(en / n)
        if not (en <= 1.0):
            if en != en:
                h *= 0.2
            else:
                h *= max(0.2, 0.9 * en ** -0.2)
            continue
        crossed = False
        if watch_chart and chart_margin(chart, ynew, P) < 0.0:
            Qs = np.empty((n, 4))
            _dense_coeffs(K, Qs)
            lo = 0.0
            hi = 1.0
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                dense_eval(y, h, Qs, mid, ytry)
                if chart_margin(chart, ytry, P) < 0.0:
                    hi = mid
                else:
                    lo = mid
            h = hi * h
            _dp_step(chart, y, f0, h, P, K, ynew, err)
            crossed = True
        if nst >= cap:
            S2 = np.empty(2 * cap + 1)
            Y2 = np.empty((2 * cap + 1, n))
            Q2 = np.empty((2 * cap, n, 4))
            S2[: cap + 1] = S
            Y2[: cap + 1] = Y
            Q2[:cap] = Q
            S = S2
            Y = Y2
            Q = Q2
            cap *= 2
        _dense_coeffs(K, Q[nst])
        s = s_end if (last and not crossed) else s + h
        nst += 1
        S[nst] = s
        Y[nst] = ynew
        y[:] = ynew
        f0[:] = K[6]
        if crossed:
            code = CODE_LEFT
            break
        fac = 10.0 if en == 0.0 else min(10.0, max(0.2, 0.9 * en ** -0.2))
        h = h * fac
    return S[: nst + 1].copy(), Y[: nst + 1].copy(), Q[:nst].copy(), nst, code, h


@njit(cache=True)
def fixed_dp5(chart, y0, T, nsub, P):
    """Fixed-step Dormand-Prince 5th-order propagation over [0, T]."""
    n = y0.shape[0]
    K = np.empty((7, n))
    f0 = np.empty(n)
    ynew = np.empty(n)
    err = np.empty(n)
    y = y0.copy()
    h = T / nsub
    rhs(chart, y, P, f0)
    for _ in range(nsub):
        _dp_step(chart, y, f0, h, P, K, ynew, err)
        y[:] = ynew
        f0[:] = K[6]
    return y


# ---------------------------------------------------------------------------
# chart conversions for single states (position + velocity)


@njit(cache=True)
def base_to_cover(P, pole, r, th, vr, vt, sheet):
    o = P[P_N] if pole == 1 else P[Q_S]
    if pole == 1:
        rr = r
        vrr = vr
    else:
        rr = P[LEN] - r
        vrr = -vr
    phi = (th + 2.0 * math.pi * sheet) / o
    dphi = vt / o
    c = math.cos(phi)
    s = math.sin(phi)
    return rr * c, rr * s, vrr * c - rr * s * dphi, vrr * s + rr * c * dphi


@njit(cache=True)
def cover_to_base(P, pole, X, Y, VX, VY):
    """Return r, phi, vr, vt; theta is order * phi (caller unwraps)."""
    o = P[P_N] if pole == 1 else P[Q_S]
    rr = math.sqrt(X * X + Y * Y)
    phi = math.atan2(Y, X)
    vrr = (X * VX + Y * VY) / rr
    dphi = (X * VY - Y * VX) / (rr * rr)
    if pole == 1:
        return rr, phi, vrr, o * dphi
    return P[LEN] - rr, phi, -vrr, o * dphi


@njit(cache=True)
def _seg_cross(ax, ay, bx, by, cx, cy, dx, dy):
    d1 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    d2 = (bx - ax) * (dy - ay) - (by - ay) * (dx - ax)
    d3 = (dx - cx) * (ay - cy) - (dy - cy) * (ax - cx)
    d4 = (dx - cx) * (by - cy) - (dy - cy) * (bx - cx)
    return d1 * d2 < 0.0 and d3 * d4 < 0.0


@njit(cache=True)
def closed_polyline_self_intersects(x, y):
    """Proper crossing test between non-adjacent edges of a closed polygon."""
    n = x.shape[0]
    for i in range(n):
        i2 = (i + 1) % n
        xmin = min(x[i], x[i2])
        xmax = max(x[i], x[i2])
        ymin = min(y[i], y[i2])
        ymax = max(y[i], y[i2])
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            j2 = (j + 1) % n
            if max(x[j], x[j2]) < xmin or min(x[j], x[j2]) > xmax:
                continue
            if max(y[j], y[j2]) < ymin or min(y[j], y[j2]) > ymax:
                continue
            if _seg_cross(x[i], y[i], x[i2], y[i2], x[j], y[j], x[j2], y[j2]):
                return True
    return False


# ---------------------------------------------------------------------------
# curve-shortening kernels; loops are stored as unwrapped (r, theta) arrays


@njit(cache=True)
def vertex_chart(P, r):
    if r < P[RHO_N]:
        return 1
    if P[Q_S] > 0.0 and P[LEN] - r < P[RHO_S]:
        return 2
    return 0


@njit(cache=True)
def _wrapn(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@njit(cache=True)
def to_patch(P, chart, ri, ti, rj, tj):
    """Coordinates of vertex j in the chart centred on vertex i."""
    d = _wrapn(tj - ti)
    if chart == 0:
        return rj, ti + d
    o = P[P_N] if chart == 1 else P[Q_S]
    rrj = rj if chart == 1 else P[LEN] - rj
    ph = (ti + d) / o
    return rrj * math.cos(ph), rrj * math.sin(ph)


@njit(cache=True)
def own_coords(P, chart, r, t):
    if chart == 0:
        return r, t
    o = P[P_N] if chart == 1 else P[Q_S]
    rr = r if chart == 1 else P[LEN] - r
    return rr * math.cos(t / o), rr * math.sin(t / o)


@njit(cache=True)
def frame_scale(P, chart, x, y):
    """Orthonormalising data at a chart point: (e^u, e^u f) or (1, F/r)."""
    if chart == 0:
        f, _, _, _ = profile(P, x)
        u = bump(P, x, y)[0]
        e = math.exp(u)
        return e, e * f
    rr = math.sqrt(x * x + y * y)
    w, _ = cover_terms(P, chart, rr)
    return 1.0, math.sqrt(1.0 + w * rr * rr)


@njit(cache=True)
def to_frame(chart, x, y, s1, s2, vx, vy):
    if chart == 0:
        return s1 * vx, s2 * vy
    r2 = x * x + y * y
    if r2 == 0.0:
        return vx, vy
    t = (-y * vx + x * vy) / r2
    return vx + (s2 - 1.0) * t * (-y), vy + (s2 - 1.0) * t * x


@njit(cache=True)
def from_frame(chart, x, y, s1, s2, zx, zy):
    if chart == 0:
        return zx / s1, zy / s2
    r2 = x * x + y * y
    if r2 == 0.0:
        return zx, zy
    t = (-y * zx + x * zy) / r2
    return zx + (1.0 / s2 - 1.0) * t * (-y), zy + (1.0 / s2 - 1.0) * t * x


@njit(cache=True)
def log_map(P, chart, x, y, dx, dy):
    """Second-order inverse exponential map: V = D + Gamma(D, D) / 2."""
    ax, ay = accel(chart, P, x, y, dx, dy)
    return dx - 0.5 * ax, dy - 0.5 * ay


@njit(cache=True)
def exp_map(P, chart, x, y, vx, vy):
    ax, ay = accel(chart, P, x, y, vx, vy)
    return x + vx + 0.5 * ax, y + vy + 0.5 * ay


@njit(cache=True)
def local_frame_points(P, R, T, i, im, ip):
    """Neighbour offsets of vertex i in its orthonormal normal-coordinate frame."""
    c = vertex_chart(P, R[i])
    x, y = own_coords(P, c, R[i], T[i])
    s1, s2 = frame_scale(P, c, x, y)
    xa, ya = to_patch(P, c, R[i], T[i], R[im], T[im])
    xb, yb = to_patch(P, c, R[i], T[i], R[ip], T[ip])
    va = log_map(P, c, x, y, xa - x, ya - y)
    vb = log_map(P, c, x, y, xb - x, yb - y)
    a = to_frame(c, x, y, s1, s2, va[0], va[1])
    b = to_frame(c, x, y, s1, s2, vb[0], vb[1])
    return c, x, y, s1, s2, a[0], a[1], b[0], b[1]


@njit(cache=True)
def circum_kn(ax, ay, bx, by):
    det = ax * by - ay * bx
    na = ax * ax + ay * ay
    nb = bx * bx + by * by
    mx = by * na - ay * nb
    my = ax * nb - bx * na
    mm = mx * mx + my * my
    if mm == 0.0:
        return 0.0, 0.0
    return 2.0 * det * mx / mm, 2.0 * det * my / mm


@njit(cache=True)
def loop_curvature(P, R, T, KX, KY, SP):
    """Curvature vectors (frame components) and forward spacings of a closed loop."""
    n = R.shape[0]
    for i in range(n):
        im = (i - 1) % n
        ip = (i + 1) % n
        c, x, y, s1, s2, ax, ay, bx, by = local_frame_points(P, R, T, i, im, ip)
        kx, ky = circum_kn(ax, ay, bx, by)
        KX[i] = kx
        KY[i] = ky
        SP[i] = math.sqrt(bx * bx + by * by)


@njit(cache=True)
def _vertex_geom(P, c, x, y, out):
    """Frame scales and the metric data that the second-order maps need at one vertex."""
    if c == 0:
        f, f1, _, _ = profile(P, x)
        u, ur, ut, _, _, _ = bump(P, x, y)
        e = math.exp(u)
        out[0] = e
        out[1] = e * f
        out[2] = f
        out[3] = f1
        out[4] = ur
        out[5] = ut
    else:
        rr = math.sqrt(x * x + y * y)
        w, W1 = cover_terms(P, c, rr)
        out[0] = 1.0
        out[1] = math.sqrt(1.0 + w * rr * rr)
        out[2] = w
        out[3] = W1
        out[4] = rr
        out[5] = 0.0


@njit(cache=True)
def _accel_g(c, g, x, y, vx, vy):
    if c == 0:
        f = g[2]
        f1 = g[3]
        ur = g[4]
        ut = g[5]
        ar = -(ur * vx * vx + 2.0 * ut * vx * vy - (ur * f * f + f * f1) * vy * vy)
        at = -(-ut / (f * f) * vx * vx + 2.0 * (ur + f1 / f) * vx * vy + ut * vy * vy)
        return ar, at
    w = g[2]
    W1 = g[3]
    rr = g[4]
    j = x * vy - y * vx
    xv = x * vx + y * vy
    Rx = 0.5 * W1 * j * j * x + 2.0 * w * j * vy + W1 * xv * j * y
    Ry = 0.5 * W1 * j * j * y - 2.0 * w * j * vx - W1 * xv * j * x
    cc = w / (1.0 + w * rr * rr)
    d = -y * Rx + x * Ry
    return Rx + cc * y * d, Ry - cc * x * d


@njit(cache=True)
def csf_step(P, R, T, dt, mu, Rn, Tn, KM, SP, CH, XY, G):
    """One explicit step; returns max |kN| and the polygon length before the step.

    CH (int n), XY (n, 2) and G (n, 6) are scratch buffers.
    """
    n = R.shape[0]
    for i in range(n):
        c = vertex_chart(P, R[i])
        CH[i] = c
        x, y = own_coords(P, c, R[i], T[i])
        XY[i, 0] = x
        XY[i, 1] = y
        _vertex_geom(P, c, x, y, G[i])
    kmax = 0.0
    length = 0.0
    for i in range(n):
        im = (i - 1) % n
        ip = (i + 1) % n
        c = CH[i]
        x = XY[i, 0]
        y = XY[i, 1]
        g = G[i]
        s1 = g[0]
        s2 = g[1]
        if CH[im] == c and abs(T[im] - T[i]) < math.pi:
            xa = XY[im, 0]
            ya = XY[im, 1]
        else:
            xa, ya = to_patch(P, c, R[i], T[i], R[im], T[im])
        if CH[ip] == c and abs(T[ip] - T[i]) < math.pi:
            xb = XY[ip, 0]
            yb = XY[ip, 1]
        else:
            xb, yb = to_patch(P, c, R[i], T[i], R[ip], T[ip])
        dx = xa - x
        dy = ya - y
        qx, qy = _accel_g(c, g, x, y, dx, dy)
        ax, ay = to_frame(c, x, y, s1, s2, dx - 0.5 * qx, dy - 0.5 * qy)
        dx = xb - x
        dy = yb - y
        qx, qy = _accel_g(c, g, x, y, dx, dy)
        bx, by = to_frame(c, x, y, s1, s2, dx - 0.5 * qx, dy - 0.5 * qy)
        kx, ky = circum_kn(ax, ay, bx, by)
        na = math.sqrt(ax * ax + ay * ay)
        nb = math.sqrt(bx * bx + by * by)
        SP[i] = nb
        length += nb
        km = math.sqrt(kx * kx + ky * ky)
        KM[i] = km
        if km > kmax:
            kmax = km
        tx = bx - ax
        ty = by - ay
        tn = math.sqrt(tx * tx + ty * ty)
        sh = 0.0
        if tn > 0.0:
            sh = mu * 0.5 * (nb - na) / tn
        zx = dt * kx + sh * tx
        zy = dt * ky + sh * ty
        vx, vy = from_frame(c, x, y, s1, s2, zx, zy)
        qx, qy = _accel_g(c, g, x, y, vx, vy)
        nx = x + vx + 0.5 * qx
        ny = y + vy + 0.5 * qy
        if c == 0:
            Rn[i] = nx
            Tn[i] = ny
        else:
            o = P[P_N] if c == 1 else P[Q_S]
            rr = math.sqrt(nx * nx + ny * ny)
            ph = math.atan2(ny, nx)
            Tn[i] = T[i] + o * _wrapn(ph - T[i] / o)
            Rn[i] = rr if c == 1 else P[LEN] - rr
    return kmax, length


@njit(cache=True)
def loop_length(P, R, T):
    n = R.shape[0]
    tot = 0.0
    for i in range(n):
        c, x, y, s1, s2, ax, ay, bx, by = local_frame_points(P, R, T, i, (i - 1) % n, (i + 1) % n)
        tot += math.sqrt(bx * bx + by * by)
    return tot


@njit(cache=True)
def winding(T):
    n = T.shape[0]
    tot = 0.0
    for i in range(n):
        tot += _wrapn(T[(i + 1) % n] - T[i])
    return tot / (2.0 * math.pi)


@njit(cache=True)
def pair_distance(P, r1, t1, r2, t2):
    """Local distance estimate: cover chord near poles, frozen metric elsewhere."""
    c1 = vertex_chart(P, r1)
    c2 = vertex_chart(P, r2)
    if c1 != 0 and c1 == c2:
        x, y = own_coords(P, c1, r1, t1)
        xb, yb = to_patch(P, c1, r1, t1, r2, t2)
        return math.sqrt((xb - x) ** 2 + (yb - y) ** 2)
    rm = 0.5 * (r1 + r2)
    tm = t1 + 0.5 * _wrapn(t2 - t1)
    f, _, _, _ = profile(P, rm)
    e = math.exp(bump(P, rm, tm)[0])
    return e * math.sqrt((r2 - r1) ** 2 + (f * _wrapn(t2 - t1)) ** 2)


@njit(cache=True)
def loop_diameter(P, R, T):
    n = R.shape[0]
    best = 0.0
    for off in (n // 2, n // 3, n // 4):
        if off == 0:
            continue
        for i in range(n):
            j = (i + off) % n
            d = pair_distance(P, R[i], T[i], R[j], T[j])
            if d > best:
                best = d
    return best


@njit(cache=True)
def loops_min_distance(P, R1, T1, R2, T2):
    best = 1e300
    for i in range(R1.shape[0]):
        for j in range(R2.shape[0]):
            d = pair_distance(P, R1[i], T1[i], R2[j], T2[j])
            if d < best:
                best = d
    return best


@njit(cache=True)
def csf_advance(P, R, T, t, t_max, max_steps, mu, c_cfl, eps_stat, stat_window, stat_count,
                diam_stop, h_lo, h_hi, len_tol, check_every, h_coarsen):
    """Run explicit steps until a stop condition; returns the new state and a reason code.

    Reasons: 0 step budget for this call, 1 time budget, 2 diameter below diam_stop,
    3 stationary, 4 spacing band violated, 5 winding changed, 6 length increased,
    7 mean spacing fell below h_coarsen.
    """
    n = R.shape[0]
    Rn = np.empty(n)
    Tn = np.empty(n)
    KM = np.empty(n)
    SP = np.empty(n)
    CH = np.empty(n, dtype=np.int64)
    XY = np.empty((n, 2))
    G = np.empty((n, 6))
    R = R.copy()
    T = T.copy()
    w0 = winding(T)
    loop_curvature(P, R, T, KM, Rn, SP)
    hmin = SP.min()
    steps = 0
    reason = 0
    kmax = 0.0
    prev_len = -1.0
    while steps < max_steps:
        if t >= t_max:
            reason = 1
            break
        dt = c_cfl * hmin * hmin
        if t + dt > t_max:
            dt = t_max - t
        kmax, length = csf_step(P, R, T, dt, mu, Rn, Tn, KM, SP, CH, XY, G)
        if prev_len >= 0.0 and length > prev_len + len_tol:
            reason = 6
            break
        prev_len = length
        R, Rn = Rn, R
        T, Tn = Tn, T
        t += dt
        steps += 1
        hmin = SP.min()
        hmax = SP.max()
        if kmax < eps_stat:
            stat_count += 1
        else:
            stat_count = 0
        if stat_count >= stat_window:
            reason = 3
            break
        mean = length / n
        if hmin < h_lo * mean or hmax > h_hi * mean:
            reason = 4
            break
        if mean < h_coarsen:
            reason = 7
            break
        if steps % check_every == 0:
            if abs(winding(T) - w0) > 0.5:
                reason = 5
                break
            if loop_diameter(P, R, T) < diam_stop:
                reason = 2
                break
    return R, T, t, steps, reason, kmax, stat_count, prev_len


@njit(cache=True)
def _one_sided(P, R1, T1, R2, T2):
    best_all = 0.0
    m = R2.shape[0]
    for i in range(R1.shape[0]):
        c = vertex_chart(P, R1[i])
        x, y = own_coords(P, c, R1[i], T1[i])
        s1, s2 = frame_scale(P, c, x, y)
        best = 1e300
        xa, ya = to_patch(P, c, R1[i], T1[i], R2[m - 1], T2[m - 1])
        ax, ay = to_frame(c, x, y, s1, s2, xa - x, ya - y)
        for j in range(m):
            xb, yb = to_patch(P, c, R1[i], T1[i], R2[j], T2[j])
            bx, by = to_frame(c, x, y, s1, s2, xb - x, yb - y)
            dx = bx - ax
            dy = by - ay
            dd = dx * dx + dy * dy
            lam = 0.0
            if dd > 0.0:
                lam = -(ax * dx + ay * dy) / dd
                lam = min(1.0, max(0.0, lam))
            px = ax + lam * dx
            py = ay + lam * dy
            d = math.sqrt(px * px + py * py)
            if d < best:
                best = d
            ax = bx
            ay = by
        if best > best_all:
            best_all = best
    return best_all


@njit(cache=True)
def polyline_hausdorff(P, R1, T1, R2, T2):
    """Symmetric Hausdorff distance between two closed polygons (vertex to segment).

    Distances are measured in the orthonormal frame frozen at each query vertex,
    which is accurate for nearby curves.
    """
    return max(_one_sided(P, R1, T1, R2, T2), _one_sided(P, R2, T2, R1, T1))


# ---------------------------------------------------------------------------
# broken geodesics: segments are two-point boundary problems over unit time in
# the base chart, solved by shooting with a fixed-step integrator so that the
# results are smooth functions of the control points


@njit(cache=True)
def seg_solve(P, r0, t0, r1, t1, vr, vt, nsub):
    """Initial velocity of the geodesic (r0, t0) -> (r1, t1) over unit time.

    Returns vr, vt, end velocity (vr1, vt1) and a success flag.
    """
    y = np.empty(4)
    ok = False
    tol = 1e-14 * max(1.0, abs(t1))
    for _ in range(40):
        y[0] = r0
        y[1] = t0
        y[2] = vr
        y[3] = vt
        e = fixed_dp5(0, y, 1.0, nsub, P)
        F0 = e[0] - r1
        F1 = e[1] - t1
        if abs(F0) < tol and abs(F1) < tol:
            ok = True
            break
        hv = 1e-7 * (abs(vr) + abs(vt) + 1e-3)
        y[2] = vr + hv
        y[3] = vt
        a = fixed_dp5(0, y, 1.0, nsub, P)
        y[2] = vr - hv
        b = fixed_dp5(0, y, 1.0, nsub, P)
        J00 = (a[0] - b[0]) / (2 * hv)
        J10 = (a[1] - b[1]) / (2 * hv)
        y[2] = vr
        y[3] = vt + hv
        a = fixed_dp5(0, y, 1.0, nsub, P)
        y[3] = vt - hv
        b = fixed_dp5(0, y, 1.0, nsub, P)
        J01 = (a[0] - b[0]) / (2 * hv)
        J11 = (a[1] - b[1]) / (2 * hv)
        det = J00 * J11 - J01 * J10
        if det == 0.0 or not math.isfinite(det):
            break
        d0 = -(J11 * F0 - J01 * F1) / det
        d1 = -(-J10 * F0 + J00 * F1) / det
        vr += d0
        vt += d1
        if abs(d0) + abs(d1) < 1e-17 * (abs(vr) + abs(vt)):
            ok = True
            break
    y[0] = r0
    y[1] = t0
    y[2] = vr
    y[3] = vt
    e = fixed_dp5(0, y, 1.0, nsub, P)
    if not (r0 > 0.0 and e[0] > 0.0 and e[0] < P[LEN]):
        ok = False
    return vr, vt, e[2], e[3], ok


@njit(cache=True)
def _ortho(P, r, t, vr, vt):
    f = profile(P, r)[0]
    e = math.exp(bump(P, r, t)[0])
    return e * vr, e * f * vt


@njit(cache=True)
def seg_midpoint(P, r0, t0, vr, vt, nsub):
    y = np.empty(4)
    y[0] = r0
    y[1] = t0
    y[2] = vr
    y[3] = vt
    e = fixed_dp5(0, y, 0.5, nsub, P)
    return e[0], e[1]


@njit(cache=True)
def broken_segments(P, R, T, tw, nsub, V):
    """Solve every segment; V[i] = (vr, vt, vr_end, vt_end), warm-started from V.

    Returns segment lengths and a success flag.
    """
    k = R.shape[0]
    lens = np.empty(k)
    allok = True
    for i in range(k):
        j = (i + 1) % k
        t1 = T[j] + (tw if j == 0 else 0.0)
        vr, vt, ve_r, ve_t, ok = seg_solve(P, R[i], T[i], R[j], t1, V[i, 0], V[i, 1], nsub)
        if not ok:
            vr, vt, ve_r, ve_t, ok = seg_solve(P, R[i], T[i], R[j], t1, R[j] - R[i], t1 - T[i], nsub)
        allok = allok and ok
        V[i, 0] = vr
        V[i, 1] = vt
        V[i, 2] = ve_r
        V[i, 3] = ve_t
        a, b = _ortho(P, R[i], T[i], vr, vt)
        lens[i] = math.sqrt(a * a + b * b)
    return lens, allok


@njit(cache=True)
def broken_gradient(P, R, T, V, G):
    """Gradient of k * sum(len^2) in the orthonormal frame at each control point."""
    k = R.shape[0]
    for i in range(k):
        im = (i - 1) % k
        a, b = _ortho(P, R[i], T[i], V[im, 2], V[im, 3])
        c, d = _ortho(P, R[i], T[i], V[i, 0], V[i, 1])
        G[2 * i] = 2.0 * k * (a - c)
        G[2 * i + 1] = 2.0 * k * (b - d)


@njit(cache=True)
def _local_grad(P, R, T, tw, i, nsub, V, out):
    """Gradient block at control point i from freshly solved neighbouring segments."""
    k = R.shape[0]
    im = (i - 1) % k
    ip = (i + 1) % k
    t_i_from_prev = T[i] + (tw if i == 0 else 0.0)
    _, _, er, et, ok1 = seg_solve(P, R[im], T[im], R[i], t_i_from_prev, V[im, 0], V[im, 1], nsub)
    t_next = T[ip] + (tw if ip == 0 else 0.0)
    vr, vt, _, _, ok2 = seg_solve(P, R[i], T[i], R[ip], t_next, V[i, 0], V[i, 1], nsub)
    # the end velocity of segment im lives at (R[i], T[i]); shift in theta is irrelevant
    a, b = _ortho(P, R[i], T[i], er, et)
    c, d = _ortho(P, R[i], T[i], vr, vt)
    out[0] = 2.0 * k * (a - c)
    out[1] = 2.0 * k * (b - d)
    return ok1 and ok2


@njit(cache=True)
def broken_hessian(P, R, T, tw, nsub, V, eps):
    """Central finite-difference Hessian of the discrete energy (orthonormal frames)."""
    k = R.shape[0]
    H = np.zeros((2 * k, 2 * k))
    Rp = R.copy()
    Tp = T.copy()
    gp = np.empty(2)
    gm = np.empty(2)
    allok = True
    for j in range(k):
        f = profile(P, R[j])[0]
        e = math.exp(-bump(P, R[j], T[j])[0])
        for d in range(2):
            dr = eps * e if d == 0 else 0.0
            dt = eps * e / f if d == 1 else 0.0
            for off in (-1, 0, 1):
                i = (j + off) % k
                Rp[j] = R[j] + dr
                Tp[j] = T[j] + dt
                ok = _local_grad(P, Rp, Tp, tw, i, nsub, V, gp)
                Rp[j] = R[j] - dr
                Tp[j] = T[j] - dt
                ok = _local_grad(P, Rp, Tp, tw, i, nsub, V, gm) and ok
                allok = allok and ok
                H[2 * i, 2 * j + d] = (gp[0] - gm[0]) / (2 * eps)
                H[2 * i + 1, 2 * j + d] = (gp[1] - gm[1]) / (2 * eps)
            Rp[j] = R[j]
            Tp[j] = T[j]
    return H, allok


@njit(cache=True)
def polyline_min_distance(P, R1, T1, R2, T2):
    """Smallest vertex-to-segment distance from polygon 1 to closed polygon 2."""
    best = 1e300
    m = R2.shape[0]
    for i in range(R1.shape[0]):
        c = vertex_chart(P, R1[i])
        x, y = own_coords(P, c, R1[i], T1[i])
        s1, s2 = frame_scale(P, c, x, y)
        xa, ya = to_patch(P, c, R1[i], T1[i], R2[m - 1], T2[m - 1])
        ax, ay = to_frame(c, x, y, s1, s2, xa - x, ya - y)
        for j in range(m):
            xb, yb = to_patch(P, c, R1[i], T1[i], R2[j], T2[j])
            bx, by = to_frame(c, x, y, s1, s2, xb - x, yb - y)
            dx = bx - ax
            dy = by - ay
            dd = dx * dx + dy * dy
            lam = 0.0
            if dd > 0.0:
                lam = min(1.0, max(0.0, -(ax * dx + ay * dy) / dd))
            px = ax + lam * dx
            py = ay + lam * dy
            d = math.sqrt(px * px + py * py)
            if d < best:
                best = d
            ax = bx
            ay = by
    return best
