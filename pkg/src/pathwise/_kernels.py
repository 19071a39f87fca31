"""Compiled inner loops.

Everything in here works on raw float64 arrays.  The public modules wrap these
with validation and the domain types.  Kernels that take coefficient functions
as arguments are compiled per function pair and are not cached on disk.

Stop lists are encoded as two arrays: ``seg[k]`` is the sample index ``i`` of
the segment ``(t[i-1], t[i]]`` holding stop ``k`` and ``theta[k]`` the fraction
of that segment at which it occurs.  Stop 0 is the origin (``seg=0``,
``theta=0``).  Under sampled monitoring every ``theta`` is 1.
"""

import math
import threading

import numpy as np
from numba import njit
from numba.core.registry import CPUDispatcher

SAMPLED = 0
INTERPOLATED = 1

TRIGGER_S = 1
TRIGGER_QV = 2


@njit(cache=True, nogil=True)
def grid_bracket(v, h):
    """Nearest grid levels of ``h*Z`` strictly below and strictly above ``v``."""
    k = math.floor(v / h)
    if k * h == v:
        return (k - 1.0) * h, (k + 1.0) * h
    return k * h, (k + 1.0) * h


@njit(cache=True, nogil=True)
def _grow(a, size):
    b = np.empty(max(2 * a.shape[0], size), a.dtype)
    b[: a.shape[0]] = a
    return b


@njit(cache=True, nogil=True)
def lebesgue_crossings(t, v, h, mode):
    """Crossings of the dyadic grid ``h*Z``.

    Returns ``(times, levels, values, index)``: crossing times, the grid level
    reached, the path value recorded for the increment, and the sample index
    at which the crossing was detected.  A step jumping over ``m`` levels
    emits ``m`` crossings in order.
    """
    n = v.shape[0]
    cap = 1024
    ct = np.empty(cap)
    cl = np.empty(cap)
    cv = np.empty(cap)
    ci = np.empty(cap, np.int64)
    ct[0] = t[0]
    cl[0] = v[0]
    cv[0] = v[0]
    ci[0] = 0
    m = 1
    lo, hi = grid_bracket(v[0], h)
    for i in range(1, n):
        a = v[i - 1]
        b = v[i]
        if b >= hi:
            top = math.floor(b / h) * h
            lev = hi
            while lev <= top:
                if m >= ct.shape[0]:
                    ct = _grow(ct, m + 1)
                    cl = _grow(cl, m + 1)
                    cv = _grow(cv, m + 1)
                    ci = _grow(ci, m + 1)
                if mode == SAMPLED or b == lev:
                    ct[m] = t[i]
                    cv[m] = b if mode == SAMPLED else lev
                else:
                    tc = t[i - 1] + (lev - a) / (b - a) * (t[i] - t[i - 1])
                    ct[m] = min(tc, t[i])
                    cv[m] = lev
                cl[m] = lev
                ci[m] = i
                m += 1
                lev += h
            lo = top - h
            hi = top + h
        elif b <= lo:
            bot = math.ceil(b / h) * h
            lev = lo
            while lev >= bot:
                if m >= ct.shape[0]:
                    ct = _grow(ct, m + 1)
                    cl = _grow(cl, m + 1)
                    cv = _grow(cv, m + 1)
                    ci = _grow(ci, m + 1)
                if mode == SAMPLED or b == lev:
                    ct[m] = t[i]
                    cv[m] = b if mode == SAMPLED else lev
                else:
                    tc = t[i - 1] + (lev - a) / (b - a) * (t[i] - t[i - 1])
                    ct[m] = min(tc, t[i])
                    cv[m] = lev
                cl[m] = lev
                ci[m] = i
                m += 1
                lev -= h
            lo = bot - h
            hi = bot + h
    return ct[:m].copy(), cl[:m].copy(), cv[:m].copy(), ci[:m].copy()


@njit(cache=True, nogil=True)
def qv_on_grid(v, h, mode):
    """Discrete quadratic variation ``V^n`` at every sample of the path."""
    n = v.shape[0]
    out = np.empty(n)
    out[0] = 0.0
    lo, hi = grid_bracket(v[0], h)
    last = v[0]
    acc = 0.0
    for i in range(1, n):
        b = v[i]
        if b >= hi:
            top = math.floor(b / h) * h
            if mode == SAMPLED:
                acc += (b - last) ** 2
                last = b
            else:
                lev = hi
                while lev <= top:
                    acc += (lev - last) ** 2
                    last = lev
                    lev += h
            lo = top - h
            hi = top + h
        elif b <= lo:
            bot = math.ceil(b / h) * h
            if mode == SAMPLED:
                acc += (b - last) ** 2
                last = b
            else:
                lev = lo
                while lev >= bot:
                    acc += (lev - last) ** 2
                    last = lev
                    lev -= h
            lo = bot - h
            hi = bot + h
        out[i] = acc + (b - last) ** 2
    return out


@njit(cache=True, nogil=True)
def qv_levels_gaps(v, level_lo, count, mode):
    """One pass over the samples for levels ``level_lo .. level_lo + count - 1``.

    Returns the finest ``V^n`` at every sample and the sup over samples of
    ``|V^{n+1} - V^n|`` for each adjacent pair; identical to running
    :func:`qv_on_grid` once per level.
    """
    n = v.shape[0]
    out = np.empty(n)
    out[0] = 0.0
    hs = np.empty(count)
    lo = np.empty(count)
    hi = np.empty(count)
    last = np.empty(count)
    acc = np.zeros(count)
    cur = np.zeros(count)
    gaps = np.zeros(max(count - 1, 0))
    for k in range(count):
        hs[k] = math.ldexp(1.0, -(level_lo + k))
        lo[k], hi[k] = grid_bracket(v[0], hs[k])
        last[k] = v[0]
    for i in range(1, n):
        b = v[i]
        for k in range(count):
            h = hs[k]
            if b >= hi[k]:
                top = math.floor(b / h) * h
                if mode == SAMPLED:
                    acc[k] += (b - last[k]) ** 2
                    last[k] = b
                else:
                    lev = hi[k]
                    while lev <= top:
                        acc[k] += (lev - last[k]) ** 2
                        last[k] = lev
                        lev += h
                lo[k] = top - h
                hi[k] = top + h
            elif b <= lo[k]:
                bot = math.ceil(b / h) * h
                if mode == SAMPLED:
                    acc[k] += (b - last[k]) ** 2
                    last[k] = b
                else:
                    lev = lo[k]
                    while lev >= bot:
                        acc[k] += (lev - last[k]) ** 2
                        last[k] = lev
                        lev -= h
                lo[k] = bot - h
                hi[k] = bot + h
            cur[k] = acc[k] + (b - last[k]) ** 2
        for k in range(count - 1):
            d = abs(cur[k + 1] - cur[k])
            if d > gaps[k]:
                gaps[k] = d
        out[i] = cur[count - 1]
    return out, gaps


@njit(cache=True, nogil=True)
def qv_at_times(ct, cv, et, ev):
    """``V^n`` at sorted evaluation times from a crossing list.

    ``ev`` holds the path values at ``et``.
    """
    m = ct.shape[0]
    out = np.empty(et.shape[0])
    acc = 0.0
    k = 0
    for j in range(et.shape[0]):
        tj = et[j]
        while k + 1 < m and ct[k + 1] <= tj:
            acc += (cv[k + 1] - cv[k]) ** 2
            k += 1
        out[j] = acc + (ev[j] - cv[k]) ** 2
    return out


@njit(cache=True, nogil=True)
def sup_abs_diff(a, b):
    s = 0.0
    for i in range(a.shape[0]):
        d = abs(a[i] - b[i])
        if d > s:
            s = d
    return s


@njit(cache=True, nogil=True)
def max_abs_step(v):
    s = 0.0
    for i in range(1, v.shape[0]):
        d = abs(v[i] - v[i - 1])
        if d > s:
            s = d
    return s


@njit(cache=True, nogil=True)
def _first_hit(a, b, ref, h, th0):
    """Smallest fraction in (th0, 1] at which the chord a->b is h away from ref."""
    d = b - a
    if d > 0.0:
        target = ref + h
        if b >= target:
            th = (target - a) / d
            if th > th0:
                return min(th, 1.0)
    elif d < 0.0:
        target = ref - h
        if b <= target:
            th = (target - a) / d
            if th > th0:
                return min(th, 1.0)
    return 2.0


@njit(cache=True, nogil=True)
def _rho_stops_sampled(xs, s, h):
    k, n = xs.shape
    seg = np.empty(n, np.int64)
    theta = np.empty(n)
    seg[0] = 0
    theta[0] = 0.0
    m = 1
    xr = xs[:, 0].copy()
    sr = s[0]
    for i in range(1, n):
        hit = abs(s[i] - sr) >= h
        if not hit:
            for r in range(k):
                if abs(xs[r, i] - xr[r]) >= h:
                    hit = True
                    break
        if not hit:
            continue
        seg[m] = i
        theta[m] = 1.0
        m += 1
        sr = s[i]
        for r in range(k):
            xr[r] = xs[r, i]
    return seg[:m].copy(), theta[:m].copy()


def rho_stops(xs, s, h, mode):
    """Stopping times at which any integrand row or the integrator moved by h.

    ``xs`` is ``(k, n)``.  Returns ``(seg, theta)``.
    """
    if mode == SAMPLED:
        return _rho_stops_sampled(xs, s, h)
    return _rho_stops_general(xs, s, h, mode)


@njit(cache=True, nogil=True)
def _rho_stops_general(xs, s, h, mode):
    k, n = xs.shape
    cap = 1024
    seg = np.empty(cap, np.int64)
    theta = np.empty(cap)
    seg[0] = 0
    theta[0] = 0.0
    m = 1
    xr = xs[:, 0].copy()
    sr = s[0]
    for i in range(1, n):
        if mode == SAMPLED:
            hit = abs(s[i] - sr) >= h
            if not hit:
                for r in range(k):
                    if abs(xs[r, i] - xr[r]) >= h:
                        hit = True
                        break
            if hit:
                if m >= seg.shape[0]:
                    seg = _grow(seg, m + 1)
                    theta = _grow(theta, m + 1)
                seg[m] = i
                theta[m] = 1.0
                m += 1
                sr = s[i]
                for r in range(k):
                    xr[r] = xs[r, i]
        else:
            th0 = 0.0
            while True:
                th = 2.0
                if abs(s[i] - sr) >= h:
                    th = min(th, _first_hit(s[i - 1], s[i], sr, h, th0))
                for r in range(k):
                    if abs(xs[r, i] - xr[r]) >= h:
                        th = min(th, _first_hit(xs[r, i - 1], xs[r, i], xr[r], h, th0))
                if th > 1.0:
                    break
                if m >= seg.shape[0]:
                    seg = _grow(seg, m + 1)
                    theta = _grow(theta, m + 1)
                seg[m] = i
                theta[m] = th
                m += 1
                if th == 1.0:
                    sr = s[i]
                    for r in range(k):
                        xr[r] = xs[r, i]
                    break
                sr = s[i - 1] + th * (s[i] - s[i - 1])
                for r in range(k):
                    xr[r] = xs[r, i - 1] + th * (xs[r, i] - xs[r, i - 1])
                th0 = th
    return seg[:m].copy(), theta[:m].copy()


@njit(cache=True, nogil=True)
def _at(a, i, th):
    if th == 1.0:
        return a[i]
    if th == 0.0:
        return a[i - 1] if i > 0 else a[0]
    return a[i - 1] + th * (a[i] - a[i - 1])


@njit(cache=True, nogil=True)
def step_sum_on_grid(x, s, seg, theta):
    """Left-point sum of ``x`` frozen at the stops, against ``s``, at every sample."""
    n = s.shape[0]
    out = np.empty(n)
    out[0] = 0.0
    acc = 0.0
    xr = x[0]
    sr = s[0]
    k = 1
    m = seg.shape[0]
    for i in range(1, n):
        while k < m and seg[k] == i:
            sv = _at(s, i, theta[k])
            acc += xr * (sv - sr)
            xr = _at(x, i, theta[k])
            sr = sv
            k += 1
        out[i] = acc + xr * (s[i] - sr)
    return out


@njit(cache=True, nogil=True)
def _euler_stops_sampled(s, q, h):
    n = s.shape[0]
    # at most one stop per sample
    seg = np.empty(n, np.int64)
    theta = np.empty(n)
    trig = np.empty(n, np.int8)
    seg[0] = 0
    theta[0] = 0.0
    trig[0] = 0
    m = 1
    inv = 1.0 / h
    slo, shi = grid_bracket(s[0], h)
    qlo, qhi = grid_bracket(q[0], h)
    for i in range(1, n):
        si = s[i]
        qi = q[i]
        if si < shi and si > slo and qi < qhi and qi > qlo:
            continue
        f = 0
        if si >= shi or si <= slo:
            f |= TRIGGER_S
        if qi >= qhi or qi <= qlo:
            f |= TRIGGER_QV
        seg[m] = i
        theta[m] = 1.0
        trig[m] = f
        m += 1
        # S-trigger: re-centre on the furthest level reached
        if f & TRIGGER_S:
            c = math.floor(si * inv) * h if si >= shi else math.ceil(si * inv) * h
            slo = c - h
            shi = c + h
        else:
            slo, shi = grid_bracket(si, h)
        if f & TRIGGER_QV:
            c = math.floor(qi * inv) * h if qi >= qhi else math.ceil(qi * inv) * h
            qlo = c - h
            qhi = c + h
        else:
            qlo, qhi = grid_bracket(qi, h)
    return seg[:m].copy(), theta[:m].copy(), trig[:m].copy()


def euler_stops(s, q, h, mode):
    """Joint stopping grid of the Euler scheme: dyadic moves of s or of q.

    Returns ``(seg, theta, trigger)``.
    """
    if mode == SAMPLED:
        return _euler_stops_sampled(s, q, h)
    return _euler_stops_general(s, q, h, mode)


@njit(cache=True, nogil=True)
def _euler_stops_general(s, q, h, mode):
    n = s.shape[0]
    cap = 1024
    seg = np.empty(cap, np.int64)
    theta = np.empty(cap)
    trig = np.empty(cap, np.int8)
    seg[0] = 0
    theta[0] = 0.0
    trig[0] = 0
    m = 1
    slo, shi = grid_bracket(s[0], h)
    qlo, qhi = grid_bracket(q[0], h)
    for i in range(1, n):
        if mode == SAMPLED:
            f = 0
            if s[i] >= shi or s[i] <= slo:
                f |= TRIGGER_S
            if q[i] >= qhi or q[i] <= qlo:
                f |= TRIGGER_QV
            if f:
                if m >= seg.shape[0]:
                    seg = _grow(seg, m + 1)
                    theta = _grow(theta, m + 1)
                    trig = _grow(trig, m + 1)
                seg[m] = i
                theta[m] = 1.0
                trig[m] = f
                m += 1
                if f & TRIGGER_S:
                    c = math.floor(s[i] / h) * h if s[i] >= shi else math.ceil(s[i] / h) * h
                    slo = c - h
                    shi = c + h
                else:
                    slo, shi = grid_bracket(s[i], h)
                if f & TRIGGER_QV:
                    c = math.floor(q[i] / h) * h if q[i] >= qhi else math.ceil(q[i] / h) * h
                    qlo = c - h
                    qhi = c + h
                else:
                    qlo, qhi = grid_bracket(q[i], h)
        else:
            th0 = 0.0
            while True:
                ths = 2.0
                a = s[i - 1]
                b = s[i]
                if b >= shi and b > a:
                    ths = (shi - a) / (b - a)
                elif b <= slo and b < a:
                    ths = (slo - a) / (b - a)
                thq = 2.0
                a = q[i - 1]
                b = q[i]
                if b >= qhi and b > a:
                    thq = (qhi - a) / (b - a)
                elif b <= qlo and b < a:
                    thq = (qlo - a) / (b - a)
                th = min(ths, thq)
                if th > 1.0:
                    break
                f = 0
                if ths == th:
                    f |= TRIGGER_S
                if thq == th:
                    f |= TRIGGER_QV
                th = min(max(th, th0), 1.0)
                if m >= seg.shape[0]:
                    seg = _grow(seg, m + 1)
                    theta = _grow(theta, m + 1)
                    trig = _grow(trig, m + 1)
                seg[m] = i
                theta[m] = th
                trig[m] = f
                m += 1
                if f & TRIGGER_S:
                    c = shi if s[i] >= shi else slo
                    slo = c - h
                    shi = c + h
                else:
                    slo, shi = grid_bracket(_at(s, i, th), h)
                if f & TRIGGER_QV:
                    c = qhi if q[i] >= qhi else qlo
                    qlo = c - h
                    qhi = c + h
                else:
                    qlo, qhi = grid_bracket(_at(q, i, th), h)
                th0 = th
                if th >= 1.0:
                    break
    return seg[:m].copy(), theta[:m].copy(), trig[:m].copy()


@njit(nogil=True)
def euler_walk(s, q, seg, theta, x0, b, sigma, dom_lo, dom_hi):
    """Run the frozen-coefficient recursion along a stop list.

    Returns ``(X, anchor, diag)`` where ``anchor[i]`` is the state frozen at the
    last stop strictly before sample ``i`` and ``diag`` is
    ``[max drift step, max diffusion step, max |X - anchor|, clamp count]``.
    """
    n = s.shape[0]
    X = np.empty(n)
    anchor = np.empty(n)
    X[0] = x0
    anchor[0] = x0
    xt = x0
    st = s[0]
    qt = q[0]
    ev = min(max(xt, dom_lo), dom_hi)
    clamps = 0
    if ev != xt:
        clamps += 1
    bt = b(xt)
    sg = sigma(ev)
    sup_d = 0.0
    sup_s = 0.0
    sup_m = 0.0
    k = 1
    m = seg.shape[0]
    for i in range(1, n):
        anchor[i] = xt
        while k < m and seg[k] == i:
            th = theta[k]
            sv = _at(s, i, th)
            qv = _at(q, i, th)
            dd = bt * (qv - qt)
            ds = sg * (sv - st)
            x = xt + dd + ds
            sup_d = max(sup_d, abs(dd))
            sup_s = max(sup_s, abs(ds))
            sup_m = max(sup_m, abs(x - xt))
            xt = x
            st = sv
            qt = qv
            ev = min(max(xt, dom_lo), dom_hi)
            if ev != xt:
                clamps += 1
            bt = b(xt)
            sg = sigma(ev)
            k += 1
        dd = bt * (q[i] - qt)
        ds = sg * (s[i] - st)
        X[i] = xt + dd + ds
        sup_d = max(sup_d, abs(dd))
        sup_s = max(sup_s, abs(ds))
        sup_m = max(sup_m, abs(X[i] - xt))
    diag = np.empty(4)
    diag[0] = sup_d
    diag[1] = sup_s
    diag[2] = sup_m
    diag[3] = clamps
    return X, anchor, diag


# ---------------------------------------------------------------------------
# flow tables for the ODE dg/dx = sigma(g), g(0, y) = y


@njit(nogil=True)
def flow_integrate(ys, nneg, npos, dx, nsub, sigma, dsigma, d2sigma, has_d2, limit):
    """RK4 integration of (g, log g_y, d/dy log g_y) along x from 0.

    The x nodes are ``(-nneg..npos) * dx``; returns arrays shaped
    ``(len(ys), nneg + npos + 1)`` plus a status (0 ok, 1 blow-up).
    """
    ny = ys.shape[0]
    nx = nneg + npos + 1
    G = np.empty((ny, nx))
    L = np.empty((ny, nx))
    LY = np.empty((ny, nx))
    for j in range(ny):
        G[j, nneg] = ys[j]
        L[j, nneg] = 0.0
        LY[j, nneg] = 0.0
        for direction in (1, -1):
            hstep = direction * dx / nsub
            g = ys[j]
            l = 0.0
            ly = 0.0
            count = npos if direction == 1 else nneg
            for i in range(1, count + 1):
                for _ in range(nsub):
                    # stage derivatives of (g, L, LY); LY' = sigma''(g) e^L
                    k1g = sigma(g)
                    k1l = dsigma(g)
                    k1y = d2sigma(g) * math.exp(l) if has_d2 else 0.0
                    g2 = g + 0.5 * hstep * k1g
                    l2 = l + 0.5 * hstep * k1l
                    k2g = sigma(g2)
                    k2l = dsigma(g2)
                    k2y = d2sigma(g2) * math.exp(l2) if has_d2 else 0.0
                    g3 = g + 0.5 * hstep * k2g
                    l3 = l + 0.5 * hstep * k2l
                    k3g = sigma(g3)
                    k3l = dsigma(g3)
                    k3y = d2sigma(g3) * math.exp(l3) if has_d2 else 0.0
                    g4 = g + hstep * k3g
                    l4 = l + hstep * k3l
                    k4g = sigma(g4)
                    k4l = dsigma(g4)
                    k4y = d2sigma(g4) * math.exp(l4) if has_d2 else 0.0
                    g += hstep * (k1g + 2.0 * k2g + 2.0 * k3g + k4g) / 6.0
                    l += hstep * (k1l + 2.0 * k2l + 2.0 * k3l + k4l) / 6.0
                    ly += hstep * (k1y + 2.0 * k2y + 2.0 * k3y + k4y) / 6.0
                if not (abs(g) < limit and abs(l) < limit and abs(ly) < limit):
                    return G, L, LY, 1
                col = nneg + direction * i
                G[j, col] = g
                L[j, col] = l
                LY[j, col] = ly
    return G, L, LY, 0


@njit(cache=True, nogil=True)
def _hermite(u):
    u2 = u * u
    u3 = u2 * u
    return (2 * u3 - 3 * u2 + 1, u3 - 2 * u2 + u, -2 * u3 + 3 * u2, u3 - u2)


@njit(cache=True, nogil=True)
def _dhermite(u):
    u2 = u * u
    return (6 * u2 - 6 * u, 3 * u2 - 4 * u + 1, -6 * u2 + 6 * u, 3 * u2 - 2 * u)


@njit(cache=True, nogil=True)
def _locate(u, off, n):
    # cell index and local coordinate for lattice coordinate u; -1 outside
    fu = math.floor(u)
    i = int(fu) + off
    t = u - fu
    if i == n - 1 and t == 0.0:
        return n - 2, 1.0
    if i < 0 or i > n - 2:
        return -1, 0.0
    return i, t


@njit(cache=True, nogil=True)
def bicubic(F, FX, FY, FXY, lat, x, y, dxord):
    """Bicubic Hermite value (``dxord=0``) or x-derivative (``dxord=1``).

    ``lat = (x_origin, dx, i_origin, y_origin, dy, j_origin)``: column
    ``i_origin`` sits at ``x_origin`` and row ``j_origin`` at ``y_origin``.
    Local coordinates are taken relative to the origin so that results do
    not depend on how far the table extends.  Returns NaN outside the table.
    """
    xo, dx, io, yo, dy, jo = lat
    ny, nx = F.shape
    if not (math.isfinite(x) and math.isfinite(y)):
        return np.nan
    i, u = _locate((x - xo) / dx, io, nx)
    if i < 0:
        return np.nan
    if ny == 1:
        if y != yo:
            return np.nan
        j, v = 0, 0.0
    else:
        j, v = _locate((y - yo) / dy, jo, ny)
        if j < 0:
            return np.nan
    if dxord == 0:
        pu = _hermite(u)
        scale = 1.0
    else:
        pu = _dhermite(u)
        scale = 1.0 / dx
    if ny == 1:
        val = (pu[0] * F[0, i] + pu[1] * dx * FX[0, i]
               + pu[2] * F[0, i + 1] + pu[3] * dx * FX[0, i + 1])
        return val * scale
    pv = _hermite(v)
    val = 0.0
    for a in range(2):
        pa = pu[2 * a]
        da = pu[2 * a + 1] * dx
        for c in range(2):
            pc = pv[2 * c]
            dc = pv[2 * c + 1] * dy
            jj = j + c
            ii = i + a
            val += (pa * pc * F[jj, ii] + da * pc * FX[jj, ii]
                    + pa * dc * FY[jj, ii] + da * dc * FXY[jj, ii])
    return val * scale


@njit(cache=True, nogil=True)
def bicubic_pair(gt, lt, lat, x, y):
    """Values of two tables sharing one lattice at ``(x, y)``; NaNs outside."""
    F, FX, FY, FXY = gt
    L, LX, LY, LXY = lt
    xo, dx, io, yo, dy, jo = lat
    ny, nx = F.shape
    if ny < 2 or not (math.isfinite(x) and math.isfinite(y)):
        return np.nan, np.nan
    i, u = _locate((x - xo) / dx, io, nx)
    j, v = _locate((y - yo) / dy, jo, ny)
    if i < 0 or j < 0:
        return np.nan, np.nan
    pu = _hermite(u)
    pv = _hermite(v)
    g = 0.0
    l = 0.0
    for a in range(2):
        pa = pu[2 * a]
        da = pu[2 * a + 1] * dx
        ii = i + a
        for c in range(2):
            pc = pv[2 * c]
            dc = pv[2 * c + 1] * dy
            jj = j + c
            w0 = pa * pc
            w1 = da * pc
            w2 = pa * dc
            w3 = da * dc
            g += w0 * F[jj, ii] + w1 * FX[jj, ii] + w2 * FY[jj, ii] + w3 * FXY[jj, ii]
            l += w0 * L[jj, ii] + w1 * LX[jj, ii] + w2 * LY[jj, ii] + w3 * LXY[jj, ii]
    return g, l


@njit(cache=True, nogil=True)
def bicubic_many(F, FX, FY, FXY, lat, xs, ys, dxord):
    out = np.empty(xs.shape[0])
    for k in range(xs.shape[0]):
        out[k] = bicubic(F, FX, FY, FXY, lat, xs[k], ys[k], dxord)
    return out


@njit(nogil=True)
def ds_drift_solve(drv, q, x0, gt, lt, lat, b, tol, max_refine):
    """Explicit midpoint for dY = rho(drv, Y) b(g(drv, Y)) dq on the sample grid.

    Each interval is split into ``2**j`` substeps with the driver and the
    integrator interpolated linearly; ``j`` grows until two successive
    solutions agree to ``tol`` on the grid.  ``gt``/``lt`` are the 4-tuples of
    g and log g_y tables.  Returns ``(Y, status, j, where)`` with status 0 ok,
    1 table exceeded at grid index ``where``, 2 no convergence.
    """
    n = drv.shape[0]
    prev = np.empty(n)
    cur = np.empty(n)
    for j in range(max_refine + 1):
        nsub = 1 << j
        y = x0
        cur[0] = x0
        for i in range(1, n):
            d0 = drv[i - 1]
            dd = (drv[i] - d0) / nsub
            q0 = q[i - 1]
            dq = (q[i] - q0) / nsub
            for r in range(nsub):
                xa = d0 + r * dd
                ga, la = bicubic_pair(gt, lt, lat, xa, y)
                if not (math.isfinite(ga) and math.isfinite(la)):
                    return cur, 1, j, i
                fa = math.exp(-la) * b(ga)
                ym = y + 0.5 * dq * fa
                xm = xa + 0.5 * dd
                gm, lm = bicubic_pair(gt, lt, lat, xm, ym)
                if not (math.isfinite(gm) and math.isfinite(lm)):
                    return cur, 1, j, i
                y = y + dq * math.exp(-lm) * b(gm)
            cur[i] = y
        if j > 0 and sup_abs_diff(cur, prev) < tol:
            return cur, 0, j, -1
        prev, cur = cur, prev
    return prev, 2, max_refine, -1


@njit(nogil=True)
def lamperti_drift_solve(drv, q, x0, gt, lat, btilde, tol, max_refine):
    """Explicit midpoint for dZ = btilde(g(Z + drv, x0)) dq, Z_0 = 0."""
    n = drv.shape[0]
    prev = np.empty(n)
    cur = np.empty(n)
    G, GX, GY, GXY = gt
    for j in range(max_refine + 1):
        nsub = 1 << j
        z = 0.0
        cur[0] = 0.0
        for i in range(1, n):
            d0 = drv[i - 1]
            dd = (drv[i] - d0) / nsub
            q0 = q[i - 1]
            dq = (q[i] - q0) / nsub
            for r in range(nsub):
                xa = d0 + r * dd
                ga = bicubic(G, GX, GY, GXY, lat, z + xa, x0, 0)
                if not math.isfinite(ga):
                    return cur, 1, j, i
                zm = z + 0.5 * dq * btilde(ga)
                gm = bicubic(G, GX, GY, GXY, lat, zm + xa + 0.5 * dd, x0, 0)
                if not math.isfinite(gm):
                    return cur, 1, j, i
                z = z + dq * btilde(gm)
            cur[i] = z
        if j > 0 and sup_abs_diff(cur, prev) < tol:
            return cur, 0, j, -1
        prev, cur = cur, prev
    return prev, 2, max_refine, -1


# ---------------------------------------------------------------------------
# dispatch of user-supplied scalar functions


_JIT_CACHE = {}
_JIT_LOCK = threading.Lock()


def jit_scalar(fn):
    """Return a numba-callable version of ``fn`` or None if it cannot compile.

    Results are memoised per function object.
    """
    if isinstance(fn, CPUDispatcher):
        return fn
    with _JIT_LOCK:
        if fn in _JIT_CACHE:
            return _JIT_CACHE[fn]
        try:
            jf = njit(nogil=True)(fn)
            jf(0.5)
        except Exception:
            jf = None
        _JIT_CACHE[fn] = jf
        return jf


def call_kernel(kernel, fns, *args_before, tail=()):
    """Call ``kernel(*args_before, *fns, *tail)`` compiled if possible.

    Falls back to the pure-Python body of the kernel when a coefficient does
    not compile; slow but keeps arbitrary callables usable.
    """
    jitted = [jit_scalar(f) for f in fns]
    if all(j is not None for j in jitted):
        return kernel(*args_before, *jitted, *tail)
    return kernel.py_func(*args_before, *fns, *tail)


@njit(nogil=True)
def map_scalar(fn, x):
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        out[i] = fn(x[i])
    return out


def vectorize(fn):
    """Array version of a scalar function; compiled when possible."""
    jf = jit_scalar(fn)

    def apply(x):
        a = np.asarray(x, dtype=np.float64)
        flat = np.ascontiguousarray(a.reshape(-1))
        if jf is not None:
            out = map_scalar(jf, flat)
        else:
            out = np.fromiter((fn(float(v)) for v in flat), dtype=np.float64, count=flat.size)
        return out.reshape(a.shape) if a.ndim else float(out[0])

    return apply
