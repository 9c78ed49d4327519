"""Compiled kernels: potential derivatives and a Dormand-Prince 8(5,3) integrator.

The integrator advances ``y = (x, xi[, J])`` under ``x' = 2 xi, xi' = -dV(x)`` and,
optionally, the variational equation ``J' = A(t) J`` with
``A = [[0, 2I], [-Hess V, 0]]``.  It supports negative time, exact landing on
requested sample times, and detection of the first outward crossing of an escape
radius.
"""

import numpy as np
from numba import njit, prange
from scipy.integrate._ivp import dop853_coefficients as _dop

# DOP853 tableau (the 12 stages of the step proper)
_NS = _dop.N_STAGES
_A = np.ascontiguousarray(_dop.A[:_NS, :_NS])
_B = np.ascontiguousarray(_dop.B)
_E3 = np.ascontiguousarray(_dop.E3)
_E5 = np.ascontiguousarray(_dop.E5)

_HASH_MOD = 999999999999989

STATUS_DONE = 0
STATUS_ESCAPED = 1
STATUS_UNDERFLOW = 2
STATUS_NONFINITE = 3
STATUS_LOW_KINETIC = 4
STATUS_MAXSTEPS = 5


@njit(cache=True)
def _profile_derivs(kind, q, poly_row):
    """g(q), g'(q), g''(q) for the radial profile of one bump."""
    if kind == 0:
        e = np.exp(-0.5 * q)
        return e, -0.5 * e, 0.25 * e
    if kind == 2:
        pv = 1.0
        dp = 0.0
        d2p = 0.0
        for k in range(poly_row.shape[0]):
            c = poly_row[k]
            kk = k + 1
            pv += c * q ** kk
            dp += c * kk * q ** (kk - 1)
            if kk >= 2:
                d2p += c * kk * (kk - 1) * q ** (kk - 2)
        e = np.exp(-0.5 * q)
        return pv * e, (dp - 0.5 * pv) * e, (d2p - dp + 0.25 * pv) * e
    # eckart
    u = np.sqrt(q)
    if q < 1e-4:
        s2 = 1.0 - q + 2.0 * q * q / 3.0 - 17.0 * q ** 3 / 45.0
        g1 = -1.0 + 4.0 * q / 3.0 - 17.0 * q * q / 15.0 + 248.0 * q ** 3 / 315.0
        g2 = 4.0 / 3.0 - 34.0 * q / 15.0 + 248.0 * q * q / 105.0
        return s2, g1, g2
    ch = np.cosh(u)
    s2 = 1.0 / (ch * ch)
    th = np.tanh(u)
    g1 = -s2 * th / u
    dphi = -((-2.0 * s2 * th * th + s2 * s2) * u - s2 * th) / (u * u)
    return s2, g1, dphi / (2.0 * u)


@njit(cache=True)
def potential_derivs(kind, amps, centers, widths, poly, x, grad, hess, want_hess):
    """Return V(x); fill grad (n,) and, if want_hess, hess (n, n)."""
    n = x.shape[0]
    v = 0.0
    for i in range(n):
        grad[i] = 0.0
        if want_hess:
            for j in range(n):
                hess[i, j] = 0.0
    d = np.empty(n)
    for b in range(amps.shape[0]):
        w = widths[b]
        q = 0.0
        for i in range(n):
            d[i] = (x[i] - centers[b, i]) / w
            q += d[i] * d[i]
        g0, g1, g2 = _profile_derivs(kind, q, poly[b])
        a = amps[b]
        v += a * g0
        for i in range(n):
            grad[i] += a * g1 * 2.0 * d[i] / w
        if want_hess:
            w2 = w * w
            for i in range(n):
                for j in range(n):
                    hij = 4.0 * g2 * d[i] * d[j]
                    if i == j:
                        hij += 2.0 * g1
                    hess[i, j] += a * hij / w2
    return v


@njit(cache=True)
def _rhs(y, out, n, with_jac, kind, amps, centers, widths, poly, grad, hess, xbuf):
    for i in range(n):
        xbuf[i] = y[i]
    potential_derivs(kind, amps, centers, widths, poly, xbuf, grad, hess, with_jac)
    for i in range(n):
        out[i] = 2.0 * y[n + i]
        out[n + i] = -grad[i]
    if with_jac:
        m = 2 * n
        base = m
        # J stored row-major (m x m) after the base state
        for r in range(n):
            for c in range(m):
                out[base + r * m + c] = 2.0 * y[base + (n + r) * m + c]
        for r in range(n):
            for c in range(m):
                acc = 0.0
                for k in range(n):
                    acc -= hess[r, k] * y[base + k * m + c]
                out[base + (n + r) * m + c] = acc


@njit(cache=True)
def _step(y, k, hs, ynew, ytmp, n, with_jac, kind, amps, centers, widths, poly,
          grad, hess, xbuf):
    """One DOP853 step of size hs from y; k[0] must hold f(y).  Fills k[1:12], ynew."""
    dim = y.shape[0]
    for st in range(1, _NS):
        for j in range(dim):
            acc = 0.0
            for m in range(st):
                acc += _A[st, m] * k[m, j]
            ytmp[j] = y[j] + hs * acc
        _rhs(ytmp, k[st], n, with_jac, kind, amps, centers, widths, poly, grad, hess, xbuf)
    for j in range(dim):
        acc = 0.0
        for m in range(_NS):
            acc += _B[m] * k[m, j]
        ynew[j] = y[j] + hs * acc


@njit(cache=True)
def _error_norm(y, ynew, k, hs, rtol, atol):
    dim = y.shape[0]
    e5 = 0.0
    e3 = 0.0
    for j in range(dim):
        sc = atol + rtol * max(abs(y[j]), abs(ynew[j]))
        a5 = 0.0
        a3 = 0.0
        for m in range(_NS + 1):
            a5 += _E5[m] * k[m, j]
            a3 += _E3[m] * k[m, j]
        e5 += (a5 / sc) ** 2
        e3 += (a3 / sc) ** 2
    den = e5 + 0.01 * e3
    if den <= 0.0:
        return 0.0
    return abs(hs) * e5 / np.sqrt(den * dim)


@njit(cache=True)
def integrate(y0, t_end, n, with_jac, kind, amps, centers, widths, poly,
              rtol, atol, esc_radius, min_kinetic, sample_times, samples, max_steps,
              visit_r2, itin):
    """Integrate from t=0 to t_end (either sign).

    Returns (y, t_reached, status, nsteps, nsamples).  ``samples`` receives the
    state at each entry of ``sample_times`` (same sign as t_end, increasing in
    |t|).  Escape is the first crossing of |x| = esc_radius with outward radial
    velocity in the direction of integration (disabled for esc_radius <= 0); the
    crossing is located on a cubic Hermite interpolant and the returned state is
    obtained by a final exact step to that time.

    When ``visit_r2`` is non-empty, closest approaches to bump j within
    ``sqrt(visit_r2[j])`` are recorded: ``itin[0]`` receives a hash of the visit
    sequence and ``itin[1]`` its length.
    """
    dim = y0.shape[0]
    nb = visit_r2.shape[0]
    itin[0] = 0
    itin[1] = 0
    y = y0.copy()
    ynew = np.empty(dim)
    ytmp = np.empty(dim)
    k = np.empty((_NS + 1, dim))
    grad = np.empty(n)
    hess = np.empty((n, n))
    xbuf = np.empty(n)
    sgn = 1.0 if t_end >= 0 else -1.0
    T = abs(t_end)
    ns = sample_times.shape[0]
    si = 0
    while si < ns and abs(sample_times[si]) <= 0.0:
        for j in range(dim):
            samples[si, j] = y[j]
        si += 1
    if T == 0.0:
        return y, 0.0, STATUS_DONE, 0, si
    _rhs(y, k[0], n, with_jac, kind, amps, centers, widths, poly, grad, hess, xbuf)
    # initial step (Hairer's heuristic, simplified)
    d0 = 0.0
    d1 = 0.0
    for j in range(dim):
        sc = atol + rtol * abs(y[j])
        d0 += (y[j] / sc) ** 2
        d1 += (k[0, j] / sc) ** 2
    d0 = np.sqrt(d0 / dim)
    d1 = np.sqrt(d1 / dim)
    if d0 < 1e-5 or d1 < 1e-5:
        h = 1e-6
    else:
        h = 0.01 * d0 / d1
    h = min(h, 0.1, T)
    t = 0.0
    nsteps = 0
    esc2 = esc_radius * esc_radius
    while t < T:
        if nsteps >= max_steps:
            return y, sgn * t, STATUS_MAXSTEPS, nsteps, si
        # land exactly on the next sample time or the end point
        target = T
        if si < ns and abs(sample_times[si]) < target:
            target = abs(sample_times[si])
        hstep = min(h, target - t)
        hit = hstep >= target - t
        hs = sgn * hstep
        _step(y, k, hs, ynew, ytmp, n, with_jac, kind, amps, centers, widths, poly,
              grad, hess, xbuf)
        finite = True
        for j in range(dim):
            if not np.isfinite(ynew[j]):
                finite = False
                break
        if finite:
            _rhs(ynew, k[_NS], n, with_jac, kind, amps, centers, widths, poly, grad, hess,
                 xbuf)
            err = _error_norm(y, ynew, k, hs, rtol, atol)
        else:
            err = np.inf
        if not np.isfinite(err):
            if hstep < 1e-14 * max(1.0, t):
                return y, sgn * t, STATUS_NONFINITE, nsteps, si
            h = 0.25 * hstep
            continue
        if err <= 1.0:
            nsteps += 1
            for b in range(nb):
                so = 0.0
                sn = 0.0
                d2 = 0.0
                for i in range(n):
                    so += (y[i] - centers[b, i]) * y[n + i]
                    dn = ynew[i] - centers[b, i]
                    sn += dn * ynew[n + i]
                    d2 += dn * dn
                if sgn * so < 0.0 and sgn * sn >= 0.0 and d2 < visit_r2[b]:
                    itin[0] = (itin[0] * (nb + 1) + b + 1) % _HASH_MOD
                    itin[1] += 1
            if esc_radius > 0.0:
                r2 = 0.0
                rv = 0.0
                for i in range(n):
                    r2 += ynew[i] * ynew[i]
                    rv += ynew[i] * ynew[n + i]
                if r2 > esc2 and sgn * rv > 0.0:
                    r2lo = 0.0
                    for i in range(n):
                        r2lo += y[i] * y[i]
                    lo = 0.0
                    hi = 1.0 if r2lo <= esc2 else 0.0
                    for _ in range(60):
                        if hi <= 0.0:
                            break
                        mid = 0.5 * (lo + hi)
                        # cubic Hermite interpolant of x on the step
                        h00 = (1 + 2 * mid) * (1 - mid) ** 2
                        h10 = mid * (1 - mid) ** 2
                        h01 = mid * mid * (3 - 2 * mid)
                        h11 = mid * mid * (mid - 1)
                        r2m = 0.0
                        for i in range(n):
                            xi_ = (h00 * y[i] + h10 * hs * k[0, i] + h01 * ynew[i]
                                   + h11 * hs * k[_NS, i])
                            r2m += xi_ * xi_
                        if r2m > esc2:
                            hi = mid
                        else:
                            lo = mid
                    if hi > 0.0:
                        _step(y, k, hi * hs, ynew, ytmp, n, with_jac, kind, amps, centers,
                              widths, poly, grad, hess, xbuf)
                    else:
                        for j in range(dim):
                            ynew[j] = y[j]
                    kin = 0.0
                    for i in range(n):
                        kin += ynew[n + i] * ynew[n + i]
                    status = STATUS_LOW_KINETIC if kin < min_kinetic else STATUS_ESCAPED
                    return ynew.copy(), sgn * (t + hi * hstep), status, nsteps, si
            t = target if hit else t + hstep
            for j in range(dim):
                y[j] = ynew[j]
                k[0, j] = k[_NS, j]
            if hit and si < ns and abs(sample_times[si]) <= t:
                for j in range(dim):
                    samples[si, j] = y[j]
                si += 1
                while si < ns and abs(sample_times[si]) <= t:
                    for j in range(dim):
                        samples[si, j] = y[j]
                    si += 1
            fac = 0.9 * err ** (-1.0 / 8.0) if err > 0.0 else 10.0
            fac = min(10.0, max(0.2, fac))
            if hit:
                h = max(h, hstep * fac)
            else:
                h = hstep * fac
        else:
            fac = max(0.2, 0.9 * err ** (-1.0 / 8.0))
            h = hstep * fac
            if h < 1e-14 * max(1.0, t):
                return y, sgn * t, STATUS_UNDERFLOW, nsteps, si
    return y, sgn * t, STATUS_DONE, nsteps, si


@njit(cache=True)
def escape_batch(Y0, t_max, n, kind, amps, centers, widths, poly, rtol, atol,
                 esc_radius, min_kinetic, max_steps, visit_r2, out_t, out_status, out_y,
                 out_itin):
    """Integrate each row of Y0 until escape or |t| = |t_max|."""
    empty_t = np.empty(0)
    empty_s = np.empty((0, Y0.shape[1]))
    for i in prange(Y0.shape[0]):
        itin = np.zeros(2, dtype=np.int64)
        y, t, st, _, _ = integrate(Y0[i], t_max, n, False, kind, amps, centers, widths,
                                   poly, rtol, atol, esc_radius, min_kinetic,
                                   empty_t, empty_s, max_steps, visit_r2, itin)
        out_itin[i, 0] = itin[0]
        out_itin[i, 1] = itin[1]
        out_t[i] = t
        out_status[i] = st
        for j in range(Y0.shape[1]):
            out_y[i, j] = y[j]


@njit(cache=True)
def sample_batch(Y0, times, n, with_jac, kind, amps, centers, widths, poly, rtol, atol,
                 max_steps, out, out_status):
    """States of each trajectory at the given times (same sign, increasing |t|)."""
    no_visits = np.empty(0)
    for i in prange(Y0.shape[0]):
        itin = np.zeros(2, dtype=np.int64)
        _, _, st, _, _ = integrate(Y0[i], times[-1], n, with_jac, kind, amps, centers,
                                   widths, poly, rtol, atol, 0.0, 0.0, times,
                                   out[i], max_steps, no_visits, itin)
        out_status[i] = st


@njit(cache=True)
def greedy_separated(states, order, eps, nsteps):
    """Greedy maximal (eps, t)-separated subset.

    ``states`` has shape (N, >= nsteps + 1, d); candidates are admitted in ``order``
    when, against every admitted point, the distance exceeds eps at some sample.
    """
    N = order.shape[0]
    d = states.shape[2]
    eps2 = eps * eps
    members = np.empty(N, dtype=np.int64)
    count = 0
    for oi in range(N):
        idx = order[oi]
        ok = True
        for j in range(count):
            q = members[j]
            apart = False
            for k in range(nsteps + 1):
                acc = 0.0
                for c in range(d):
                    diff = states[idx, k, c] - states[q, k, c]
                    acc += diff * diff
                if acc > eps2:
                    apart = True
                    break
            if not apart:
                ok = False
                break
        if ok:
            members[count] = idx
            count += 1
    return members[:count]


@njit(cache=True)
def greedy_net(points, eps):
    """Indices of a greedy eps-net: every point lies within eps of a chosen one."""
    N = points.shape[0]
    d = points.shape[1]
    eps2 = eps * eps
    centers = np.empty(N, dtype=np.int64)
    count = 0
    for i in range(N):
        covered = False
        for j in range(count):
            acc = 0.0
            q = centers[j]
            for c in range(d):
                diff = points[i, c] - points[q, c]
                acc += diff * diff
            if acc < eps2:
                covered = True
                break
        if not covered:
            centers[count] = i
            count += 1
    return centers[:count]
