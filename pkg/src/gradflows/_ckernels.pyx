# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled time-stepping kernels; see ``_pykernels`` for the reference semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, fmax

cnp.import_array()

cdef double FLOOR = 1e-30


cdef inline double _up(double v, double left, double right) noexcept nogil:
    return v * left if v > 0 else v * right


cdef void _upwind_1d(double[::1] rho, double[::1] out, const double[::1] v,
                     double dx, double dt) noexcept nogil:
    cdef Py_ssize_t i, n = rho.shape[0]
    cdef double F, r = dt / dx
    for i in range(n):
        out[i] = rho[i]
    for i in range(n - 1):
        F = _up(v[i], rho[i], rho[i + 1])
        out[i] -= r * F
        out[i + 1] += r * F


cdef void _upwind_2d(double[:, ::1] rho, double[:, ::1] out, const double[:, ::1] vx,
                     const double[:, ::1] vy, double dx, double dy, double dt) noexcept nogil:
    cdef Py_ssize_t i, j, n0 = rho.shape[0], n1 = rho.shape[1]
    cdef double F, rx = dt / dx, ry = dt / dy
    for i in range(n0):
        for j in range(n1):
            out[i, j] = rho[i, j]
    for i in range(n0 - 1):
        for j in range(n1):
            F = _up(vx[i, j], rho[i, j], rho[i + 1, j])
            out[i, j] -= rx * F
            out[i + 1, j] += rx * F
    for i in range(n0):
        for j in range(n1 - 1):
            F = _up(vy[i, j], rho[i, j], rho[i, j + 1])
            out[i, j] -= ry * F
            out[i, j + 1] += ry * F


def upwind_step(rho, face_velocity, spacing, double dt):
    rho = np.ascontiguousarray(rho, dtype=np.float64)
    out = np.empty_like(rho)
    if rho.ndim == 1:
        _upwind_1d(rho, out, np.ascontiguousarray(face_velocity[0], dtype=np.float64),
                   spacing[0], dt)
    else:
        _upwind_2d(rho, out, np.ascontiguousarray(face_velocity[0], dtype=np.float64),
                   np.ascontiguousarray(face_velocity[1], dtype=np.float64),
                   spacing[0], spacing[1], dt)
    return out


cdef inline double _grad(const double[::1] f, Py_ssize_t i, Py_ssize_t n, double h) noexcept nogil:
    # numpy.gradient with edge_order=2 on a uniform grid
    if i == 0:
        return (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * h)
    if i == n - 1:
        return (3.0 * f[n - 1] - 4.0 * f[n - 2] + f[n - 3]) / (2.0 * h)
    return (f[i + 1] - f[i - 1]) / (2.0 * h)


cdef double _cost_1d(const double[::1] rho, const double[::1] logref,
                     const unsigned char[::1] refmask, const double[::1] pnode,
                     double amp, double dx, double[::1] ell) noexcept nogil:
    cdef Py_ssize_t i, n = rho.shape[0]
    cdef double g, v, total = 0.0
    for i in range(n):
        ell[i] = log(fmax(rho[i], FLOOR)) - logref[i]
    for i in range(n):
        if refmask[i] and rho[i] > FLOOR:
            g = _grad(ell, i, n, dx)
            v = -g + amp * pnode[i]
            total += (v * v + g * g) * rho[i]
    return 0.5 * total * dx


cdef double _cost_2d(const double[:, ::1] rho, const double[:, ::1] logref,
                     const unsigned char[:, ::1] refmask, const double[:, :, ::1] pnode,
                     double amp, double dx, double dy, double[:, ::1] ell,
                     double[::1] colbuf) noexcept nogil:
    cdef Py_ssize_t i, j, n0 = rho.shape[0], n1 = rho.shape[1]
    cdef double gx, gy, vx, vy, total = 0.0
    for i in range(n0):
        for j in range(n1):
            ell[i, j] = log(fmax(rho[i, j], FLOOR)) - logref[i, j]
    for j in range(n1):
        for i in range(n0):
            colbuf[i] = ell[i, j]
        for i in range(n0):
            if refmask[i, j] and rho[i, j] > FLOOR:
                gx = _grad(colbuf, i, n0, dx)
                gy = _grad(ell[i, :], j, n1, dy)
                vx = -gx + amp * pnode[0, i, j]
                vy = -gy + amp * pnode[1, i, j]
                total += (vx * vx + vy * vy + gx * gx + gy * gy) * rho[i, j]
    return 0.5 * total * dx * dy


def feedback_cost(rho, logref, refmask, pnode, double amp, spacing):
    rho = np.ascontiguousarray(rho, dtype=np.float64)
    mask = np.ascontiguousarray(refmask, dtype=np.uint8)
    pnode = np.ascontiguousarray(pnode, dtype=np.float64)
    logref = np.ascontiguousarray(logref, dtype=np.float64)
    ell = np.empty_like(rho)
    if rho.ndim == 1:
        return _cost_1d(rho, logref, mask, pnode[0], amp, spacing[0], ell)
    return _cost_2d(rho, logref, mask, pnode, amp, spacing[0], spacing[1], ell,
                    np.empty(rho.shape[0]))


cdef void _two_point_1d(double[::1] rho, double[::1] tmp, const double[::1] cl,
                        const double[::1] cr, double dx, double dt) noexcept nogil:
    cdef Py_ssize_t i, n = rho.shape[0]
    cdef double F, r = dt / (dx * dx)
    for i in range(n):
        tmp[i] = rho[i]
    for i in range(n - 1):
        F = cl[i] * tmp[i] - cr[i] * tmp[i + 1]
        rho[i] -= r * F
        rho[i + 1] += r * F


cdef void _two_point_2d(double[:, ::1] rho, double[:, ::1] tmp,
                        const double[:, ::1] clx, const double[:, ::1] crx,
                        const double[:, ::1] cly, const double[:, ::1] cry,
                        double dx, double dy, double dt) noexcept nogil:
    cdef Py_ssize_t i, j, n0 = rho.shape[0], n1 = rho.shape[1]
    cdef double F, rx = dt / (dx * dx), ry = dt / (dy * dy)
    for i in range(n0):
        for j in range(n1):
            tmp[i, j] = rho[i, j]
    for i in range(n0 - 1):
        for j in range(n1):
            F = clx[i, j] * tmp[i, j] - crx[i, j] * tmp[i + 1, j]
            rho[i, j] -= rx * F
            rho[i + 1, j] += rx * F
    for i in range(n0):
        for j in range(n1 - 1):
            F = cly[i, j] * tmp[i, j] - cry[i, j] * tmp[i, j + 1]
            rho[i, j] -= ry * F
            rho[i, j + 1] += ry * F


def fp_advance(cnp.ndarray rho, coef_left, coef_right, logref, refmask, pface, pnode,
               spacing, double dt, amp_nodes, amp_mid):
    """Advance ``rho`` in place; see ``_pykernels.fp_advance``."""
    if not (rho.flags.c_contiguous and rho.dtype == np.float64):
        raise ValueError("rho must be a C-contiguous float64 array")
    cdef const double[::1] an = np.ascontiguousarray(amp_nodes, dtype=np.float64)
    cdef const double[::1] am = np.ascontiguousarray(amp_mid, dtype=np.float64)
    cdef Py_ssize_t k, nsteps = am.shape[0]
    cdef double cost, nxt, running = 0.0
    mask = np.ascontiguousarray(refmask, dtype=np.uint8)
    logref = np.ascontiguousarray(logref, dtype=np.float64)
    pnode = np.ascontiguousarray(pnode, dtype=np.float64)
    tmp = np.empty_like(rho)
    ell = np.empty_like(rho)
    cdef double[::1] r1, t1, e1
    cdef double[:, ::1] r2, t2, e2
    cdef double dx = spacing[0], dy
    if rho.ndim == 1:
        r1, t1, e1 = rho, tmp, ell
        cl = np.ascontiguousarray(coef_left[0], dtype=np.float64)
        cr = np.ascontiguousarray(coef_right[0], dtype=np.float64)
        pf = np.ascontiguousarray(pface[0], dtype=np.float64)
        cost = _cost_1d(r1, logref, mask, pnode[0], an[0], dx, e1)
        for k in range(nsteps):
            _two_point_1d(r1, t1, cl, cr, dx, dt)
            if am[k] != 0.0:
                _upwind_1d(r1, t1, am[k] * pf, dx, dt)
                r1[:] = t1
            nxt = _cost_1d(r1, logref, mask, pnode[0], an[k + 1], dx, e1)
            running += 0.5 * (cost + nxt) * dt
            cost = nxt
        return running
    dy = spacing[1]
    r2, t2, e2 = rho, tmp, ell
    colbuf = np.empty(rho.shape[0])
    clx = np.ascontiguousarray(coef_left[0], dtype=np.float64)
    cly = np.ascontiguousarray(coef_left[1], dtype=np.float64)
    crx = np.ascontiguousarray(coef_right[0], dtype=np.float64)
    cry = np.ascontiguousarray(coef_right[1], dtype=np.float64)
    pfx = np.ascontiguousarray(pface[0], dtype=np.float64)
    pfy = np.ascontiguousarray(pface[1], dtype=np.float64)
    cost = _cost_2d(r2, logref, mask, pnode, an[0], dx, dy, e2, colbuf)
    for k in range(nsteps):
        _two_point_2d(r2, t2, clx, crx, cly, cry, dx, dy, dt)
        if am[k] != 0.0:
            _upwind_2d(r2, t2, am[k] * pfx, am[k] * pfy, dx, dy, dt)
            r2[:, :] = t2
        nxt = _cost_2d(r2, logref, mask, pnode, an[k + 1], dx, dy, e2, colbuf)
        running += 0.5 * (cost + nxt) * dt
        cost = nxt
    return running


def product_implicit_1d(rho_tilde, rho, double dx, double dt):
    """Thomas-algorithm version of ``_pykernels.product_implicit_1d``."""
    cdef const double[::1] rt = np.ascontiguousarray(rho_tilde, dtype=np.float64)
    cdef const double[::1] r = np.ascontiguousarray(rho, dtype=np.float64)
    cdef Py_ssize_t i, n = r.shape[0]
    out_t = np.empty(n)
    out_r = np.empty(n)
    J_arr = np.empty(n - 1)
    cdef double[::1] ot = out_t, orr = out_r, J = J_arr
    cdef double[::1] s = np.empty(n), w = np.empty(n), c = np.empty(n - 1)
    cdef double[::1] cp = np.empty(n), dp = np.empty(n), wn = np.empty(n)
    cdef unsigned char[::1] active = np.empty(n, dtype=np.uint8)
    cdef double a, rf0, rf1, lower, diag, upper, rhs, m, d
    cdef double scale = dt / (dx * dx)
    with nogil:
        for i in range(n):
            s[i] = rt[i] + r[i]
            active[i] = s[i] > FLOOR
            w[i] = fmax(r[i], FLOOR) / s[i] if active[i] else 0.5
        for i in range(n - 1):
            if active[i] and active[i + 1]:
                rf0 = fmax(r[i], FLOOR)
                rf1 = fmax(r[i + 1], FLOOR)
                c[i] = 0.5 * (rf0 + rf1) / (w[i] * w[i + 1])
            else:
                c[i] = 0.0
        # forward sweep
        for i in range(n):
            lower = -scale * c[i - 1] if i > 0 else 0.0
            upper = -scale * c[i] if i < n - 1 else 0.0
            diag = s[i] if active[i] else 1.0
            if i > 0:
                diag += scale * c[i - 1]
            if i < n - 1:
                diag += scale * c[i]
            rhs = s[i] * w[i] if active[i] else w[i]
            if i == 0:
                cp[i] = upper / diag
                dp[i] = rhs / diag
            else:
                m = diag - lower * cp[i - 1]
                cp[i] = upper / m
                dp[i] = (rhs - lower * dp[i - 1]) / m
        wn[n - 1] = dp[n - 1]
        for i in range(n - 2, -1, -1):
            wn[i] = dp[i] - cp[i] * wn[i + 1]
        for i in range(n - 1):
            J[i] = -c[i] * (wn[i + 1] - wn[i]) / dx
        for i in range(n):
            d = 0.0
            if i < n - 1:
                d += J[i]
            if i > 0:
                d -= J[i - 1]
            d = d / dx
            ot[i] = rt[i] + dt * d
            orr[i] = r[i] - dt * d
    return out_t, out_r, J_arr
