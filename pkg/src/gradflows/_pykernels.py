"""Pure numpy implementations of the time-stepping kernels.

These mirror ``_ckernels.pyx`` call for call and are used when the compiled
extension is missing or ``GRADFLOWS_PURE_PYTHON`` is set.

Face arrays along axis ``k`` have the node shape with one fewer entry on
that axis; boundary faces are not stored because they carry zero flux.
"""

import numpy as np
from scipy.linalg import solve_banded

FLOOR = 1e-30


def _divergence(fluxes, spacing, shape):
    """Net inflow per node from interior face fluxes (outward positive)."""
    out = np.zeros(shape)
    for axis, (F, h) in enumerate(zip(fluxes, spacing)):
        lo = [slice(None)] * len(shape)
        hi = [slice(None)] * len(shape)
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        out[tuple(lo)] -= F / h
        out[tuple(hi)] += F / h
    return out


def _pairs(a, axis):
    lo = [slice(None)] * a.ndim
    hi = [slice(None)] * a.ndim
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    return a[tuple(lo)], a[tuple(hi)]


def upwind_fluxes(rho, face_velocity):
    fluxes = []
    for axis, v in enumerate(face_velocity):
        left, right = _pairs(rho, axis)
        fluxes.append(np.where(v > 0, v * left, v * right))
    return fluxes


def upwind_step(rho, face_velocity, spacing, dt):
    """One conservative upwind step of ``rho_t + div(v rho) = 0``."""
    return rho + dt * _divergence(upwind_fluxes(rho, face_velocity), spacing, rho.shape)


def two_point_fluxes(rho, coef_left, coef_right, spacing):
    fluxes = []
    for axis, (cl, cr, h) in enumerate(zip(coef_left, coef_right, spacing)):
        left, right = _pairs(rho, axis)
        fluxes.append((cl * left - cr * right) / h)
    return fluxes


def feedback_cost(rho, logref, refmask, pnode, amp, spacing):
    """``1/2 int (|v|^2 + |g|^2) rho`` with ``g = grad log(rho/ref)`` and ``v = -g + amp * pnode``."""
    ell = np.log(np.maximum(rho, FLOOR)) - logref
    grads = np.gradient(ell, *spacing, edge_order=2)
    if rho.ndim == 1:
        grads = [grads]
    total = np.zeros(rho.shape)
    for k, g in enumerate(grads):
        v = -g + amp * pnode[k] if amp != 0.0 else -g
        total += v * v + g * g
    mask = refmask & (rho > FLOOR)
    return 0.5 * float(np.sum(np.where(mask, total * rho, 0.0))) * float(np.prod(spacing))


def fp_advance(rho, coef_left, coef_right, logref, refmask, pface, pnode,
               spacing, dt, amp_nodes, amp_mid):
    """Advance ``rho`` in place by ``len(amp_mid)`` steps; return the running action accrued.

    Each step applies the two-point drift-diffusion flux, then (when the
    amplitude is nonzero) an upwind transport by ``amp_mid[n] * pface``.
    The running cost uses the trapezoid rule in time.
    """
    shape = rho.shape
    cost = feedback_cost(rho, logref, refmask, pnode, amp_nodes[0], spacing)
    running = 0.0
    for n in range(len(amp_mid)):
        new = rho + dt * _divergence(two_point_fluxes(rho, coef_left, coef_right, spacing),
                                     spacing, shape)
        a = amp_mid[n]
        if a != 0.0:
            new = upwind_step(new, [a * p for p in pface], spacing, dt)
        rho[...] = new
        nxt = feedback_cost(rho, logref, refmask, pnode, amp_nodes[n + 1], spacing)
        running += 0.5 * (cost + nxt) * dt
        cost = nxt
    return running


def product_implicit_1d(rho_tilde, rho, dx, dt):
    """Linearly implicit product-flow step in one dimension.

    Writes ``rho = s w`` with the conserved sum ``s``; solves
    ``s (w' - w) = dt d/dx(c dw'/dx)`` with the mobility ``c`` frozen at the
    current state, then applies the resulting shared flux with opposite signs.
    Returns the new pair and the face flux.
    """
    n = rho.size
    s = rho_tilde + rho
    active = s > FLOOR
    rf = np.maximum(rho, FLOOR)
    w = np.where(active, rf / np.where(active, s, 1.0), 0.5)
    c = 0.5 * (rf[:-1] + rf[1:]) / (w[:-1] * w[1:])
    c = np.where(active[:-1] & active[1:], c, 0.0)
    a = dt * c / dx ** 2
    diag = np.where(active, s, 1.0).astype(float)
    diag[:-1] += a
    diag[1:] += a
    ab = np.zeros((3, n))
    ab[0, 1:] = -a
    ab[1] = diag
    ab[2, :-1] = -a
    rhs = np.where(active, s * w, w)
    w_new = solve_banded((1, 1), ab, rhs)
    J = -c * (w_new[1:] - w_new[:-1]) / dx
    d = _divergence([-J], (dx,), (n,))
    return rho_tilde + dt * d, rho - dt * d, J
