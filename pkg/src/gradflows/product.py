"""Steepest descent of ``D(rho_tilde || rho)`` on a product of density spaces.

Both components move under one shared flux
``J = rho_tilde grad log(rho_tilde/rho) = rho grad(rho_tilde/rho)``:

    rho_tilde_t = div J,    rho_t = -div J,

so ``rho_tilde + rho`` is constant in time at every point and the pair
converges to the average of the initial densities.

The default stepper is linearly implicit in the fraction ``w = rho / s``
with ``s = rho_tilde + rho`` held fixed, which keeps ``w`` in ``[0, 1]``
for any step size. The effective diffusivity ``1 + rho_tilde/rho`` grows
like a Gaussian ratio in the tails, so explicit stepping is offered only
for short runs on tame pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from ._backend import kernels
from .density import (FLOOR, GridDensity, VelocityField, _check_same_grid,
                      check_support, safe_log)
from .euclidean import AccountedCost, GapReport
from .wasserstein import (CFL_MAX, DIFFUSION_CFL, NegativeDensityError, StabilityError,
                          _check_nonnegative, _pairs, cfl_ratio, face_average, space_bump,
                          time_profile)

MASS_TOL = 1e-9
DIVERGENCE_SLACK = 1e-8
MAX_HALVINGS = 40


@dataclass(frozen=True)
class ProductState:
    """A pair of normalised densities on one grid."""

    rho_tilde: GridDensity
    rho: GridDensity

    def __post_init__(self):
        _check_same_grid(self.rho_tilde, self.rho)
        for name, d in (("rho_tilde", self.rho_tilde), ("rho", self.rho)):
            if abs(d.mass - 1.0) > MASS_TOL:
                raise ValueError(f"{name} has mass {d.mass:.12g}, expected 1")

    @property
    def grid(self):
        return self.rho.grid

    @property
    def total(self) -> np.ndarray:
        return self.rho_tilde.values + self.rho.values

    @classmethod
    def from_arrays(cls, grid, rho_tilde, rho) -> "ProductState":
        return cls(GridDensity(grid, rho_tilde), GridDensity(grid, rho))


@dataclass(frozen=True)
class ProductReport:
    """Snapshot-time series of a product-flow run, plus per-step diagnostics."""

    times: np.ndarray
    divergence_series: np.ndarray
    reff_rate_series: np.ndarray
    sum_drift_series: np.ndarray
    mass_tilde_series: np.ndarray
    mass_series: np.ndarray
    action_running: np.ndarray
    terminal_divergence: float
    step_times: np.ndarray
    step_divergence: np.ndarray
    step_rate: np.ndarray
    max_antisymmetry: float
    halvings: int
    stop_time: float

    @property
    def action(self) -> AccountedCost:
        return AccountedCost(float(self.action_running[-1]), self.terminal_divergence)

    @property
    def max_divergence_increase(self) -> float:
        return float(np.max(np.diff(self.step_divergence), initial=-np.inf))


def _ratio_parts(rt: np.ndarray, r: np.ndarray, spacing):
    """``q = rho_tilde/rho``, ``g = grad log q`` and the mask where both exceed the floor."""
    rf = np.maximum(r, FLOOR)
    q = np.maximum(rt, 0.0) / rf
    ell = safe_log(rt) - np.log(rf)
    grads = np.gradient(ell, *spacing, edge_order=2)
    g = np.stack([grads] if rt.ndim == 1 else grads)
    mask = (rt > FLOOR) & (r > FLOOR)
    return q, g, mask


def _divergence_value(rt, r, cell) -> float:
    integrand = np.where(rt > 0, rt * (safe_log(rt) - safe_log(r)), 0.0)
    return float(np.sum(integrand) * cell)


def _rates(rt, r, spacing):
    """Return ``(int g^2 rho_tilde, int |q g|^2 rho)`` over the masked nodes."""
    q, g, mask = _ratio_parts(rt, r, spacing)
    g2 = np.sum(g ** 2, axis=0)
    cell = float(np.prod(spacing))
    first = float(np.sum(np.where(mask, g2 * rt, 0.0)) * cell)
    second = float(np.sum(np.where(mask, q * q * g2 * r, 0.0)) * cell)
    return first, second


# ---------------------------------------------------------------- fluxes


def _face_parts(rt, r, axis):
    rf = np.maximum(r, FLOOR)
    q = np.maximum(rt, 0.0) / rf
    q0, q1 = _pairs(q, axis)
    r0, r1 = _pairs(rf, axis)
    a0, a1 = _pairs(rt, axis)
    b0, b1 = _pairs(r, axis)
    live = ((a0 > FLOOR) | (b0 > FLOOR)) & ((a1 > FLOOR) | (b1 > FLOOR))
    return q0, q1, r0, r1, live


def _stabilised_faces(rt, r, spacing):
    out = []
    for axis, h in enumerate(spacing):
        q0, q1, r0, r1, live = _face_parts(rt, r, axis)
        J = 0.5 * (r0 + r1) * (q1 - q0) / h
        out.append(np.where(live, J, 0.0))
    return out


def shared_flux(state: ProductState) -> list[np.ndarray]:
    """The common face flux ``J`` of both components, one array per axis.

    Evaluated as ``rho_f (q_{i+1} - q_i) / dx`` with ``q = rho_tilde/rho`` and
    ``rho_f`` the face mean of ``rho``; algebraically this is
    ``grad rho_tilde - q_f grad rho`` with ``q_f`` the face mean of ``q``.
    Faces next to a node where both densities are below the floor carry
    no flux.

    Raises
    ------
    SupportError
        If ``rho_tilde`` has mass where ``rho`` vanishes.
    """
    check_support(state.rho_tilde, state.rho)
    return _stabilised_faces(state.rho_tilde.values, state.rho.values, state.grid.spacing)


def flux_forms(state: ProductState):
    """Evaluate the shared flux in three algebraically equal face forms.

    Returns
    -------
    stabilised : list of arrays
        ``grad rho_tilde - q_f grad rho``.
    log_form : list of arrays
        ``rho_tilde_f grad log q`` with the face value of ``rho_tilde``
        taken as ``rho_f`` times the logarithmic mean of ``q``.
    ratio_form : list of arrays
        ``rho_f grad q``.
    """
    check_support(state.rho_tilde, state.rho)
    rt, r = state.rho_tilde.values, state.rho.values
    stab, logf, ratio = [], [], []
    for axis, h in enumerate(state.grid.spacing):
        q0, q1, r0, r1, live = _face_parts(rt, r, axis)
        a0, a1 = _pairs(np.maximum(rt, 0.0), axis)
        rface = 0.5 * (r0 + r1)
        qface = 0.5 * (q0 + q1)
        stab.append(np.where(live, ((a1 - a0) - qface * (r1 - r0)) / h, 0.0))
        ratio.append(np.where(live, rface * (q1 - q0) / h, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            l0, l1 = np.log(np.maximum(q0, FLOOR)), np.log(np.maximum(q1, FLOOR))
            close = np.abs(l1 - l0) < 1e-12
            logmean = np.where(close, 0.5 * (q0 + q1), (q1 - q0) / np.where(close, 1.0, l1 - l0))
        logf.append(np.where(live, rface * logmean * (l1 - l0) / h, 0.0))
    return stab, logf, ratio


def _apply_flux(rt, r, fluxes, spacing, dt):
    # net inflow of the flux field -J is div J
    d = np.zeros(rt.shape)
    for axis, (J, h) in enumerate(zip(fluxes, spacing)):
        lo = [slice(None)] * rt.ndim
        hi = [slice(None)] * rt.ndim
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        d[tuple(lo)] += J / h
        d[tuple(hi)] -= J / h
    return rt + dt * d, r - dt * d


# ---------------------------------------------------------------- stepping


def explicit_dt_bound(state: ProductState) -> float:
    """``0.4 / sum_k dx_k^-2 / max(1 + q)`` over nodes where ``rho`` is live."""
    rt, r = state.rho_tilde.values, state.rho.values
    live = r > FLOOR
    qmax = float(np.max(np.where(live, rt / np.maximum(r, FLOOR), 0.0), initial=0.0))
    return DIFFUSION_CFL / sum(h ** -2 for h in state.grid.spacing) / (1.0 + qmax)


def _implicit_nd(rt, r, spacing, dt):
    """Sparse version of the fraction-implicit step for any dimension."""
    shape = r.shape
    n = r.size
    s = (rt + r).ravel()
    active = s > FLOOR
    rf = np.maximum(r, FLOOR).ravel()
    w = np.where(active, rf / np.where(active, s, 1.0), 0.5)
    idx = np.arange(n).reshape(shape)
    rows, cols, vals = [], [], []
    diag = np.where(active, s, 1.0)
    coefs = []
    for axis, h in enumerate(spacing):
        i0, i1 = (a.ravel() for a in _pairs(idx, axis))
        c = 0.5 * (rf[i0] + rf[i1]) / (w[i0] * w[i1])
        c = np.where(active[i0] & active[i1], c, 0.0)
        coefs.append((i0, i1, c, h))
        a = dt * c / h ** 2
        np.add.at(diag, i0, a)
        np.add.at(diag, i1, a)
        rows += [i0, i1]
        cols += [i1, i0]
        vals += [-a, -a]
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    w_new = spsolve(A, np.where(active, s * w, w))
    fluxes = []
    for axis, (i0, i1, c, h) in enumerate(coefs):
        face_shape = list(shape)
        face_shape[axis] -= 1
        fluxes.append((-c * (w_new[i1] - w_new[i0]) / h).reshape(face_shape))
    rt_new, r_new = _apply_flux(rt, r, fluxes, spacing, dt)
    return rt_new, r_new, fluxes


def _step_arrays(rt, r, spacing, dt, method):
    if method == "implicit":
        if rt.ndim == 1:
            a, b, J = kernels.product_implicit_1d(rt, r, spacing[0], dt)
            return a, b, [J]
        return _implicit_nd(rt, r, spacing, dt)
    if method == "explicit":
        J = _stabilised_faces(rt, r, spacing)
        a, b = _apply_flux(rt, r, J, spacing, dt)
        return a, b, J
    raise ValueError(f"unknown method {method!r}; choose 'implicit' or 'explicit'")


def product_step(state: ProductState, dt: float, method: str = "implicit") -> ProductState:
    """Advance the pair by one step of the shared-flux scheme.

    Both components are updated from the same face flux with opposite
    signs, so ``rho_tilde + rho`` and each mass are preserved to roundoff.

    Parameters
    ----------
    state : ProductState
    dt : float
    method : {"implicit", "explicit"}
        ``"explicit"`` evaluates :func:`shared_flux` at the current state and
        requires ``dt <= explicit_dt_bound(state)``.

    Raises
    ------
    StabilityError
        Explicit step above the stability bound.
    NegativeDensityError
        A component dropped below ``-1e-12``.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    check_support(state.rho_tilde, state.rho)
    if method == "explicit":
        bound = explicit_dt_bound(state)
        if dt > bound:
            raise StabilityError(f"dt={dt:.3g} exceeds the explicit bound {bound:.3g}")
    rt, r, _ = _step_arrays(state.rho_tilde.values, state.rho.values,
                            state.grid.spacing, dt, method)
    _check_nonnegative(rt, "product_step (rho_tilde)")
    _check_nonnegative(r, "product_step (rho)")
    return ProductState.from_arrays(state.grid, rt, r)


def _step_cost(rt, r, spacing, amp=0.0, pt=None, p=None):
    """Running cost density integral for feedback velocities plus ``amp`` times ``(pt, p)``."""
    q, g, mask = _ratio_parts(rt, r, spacing)
    g2 = np.sum(g ** 2, axis=0)
    if amp == 0.0:
        kin_t, kin = g2, q * q * g2
    else:
        kin_t = np.sum((-g + amp * pt) ** 2, axis=0)
        kin = np.sum((q * g + amp * p) ** 2, axis=0)
    integrand = 0.5 * ((kin_t + g2) * rt + (kin + q * q * g2) * r)
    return float(np.sum(np.where(mask, integrand, 0.0)) * np.prod(spacing))


def _transport(values, shape_nodes, amp, spacing, dt):
    faces = [amp * face_average(shape_nodes[k], k) for k in range(values.ndim)]
    ratio = cfl_ratio(faces, spacing, dt)
    if ratio > CFL_MAX:
        raise StabilityError(f"perturbation CFL ratio {ratio:.4g} exceeds {CFL_MAX}")
    return kernels.upwind_step(np.ascontiguousarray(values), faces, spacing, dt)


def _run(state0: ProductState, T: float, dt: float, method: str, stop_fisher, eta: float,
         snapshot_interval: Optional[float], perturbation=None):
    grid = state0.grid
    spacing = grid.spacing
    cell = grid.cell_volume
    if not (T > 0 and dt > 0):
        raise ValueError(f"T and dt must be positive, got T={T}, dt={dt}")
    check_support(state0.rho_tilde, state0.rho)
    interval = snapshot_interval or T / 100
    rt = np.array(state0.rho_tilde.values)
    r = np.array(state0.rho.values)
    s0 = rt + r
    if perturbation is not None:
        pt_shape, p_shape, amp = perturbation
    else:
        pt_shape = p_shape = None
        amp = None

    def cost_at(t, a, b):
        return _step_cost(a, b, spacing, 0.0 if amp is None else float(amp(t)), pt_shape, p_shape)

    D = _divergence_value(rt, r, cell)
    f1, f2 = _rates(rt, r, spacing)
    cost = cost_at(0.0, rt, r)
    t = 0.0
    acc = 0.0
    halvings = 0
    antisym = 0.0
    snaps = [ProductState.from_arrays(grid, rt, r)]
    times, divs, rates, drifts, running = [0.0], [D], [-(f1 + f2)], [0.0], [0.0]
    step_t, step_D, step_R = [0.0], [D], [-(f1 + f2)]
    next_snap = interval
    while t < T * (1 - 1e-12):
        if stop_fisher is not None and f1 < stop_fisher:
            break
        h = min(dt, next_snap - t, T - t)
        if f1 + f2 > 0 and D > 0:
            h = min(h, eta * D / (f1 + f2))
        tries = 0
        while True:
            a, b, _ = _step_arrays(rt, r, spacing, h, method)
            if amp is not None:
                am = float(amp(t + 0.5 * h))
                if am != 0.0:
                    a = _transport(a, pt_shape, am, spacing, h)
                    b = _transport(b, p_shape, am, spacing, h)
            D_new = _divergence_value(a, b, cell)
            if amp is not None or D_new <= D + DIVERGENCE_SLACK:
                break
            halvings += 1
            tries += 1
            if tries > MAX_HALVINGS:
                raise FloatingPointError(f"divergence keeps increasing at t={t:.6g}")
            h *= 0.5
        if amp is None:
            antisym = max(antisym, float(np.max(np.abs((a - rt) + (b - r)))))
        _check_nonnegative(a, "product flow (rho_tilde)")
        _check_nonnegative(b, "product flow (rho)")
        rt, r, t = a, b, t + h
        D = D_new
        nxt = cost_at(t, rt, r)
        acc += 0.5 * (cost + nxt) * h
        cost = nxt
        f1, f2 = _rates(rt, r, spacing)
        step_t.append(t)
        step_D.append(D)
        step_R.append(-(f1 + f2))
        done = t >= T * (1 - 1e-12) or (stop_fisher is not None and f1 < stop_fisher)
        if t >= next_snap * (1 - 1e-12) or done:
            snaps.append(ProductState.from_arrays(grid, rt, r))
            times.append(t)
            divs.append(D)
            rates.append(-(f1 + f2))
            drifts.append(float(np.max(np.abs(rt + r - s0))))
            running.append(acc)
            while next_snap <= t * (1 + 1e-12):
                next_snap += interval
    report = ProductReport(
        times=np.array(times), divergence_series=np.array(divs),
        reff_rate_series=np.array(rates), sum_drift_series=np.array(drifts),
        mass_tilde_series=np.array([s.rho_tilde.mass for s in snaps]),
        mass_series=np.array([s.rho.mass for s in snaps]),
        action_running=np.array(running), terminal_divergence=float(D),
        step_times=np.array(step_t), step_divergence=np.array(step_D),
        step_rate=np.array(step_R), max_antisymmetry=antisym, halvings=halvings,
        stop_time=t)
    return snaps, report


def product_flow_run(state0: ProductState, T: float, dt: float, method: str = "implicit",
                     stop_fisher: Optional[float] = None, max_rel_decrease: float = 1e-3,
                     snapshot_interval: Optional[float] = None):
    """Run the coupled flow up to ``T`` (or until the Fisher stopping rule fires).

    Steps are ``min(dt, max_rel_decrease * D / |rate|)`` so that the
    divergence falls by at most that fraction per step, and are clipped to
    land on snapshot times. A step whose divergence rises by more than
    ``1e-8`` is retried at half the size.

    Parameters
    ----------
    state0 : ProductState
    T, dt : float
        Horizon and largest step.
    method : {"implicit", "explicit"}
    stop_fisher : float, optional
        Stop once ``relative_fisher(rho_tilde, rho)`` drops below this.
    max_rel_decrease : float
    snapshot_interval : float, optional
        Defaults to ``T / 100``.

    Returns
    -------
    snapshots : list of ProductState
    report : ProductReport
    """
    return _run(state0, T, dt, method, stop_fisher, max_rel_decrease, snapshot_interval)


def dissipation_check_product(report: ProductReport):
    """Return ``(t, lhs, rhs)`` on the step grid: ``dD/dt`` by second-order differences and the REFF rate."""
    t, D = report.step_times, report.step_divergence
    if t.size < 3:
        raise ValueError("need at least three steps")
    lhs = np.gradient(D, t, edge_order=2)
    return t[1:-1], lhs[1:-1], report.step_rate[1:-1]


# ---------------------------------------------------------------- rates and action


def reff_rate(state: ProductState) -> tuple[float, float]:
    """Dissipation rate of ``D(rho_tilde || rho)`` along the coupled flow.

    Returns
    -------
    combined : float
        ``-int (1 + q) |grad log q|^2 rho_tilde`` with ``q = rho_tilde/rho``.
    split : float
        ``-(int |grad log q|^2 rho_tilde + int |grad q|^2 rho)``, with
        ``grad q`` formed as ``q grad log q``.
    """
    check_support(state.rho_tilde, state.rho)
    rt, r = state.rho_tilde.values, state.rho.values
    q, g, mask = _ratio_parts(rt, r, state.grid.spacing)
    g2 = np.sum(g ** 2, axis=0)
    combined = -state.grid.integrate(np.where(mask, (1.0 + q) * g2 * rt, 0.0))
    first, second = _rates(rt, r, state.grid.spacing)
    return combined, -(first + second)


def optimal_velocities(state: ProductState) -> tuple[VelocityField, VelocityField]:
    """``(-grad log q, grad q)`` with ``q = rho_tilde/rho``."""
    check_support(state.rho_tilde, state.rho)
    q, g, mask = _ratio_parts(state.rho_tilde.values, state.rho.values, state.grid.spacing)
    return (VelocityField(state.grid, np.where(mask, -g, 0.0)),
            VelocityField(state.grid, np.where(mask, q * g, 0.0)))


def pt_rate(state: ProductState, v_tilde: VelocityField, v: VelocityField) -> float:
    """``int grad log(rho_tilde/rho) . (v_tilde - v) rho_tilde``."""
    _check_same_grid(state.rho_tilde, v_tilde, v)
    check_support(state.rho_tilde, state.rho)
    _, g, mask = _ratio_parts(state.rho_tilde.values, state.rho.values, state.grid.spacing)
    dot = np.sum(g * (v_tilde.components - v.components), axis=0)
    return state.grid.integrate(np.where(mask, dot * state.rho_tilde.values, 0.0))


def _product_cost(state: ProductState, vt: VelocityField, v: VelocityField) -> float:
    rt, r = state.rho_tilde.values, state.rho.values
    q, g, mask = _ratio_parts(rt, r, state.grid.spacing)
    g2 = np.sum(g ** 2, axis=0)
    integrand = 0.5 * ((vt.norm_sq() + g2) * rt + (v.norm_sq() + q * q * g2) * r)
    return state.grid.integrate(np.where(mask, integrand, 0.0))


def product_action(snapshots: Sequence[ProductState], v_tilde: Sequence[VelocityField],
                   v: Sequence[VelocityField], dt) -> AccountedCost:
    """Product action with the trapezoid rule in time.

    The running integrand is
    ``1/2 [|v_tilde|^2 rho_tilde + |v|^2 rho + |grad log q|^2 rho_tilde + |grad q|^2 rho]``
    and the terminal cost is ``D(rho_tilde_T || rho_T)``.
    """
    if not (len(snapshots) == len(v_tilde) == len(v)) or not snapshots:
        raise ValueError("snapshots and velocity series must be aligned and nonempty")
    for s, a, b in zip(snapshots, v_tilde, v):
        _check_same_grid(s.rho, a, b)
        check_support(s.rho_tilde, s.rho)
    costs = np.array([_product_cost(s, a, b) for s, a, b in zip(snapshots, v_tilde, v)])
    h = np.broadcast_to(np.asarray(dt, dtype=float), (len(costs) - 1,))
    running = float(np.sum(0.5 * (costs[:-1] + costs[1:]) * h))
    last = snapshots[-1]
    terminal = _divergence_value(last.rho_tilde.values, last.rho.values, last.grid.cell_volume)
    return AccountedCost(running, terminal)


def optimality_gap_product(state0: ProductState, T: float, dt: float, perturbations: int = 20,
                           magnitude: float = 0.2, seed: int = 0,
                           max_rel_decrease: float = 1e-3, tolerance: float = 1e-2) -> GapReport:
    """Compare the product action of the coupled flow with perturbed flows.

    Sample ``j`` adds ``eps b(t) phi_j`` to the first velocity and
    ``eps b(t) psi_j`` to the second, with independent seeded bump fields
    and ``b(t) = sqrt(2/T) sin(pi t/T)``. Each step applies the coupled
    implicit step and then transports each component by its perturbation
    with the upwind continuity step.
    """
    _, report = _run(state0, T, dt, "implicit", None, max_rel_decrease, None)
    optimal = report.action.total
    rng = np.random.default_rng(seed)
    samples = np.empty(perturbations)
    flagged = []
    profile = time_profile(T, magnitude)
    for j in range(perturbations):
        phi = space_bump(state0.grid, rng)
        psi = space_bump(state0.grid, rng)
        pert = None if magnitude == 0 else (phi, psi, profile)
        try:
            _, rep = _run(state0, T, dt, "implicit", None, max_rel_decrease, None, pert)
            samples[j] = rep.action.total
        except (StabilityError, NegativeDensityError, FloatingPointError):
            samples[j] = np.inf
            flagged.append(j)
    return GapReport(optimal, samples, tolerance, tuple(flagged))


def barycenter_distance(state0: ProductState, state: ProductState) -> float:
    """Max-norm distance of either component from the average of the initial pair."""
    bar = 0.5 * state0.total
    return float(max(np.max(np.abs(state.rho_tilde.values - bar)),
                     np.max(np.abs(state.rho.values - bar))))
