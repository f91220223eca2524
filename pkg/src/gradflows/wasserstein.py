"""Fokker-Planck flow as the Wasserstein gradient flow of relative entropy.

The flow ``rho_t = div(grad(H)/kT rho) + lap(rho)`` is stepped explicitly
with finite volumes and zero-flux boundaries. Three face-flux schemes are
available:

``"sg"``
    Scharfetter-Gummel (exponentially fitted) two-point flux. Exact on the
    Boltzmann density and second order in space. Default.
``"upwind"``
    First-order upwind drift plus centred diffusion.
``"continuity"``
    Upwind transport with the feedback velocity ``-grad log(rho/rho_bar)``.

Alongside the density the run accumulates the fluid action
``1/2 int (|v|^2 + |grad log(rho/rho_bar)|^2) rho`` at every step with the
trapezoid rule in time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._backend import kernels
from .density import (FLOOR, NEGATIVE_TOL, GridDensity, VelocityField, _check_same_grid,
                      _gradient, log_ratio_gradient, relative_entropy, relative_fisher,
                      safe_log)
from .euclidean import AccountedCost, GapReport
from .objectives import Potential, boltzmann_density

SCHEMES = ("sg", "upwind", "continuity")
CFL_MAX = 0.9
DIFFUSION_CFL = 0.4


class StabilityError(ValueError):
    """The requested time step violates an explicit stability bound."""


class NegativeDensityError(FloatingPointError):
    """A density dropped below ``-NEGATIVE_TOL`` during stepping."""


@dataclass(frozen=True)
class FlowReport:
    """Functionals tracked at the snapshot times of a Fokker-Planck run.

    ``action_running[i]`` is the running fluid action accrued on
    ``[0, times[i]]``, integrated at step resolution.
    """

    times: np.ndarray
    divergence_series: np.ndarray
    fisher_series: np.ndarray
    mass_series: np.ndarray
    action_running: np.ndarray
    terminal_divergence: float
    dt: float
    scheme: str = "sg"

    @property
    def action(self) -> AccountedCost:
        return AccountedCost(float(self.action_running[-1]), self.terminal_divergence)


def _pairs(a, axis):
    lo = [slice(None)] * a.ndim
    hi = [slice(None)] * a.ndim
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    return a[tuple(lo)], a[tuple(hi)]


def face_average(values: np.ndarray, axis: int) -> np.ndarray:
    left, right = _pairs(values, axis)
    return 0.5 * (left + right)


def _face_velocity(v: VelocityField) -> list[np.ndarray]:
    return [face_average(v.components[k], k) for k in range(v.grid.dim)]


def cfl_ratio(face_velocity, spacing, dt: float) -> float:
    return float(sum(np.max(np.abs(f), initial=0.0) * dt / h
                     for f, h in zip(face_velocity, spacing)))


def continuity_step(rho: GridDensity, v: VelocityField, dt: float) -> GridDensity:
    """One upwind finite-volume step of ``rho_t + div(v rho) = 0``.

    Node velocities are averaged onto faces; boundary faces carry no flux.
    Nonnegativity is guaranteed for CFL ratios up to 0.5 and checked up
    to the accepted limit of 0.9.

    Raises
    ------
    StabilityError
        If ``sum_k max|v_k| dt / dx_k`` exceeds 0.9.
    NegativeDensityError
        If a value falls below ``-1e-12``.
    """
    _check_same_grid(rho, v)
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    faces = _face_velocity(v)
    ratio = cfl_ratio(faces, rho.grid.spacing, dt)
    if ratio > CFL_MAX:
        raise StabilityError(f"CFL ratio {ratio:.4g} exceeds {CFL_MAX}")
    out = kernels.upwind_step(np.array(rho.values), faces, rho.grid.spacing, dt)
    _check_nonnegative(out, "continuity_step")
    return GridDensity(rho.grid, out)


def _check_nonnegative(values, where, step=None):
    low = values.min()
    if low < -NEGATIVE_TOL:
        idx = tuple(int(i) for i in np.unravel_index(np.argmin(values), values.shape))
        at = "" if step is None else f" at step {step}"
        raise NegativeDensityError(f"{where}: density {low:.3e} at node {idx}{at}")


def _bernoulli(z):
    """``z / (exp(z) - 1)`` with the removable singularity filled in."""
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-8
    safe = np.where(small, 1.0, z)
    with np.errstate(over="ignore"):
        return np.where(small, 1.0 - 0.5 * z, safe / np.expm1(safe))


def _two_point_coefficients(pot: Potential, grid, scheme: str):
    """Face coefficients so that flux = (cl rho_left - cr rho_right) / dx."""
    e = np.asarray(pot.evaluate(grid.points), dtype=float) / pot.kT
    left, right = [], []
    for axis, h in enumerate(grid.spacing):
        lo, hi = _pairs(e, axis)
        z = hi - lo
        if scheme == "sg":
            left.append(np.ascontiguousarray(_bernoulli(z)))
            right.append(np.ascontiguousarray(_bernoulli(-z)))
        else:
            a = -z / h
            left.append(np.ascontiguousarray(1.0 + h * np.maximum(a, 0.0)))
            right.append(np.ascontiguousarray(1.0 + h * np.maximum(-a, 0.0)))
    return left, right


def check_stability(pot: Potential, grid, dt: float) -> float:
    """Return the advective CFL ratio after checking both explicit bounds.

    Raises
    ------
    StabilityError
        If ``dt > 0.4 / sum_k dx_k^-2`` or the drift CFL ratio exceeds 0.9.
    """
    bound = DIFFUSION_CFL / sum(h ** -2 for h in grid.spacing)
    if dt > bound * (1 + 1e-12):
        raise StabilityError(f"dt={dt:.3g} exceeds the diffusion bound {bound:.3g}")
    drift = np.moveaxis(np.asarray(pot.gradient(grid.points), dtype=float), -1, 0) / pot.kT
    ratio = float(sum(np.max(np.abs(drift[k])) * dt / h for k, h in enumerate(grid.spacing)))
    if ratio > CFL_MAX:
        raise StabilityError(f"drift CFL ratio {ratio:.4g} exceeds {CFL_MAX}")
    return ratio


def feedback_velocity(rho: GridDensity, rho_bar: GridDensity) -> VelocityField:
    """Optimal feedback ``v = -grad log(rho / rho_bar)``."""
    g, _ = log_ratio_gradient(rho, rho_bar)
    return VelocityField(rho.grid, -g)


def _steps(T: float, dt: float) -> tuple[int, float]:
    if not (T > 0 and dt > 0):
        raise ValueError(f"T and dt must be positive, got T={T}, dt={dt}")
    if dt > T:
        raise ValueError(f"dt={dt} exceeds T={T}")
    n = math.ceil(T / dt - 1e-9)
    return n, T / n


@dataclass(frozen=True)
class _Perturbation:
    """Velocity ``amplitude(t) * shape(x)`` added to the feedback field."""

    shape: np.ndarray            # (dim, *grid.shape)
    amplitude: callable


def _run(rho0: GridDensity, pot: Potential, T: float, dt: float, scheme: str,
         snapshot_every: Optional[int], perturbation: Optional[_Perturbation] = None):
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    grid = rho0.grid
    nsteps, dt = _steps(T, dt)
    check_stability(pot, grid, dt)
    rho_bar = boltzmann_density(pot, grid)
    logref = np.ascontiguousarray(safe_log(rho_bar.values))
    refmask = np.ascontiguousarray(rho_bar.values > FLOOR)
    every = snapshot_every or max(1, math.ceil(nsteps / 100))
    dim = grid.dim

    if perturbation is None:
        pnode = np.zeros((dim, *grid.shape))
        amp = lambda t: np.zeros_like(np.asarray(t, dtype=float))  # noqa: E731
    else:
        pnode, amp = perturbation.shape, perturbation.amplitude
    pface = [np.ascontiguousarray(face_average(pnode[k], k)) for k in range(dim)]
    if perturbation is not None:
        peak = float(np.max(np.abs(amp(np.linspace(0, T, 201)))))
        ratio = cfl_ratio([peak * p for p in pface], grid.spacing, dt)
        if ratio > CFL_MAX:
            raise StabilityError(f"perturbation CFL ratio {ratio:.4g} exceeds {CFL_MAX}")
    if scheme != "continuity":
        cl, cr = _two_point_coefficients(pot, grid, scheme)

    rho = np.array(rho0.values, dtype=float, order="C")
    snaps = [GridDensity(grid, rho)]
    times = [0.0]
    running = [0.0]
    acc = 0.0
    step = 0
    while step < nsteps:
        chunk = min(every, nsteps - step)
        tn = (step + np.arange(chunk + 1)) * dt
        an = np.ascontiguousarray(amp(tn), dtype=float)
        am = np.ascontiguousarray(amp(tn[:-1] + 0.5 * dt), dtype=float)
        if scheme == "continuity":
            acc += _continuity_advance(rho, rho_bar, logref, refmask, pface, pnode, dt, an, am)
        else:
            acc += kernels.fp_advance(rho, cl, cr, logref, refmask, pface, pnode,
                                      grid.spacing, dt, an, am)
        step += chunk
        if not np.all(np.isfinite(rho)):
            raise FloatingPointError(f"non-finite density by step {step}")
        _check_nonnegative(rho, "fokker_planck_flow", step)
        snaps.append(GridDensity(grid, rho))
        times.append(step * dt)
        running.append(acc)

    div = np.array([relative_entropy(s, rho_bar) for s in snaps])
    fisher = np.array([relative_fisher(s, rho_bar) for s in snaps])
    mass = np.array([s.mass for s in snaps])
    report = FlowReport(np.array(times), div, fisher, mass, np.array(running),
                        float(div[-1]), dt, scheme)
    return snaps, report, rho_bar


def _continuity_advance(rho, rho_bar, logref, refmask, pface, pnode, dt, an, am):
    grid = rho_bar.grid
    spacing = grid.spacing
    cost = kernels.feedback_cost(rho, logref, refmask, pnode, an[0], spacing)
    running = 0.0
    for n in range(len(am)):
        v = feedback_velocity(GridDensity(grid, rho), rho_bar)
        faces = [face_average(v.components[k], k) + am[n] * pface[k] for k in range(grid.dim)]
        ratio = cfl_ratio(faces, spacing, dt)
        if ratio > CFL_MAX:
            raise StabilityError(f"feedback CFL ratio {ratio:.4g} exceeds {CFL_MAX}")
        rho[...] = kernels.upwind_step(rho, faces, spacing, dt)
        nxt = kernels.feedback_cost(rho, logref, refmask, pnode, an[n + 1], spacing)
        running += 0.5 * (cost + nxt) * dt
        cost = nxt
    return running


def fokker_planck_flow(rho0: GridDensity, pot: Potential, T: float, dt: float,
                       scheme: str = "sg", snapshot_every: Optional[int] = None):
    """Integrate the Fokker-Planck equation from ``rho0`` up to time ``T``.

    Parameters
    ----------
    rho0 : GridDensity
        Initial density; its grid is used throughout.
    pot : Potential
        Hamiltonian and temperature; the stationary density is the
        Boltzmann density of ``pot`` on the grid.
    T, dt : float
        Horizon and step. ``dt`` is shrunk slightly if needed so that an
        integer number of steps lands on ``T``.
    scheme : {"sg", "upwind", "continuity"}
    snapshot_every : int, optional
        Steps between snapshots; defaults to ``ceil(T / (100 dt))``.

    Returns
    -------
    snapshots : list of GridDensity
    report : FlowReport
    """
    snaps, report, _ = _run(rho0, pot, T, dt, scheme, snapshot_every)
    return snaps, report


def dissipation_check_fp(report: FlowReport):
    """Return ``(t, lhs, rhs)`` at interior snapshots.

    ``lhs`` is the central difference of the divergence series and ``rhs``
    is minus the relative Fisher information.
    """
    t = report.times
    if t.size < 3:
        raise ValueError("need at least three snapshots")
    D = report.divergence_series
    lhs = (D[2:] - D[:-2]) / (t[2:] - t[:-2])
    return t[1:-1], lhs, -report.fisher_series[1:-1]


def drift_decomposition(rho: GridDensity, forward_drift: VelocityField, sigma2: float):
    """Split a forward drift into current and osmotic parts.

    Returns
    -------
    current, osmotic, backward : VelocityField
        ``forward - sigma2/2 grad log rho``, ``sigma2/2 grad log rho`` and
        ``forward - sigma2 grad log rho``.
    """
    _check_same_grid(rho, forward_drift)
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    score = _gradient(safe_log(rho.values), rho.grid)
    osmotic = 0.5 * sigma2 * score
    b = forward_drift.components
    return (VelocityField(rho.grid, b - osmotic), VelocityField(rho.grid, osmotic),
            VelocityField(rho.grid, b - sigma2 * score))


def _fluid_cost(rho: GridDensity, v: VelocityField, rho_bar: GridDensity) -> float:
    g, mask = log_ratio_gradient(rho, rho_bar)
    integrand = 0.5 * (v.norm_sq() + np.sum(g ** 2, axis=0)) * rho.values
    return rho.grid.integrate(np.where(mask, integrand, 0.0))


def fluid_action(snapshots: Sequence[GridDensity], velocities: Sequence[VelocityField],
                 rho_bar: GridDensity, dt) -> AccountedCost:
    """Fluid action of a density path with the trapezoid rule in time.

    ``dt`` is the snapshot spacing, either a scalar or one value per interval.
    """
    if len(snapshots) != len(velocities) or len(snapshots) < 1:
        raise ValueError("snapshots and velocities must be aligned and nonempty")
    for s, v in zip(snapshots, velocities):
        _check_same_grid(s, v, rho_bar)
    costs = np.array([_fluid_cost(s, v, rho_bar) for s, v in zip(snapshots, velocities)])
    h = np.broadcast_to(np.asarray(dt, dtype=float), (len(costs) - 1,))
    running = float(np.sum(0.5 * (costs[:-1] + costs[1:]) * h))
    return AccountedCost(running, relative_entropy(snapshots[-1], rho_bar))


def virial_check(rho: GridDensity, v: VelocityField, rho_bar: GridDensity):
    """Return ``(1/2 int |v|^2 rho, 1/2 int |grad log(rho/rho_bar)|^2 rho)``."""
    _check_same_grid(rho, v, rho_bar)
    g, mask = log_ratio_gradient(rho, rho_bar)
    lhs = 0.5 * rho.grid.integrate(np.where(mask, v.norm_sq() * rho.values, 0.0))
    rhs = 0.5 * rho.grid.integrate(np.where(mask, np.sum(g ** 2, axis=0) * rho.values, 0.0))
    return lhs, rhs


def space_bump(grid, rng: np.random.Generator, bumps: int = 3) -> np.ndarray:
    """Seeded smooth vector field: a sum of Gaussian bumps per component, sup-norm 1.

    Centres are drawn from the middle 40% of each axis, widths from 5% to
    10% of the axis length.
    """
    pts = grid.points
    out = np.zeros((grid.dim, *grid.shape))
    span = np.subtract(grid.upper, grid.lower)
    mid = 0.5 * np.add(grid.upper, grid.lower)
    for k in range(grid.dim):
        for _ in range(bumps):
            c = mid + rng.uniform(-0.2, 0.2, grid.dim) * span
            w = rng.uniform(0.05, 0.1) * span
            a = rng.standard_normal()
            out[k] += a * np.exp(-0.5 * np.sum(((pts - c) / w) ** 2, axis=-1))
        peak = np.max(np.abs(out[k]))
        if peak > 0:
            out[k] /= peak
    return out


def time_profile(T: float, magnitude: float):
    """``magnitude * sqrt(2/T) sin(pi t / T)``: unit L2[0, T] norm before scaling."""
    c = magnitude * math.sqrt(2.0 / T)
    return lambda t: c * np.sin(np.pi * np.asarray(t, dtype=float) / T)


def optimality_gap_fp(rho0: GridDensity, pot: Potential, T: float, dt: float,
                      perturbations: int = 20, magnitude: float = 0.2, seed: int = 0,
                      scheme: str = "sg") -> GapReport:
    """Compare the fluid action of the feedback flow with perturbed flows.

    Sample ``j`` uses the velocity ``-grad log(rho/rho_bar) + eps b_j(t, x)``
    with ``b_j = sqrt(2/T) sin(pi t/T) phi_j(x)``. Each step applies the
    feedback part with the flow scheme and then transports by ``eps b_j``
    with :func:`continuity_step`'s upwind rule. The tolerance is ``1e-3``
    plus the optimal run's identity residual ``|total - D(rho0)|``.
    """
    _, report, rho_bar = _run(rho0, pot, T, dt, scheme, None)
    optimal = report.action.total
    residual = abs(optimal - relative_entropy(rho0, rho_bar))
    rng = np.random.default_rng(seed)
    samples = np.empty(perturbations)
    flagged = []
    for j in range(perturbations):
        pert = _Perturbation(space_bump(rho0.grid, rng), time_profile(T, magnitude))
        if magnitude == 0:
            pert = None
        try:
            _, rep, _ = _run(rho0, pot, T, dt, scheme, None, pert)
            samples[j] = rep.action.total
        except (StabilityError, NegativeDensityError, FloatingPointError):
            samples[j] = np.inf
            flagged.append(j)
    return GapReport(optimal, samples, 1e-3 + residual, tuple(flagged))
