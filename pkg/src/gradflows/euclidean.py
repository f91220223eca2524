"""Gradient, Newton and projected (stochastic) gradient flows in R^n.

Each flow is the optimal evolution of an action
``int 1/2 |grad f|_W^2 + 1/2 |u|_W^2 dt + f(x(T))`` under ``x' = u``; the
functions here integrate the flows, evaluate that action on arbitrary
trajectories and check optimality against perturbed controls.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .objectives import ObjectiveField

WEIGHTINGS = ("identity", "inverse_hessian", "projection")
HESSIAN_EIG_TOL = 1e-12


class FlowDivergenceError(FloatingPointError):
    """A flow produced a non-finite state."""


@dataclass(frozen=True)
class Trajectory:
    """States on a time grid with piecewise-constant controls.

    ``controls[i]`` acts on ``[times[i], times[i+1])``, so there is one control
    fewer than there are states. ``masks`` holds the projection diagonal per
    step for projected flows.
    """

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    masks: Optional[np.ndarray] = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        x = np.atleast_2d(np.asarray(self.states, dtype=float))
        u = np.atleast_2d(np.asarray(self.controls, dtype=float))
        if t.ndim != 1 or len(t) < 2 or np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing with at least two entries")
        if x.shape[0] != len(t):
            raise ValueError("states and times have different lengths")
        if u.shape != (len(t) - 1, x.shape[1]):
            raise ValueError(f"controls must have shape {(len(t) - 1, x.shape[1])}, got {u.shape}")
        for a in (t, x, u):
            a.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", x)
        object.__setattr__(self, "controls", u)
        if self.masks is not None:
            m = np.asarray(self.masks, dtype=float)
            if m.shape != u.shape:
                raise ValueError("masks must have the same shape as controls")
            m.setflags(write=False)
            object.__setattr__(self, "masks", m)

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    def feasibility_residual(self) -> float:
        """Max over steps of ``|x[i+1] - x[i] - P u[i] dt|`` (``P`` the mask, if any)."""
        u = self.controls if self.masks is None else self.masks * self.controls
        r = np.diff(self.states, axis=0) - u * self.dt[:, None]
        return float(np.abs(r).max(initial=0.0))


@dataclass
class ProjectionProcess:
    """Random coordinate masks with ``batch_size`` ones, redrawn every ``resample_interval``.

    Masks are uniform random subsets, independent across epochs, drawn from a
    generator seeded with ``seed``; ``realized_masks`` holds those used by the
    most recent flow.
    """

    dimension: int
    batch_size: int
    resample_interval: float
    seed: int = 0
    realized_masks: list = field(default_factory=list)

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be positive")
        if not 1 <= self.batch_size <= self.dimension:
            raise ValueError(f"batch_size must be in [1, {self.dimension}], got {self.batch_size}")
        if not self.resample_interval > 0:
            raise ValueError("resample_interval must be positive")

    def draw(self, epochs: int) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        masks = np.zeros((epochs, self.dimension))
        for e in range(epochs):
            masks[e, rng.choice(self.dimension, self.batch_size, replace=False)] = 1.0
        return masks


@dataclass(frozen=True)
class AccountedCost:
    running: float
    terminal: float

    @property
    def total(self) -> float:
        return self.running + self.terminal


@dataclass(frozen=True)
class GapReport:
    optimal_total: float
    samples: np.ndarray
    tolerance: float
    flagged: tuple = ()

    @property
    def min_perturbed_total(self) -> float:
        finite = self.samples[np.isfinite(self.samples)]
        return float(finite.min()) if finite.size else float("inf")

    @property
    def gap(self) -> float:
        return self.min_perturbed_total - self.optimal_total

    @property
    def passed(self) -> bool:
        return self.gap >= -self.tolerance

    def to_json(self) -> dict:
        return {"optimal_total": self.optimal_total,
                "samples": [float(s) for s in self.samples],
                "gap": self.gap, "tolerance": self.tolerance,
                "flagged": list(self.flagged)}


def _time_grid(T: float, dt: float) -> np.ndarray:
    if not (T > 0 and dt > 0):
        raise ValueError("T and dt must be positive")
    if dt > T:
        raise ValueError(f"dt={dt} exceeds the horizon T={T}")
    n = int(np.ceil(T / dt - 1e-9))
    t = np.arange(n + 1) * dt
    t[-1] = T
    return t


def _check_finite(x, i):
    if not np.all(np.isfinite(x)):
        raise FlowDivergenceError(f"non-finite state at step {i}")


def _rk4(rhs, x0, times):
    xs = np.empty((len(times), len(x0)))
    xs[0] = x0
    for i, h in enumerate(np.diff(times)):
        x = xs[i]
        k1 = rhs(x)
        k2 = rhs(x + 0.5 * h * k1)
        k3 = rhs(x + 0.5 * h * k2)
        k4 = rhs(x + h * k3)
        xs[i + 1] = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        _check_finite(xs[i + 1], i + 1)
    return xs


def _from_states(times, xs, masks=None) -> Trajectory:
    u = np.diff(xs, axis=0) / np.diff(times)[:, None]
    return Trajectory(times, xs, u, masks)


def _initial(f: ObjectiveField, x0):
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape != (f.dimension,):
        raise ValueError(f"x0 must have {f.dimension} entries")
    return x0


def gradient_flow(f: ObjectiveField, x0, T: float, dt: float, method: str = "rk4") -> Trajectory:
    """Integrate ``x' = -grad f(x)`` with RK4 (or forward Euler for ``method="euler"``)."""
    x0 = _initial(f, x0)
    times = _time_grid(T, dt)
    if method == "rk4":
        xs = _rk4(lambda x: -f.gradient(x), x0, times)
    elif method == "euler":
        xs = np.empty((len(times), len(x0)))
        xs[0] = x0
        for i, h in enumerate(np.diff(times)):
            xs[i + 1] = xs[i] - h * f.gradient(xs[i])
            _check_finite(xs[i + 1], i + 1)
    else:
        raise ValueError(f"unknown method {method!r}")
    return _from_states(times, xs)


def _newton_direction(f: ObjectiveField, x):
    w, V = np.linalg.eigh(f.hessian(x))
    if w[0] < HESSIAN_EIG_TOL:
        raise np.linalg.LinAlgError(
            f"Hessian not positive definite at x={x} (smallest eigenvalue {w[0]:.3e})")
    return V @ ((V.T @ f.gradient(x)) / w)


def newton_flow(f: ObjectiveField, x0, T: float, dt: float) -> Trajectory:
    """Integrate ``x' = -H_f(x)^{-1} grad f(x)`` with RK4."""
    if f.hessian is None:
        raise ValueError("newton_flow needs an objective with a Hessian")
    x0 = _initial(f, x0)
    times = _time_grid(T, dt)
    return _from_states(times, _rk4(lambda x: -_newton_direction(f, x), x0, times))


def _step_masks(proj: ProjectionProcess, times) -> np.ndarray:
    epoch = np.floor(times[:-1] / proj.resample_interval + 1e-9).astype(int)
    masks = proj.draw(int(epoch.max()) + 1)
    proj.realized_masks = [m.copy() for m in masks]
    return masks[epoch]


def sgd_flow(f: ObjectiveField, x0, T: float, dt: float, proj: ProjectionProcess) -> Trajectory:
    """Forward-Euler integration of ``x' = -P(t) grad f(x)`` with random masks ``P``."""
    x0 = _initial(f, x0)
    if proj.dimension != f.dimension:
        raise ValueError("projection dimension does not match the objective")
    if proj.resample_interval < dt:
        raise ValueError("resample_interval must be at least dt")
    times = _time_grid(T, dt)
    masks = _step_masks(proj, times)
    xs = np.empty((len(times), len(x0)))
    xs[0] = x0
    for i, h in enumerate(np.diff(times)):
        xs[i + 1] = xs[i] - h * (masks[i] * f.gradient(xs[i]))
        _check_finite(xs[i + 1], i + 1)
    return _from_states(times, xs, masks)


def _weighted_sq(f, weighting, x, v, mask=None, control=False):
    """``|v|_W^2`` at states ``x`` (row-wise).

    Under the Newton weighting gradients are measured with ``H^{-1}`` and
    controls with the dual weight ``H``, so that the pointwise minimiser of
    ``1/2 |u|^2 + u . grad f`` is ``-H^{-1} grad f``.
    """
    if weighting == "identity":
        return np.sum(v * v, axis=-1)
    if weighting == "inverse_hessian":
        H = f.hessian(x)
        if control:
            return np.einsum("...i,...ij,...j->...", v, H, v)
        return np.einsum("...i,...i->...", v, np.linalg.solve(H, v[..., None])[..., 0])
    if weighting == "projection":
        return np.sum(mask * v * v, axis=-1)
    raise ValueError(f"unknown weighting {weighting!r}; choose from {WEIGHTINGS}")


def _check_weighting(traj, f, weighting):
    if weighting == "inverse_hessian" and f.hessian is None:
        raise ValueError("inverse_hessian weighting needs an objective with a Hessian")
    if weighting == "projection" and traj.masks is None:
        raise ValueError("projection weighting needs a trajectory with recorded masks")
    if weighting not in WEIGHTINGS:
        raise ValueError(f"unknown weighting {weighting!r}; choose from {WEIGHTINGS}")


def running_cost_steps(traj: Trajectory, f: ObjectiveField, weighting: str = "identity") -> np.ndarray:
    """Per-step running action.

    The gradient term uses the trapezoid rule over each step and the control
    term the step's constant control (Hessian weight at the step midpoint);
    both are second-order accurate on integrator-produced trajectories.
    """
    _check_weighting(traj, f, weighting)
    x, u, h = traj.states, traj.controls, traj.dt
    g = f.gradient(x)
    m = traj.masks
    grad_left = _weighted_sq(f, weighting, x[:-1], g[:-1], m)
    grad_right = _weighted_sq(f, weighting, x[1:], g[1:], m)
    ctrl = _weighted_sq(f, weighting, 0.5 * (x[:-1] + x[1:]), u, m, control=True)
    return (0.25 * (grad_left + grad_right) + 0.5 * ctrl) * h


def action_euclidean(traj: Trajectory, f: ObjectiveField, weighting: str = "identity",
                     feasibility_tol: Optional[float] = 1e-8) -> AccountedCost:
    """Running action plus terminal value ``f(x(T))``; pass ``feasibility_tol=None`` to waive the check."""
    if feasibility_tol is not None:
        res = traj.feasibility_residual()
        if res > feasibility_tol:
            raise ValueError(f"trajectory violates x' = u (residual {res:.3e} > {feasibility_tol:.1e})")
    running = float(np.sum(running_cost_steps(traj, f, weighting)))
    return AccountedCost(running, float(f.evaluate(traj.states[-1])))


def lagrange_functional(traj: Trajectory, S: ObjectiveField) -> float:
    """``int u . grad S dt - S(x(T)) + S(x(0))`` with trapezoid quadrature over each step."""
    x, u, h = traj.states, traj.controls, traj.dt
    if traj.masks is not None:
        u = traj.masks * u
    gS = S.gradient(x)
    integral = np.sum(0.5 * np.sum(u * (gS[:-1] + gS[1:]), axis=1) * h)
    return float(integral - S.evaluate(x[-1]) + S.evaluate(x[0]))


def _bump(T, n, rng) -> np.ndarray:
    g = rng.standard_normal(n)
    # unit L2[0, T] norm: int sin^2(pi t / T) dt = T / 2
    return g / np.linalg.norm(g) * np.sqrt(2.0 / T)


def _reintegrate(x0, times, controls, masks=None) -> Trajectory:
    u = controls if masks is None else masks * controls
    xs = np.empty((len(times), len(x0)))
    xs[0] = x0
    xs[1:] = x0 + np.cumsum(u * np.diff(times)[:, None], axis=0)
    return Trajectory(times, xs, controls, masks)


def optimality_gap(f: ObjectiveField, x0, T: float, dt: float, weighting: str = "identity",
                   perturbations: int = 100, magnitude: float = 0.1, seed: int = 0,
                   proj: Optional[ProjectionProcess] = None) -> GapReport:
    """Compare the flow's action with that of seeded perturbations of its controls.

    Perturbations are ``magnitude * sin(pi t / T) g`` with ``g`` a seeded
    normal vector scaled to unit L2[0, T] norm, evaluated at step midpoints.
    """
    if weighting == "identity":
        opt = gradient_flow(f, x0, T, dt)
    elif weighting == "inverse_hessian":
        opt = newton_flow(f, x0, T, dt)
    elif weighting == "projection":
        if proj is None:
            raise ValueError("projection weighting needs a ProjectionProcess")
        opt = sgd_flow(f, x0, T, dt, proj)
    else:
        raise ValueError(f"unknown weighting {weighting!r}; choose from {WEIGHTINGS}")

    times, x0 = opt.times, opt.states[0]
    base = _reintegrate(x0, times, opt.controls, opt.masks)
    optimal_total = action_euclidean(base, f, weighting, feasibility_tol=None).total
    tmid = 0.5 * (times[:-1] + times[1:])
    profile = np.sin(np.pi * tmid / T)[:, None]
    rng = np.random.default_rng(seed)
    samples = np.empty(perturbations)
    flagged = []
    for k in range(perturbations):
        u = opt.controls + magnitude * profile * _bump(T, f.dimension, rng)
        with np.errstate(all="ignore"):
            traj = _reintegrate(x0, times, u, opt.masks)
            total = action_euclidean(traj, f, weighting, feasibility_tol=None).total \
                if np.all(np.isfinite(traj.states)) else np.inf
        if not np.isfinite(total):
            total = np.inf
            flagged.append(k)
        samples[k] = total
    tol = 1e-6 + 10 * dt ** 2 * T
    return GapReport(optimal_total, samples, tol, tuple(flagged))


def dissipation_check_euclidean(traj: Trajectory, f: ObjectiveField, weighting: str = "identity"):
    """Return ``(t, lhs, rhs)`` with ``lhs = df/dt`` and ``rhs = -|grad f|_W^2``.

    Smooth flows use second-order differences (one-sided at the ends). With a
    projection the mask jumps between epochs, so ``lhs`` is the forward
    difference over each step and is compared with ``rhs`` at the step start.
    """
    _check_weighting(traj, f, weighting)
    fx = f.evaluate(traj.states)
    g = f.gradient(traj.states)
    if weighting == "projection":
        lhs = np.diff(fx) / traj.dt
        rhs = -_weighted_sq(f, weighting, traj.states[:-1], g[:-1], traj.masks)
        return traj.times[:-1], lhs, rhs
    lhs = np.gradient(fx, traj.times, edge_order=2)
    rhs = -_weighted_sq(f, weighting, traj.states, g)
    return traj.times, lhs, rhs
