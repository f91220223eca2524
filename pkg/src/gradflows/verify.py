"""Identity suite: each check returns a residual, its tolerance and a verdict.

Run it with ``gradflows verify``; ``--quick`` swaps the desk-scale grids for
coarser ones and skips the perturbation studies.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import euclidean as eu
from . import product as pr
from . import wasserstein as ws
from .density import Grid, free_energy, gaussian_density, relative_entropy, wasserstein1d
from .objectives import (boltzmann_density, double_well_objective, log_partition,
                         make_quadratic, quadratic_potential)


@dataclass(frozen=True)
class CheckResult:
    name: str
    residual: float
    tolerance: float
    passed: bool
    seconds: float = 0.0

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict}  {self.name:<44s} residual={self.residual:.3e}  tol={self.tolerance:.1e}"


def _check(name, residual, tol):
    residual = float(residual)
    return name, residual, tol, bool(np.isfinite(residual) and residual <= tol)


# ---------------------------------------------------------------- R^n


def _fd_gradient():
    rng = np.random.default_rng(0)
    worst = 0.0
    for f in (make_quadratic(np.diag([1.0, 4.0]), [0.5, -1.0]), double_well_objective()):
        for x in rng.uniform(-3, 3, (100, f.dimension)):
            h = 1e-5
            fd = np.array([(f.evaluate(x + h * e) - f.evaluate(x - h * e)) / (2 * h)
                           for e in np.eye(f.dimension)])
            g = f.gradient(x)
            worst = max(worst, np.linalg.norm(fd - g) / max(1.0, np.linalg.norm(g)))
    return _check("objective gradients vs finite differences", worst, 1e-5)


def _gradient_action():
    f = make_quadratic(np.diag([1.0, 4.0]))
    traj = eu.gradient_flow(f, [1.0, 1.0], 5.0, 1e-3)
    return _check("gradient-flow action = f(x0)", abs(eu.action_euclidean(traj, f).total - 2.5),
                  1e-4)


def _newton_action():
    f = make_quadratic(np.diag([1.0, 100.0]))
    traj = eu.newton_flow(f, [1.0, 1.0], 5.0, 1e-3)
    total = eu.action_euclidean(traj, f, "inverse_hessian").total
    return _check("Newton action = f(x0)", abs(total - 50.5), 1e-3)


def _sgd_action():
    f = make_quadratic(np.diag([1.0, 2.0, 3.0, 4.0]))
    proj = eu.ProjectionProcess(4, 2, 0.05, seed=0)
    traj = eu.sgd_flow(f, np.ones(4), 2.0, 1e-3, proj)
    total = eu.action_euclidean(traj, f, "projection").total
    return _check("projected-flow action = f(x0)", abs(total - 5.0), 1e-6 + 10 * 1e-6 * 2.0 * 5)


def _lagrange():
    f = make_quadratic(np.diag([1.0, 4.0]))
    S = double_well_objective()
    traj = eu.gradient_flow(make_quadratic([[2.0]]), [1.5], 1.0, 1e-3)
    lam = max(abs(eu.lagrange_functional(eu.gradient_flow(f, [1.0, 1.0], 1.0, 1e-3), f)),
              abs(eu.lagrange_functional(traj, S)))
    return _check("Lagrange functional vanishes", lam, 10 * 1e-6)


def _euclidean_dissipation():
    f = make_quadratic(np.diag([1.0, 4.0]))
    worst = 0.0
    for flow, w in ((eu.gradient_flow, "identity"), (eu.newton_flow, "inverse_hessian")):
        _, lhs, rhs = eu.dissipation_check_euclidean(flow(f, [1.0, 1.0], 1.0, 2.5e-4), f, w)
        worst = max(worst, np.max(np.abs(lhs - rhs)))
    return _check("df/dt = -|grad f|_W^2", worst, 1e-4)


def _gap(quick):
    f = make_quadratic(np.diag([1.0, 4.0]))
    m = 10 if quick else 100
    worst = -np.inf
    for w in ("identity", "inverse_hessian"):
        for eps in (0.05, 0.1, 0.2):
            rep = eu.optimality_gap(f, [1.0, 1.0], 5.0, 1e-3, w, m, eps, seed=1)
            worst = max(worst, -rep.gap)
    return _check("perturbed controls cost more (R^n)", max(worst, 0.0), 1e-4)


# ---------------------------------------------------------------- densities


def _gaussian_closed_forms():
    g = Grid.line(-12, 12, 2401)
    kl = abs(relative_entropy(gaussian_density(g, [1.0], 1.0), gaussian_density(g, [0.0], 1.0))
             - 0.5)
    kl2 = abs(relative_entropy(gaussian_density(g, [0.0], 2.0), gaussian_density(g, [0.0], 1.0))
              - 0.5 * (1 - np.log(2.0)))
    return _check("Gaussian KL closed forms", max(kl, kl2), 1e-5)


def _w2_closed_forms():
    g = Grid.line(-12, 12, 2401)
    a = abs(wasserstein1d(gaussian_density(g, [-1.0], 1.0), gaussian_density(g, [1.0], 1.0)) - 2)
    b = abs(wasserstein1d(gaussian_density(g, [0.0], 1.0), gaussian_density(g, [0.0], 4.0)) - 1)
    return _check("1D Wasserstein closed forms", max(a, b), 1e-3)


def _free_energy():
    g = Grid.line(-10, 10, 2001)
    pot = quadratic_potential([[1.0]], kT=1.5)
    rho = gaussian_density(g, [0.7], 0.6)
    lhs = relative_entropy(rho, boltzmann_density(pot, g))
    rhs = free_energy(rho, pot) / pot.kT + log_partition(pot, g)
    return _check("D(rho||rho_bar) = F/kT + log Z", abs(lhs - rhs), 1e-6)


# ---------------------------------------------------------------- Fokker-Planck


def _ou_run(quick):
    nodes, dt = (401, 1.6e-4) if quick else (1601, 1e-5)
    g = Grid.line(-10, 10, nodes)
    pot = quadratic_potential([[1.0]])
    rho0 = gaussian_density(g, [2.0], 0.25)
    snaps, rep = ws.fokker_planck_flow(rho0, pot, 1.0, dt)
    return g, pot, rho0, snaps, rep


def _fp_checks(quick):
    t0 = time.perf_counter()
    g, pot, rho0, snaps, rep = _ou_run(quick)
    out = []
    m = snaps[-1].mean()[0]
    v = snaps[-1].covariance()[0, 0]
    out.append(_check("OU moments", max(abs(m - 2 * np.exp(-1)),
                                        abs(v - (1 - 0.75 * np.exp(-2)))), 2e-3))
    t, lhs, rhs = ws.dissipation_check_fp(rep)
    win = (t >= 0.1 - 1e-9) & (t <= 0.9 + 1e-9)
    out.append(_check("dD/dt = -relative Fisher (FP)", np.max(np.abs(lhs - rhs)[win]), 5e-3))
    rho_bar = boltzmann_density(pot, g)
    D0 = relative_entropy(rho0, rho_bar)
    out.append(_check("fluid action = D(rho0||rho_bar)", abs(rep.action.total - D0), 2e-2))
    out.append(_check("FP divergence nonincreasing",
                      max(np.max(np.diff(rep.divergence_series)), 0.0), 1e-8))
    out.append(_check("FP mass conservation", np.max(np.abs(rep.mass_series - 1)), 1e-9))
    worst = 0.0
    for s in snaps[::10]:
        lhs_v, rhs_v = ws.virial_check(s, ws.feedback_velocity(s, rho_bar), rho_bar)
        worst = max(worst, abs(lhs_v - rhs_v) / max(1.0, abs(rhs_v)))
    out.append(_check("virial identity", worst, 1e-10))
    dt_used = time.perf_counter() - t0
    return [(*o, dt_used / len(out)) for o in out]


def _fp_gap():
    g = Grid.line(-10, 10, 401)
    pot = quadratic_potential([[1.0]])
    rep = ws.optimality_gap_fp(gaussian_density(g, [2.0], 0.25), pot, 1.0, 1.6e-4, 5, 0.2, 3)
    return _check("perturbed velocities cost more (FP)", max(-rep.gap, 0.0), rep.tolerance)


# ---------------------------------------------------------------- product


def _product_state(nodes=1601):
    g = Grid.line(-8, 8, nodes)
    return pr.ProductState(gaussian_density(g, [-1.0], 0.5), gaussian_density(g, [1.0], 0.5))


def _product_checks(quick):
    t0 = time.perf_counter()
    s0 = _product_state(401 if quick else 1601)
    snaps, rep = pr.product_flow_run(s0, 1.0, 0.01)
    out = [
        _check("sum rho_tilde + rho conserved", np.max(rep.sum_drift_series), 1e-12),
        _check("antisymmetric updates", rep.max_antisymmetry, 1e-14),
        _check("product divergence nonincreasing", max(rep.max_divergence_increase, 0.0), 1e-8),
        _check("product action = D(rho_tilde0||rho0)",
               abs(rep.action.total - rep.divergence_series[0]), 2e-2),
    ]
    g = Grid.line(-12, 12, 2401)
    pair = pr.ProductState(gaussian_density(g, [1.0], 1.0), gaussian_density(g, [0.0], 1.0))
    comb, split = pr.reff_rate(pair)
    out.append(_check("REFF rate = -(1+e)", abs(comb + 1 + np.e), 1e-3))
    out.append(_check("REFF split = combined", abs(comb - split) / abs(comb), 1e-6))
    vt, v = pr.optimal_velocities(pair)
    out.append(_check("PT rate = REFF at optimum", abs(pr.pt_rate(pair, vt, v) - comb) / abs(comb),
                      1e-6))
    snaps_b, rep_b = pr.product_flow_run(s0, 50.0, 0.05, stop_fisher=1e-6)
    out.append(_check("entropic barycenter limit", pr.barycenter_distance(s0, snaps_b[-1]), 5e-3))
    dt_used = time.perf_counter() - t0
    return [(*o, dt_used / len(out)) for o in out]


def _product_gap():
    s0 = _product_state()
    rep = pr.optimality_gap_product(s0, 1.0, 0.01, 5, 0.2, 4)
    return _check("perturbed velocities cost more (product)", max(-rep.gap, 0.0), rep.tolerance)


SINGLE: list[Callable] = [_fd_gradient, _gradient_action, _newton_action, _sgd_action, _lagrange,
                          _euclidean_dissipation, _gaussian_closed_forms, _w2_closed_forms,
                          _free_energy]


def run_suite(quick: bool = False) -> list[CheckResult]:
    """Run every check and return the results in a fixed order."""
    results = []
    for fn in SINGLE + [lambda: _gap(quick)]:
        t0 = time.perf_counter()
        name, res, tol, ok = fn()
        results.append(CheckResult(name, res, tol, ok, time.perf_counter() - t0))
    for name, res, tol, ok, sec in _fp_checks(quick) + _product_checks(quick):
        results.append(CheckResult(name, res, tol, ok, sec))
    if not quick:
        for fn in (_fp_gap, _product_gap):
            t0 = time.perf_counter()
            name, res, tol, ok = fn()
            results.append(CheckResult(name, res, tol, ok, time.perf_counter() - t0))
    return results


def format_table(results) -> str:
    lines = [r.line() for r in results]
    n = sum(r.passed for r in results)
    lines.append(f"{n}/{len(results)} checks passed")
    return "\n".join(lines)
