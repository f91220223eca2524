"""Objective functions, potentials and the Boltzmann density.

All callables are vectorised over leading axes: ``evaluate`` maps an array
of shape ``(..., n)`` to ``(...)`` and ``gradient`` maps it to ``(..., n)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .density import Grid, GridDensity


@dataclass(frozen=True)
class ObjectiveField:
    dimension: int
    evaluate: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "custom"
    params: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class Potential:
    """Hamiltonian ``H`` with temperature parameter ``kT``."""

    dimension: int
    evaluate: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    kT: float = 1.0
    name: str = "custom"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not (np.isfinite(self.kT) and self.kT > 0):
            raise ValueError(f"kT must be positive, got {self.kT}")


def _check_spd(matrix: np.ndarray) -> np.ndarray:
    A = np.array(matrix, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix must be square, got shape {A.shape}")
    if not np.allclose(A, A.T, rtol=1e-12, atol=1e-12):
        raise ValueError("matrix is not symmetric "
                         f"(max |A - A^T| = {np.abs(A - A.T).max():.3e})")
    lam = np.linalg.eigvalsh(A).min()
    if lam <= 0:
        raise ValueError(f"matrix is not positive definite (smallest eigenvalue {lam:.3e})")
    return A


def make_quadratic(matrix, center=None) -> ObjectiveField:
    """``f(x) = 1/2 (x - c)^T A (x - c)`` for symmetric positive definite ``A``."""
    A = _check_spd(matrix)
    n = A.shape[0]
    c = np.zeros(n) if center is None else np.asarray(center, dtype=float).reshape(n)

    def evaluate(x):
        d = np.asarray(x, dtype=float) - c
        return 0.5 * np.einsum("...i,ij,...j->...", d, A, d)

    def gradient(x):
        return (np.asarray(x, dtype=float) - c) @ A

    def hessian(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(A, x.shape[:-1] + (n, n)).copy()

    return ObjectiveField(n, evaluate, gradient, hessian, name="quadratic",
                          params={"matrix": A.tolist(), "center": c.tolist()})


def double_well_objective() -> ObjectiveField:
    """``f(x) = (x^2 - 1)^2 / 4`` in one dimension."""

    def evaluate(x):
        x = np.asarray(x, dtype=float)[..., 0]
        return 0.25 * (x * x - 1.0) ** 2

    def gradient(x):
        x = np.asarray(x, dtype=float)
        return x * (x * x - 1.0)

    def hessian(x):
        x = np.asarray(x, dtype=float)
        return (3.0 * x * x - 1.0)[..., None]

    return ObjectiveField(1, evaluate, gradient, hessian, name="double_well")


def quadratic_potential(matrix, center=None, kT: float = 1.0) -> Potential:
    q = make_quadratic(matrix, center)
    return Potential(q.dimension, q.evaluate, q.gradient, kT, name="quadratic",
                     params=dict(q.params))


def double_well_potential(kT: float = 1.0) -> Potential:
    q = double_well_objective()
    return Potential(1, q.evaluate, q.gradient, kT, name="double_well")


def flat_potential(dimension: int = 1, kT: float = 1.0) -> Potential:
    def evaluate(x):
        return np.zeros(np.shape(x)[:-1])

    def gradient(x):
        return np.zeros(np.shape(x))

    return Potential(dimension, evaluate, gradient, kT, name="flat",
                     params={"dimension": dimension})


def _matrix_from_spec(spec: dict) -> np.ndarray:
    if "matrix" in spec:
        return np.asarray(spec["matrix"], dtype=float)
    if "diag" in spec:
        return np.diag(np.asarray(spec["diag"], dtype=float))
    n = int(spec.get("dimension", 1))
    return float(spec.get("scale", 1.0)) * np.eye(n)


OBJECTIVES = ("quadratic", "double_well")
POTENTIALS = ("quadratic", "double_well", "flat")


def objective_from_spec(spec: dict) -> ObjectiveField:
    """Build a built-in objective from ``{"name": ..., <parameters>}``."""
    name = spec.get("name")
    if name == "quadratic":
        return make_quadratic(_matrix_from_spec(spec), spec.get("center"))
    if name == "double_well":
        return double_well_objective()
    raise KeyError(f"unknown objective {name!r}; choose from {', '.join(OBJECTIVES)}")


def potential_from_spec(spec: dict) -> Potential:
    name = spec.get("name")
    kT = float(spec.get("kT", 1.0))
    if name == "quadratic":
        return quadratic_potential(_matrix_from_spec(spec), spec.get("center"), kT)
    if name == "double_well":
        return double_well_potential(kT)
    if name == "flat":
        return flat_potential(int(spec.get("dimension", 1)), kT)
    raise KeyError(f"unknown potential {name!r}; choose from {', '.join(POTENTIALS)}")


def _scaled_energy(potential: Potential, grid: Grid) -> np.ndarray:
    if grid.dim != potential.dimension:
        raise ValueError(f"grid dimension {grid.dim} does not match potential "
                         f"dimension {potential.dimension}")
    e = np.asarray(potential.evaluate(grid.points), dtype=float) / potential.kT
    if not np.all(np.isfinite(e)):
        raise ValueError("H/kT is not finite on the grid; exp(-H/kT) would overflow")
    return e


def log_partition(potential: Potential, grid: Grid) -> float:
    """``log Z`` for the Boltzmann density by midpoint quadrature on ``grid``."""
    e = _scaled_energy(potential, grid)
    shift = e.min()
    z = grid.integrate(np.exp(-(e - shift)))
    if not z > 0:
        raise ValueError("zero normalisation for the Boltzmann density")
    return float(np.log(z) - shift)


def boltzmann_density(potential: Potential, grid: Grid) -> GridDensity:
    """``Z^{-1} exp(-H/kT)`` normalised on the truncated grid."""
    e = _scaled_energy(potential, grid)
    w = np.exp(-(e - e.min()))
    z = grid.integrate(w)
    if not z > 0:
        raise ValueError("zero normalisation for the Boltzmann density")
    return GridDensity(grid, w / z)
