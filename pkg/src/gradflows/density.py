"""Grid densities and the entropy-type functionals evaluated on them.

Densities live on uniform cell-centred grids in one or two dimensions.
Integrals use the midpoint rule (node value times cell volume), which
pairs exactly with the finite-volume schemes in :mod:`gradflows.wasserstein`
and :mod:`gradflows.product`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

#: Densities are floored at this value before taking logarithms.
FLOOR = 1e-30
#: A density exceeding this where its reference is below FLOOR is not
#: absolutely continuous with respect to the reference.
SUPPORT_TOL = 1e-12
#: Negative values down to this are accepted as roundoff.
NEGATIVE_TOL = 1e-12
MIN_NODES = 16


class SupportError(ValueError):
    """Raised when a divergence would be infinite on the grid."""


class FloorWarning(UserWarning):
    """The density floor was active on a noticeable part of the support."""


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred grid on a box in one or two dimensions.

    Node ``i`` along an axis sits at ``lower + (i + 1/2) * spacing`` with
    ``spacing = (upper - lower) / nodes``, so the cells tile the box exactly.
    """

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    nodes: tuple[int, ...]

    def __post_init__(self):
        lower = tuple(float(v) for v in np.atleast_1d(self.lower))
        upper = tuple(float(v) for v in np.atleast_1d(self.upper))
        nodes = tuple(int(v) for v in np.atleast_1d(self.nodes))
        if not (len(lower) == len(upper) == len(nodes)):
            raise ValueError("grid.lower, grid.upper and grid.nodes must have equal length")
        if len(nodes) not in (1, 2):
            raise ValueError(f"grid dimension must be 1 or 2, got {len(nodes)}")
        for k, (lo, hi, n) in enumerate(zip(lower, upper, nodes)):
            if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
                raise ValueError(f"grid axis {k}: need finite lower < upper, got [{lo}, {hi}]")
            if n < MIN_NODES:
                raise ValueError(f"grid.nodes: axis {k} has {n} nodes, minimum is {MIN_NODES}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def line(cls, lower: float, upper: float, nodes: int) -> "Grid":
        return cls((lower,), (upper,), (nodes,))

    @property
    def dim(self) -> int:
        return len(self.nodes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.nodes

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((hi - lo) / n for lo, hi, n in zip(self.lower, self.upper, self.nodes))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def axes(self) -> list[np.ndarray]:
        return [lo + (np.arange(n) + 0.5) * h
                for lo, n, h in zip(self.lower, self.nodes, self.spacing)]

    @property
    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(*shape, dim)``."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def face_points(self, axis: int) -> np.ndarray:
        """Coordinates of the interior faces normal to ``axis``."""
        axes = self.axes
        a = axes[axis]
        axes[axis] = 0.5 * (a[1:] + a[:-1])
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def integrate(self, values: np.ndarray) -> float:
        return float(np.sum(values) * self.cell_volume)


@dataclass(frozen=True)
class GridDensity:
    """Nonnegative node values of a density on ``grid``."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise ValueError(f"density shape {values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("density has non-finite values")
        if values.min() < -NEGATIVE_TOL:
            idx = tuple(int(i) for i in np.unravel_index(np.argmin(values), values.shape))
            raise ValueError(f"density is negative ({values.min():.3e}) at node {idx}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def mass(self) -> float:
        return self.grid.integrate(self.values)

    def normalized(self) -> "GridDensity":
        m = self.mass
        if not m > 0:
            raise ValueError("cannot normalise a density with zero mass")
        return GridDensity(self.grid, self.values / m)

    def mean(self) -> np.ndarray:
        pts = self.grid.points
        w = self.values[..., None] * self.grid.cell_volume
        return (pts * w).reshape(-1, self.grid.dim).sum(axis=0) / self.mass

    def covariance(self) -> np.ndarray:
        pts = self.grid.points.reshape(-1, self.grid.dim) - self.mean()
        w = self.values.reshape(-1) * self.grid.cell_volume / self.mass
        return (pts * w[:, None]).T @ pts


@dataclass(frozen=True)
class VelocityField:
    """One vector per node; ``components`` has shape ``(dim, *grid.shape)``."""

    grid: Grid
    components: np.ndarray

    def __post_init__(self):
        comps = np.array(self.components, dtype=float)
        if comps.shape == self.grid.shape and self.grid.dim == 1:
            comps = comps[None]
        if comps.shape != (self.grid.dim, *self.grid.shape):
            raise ValueError(f"velocity shape {comps.shape} does not match grid "
                             f"{(self.grid.dim, *self.grid.shape)}")
        if not np.all(np.isfinite(comps)):
            raise ValueError("velocity field has non-finite values")
        comps.setflags(write=False)
        object.__setattr__(self, "components", comps)

    @classmethod
    def zeros(cls, grid: Grid) -> "VelocityField":
        return cls(grid, np.zeros((grid.dim, *grid.shape)))

    def norm_sq(self) -> np.ndarray:
        return np.sum(self.components ** 2, axis=0)


def gaussian_density(grid: Grid, mean, variance) -> GridDensity:
    """Sampled and renormalised Gaussian; ``variance`` is a scalar or covariance matrix."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    if mean.shape != (grid.dim,):
        raise ValueError(f"mean must have {grid.dim} entries")
    cov = np.asarray(variance, dtype=float)
    cov = cov * np.eye(grid.dim) if cov.ndim == 0 else cov.reshape(grid.dim, grid.dim)
    diff = grid.points - mean
    quad = np.einsum("...i,ij,...j->...", diff, np.linalg.inv(cov), diff)
    values = np.exp(-0.5 * (quad - quad.min()))
    return GridDensity(grid, values).normalized()


def _check_same_grid(*densities):
    grid = densities[0].grid
    for d in densities[1:]:
        if d.grid != grid:
            raise ValueError("densities live on different grids")
    return grid


def _gradient(values: np.ndarray, grid: Grid) -> np.ndarray:
    """Second-order central differences, one-sided second order at the boundary."""
    grads = np.gradient(values, *grid.spacing, edge_order=2)
    if grid.dim == 1:
        grads = [grads]
    return np.stack(grads)


def safe_log(values: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(values, FLOOR))


def check_support(rho_tilde: GridDensity, rho: GridDensity):
    bad = (rho_tilde.values > SUPPORT_TOL) & (rho.values <= FLOOR)
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        x = rho.grid.points[idx]
        raise SupportError(f"reference density vanishes at node {idx} (x={x}) where the "
                           f"first density is {rho_tilde.values[idx]:.3e}; divergence is infinite")


def log_ratio_gradient(rho_tilde: GridDensity, rho: GridDensity):
    """Return ``(grad log(rho_tilde/rho), mask)``; mask marks nodes above the floor in both."""
    grid = _check_same_grid(rho_tilde, rho)
    ell = safe_log(rho_tilde.values) - safe_log(rho.values)
    mask = (rho_tilde.values > FLOOR) & (rho.values > FLOOR)
    return _gradient(ell, grid), mask


def entropy(rho: GridDensity) -> float:
    """Gibbs entropy ``-int rho log rho`` with Boltzmann constant 1."""
    v = rho.values
    return -rho.grid.integrate(np.where(v > 0, v * safe_log(v), 0.0))


def free_energy(rho: GridDensity, potential) -> float:
    """``F = U - T S = int H rho + kT int rho log rho`` (k = 1)."""
    if potential.dimension != rho.grid.dim:
        raise ValueError("potential and density dimensions differ")
    H = potential.evaluate(rho.grid.points)
    return rho.grid.integrate(H * rho.values) - potential.kT * entropy(rho)


def relative_entropy(rho_tilde: GridDensity, rho: GridDensity) -> float:
    """``int log(rho_tilde/rho) rho_tilde``; raises :class:`SupportError` on support violation."""
    _check_same_grid(rho_tilde, rho)
    check_support(rho_tilde, rho)
    a = rho_tilde.values
    integrand = np.where(a > 0, a * (safe_log(a) - safe_log(rho.values)), 0.0)
    return rho.grid.integrate(integrand)


def _warn_floor(rho: GridDensity, ref: GridDensity):
    carrying = (rho.values > SUPPORT_TOL) | (ref.values > SUPPORT_TOL)
    floored = carrying & ((rho.values <= FLOOR) | (ref.values <= FLOOR))
    n = np.count_nonzero(carrying)
    if n and np.count_nonzero(floored) > 0.01 * n:
        warnings.warn(f"density floor active on {np.count_nonzero(floored)} of {n} "
                      "mass-carrying nodes", FloorWarning, stacklevel=3)


def wasserstein_gradient_single(rho: GridDensity, rho_bar: GridDensity) -> VelocityField:
    """Wasserstein gradient ``grad log(rho/rho_bar)`` of the divergence from ``rho_bar``."""
    g, _ = log_ratio_gradient(rho, rho_bar)
    _warn_floor(rho, rho_bar)
    return VelocityField(rho.grid, g)


def wasserstein_gradient_pair(rho_tilde: GridDensity, rho: GridDensity):
    """Both components of the product-space gradient of ``D(rho_tilde || rho)``.

    Returns ``(grad log(rho_tilde/rho), -grad(rho_tilde/rho))``. The second
    component is formed as ``-(rho_tilde/rho) * first`` so that the fluxes
    ``rho_tilde * first`` and ``-rho * second`` coincide to roundoff.
    """
    g, _ = log_ratio_gradient(rho_tilde, rho)
    _warn_floor(rho_tilde, rho)
    ratio = rho_tilde.values / np.maximum(rho.values, FLOOR)
    return VelocityField(rho.grid, g), VelocityField(rho.grid, -ratio * g)


def relative_fisher(rho_tilde: GridDensity, rho: GridDensity) -> float:
    """Relative Fisher information ``int |grad log(rho_tilde/rho)|^2 rho_tilde``."""
    check_support(rho_tilde, rho)
    g, mask = log_ratio_gradient(rho_tilde, rho)
    integrand = np.sum(g ** 2, axis=0) * rho_tilde.values
    return rho.grid.integrate(np.where(mask, integrand, 0.0))


def _inverse_cdf(rho: GridDensity, levels: np.ndarray) -> np.ndarray:
    grid = rho.grid
    (lo,), (hi,), (h,) = grid.lower, grid.upper, grid.spacing
    edges = np.linspace(lo, hi, grid.nodes[0] + 1)
    cdf = np.concatenate([[0.0], np.cumsum(np.maximum(rho.values, 0.0)) * h])
    cdf /= cdf[-1]
    # flat stretches of the cdf make the inverse ambiguous; keep the strictly increasing part
    keep = np.concatenate([[True], np.diff(cdf) > 0])
    return np.interp(levels, cdf[keep], edges[keep])


def wasserstein1d(rho0: GridDensity, rho1: GridDensity, levels: int = 10_000) -> float:
    """Quadratic Wasserstein distance of two 1D densities by quantile coupling."""
    _check_same_grid(rho0, rho1)
    if rho0.grid.dim != 1:
        raise ValueError("wasserstein1d requires one-dimensional densities")
    u = (np.arange(levels) + 0.5) / levels
    diff = _inverse_cdf(rho0, u) - _inverse_cdf(rho1, u)
    return float(np.sqrt(np.mean(diff ** 2)))

