import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradflows.density import (Grid, GridDensity, VelocityField, gaussian_density,
                               relative_entropy, relative_fisher)
from gradflows.objectives import boltzmann_density, flat_potential, quadratic_potential
from gradflows.wasserstein import (StabilityError, check_stability, continuity_step,
                                   dissipation_check_fp, drift_decomposition, feedback_velocity,
                                   fluid_action, fokker_planck_flow, optimality_gap_fp,
                                   space_bump, time_profile, virial_check)

ou = quadratic_potential([[1.0]])


@pytest.fixture(scope="module")
def small_grid():
    return Grid.line(-10, 10, 201)


@pytest.fixture(scope="module")
def ou_run():
    g = Grid.line(-10, 10, 401)
    rho0 = gaussian_density(g, [2.0], 0.25)
    snaps, rep = fokker_planck_flow(rho0, ou, 1.0, 1.6e-4)
    return g, rho0, snaps, rep


def _normal(grid, values):
    return GridDensity(grid, values).normalized()


def bump(grid, centre=0.0, width=1.0):
    x = grid.axes[0]
    return _normal(grid, np.exp(-0.5 * ((x - centre) / width) ** 2))


class TestContinuityStep:
    def test_zero_velocity_identity(self, small_grid):
        rho = bump(small_grid)
        out = continuity_step(rho, VelocityField.zeros(small_grid), 0.01)
        assert np.array_equal(out.values, rho.values)

    @pytest.mark.parametrize("c", [1.0, -0.5])
    def test_constant_velocity_shifts_mean(self, small_grid, c):
        rho = bump(small_grid, width=1.5)
        dt = 0.05
        v = VelocityField(small_grid, np.full(small_grid.shape, c))
        shift = continuity_step(rho, v, dt).mean()[0] - rho.mean()[0]
        assert abs(shift - c * dt) <= small_grid.spacing[0] * dt

    def test_cfl_violation_names_ratio(self, small_grid):
        v = VelocityField(small_grid, np.full(small_grid.shape, 10.0))
        with pytest.raises(StabilityError, match=r"CFL ratio 10\.05 exceeds 0\.9"):
            continuity_step(bump(small_grid), v, 0.1)

    def test_nonpositive_dt(self, small_grid):
        with pytest.raises(ValueError, match="dt must be positive"):
            continuity_step(bump(small_grid), VelocityField.zeros(small_grid), 0.0)

    def test_two_dimensional_mass(self):
        g = Grid([-4, -4], [4, 4], [40, 50])
        rho = gaussian_density(g, [0.5, -0.5], np.diag([1.0, 0.5]))
        x, y = np.moveaxis(g.points, -1, 0)
        v = VelocityField(g, np.stack([np.sin(y), np.cos(x)]))
        out = continuity_step(rho, v, 0.05)
        assert abs(out.mass - rho.mass) < 1e-14
        assert out.values.min() >= 0

    @given(seed=st.integers(0, 2 ** 32), cfl=st.floats(0.05, 0.5))
    def test_conservative_and_positive(self, seed, cfl):
        rng = np.random.default_rng(seed)
        g = Grid.line(-5, 5, 64)
        rho = _normal(g, rng.uniform(0, 1, g.shape))
        v = rng.standard_normal(g.shape)
        dt = cfl * g.spacing[0] / np.max(np.abs(v))
        out = continuity_step(rho, VelocityField(g, v), dt)
        assert abs(out.mass - rho.mass) < 1e-14
        assert out.values.min() >= 0


class TestFokkerPlanck:
    def test_ou_moments(self, ou_run):
        _, _, snaps, _ = ou_run
        assert snaps[-1].mean()[0] == pytest.approx(2 * np.exp(-1), abs=2e-3)
        assert snaps[-1].covariance()[0, 0] == pytest.approx(1 - 0.75 * np.exp(-2), abs=2e-3)

    def test_stationary(self, small_grid):
        rho_bar = boltzmann_density(ou, small_grid)
        snaps, rep = fokker_planck_flow(rho_bar, ou, 0.5, 2e-3)
        assert max(np.max(np.abs(s.values - rho_bar.values)) for s in snaps) < 1e-6
        assert np.all(np.abs(rep.divergence_series) < 1e-8)

    def test_divergence_strictly_decreasing(self, ou_run):
        _, _, _, rep = ou_run
        D = rep.divergence_series
        live = D[:-1] > 1e-8
        assert np.all(np.diff(D)[live] < 0)

    def test_mass(self, ou_run):
        assert np.max(np.abs(ou_run[3].mass_series - 1)) < 1e-9

    def test_snapshot_cadence(self, ou_run):
        _, _, snaps, rep = ou_run
        assert len(snaps) == len(rep.times) == 101
        assert rep.times[-1] == pytest.approx(1.0)

    def test_diffusion_bound(self, small_grid):
        with pytest.raises(StabilityError, match="diffusion bound"):
            fokker_planck_flow(bump(small_grid), ou, 1.0, 0.01)

    def test_drift_cfl(self):
        g = Grid.line(-10, 10, 41)
        with pytest.raises(StabilityError, match="drift CFL"):
            check_stability(quadratic_potential([[100.0]]), g, 0.09)

    def test_unknown_scheme(self, small_grid):
        with pytest.raises(ValueError, match="unknown scheme"):
            fokker_planck_flow(bump(small_grid), ou, 1.0, 1e-3, scheme="lax")

    @pytest.mark.parametrize("scheme", ["upwind", "continuity"])
    def test_one_step_matches_sg(self, scheme):
        g = Grid.line(-10, 10, 1601)
        rho0 = gaussian_density(g, [2.0], 0.25)
        ref, _ = fokker_planck_flow(rho0, ou, 1e-5, 1e-5)
        alt, _ = fokker_planck_flow(rho0, ou, 1e-5, 1e-5, scheme=scheme)
        assert np.max(np.abs(alt[-1].values - ref[-1].values)) < 1e-3

    @pytest.mark.parametrize("scheme, order", [("upwind", 1), ("sg", 2)])
    def test_spatial_convergence(self, scheme, order):
        errs = []
        for n in (101, 201, 401):
            g = Grid.line(-10, 10, n)
            snaps, _ = fokker_planck_flow(gaussian_density(g, [2.0], 0.25), ou, 1.0,
                                          0.1 * g.spacing[0] ** 2, scheme=scheme)
            errs.append(abs(snaps[-1].mean()[0] - 2 * np.exp(-1)))
        rates = np.log2(np.array(errs[:-1]) / errs[1:])
        assert np.all(rates > order - 0.2)

    def test_flat_potential_spreads(self):
        g = Grid.line(-5, 5, 101)
        snaps, rep = fokker_planck_flow(gaussian_density(g, [0.0], 0.5), flat_potential(1), 0.5,
                                        1e-3)
        # heat flow: variance grows by 2t before the walls matter
        assert snaps[-1].covariance()[0, 0] == pytest.approx(1.5, abs=1e-2)
        assert np.all(np.diff(rep.divergence_series) <= 1e-8)

    def test_two_dimensional(self):
        g = Grid([-6, -6], [6, 6], [48, 48])
        pot = quadratic_potential(np.diag([1.0, 2.0]))
        snaps, rep = fokker_planck_flow(gaussian_density(g, [1.0, -1.0], np.eye(2) * 0.5), pot,
                                        0.2, 5e-3)
        assert np.max(np.abs(rep.mass_series - 1)) < 1e-9
        assert np.all(np.diff(rep.divergence_series) <= 1e-8)


class TestDissipation:
    def test_equilibrium(self, small_grid):
        _, rep = fokker_planck_flow(boltzmann_density(ou, small_grid), ou, 0.2, 2e-3)
        _, lhs, rhs = dissipation_check_fp(rep)
        assert np.max(np.abs(lhs)) < 1e-8 and np.max(np.abs(rhs)) < 1e-8

    def test_shifted_gaussian_fisher(self):
        g = Grid.line(-12, 12, 2401)
        rho_bar = boltzmann_density(ou, g)
        assert -relative_fisher(gaussian_density(g, [1.0], 1.0), rho_bar) == pytest.approx(
            -1.0, abs=1e-3)

    def test_identity_on_ou(self, ou_run):
        t, lhs, rhs = dissipation_check_fp(ou_run[3])
        win = (t >= 0.1 - 1e-9) & (t <= 0.9 + 1e-9)
        assert np.all(rhs <= 0)
        assert np.max(np.abs(lhs - rhs)[win]) < 5e-3

    def test_needs_three_snapshots(self, small_grid):
        _, rep = fokker_planck_flow(bump(small_grid), ou, 1e-3, 1e-3)
        with pytest.raises(ValueError, match="three snapshots"):
            dissipation_check_fp(rep)


class TestDriftDecomposition:
    def test_equilibrium_current_vanishes(self):
        g = Grid.line(-8, 8, 801)
        rho_bar = boltzmann_density(ou, g)
        forward = VelocityField(g, -ou.gradient(g.points)[..., 0] / ou.kT)
        current, _, _ = drift_decomposition(rho_bar, forward, 2.0)
        assert np.max(np.abs(current.components[0, 1:-1])) < 1e-6

    @pytest.mark.parametrize("var", [0.5, 2.0])
    def test_gaussian_score(self, var):
        g = Grid.line(-8, 8, 801)
        _, osmotic, _ = drift_decomposition(gaussian_density(g, [0.0], var),
                                            VelocityField.zeros(g), 2.0)
        x = g.axes[0]
        assert np.max(np.abs(osmotic.components[0, 1:-1] + x[1:-1] / var)) < 1e-4

    def test_zero_forward(self, small_grid):
        current, osmotic, backward = drift_decomposition(bump(small_grid, 1.0),
                                                         VelocityField.zeros(small_grid), 0.7)
        assert np.array_equal(current.components, -osmotic.components)
        np.testing.assert_allclose(backward.components, -2 * osmotic.components)

    @given(seed=st.integers(0, 2 ** 32), sigma2=st.floats(0.1, 4.0))
    def test_current_plus_osmotic(self, seed, sigma2):
        rng = np.random.default_rng(seed)
        g = Grid.line(-3, 3, 32)
        rho = _normal(g, rng.uniform(0.1, 1.0, g.shape))
        fwd = VelocityField(g, rng.standard_normal(g.shape))
        current, osmotic, _ = drift_decomposition(rho, fwd, sigma2)
        np.testing.assert_allclose(current.components + osmotic.components, fwd.components,
                                   rtol=0, atol=1e-12)


class TestFluidAction:
    @pytest.fixture(scope="class")
    @staticmethod
    def frozen():
        g = Grid.line(-12, 12, 2401)
        return gaussian_density(g, [1.0], 1.0), boltzmann_density(ou, g)

    @pytest.mark.parametrize("T", [0.5, 1.0, 2.0])
    def test_frozen_zero_velocity(self, frozen, T):
        rho, rho_bar = frozen
        n = 11
        cost = fluid_action([rho] * n, [VelocityField.zeros(rho.grid)] * n, rho_bar, T / (n - 1))
        assert cost.running == pytest.approx(0.5 * T, abs=1e-3)
        assert cost.terminal == pytest.approx(0.5, abs=1e-3)
        assert cost.total == pytest.approx(0.5 * (T + 1), abs=1e-3)

    def test_constant_half_velocity(self, frozen):
        # 1/2 (0.25 + 1) per unit time plus the terminal 0.5
        rho, rho_bar = frozen
        v = VelocityField(rho.grid, np.full(rho.grid.shape, 0.5))
        cost = fluid_action([rho] * 5, [v] * 5, rho_bar, 0.25)
        assert cost.total == pytest.approx(0.625 + 0.5, abs=1e-3)

    def test_equilibrium_is_free(self, small_grid):
        rho_bar = boltzmann_density(ou, small_grid)
        cost = fluid_action([rho_bar] * 3, [VelocityField.zeros(small_grid)] * 3, rho_bar, 0.1)
        assert abs(cost.total) < 1e-8

    def test_optimal_flow_identity(self, ou_run):
        _, rho0, snaps, rep = ou_run
        rho_bar = boltzmann_density(ou, rho0.grid)
        D0 = relative_entropy(rho0, rho_bar)
        assert rep.action.total == pytest.approx(D0, abs=2e-2)
        vel = [feedback_velocity(s, rho_bar) for s in snaps]
        assert fluid_action(snaps, vel, rho_bar, np.diff(rep.times)).total == pytest.approx(
            D0, abs=2e-2)

    def test_grid_mismatch(self, small_grid):
        other = Grid.line(-10, 10, 101)
        with pytest.raises(ValueError, match="grid"):
            fluid_action([bump(small_grid)], [VelocityField.zeros(other)],
                         boltzmann_density(ou, small_grid), 0.1)

    def test_misaligned(self, small_grid):
        with pytest.raises(ValueError, match="aligned"):
            fluid_action([bump(small_grid)] * 2, [VelocityField.zeros(small_grid)],
                         boltzmann_density(ou, small_grid), 0.1)


class TestVirial:
    def test_optimal_feedback(self):
        rng = np.random.default_rng(5)
        g = Grid.line(-10, 10, 801)
        rho_bar = boltzmann_density(ou, g)
        for _ in range(10):
            rho = gaussian_density(g, [rng.uniform(-2, 2)], rng.uniform(0.3, 3.0))
            lhs, rhs = virial_check(rho, feedback_velocity(rho, rho_bar), rho_bar)
            assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(rhs))

    def test_zero_velocity_shifted(self):
        g = Grid.line(-12, 12, 2401)
        lhs, rhs = virial_check(gaussian_density(g, [1.0], 1.0), VelocityField.zeros(g),
                                boltzmann_density(ou, g))
        assert lhs == 0.0
        assert rhs == pytest.approx(0.5, abs=1e-4)

    def test_equilibrium_any_velocity(self, small_grid):
        rho_bar = boltzmann_density(ou, small_grid)
        v = VelocityField(small_grid, np.sin(small_grid.axes[0]))
        assert abs(virial_check(rho_bar, v, rho_bar)[1]) < 1e-20


class TestPerturbations:
    def test_space_bump_normalised(self):
        g = Grid([-5, -5], [5, 5], [30, 40])
        b = space_bump(g, np.random.default_rng(0))
        assert b.shape == (2, 30, 40)
        np.testing.assert_allclose(np.max(np.abs(b), axis=(1, 2)), 1.0)

    def test_space_bump_seeded(self, small_grid):
        a = space_bump(small_grid, np.random.default_rng(3))
        assert np.array_equal(a, space_bump(small_grid, np.random.default_rng(3)))

    def test_time_profile_unit_norm(self):
        t = np.linspace(0, 2.0, 20001)
        p = time_profile(2.0, 1.0)(t)
        assert p[0] == 0 and abs(p[-1]) < 1e-15
        assert np.trapezoid(p ** 2, t) == pytest.approx(1.0, abs=1e-6)

    def test_zero_magnitude_exact(self, small_grid):
        rho0 = gaussian_density(small_grid, [2.0], 0.25)
        rep = optimality_gap_fp(rho0, ou, 0.2, 2e-3, perturbations=2, magnitude=0.0)
        assert rep.gap == 0.0

    def test_perturbations_cost_more(self):
        g = Grid.line(-10, 10, 401)
        rho0 = gaussian_density(g, [2.0], 0.25)
        rep = optimality_gap_fp(rho0, ou, 1.0, 1.6e-4, perturbations=4, magnitude=0.2, seed=1)
        assert rep.passed
        assert np.median(rep.samples) > rep.optimal_total
