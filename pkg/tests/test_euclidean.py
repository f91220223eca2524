import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradflows.euclidean import (FlowDivergenceError, ProjectionProcess, Trajectory,
                                 action_euclidean, dissipation_check_euclidean, gradient_flow,
                                 lagrange_functional, newton_flow, optimality_gap, sgd_flow)
from gradflows.objectives import ObjectiveField, double_well_objective, make_quadratic

iso = make_quadratic(np.eye(2))
aniso = make_quadratic(np.diag([1.0, 4.0]))
stiff = make_quadratic(np.diag([1.0, 100.0]))


def linear(a):
    a = np.asarray(a, float)
    return ObjectiveField(
        dimension=len(a),
        evaluate=lambda x: np.asarray(x) @ a,
        gradient=lambda x: np.broadcast_to(a, np.shape(x)).copy(),
        hessian=None,
    )


class TestTrajectory:
    def test_rejects_nonincreasing_times(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            Trajectory([0.0, 1.0, 1.0], np.zeros((3, 1)), np.zeros((2, 1)))

    def test_rejects_control_shape(self):
        with pytest.raises(ValueError, match="controls must have shape"):
            Trajectory([0.0, 1.0], np.zeros((2, 1)), np.zeros((2, 1)))

    def test_immutable(self):
        traj = gradient_flow(iso, [1.0, 0.0], 0.1, 0.01)
        with pytest.raises(ValueError):
            traj.states[0, 0] = 3.0

    def test_feasibility_residual_reported(self):
        traj = Trajectory([0.0, 0.5, 1.0], np.zeros((3, 2)), np.ones((2, 2)))
        assert traj.feasibility_residual() == pytest.approx(0.5)

    @pytest.mark.parametrize("flow", [gradient_flow, newton_flow])
    def test_integrator_output_is_feasible(self, flow):
        assert flow(aniso, [1.0, 1.0], 1.0, 1e-2).feasibility_residual() < 1e-14


class TestGradientFlow:
    def test_isotropic_closed_form(self):
        traj = gradient_flow(iso, [1.0, 0.0], 1.0, 1e-3)
        np.testing.assert_allclose(traj.states[-1], [np.exp(-1), 0.0], atol=1e-6)

    def test_anisotropic_closed_form(self):
        traj = gradient_flow(aniso, [1.0, 1.0], 1.0, 1e-3)
        np.testing.assert_allclose(traj.states[-1], [np.exp(-1), np.exp(-4)], atol=1e-6)

    def test_stationary_at_minimiser(self):
        f = make_quadratic(np.diag([1.0, 4.0]), [0.3, -0.2])
        traj = gradient_flow(f, [0.3, -0.2], 1.0, 0.1)
        assert np.all(traj.states == np.array([0.3, -0.2]))

    def test_rk4_fourth_order(self):
        errs = [abs(gradient_flow(aniso, [1.0, 1.0], 1.0, dt).states[-1, 1] - np.exp(-4))
                for dt in (0.02, 0.01)]
        assert errs[0] / errs[1] == pytest.approx(16, rel=0.1)

    def test_dt_exceeds_horizon(self):
        with pytest.raises(ValueError, match="exceeds the horizon"):
            gradient_flow(iso, [1.0, 0.0], 1.0, 2.0)

    def test_divergence_reports_step(self):
        blowup = ObjectiveField(1, lambda x: -np.sum(np.asarray(x) ** 4, axis=-1),
                                lambda x: -4 * np.asarray(x) ** 3)
        with np.errstate(over="ignore"), pytest.raises(FlowDivergenceError, match="step"):
            gradient_flow(blowup, [10.0], 10.0, 0.1)


class TestNewtonFlow:
    def test_quadratic_is_exponential_decay(self):
        traj = newton_flow(stiff, [1.0, 1.0], 1.0, 1e-3)
        np.testing.assert_allclose(traj.states[-1], np.exp(-1) * np.ones(2), atol=1e-6)

    def test_identity_hessian_matches_gradient_flow(self):
        a = newton_flow(iso, [1.0, -0.5], 1.0, 1e-3).states
        b = gradient_flow(iso, [1.0, -0.5], 1.0, 1e-3).states
        assert np.max(np.abs(a - b)) < 1e-10

    def test_stationary_at_minimiser(self):
        assert np.all(newton_flow(stiff, [0.0, 0.0], 1.0, 0.1).states == 0.0)

    def test_indefinite_hessian_reports_location(self):
        # the double well is concave near the origin
        with pytest.raises(np.linalg.LinAlgError, match=r"x=\[0\.1\]"):
            newton_flow(double_well_objective(), [0.1], 1.0, 0.1)


class TestSgdFlow:
    def test_full_batch_is_euler_bitwise(self):
        f = make_quadratic(np.diag([1.0, 2.0, 3.0]))
        proj = ProjectionProcess(3, 3, 0.01, seed=4)
        a = sgd_flow(f, np.ones(3), 1.0, 1e-3, proj).states
        b = gradient_flow(f, np.ones(3), 1.0, 1e-3, method="euler").states
        assert np.array_equal(a, b)

    def test_masks_have_batch_ones(self):
        proj = ProjectionProcess(6, 2, 0.05, seed=1)
        sgd_flow(make_quadratic(np.eye(6)), np.ones(6), 1.0, 1e-3, proj)
        masks = np.array(proj.realized_masks)
        assert masks.shape == (20, 6)
        assert np.all(masks.sum(axis=1) == 2)

    def test_deterministic(self):
        f = make_quadratic(np.eye(4))
        run = lambda: sgd_flow(f, np.ones(4), 1.0, 1e-3, ProjectionProcess(4, 2, 0.05, seed=9))
        assert np.array_equal(run().states, run().states)

    def test_seed_changes_masks(self):
        a = ProjectionProcess(8, 3, 0.1, seed=0).draw(5)
        b = ProjectionProcess(8, 3, 0.1, seed=1).draw(5)
        assert not np.array_equal(a, b)

    def test_per_step_decrease(self):
        f = make_quadratic(np.eye(4))
        dt = 1e-3
        traj = sgd_flow(f, np.ones(4), 1.0, dt, ProjectionProcess(4, 2, 0.05, seed=2))
        _, lhs, rhs = dissipation_check_euclidean(traj, f, "projection")
        assert np.max(np.abs(lhs - rhs)) * dt <= 10 * dt ** 2

    def test_rejects_short_interval(self):
        with pytest.raises(ValueError, match="resample_interval"):
            sgd_flow(iso, [1.0, 1.0], 1.0, 0.1, ProjectionProcess(2, 1, 0.01))

    @pytest.mark.parametrize("k", [0, 5])
    def test_rejects_batch_size(self, k):
        with pytest.raises(ValueError, match="batch_size"):
            ProjectionProcess(4, k, 0.1)


class TestAction:
    def test_isotropic_identity(self):
        traj = gradient_flow(iso, [1.0, 0.0], 5.0, 1e-3)
        assert action_euclidean(traj, iso).total == pytest.approx(0.5, abs=1e-4)

    def test_anisotropic_identity(self):
        traj = gradient_flow(aniso, [1.0, 1.0], 5.0, 1e-3)
        assert action_euclidean(traj, aniso).total == pytest.approx(2.5, abs=1e-4)

    def test_newton_identity(self):
        traj = newton_flow(stiff, [1.0, 1.0], 5.0, 1e-3)
        assert action_euclidean(traj, stiff, "inverse_hessian").total == pytest.approx(50.5, abs=1e-3)

    def test_projected_identity(self):
        f = make_quadratic(np.diag([1.0, 2.0, 3.0, 4.0]))
        dt, T = 1e-3, 2.0
        traj = sgd_flow(f, np.ones(4), T, dt, ProjectionProcess(4, 2, 0.05, seed=0))
        total = action_euclidean(traj, f, "projection").total
        assert abs(total - 5.0) <= 1e-6 + 10 * dt ** 2 * T * 5.0

    def test_stationary_path_exact(self):
        f = make_quadratic(np.eye(2), [1.0, 2.0])
        traj = Trajectory(np.linspace(0, 3, 31), np.tile([1.0, 2.0], (31, 1)), np.zeros((30, 2)))
        cost = action_euclidean(traj, f)
        assert cost.total == f.evaluate(np.array([1.0, 2.0])) == 0.0

    def test_infeasible_rejected(self):
        traj = Trajectory([0.0, 1.0], np.zeros((2, 2)), np.ones((1, 2)))
        with pytest.raises(ValueError, match="violates"):
            action_euclidean(traj, iso)
        assert action_euclidean(traj, iso, feasibility_tol=None).running == pytest.approx(1.0)

    def test_inverse_hessian_needs_hessian(self):
        f = linear([1.0, 0.0])
        traj = Trajectory([0.0, 1.0], np.zeros((2, 2)), np.zeros((1, 2)))
        with pytest.raises(ValueError, match="Hessian"):
            action_euclidean(traj, f, "inverse_hessian")

    def test_euler_first_order_in_dt(self):
        errs = [abs(action_euclidean(gradient_flow(aniso, [1.0, 1.0], 5.0, dt, "euler"),
                                     aniso).total - 2.5) for dt in (2e-3, 1e-3)]
        # the symmetric running-cost quadrature makes this second order in practice
        assert errs[0] / errs[1] >= 1.9


class TestLagrange:
    def test_vanishes_on_flow(self):
        traj = gradient_flow(aniso, [1.0, 1.0], 1.0, 1e-3)
        assert abs(lagrange_functional(traj, aniso)) < 1e-6

    def test_vanishes_for_other_function(self):
        traj = gradient_flow(aniso, [1.0, 1.0], 1.0, 1e-3)
        S = make_quadratic([[2.0, 0.5], [0.5, 1.0]], [1.0, -2.0])
        assert abs(lagrange_functional(traj, S)) <= 10 * 1e-6

    def test_vanishes_for_double_well(self):
        traj = gradient_flow(make_quadratic([[2.0]]), [1.5], 1.0, 1e-3)
        assert abs(lagrange_functional(traj, double_well_objective())) <= 10 * 1e-6

    def test_constant_path_exact_zero(self):
        traj = Trajectory(np.linspace(0, 1, 11), np.ones((11, 2)), np.zeros((10, 2)))
        assert lagrange_functional(traj, aniso) == 0.0

    def test_infeasible_linear(self):
        a, c, T = np.array([2.0, -1.0]), np.array([0.5, 3.0]), 2.0
        traj = Trajectory(np.linspace(0, T, 21), np.ones((21, 2)), np.tile(c, (20, 1)))
        assert lagrange_functional(traj, linear(a)) == pytest.approx(T * (c @ a), abs=1e-14)


class TestOptimalityGap:
    @pytest.mark.parametrize("weighting, f, x0", [
        ("identity", iso, [1.0, 0.0]),
        ("identity", aniso, [1.0, 1.0]),
        ("inverse_hessian", aniso, [1.0, 1.0]),
    ])
    @pytest.mark.parametrize("eps", [0.05, 0.1])
    def test_perturbations_cost_more(self, weighting, f, x0, eps):
        rep = optimality_gap(f, x0, 5.0, 1e-3, weighting, 20, eps, seed=3)
        assert rep.passed
        assert np.all(rep.samples >= rep.optimal_total - rep.tolerance)

    def test_samples_above_initial_value(self):
        rep = optimality_gap(aniso, [1.0, 1.0], 5.0, 1e-3, "identity", 100, 0.05, seed=0)
        assert np.all(rep.samples >= 2.5 - rep.tolerance)

    def test_zero_magnitude_exact(self):
        rep = optimality_gap(aniso, [1.0, 1.0], 1.0, 1e-2, "identity", 5, 0.0, seed=0)
        assert rep.gap == 0.0

    def test_projection(self):
        f = make_quadratic(np.eye(4))
        rep = optimality_gap(f, np.ones(4), 1.0, 1e-3, "projection", 10, 0.1, seed=0,
                             proj=ProjectionProcess(4, 2, 0.05, seed=0))
        assert rep.passed

    def test_seeded(self):
        a = optimality_gap(iso, [1.0, 0.0], 1.0, 1e-2, perturbations=5, seed=7)
        b = optimality_gap(iso, [1.0, 0.0], 1.0, 1e-2, perturbations=5, seed=7)
        assert np.array_equal(a.samples, b.samples)

    def test_json_shape(self):
        rep = optimality_gap(iso, [1.0, 0.0], 1.0, 1e-2, perturbations=3)
        assert set(rep.to_json()) == {"optimal_total", "samples", "gap", "tolerance", "flagged"}


class TestDissipation:
    def test_initial_rate_isotropic(self):
        t, lhs, rhs = dissipation_check_euclidean(gradient_flow(iso, [1.0, 0.0], 1.0, 1e-3), iso)
        assert rhs[0] == -1.0
        assert lhs[0] == pytest.approx(-1.0, abs=1e-5)

    def test_initial_rate_newton(self):
        traj = newton_flow(stiff, [1.0, 1.0], 1.0, 1e-3)
        _, lhs, rhs = dissipation_check_euclidean(traj, stiff, "inverse_hessian")
        assert rhs[0] == pytest.approx(-101.0, abs=1e-9)
        assert lhs[0] == pytest.approx(-101.0, abs=1e-3)

    def test_critical_point(self):
        _, lhs, rhs = dissipation_check_euclidean(gradient_flow(iso, [0.0, 0.0], 1.0, 0.1), iso)
        assert np.all(lhs == 0.0) and np.all(rhs == 0.0)

    @pytest.mark.parametrize("flow, weighting", [(gradient_flow, "identity"),
                                                 (newton_flow, "inverse_hessian")])
    def test_identity_along_flow(self, flow, weighting):
        _, lhs, rhs = dissipation_check_euclidean(flow(aniso, [1.0, 1.0], 1.0, 2.5e-4), aniso,
                                                  weighting)
        assert np.all(rhs <= 0)
        assert np.max(np.abs(lhs - rhs)) <= 1e-4


@st.composite
def spd(draw):
    eig = draw(st.lists(st.floats(0.2, 5.0), min_size=2, max_size=3))
    angle = draw(st.floats(0, np.pi))
    n = len(eig)
    Q = np.eye(n)
    c, s = np.cos(angle), np.sin(angle)
    Q[:2, :2] = [[c, -s], [s, c]]
    return Q @ np.diag(eig) @ Q.T


class TestMonotonicity:
    @given(A=spd(), x0=st.lists(st.floats(-3, 3), min_size=3, max_size=3))
    def test_gradient_flow(self, A, x0):
        f = make_quadratic(A)
        fx = f.evaluate(gradient_flow(f, x0[:len(A)], 1.0, 1e-2).states)
        assert np.all(np.diff(fx) <= 0)

    @given(A=spd(), x0=st.lists(st.floats(-3, 3), min_size=3, max_size=3))
    def test_newton_flow(self, A, x0):
        f = make_quadratic(A)
        fx = f.evaluate(newton_flow(f, x0[:len(A)], 1.0, 1e-2).states)
        assert np.all(np.diff(fx) <= 0)

    @given(seed=st.integers(0, 2 ** 32), k=st.integers(1, 4))
    def test_sgd_flow(self, seed, k):
        f = make_quadratic(np.diag([1.0, 2.0, 3.0, 4.0]))
        dt = 1e-3
        traj = sgd_flow(f, np.ones(4), 1.0, dt, ProjectionProcess(4, k, 0.05, seed=seed))
        assert np.all(np.diff(f.evaluate(traj.states)) <= 10 * dt ** 2)
