"""Gradient flows in R^n, on Wasserstein space and on a product of density spaces.

Each flow comes with the action functional it minimises, so the flows can be
certified numerically: the action along the flow equals the starting value of
the objective and perturbed paths cost more.
"""

__version__ = "0.1.0"

from ._backend import BACKEND
from .density import (FloorWarning, Grid, GridDensity, SupportError, VelocityField, entropy,
                      free_energy, gaussian_density, relative_entropy, relative_fisher,
                      wasserstein1d, wasserstein_gradient_pair, wasserstein_gradient_single)
from .euclidean import (AccountedCost, GapReport, ProjectionProcess, Trajectory, action_euclidean,
                        dissipation_check_euclidean, gradient_flow, lagrange_functional,
                        newton_flow, optimality_gap, sgd_flow)
from .objectives import (ObjectiveField, Potential, boltzmann_density, double_well_objective,
                         double_well_potential, flat_potential, make_quadratic,
                         quadratic_potential)
from .product import (ProductReport, ProductState, optimal_velocities, optimality_gap_product,
                      product_action, product_flow_run, product_step, pt_rate, reff_rate,
                      shared_flux)
from .wasserstein import (FlowReport, continuity_step, dissipation_check_fp, drift_decomposition,
                          feedback_velocity, fluid_action, fokker_planck_flow, optimality_gap_fp,
                          virial_check)

__all__ = [name for name in dir() if not name.startswith("_")]
