"""Variational smoothing of hidden diffusions with PDE baselines and EM inference."""

from .config import ExperimentConfig
from .drift import (DriftCoefficients, OcpState, ansatz_drift, coupling_rhs,
                    fokker_planck_residual, moment_rhs)
from .em import EmContext, EmRun, ParametricFamily, e_step, inference_domain, m_step, run_em
from .gaussian import (GaussianMixtureState, GaussianParams, density,
                       gaussian_moment, inverse_moment_approx, mixture_moments)
from .models import (InitialLaw, MeasurementSet, SdeModel, SimPath,
                     euler_maruyama, generate_measurements)
from .ocp import (ControlPoint, Costate, OcpTrajectory, ShootOptions,
                  adjoint_rhs, hamiltonian_minimize,
                  initial_condition_from_backward, measurement_jump_gradient,
                  running_cost, shoot, total_cost)
from .oracles import LinearModel, grid_kl, kalman_rts, mc_girsanov_kl
from .pde import (Grid1D, GridDensity, PdeSolution, auto_domain, grid_moments,
                  initial_density, posterior_drift, smoothing_density,
                  smoothing_solution, solve_backward, solve_forward)
from .pipeline import kl_curves, pde_smooth, variational_smooth

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
