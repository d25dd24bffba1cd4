"""Regime clustering and stochastic closure for scalar nonlinear SDEs.

Time-varying SDE parameters are estimated by clustering a time series into
locally stationary regimes: per-regime parameters are fitted by maximum
likelihood with a closed-form Hermite transition density, and the regime
affiliations are kept smooth by a finite-element H1 penalty.
"""

from .models import SdeModelSpec, DomainError, get_model, register_model, builtin_ou, builtin_logdrift, builtin_doublewell
from .hermite import transition_density, eta_coefficients, hermite_polynomials, NumericError
from .likelihood import UniformTimeSeries, FitnessMatrix, ContractError, fitness_row, fitness_matrix, weighted_negloglik
from .theta_solver import ThetaSolverConfig, EmptyClusterError, minimize_theta
from .gamma_solver import FemGrid, SpgConfig, make_grid, reduce_fitness, solve_qp, interpolate_gamma, project_simplex_columns
from .subspace import SubspaceConfig, ClusteringResult, run_subspace, scan_eps2
from .hyperselect import gamma_energy, select_eps2, stationary_density, diversity, reflected_wiener, gap_statistic
from .closure import ClosureFit, cluster_weighted_mean, fit_scaling, fit_closure, reconstruct_theta_path, simulate_closed
from .synth import AuxProcessConfig, simulate_aux, simulate_sde, generate_example, default_example_config

__version__ = "0.1.0"
