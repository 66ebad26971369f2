"""Overlapping Schwarz decomposition in time for linear-quadratic optimal control."""

from .controllability import UCCReport, check_ucc, gramian, zero_steering_control
from .ltv_model import (
    AssumptionReport,
    LQProblem,
    MatrixFunction,
    ValidationError,
    decay_test_problem,
    registry_problem,
    schorlepp_linearized,
    truncate_to_subproblem,
    validate_assumptions,
)
from .ode_engine import IntegratorConfig, TimeGrid, Trajectory, evolution_operator, integrate_ivp
from .pmp_subproblem import (
    GDConfig,
    SubproblemSpec,
    backward_adjoint,
    forward_state,
    functional_gradient,
    objective_value,
    solve_subproblem,
)
from .reference_solver import solve_full_direct, solve_full_riccati
from .riccati_sensitivity import (
    ConstantsBundle,
    boundary_perturbation_response,
    closed_loop_solution,
    point_perturbation_response,
    problem_constants,
    solve_riccati,
    solve_vector_term,
    theoretical_constants,
)
from .schwarz import (
    PartitionSpec,
    SchwarzIterate,
    build_partition,
    error_metric,
    estimate_rate,
    fit_exponential,
    initial_iterate,
    run_schwarz,
    schwarz_iterate,
    update_boundary_params,
)

__version__ = "0.1.0"
