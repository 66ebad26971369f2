"""Independent oracles shared by the unit and acceptance tests."""

import numpy as np

from schwarz_ct.ltv_model import LQProblem
from schwarz_ct.ode_engine import TimeGrid, Trajectory, trapezoid_weights
from schwarz_ct.pmp_subproblem import SubproblemSpec, objective_value


def random_problem(rng, T=1.0):
    """Time-varying LQ instance with parameter coupling and a nonzero cross term."""
    nx, nu = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    A0, A1 = rng.normal(size=(nx, nx)), rng.normal(size=(nx, nx))
    L, M = rng.normal(size=(nx, nx)), rng.normal(size=(nu, nu))
    w = rng.uniform(0.5, 2.0)
    return LQProblem(
        T=T,
        A=lambda t: A0 + np.sin(w * t) * A1,
        B=rng.normal(size=(nx, nu)),
        Q=L @ L.T + np.eye(nx),
        R=M @ M.T + np.eye(nu),
        H=0.1 * rng.normal(size=(nu, nx)),
        C=rng.normal(size=(nx, 1)),
        G=rng.normal(size=(1, nx)),
        W=rng.normal(size=(1, nu)),
        d=lambda t: np.array([[np.cos(3 * t)]]),
        Q_T=np.eye(nx),
        d0=rng.normal(size=nx),
    )


def smooth_control(rng, n_u, modes=4):
    """Random control ``t -> sum_j cos(pi j t) c_j`` as a function of time."""
    coef = rng.normal(size=(modes, n_u))
    return lambda t: sum(np.outer(np.cos(np.pi * j * np.asarray(t)), coef[j]) for j in range(modes))


def random_gradient_case(seed):
    """Subproblem on a random window of length 0.1; odd seeds take the last window."""
    rng = np.random.default_rng(seed)
    pr = random_problem(rng)
    last = bool(seed % 2)
    a0 = rng.uniform(0.0, 0.9)
    interval = (0.9, 1.0) if last else (a0, a0 + 0.1)
    spec = SubproblemSpec(pr, interval, pr.d0, rng.normal(size=pr.n_x), is_last=last)
    return spec, smooth_control(rng, pr.n_u)


def nodal_fd_gradient(spec, grid, control, config, eps=1e-3):
    """Central differences of the discretized objective per node, divided by the trapezoid weights."""
    u = control(grid.nodes)
    w = trapezoid_weights(grid.nodes)
    out = np.zeros_like(u)
    for i in range(u.shape[0]):
        for k in range(u.shape[1]):
            up, um = u.copy(), u.copy()
            up[i, k] += eps
            um[i, k] -= eps
            jp = objective_value(spec, Trajectory(grid, up), config)
            jm = objective_value(spec, Trajectory(grid, um), config)
            out[i, k] = (jp - jm) / (2 * eps * w[i])
    return out


def fd_gradient(spec, grid, control, config, eps=1e-3):
    """Finite-difference gradient on ``grid``, extrapolated in the step.

    Dividing nodal differences by trapezoid weights is second order inside
    the interval but first order at the two end nodes (half-hat basis
    functions).  Combining ``grid`` with its 2x refinement cancels that term.
    """
    fine = TimeGrid(np.linspace(grid.t0, grid.t1, 2 * len(grid) - 1))
    coarse_fd = nodal_fd_gradient(spec, grid, control, config, eps)
    fine_fd = nodal_fd_gradient(spec, fine, control, config, eps)[::2]
    return 2.0 * fine_fd - coarse_fd


def relative_sup_error(approx, exact) -> float:
    return float(np.abs(approx - exact).max() / np.abs(exact).max())
