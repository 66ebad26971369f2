"""Gradient descent on a single time-domain subproblem via forward/backward sweeps.

For a control ``u`` the state is integrated forward from ``p``, the adjoint

    lambda' = -A^T lambda - Q x - H^T u - G^T d

backward from the gradient of the terminal cost, and the reduced gradient is
``g = H x + R u + B^T lambda + W^T d`` node-wise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .ltv_model import LQProblem, hstack, truncate_to_subproblem
from .ode_engine import AffineSweep, IntegratorConfig, TimeGrid, Trajectory, trapezoid_weights

log = logging.getLogger(__name__)


class SubdomainSweeps:
    """State and adjoint sweeps of ``problem`` on ``grid``, built once and reused.

    Only the dynamics and running-cost data enter the sweep operators, so one
    instance serves every subproblem posed on the same interval regardless of
    its boundary parameters.
    """

    def __init__(self, problem: LQProblem, grid: TimeGrid, config: IntegratorConfig):
        self.problem = problem
        self.grid = grid
        self.config = config
        t = grid.nodes
        self.Q = problem.Q.sample(t)
        self.R = problem.R.sample(t)
        self.H = problem.H.sample(t)
        self.B = problem.B.sample(t)
        self.G = problem.G.sample(t)
        self.W = problem.W.sample(t)
        self.d = problem.d.sample(t)[:, :, 0]
        self.weights = trapezoid_weights(t)
        self.state = AffineSweep(problem.A, hstack(problem.B, problem.C), grid, config, "forward")
        self.adjoint = AffineSweep(
            -problem.A.T, -hstack(problem.Q, problem.H.T, problem.G.T), grid, config, "backward"
        )

    def matches(self, grid: TimeGrid, config: IntegratorConfig) -> bool:
        return config == self.config and (grid is self.grid or grid == self.grid)


@dataclass
class SubproblemSpec:
    """Subproblem on ``interval`` with initial state ``p`` and terminal target ``q``.

    Interior subproblems (``is_last`` false) carry the terminal cost
    ``1/2 (x - q)^T Q(t1) (x - q)``; the last one keeps the parent's terminal cost.
    """

    problem: LQProblem
    interval: tuple[float, float]
    p: np.ndarray
    q: np.ndarray | None = None
    is_last: bool = False
    sweeps: SubdomainSweeps | None = field(default=None, repr=False)

    def __post_init__(self):
        t0, t1 = float(self.interval[0]), float(self.interval[1])
        if not (self.problem.t0 - 1e-12 <= t0 < t1 <= self.problem.T + 1e-12):
            raise ValueError(f"invalid subproblem interval [{t0}, {t1}] for horizon [{self.problem.t0}, {self.problem.T}]")
        self.interval = (t0, t1)
        self.p = np.asarray(self.p, dtype=float).ravel()
        n = self.problem.n_x
        self.q = np.zeros(n) if self.q is None else np.asarray(self.q, dtype=float).ravel()
        if self.p.shape != (n,) or self.q.shape != (n,):
            raise ValueError("p and q must be state vectors")
        self.local = truncate_to_subproblem(self.problem, t0, t1, self.p, self.q, self.is_last)

    def operators(self, grid: TimeGrid, config: IntegratorConfig) -> SubdomainSweeps:
        if abs(grid.t0 - self.interval[0]) > 1e-12 or abs(grid.t1 - self.interval[1]) > 1e-12:
            raise ValueError(f"grid {grid} does not span the subproblem interval {self.interval}")
        if self.sweeps is None or not self.sweeps.matches(grid, config):
            self.sweeps = SubdomainSweeps(self.problem, grid, config)
        return self.sweeps

    def terminal_gradient(self, x_end: np.ndarray) -> np.ndarray:
        return self.local.Q_T @ x_end + self.local.terminal_linear

    def terminal_cost(self, x_end: np.ndarray) -> float:
        if self.is_last:
            return float(0.5 * x_end @ self.local.Q_T @ x_end + x_end @ self.local.terminal_linear)
        e = x_end - self.q
        return float(0.5 * e @ self.local.Q_T @ e)


@dataclass(frozen=True)
class GDConfig:
    step_size: float = 1e-2
    grad_tol: float = 1e-6
    max_iters: int = 20_000
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    grid: TimeGrid | None = None
    backtracking: bool = False
    track_objective: bool = False

    def __post_init__(self):
        if self.step_size <= 0 or self.grad_tol <= 0:
            raise ValueError("step_size and grad_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")


def _as_traj(u, grid: TimeGrid | None, n_u: int) -> Trajectory:
    if isinstance(u, Trajectory):
        return u
    if grid is None:
        raise ValueError("a grid is required when u is not a Trajectory")
    return Trajectory(grid, np.asarray(u, dtype=float).reshape(len(grid), n_u))


def _state_values(spec: SubproblemSpec, ops: SubdomainSweeps, u: np.ndarray) -> np.ndarray:
    return ops.state.run(spec.p, np.hstack([u, ops.d]))


def _adjoint_values(spec: SubproblemSpec, ops: SubdomainSweeps, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    return ops.adjoint.run(spec.terminal_gradient(x[-1]), np.hstack([x, u, ops.d]))


def _gradient_values(ops: SubdomainSweeps, x, u, lam) -> np.ndarray:
    return (
        np.einsum("nij,nj->ni", ops.H, x)
        + np.einsum("nij,nj->ni", ops.R, u)
        + np.einsum("nji,nj->ni", ops.B, lam)
        + np.einsum("nji,nj->ni", ops.W, ops.d)
    )


def _objective(spec: SubproblemSpec, ops: SubdomainSweeps, x, u) -> float:
    d = ops.d
    running = (
        0.5 * np.einsum("ni,nij,nj->n", x, ops.Q, x)
        + np.einsum("ni,nij,nj->n", u, ops.H, x)
        + 0.5 * np.einsum("ni,nij,nj->n", u, ops.R, u)
        + np.einsum("ni,nij,nj->n", d, ops.G, x)
        + np.einsum("ni,nij,nj->n", d, ops.W, u)
    )
    return float(ops.weights @ running) + spec.terminal_cost(x[-1])


def forward_state(spec: SubproblemSpec, u, config: IntegratorConfig | None = None) -> Trajectory:
    """State ``x' = A x + B u + C d`` from ``x(t0) = p`` on the grid of ``u``."""
    config = config or IntegratorConfig()
    u = _as_traj(u, None, spec.problem.n_u)
    ops = spec.operators(u.grid, config)
    return Trajectory(u.grid, _state_values(spec, ops, u.values))


def backward_adjoint(spec: SubproblemSpec, x: Trajectory, u: Trajectory, config: IntegratorConfig | None = None) -> Trajectory:
    """Adjoint integrated backward from the gradient of the terminal cost at ``x(t1)``."""
    config = config or IntegratorConfig()
    ops = spec.operators(x.grid, config)
    return Trajectory(x.grid, _adjoint_values(spec, ops, x.values, u.values))


def functional_gradient(spec: SubproblemSpec, u, config: IntegratorConfig | None = None) -> Trajectory:
    """Node values of ``H x + R u + B^T lambda + W^T d`` after one forward and one backward sweep."""
    config = config or IntegratorConfig()
    u = _as_traj(u, None, spec.problem.n_u)
    ops = spec.operators(u.grid, config)
    x = _state_values(spec, ops, u.values)
    lam = _adjoint_values(spec, ops, x, u.values)
    return Trajectory(u.grid, _gradient_values(ops, x, u.values, lam))


def objective_value(spec: SubproblemSpec, u, config: IntegratorConfig | None = None) -> float:
    """Trapezoid quadrature of the running cost plus the terminal cost."""
    config = config or IntegratorConfig()
    u = _as_traj(u, None, spec.problem.n_u)
    ops = spec.operators(u.grid, config)
    x = _state_values(spec, ops, u.values)
    return _objective(spec, ops, x, u.values)


@dataclass
class SubproblemResult:
    x: Trajectory
    u: Trajectory
    lam: Trajectory
    iterations: int
    converged: bool
    grad_norm: float
    objective: float
    objective_history: list = field(default_factory=list, repr=False)

    def __iter__(self):
        return iter((self.x, self.u, self.lam))


def solve_subproblem(spec: SubproblemSpec, u0, gd: GDConfig | None = None) -> SubproblemResult:
    """Fixed-step gradient descent ``u <- u - eta g`` until ``|g|_inf <= grad_tol``.

    With ``gd.backtracking`` the step is halved until the objective decreases.
    When ``max_iters`` is exhausted the iterate with the smallest gradient norm
    is returned with ``converged=False``.
    """
    gd = gd or GDConfig()
    grid = u0.grid if isinstance(u0, Trajectory) else gd.grid
    if u0 is None:
        if grid is None:
            raise ValueError("either u0 or gd.grid must be given")
        u0 = Trajectory.zeros(grid, spec.problem.n_u)
    u0 = _as_traj(u0, grid, spec.problem.n_u)
    grid = u0.grid
    ops = spec.operators(grid, gd.integrator)
    track = gd.track_objective or gd.backtracking

    u = u0.values.copy()
    x = _state_values(spec, ops, u)
    best = None
    history = []
    eta = gd.step_size
    obj = _objective(spec, ops, x, u) if track else float("nan")
    it = 0
    while True:
        lam = _adjoint_values(spec, ops, x, u)
        g = _gradient_values(ops, x, u, lam)
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if track:
            history.append(obj)
        if not np.isfinite(gnorm):
            log.warning("gradient descent diverged after %d iterations", it)
            break
        if best is None or gnorm < best[0]:
            best = (gnorm, it, u.copy(), x.copy(), lam.copy(), obj)
        if gnorm <= gd.grad_tol or it >= gd.max_iters:
            break
        if gd.backtracking:
            while True:
                u_new = u - eta * g
                x_new = _state_values(spec, ops, u_new)
                obj_new = _objective(spec, ops, x_new, u_new)
                if obj_new <= obj - 1e-4 * eta * float(ops.weights @ np.sum(g * g, axis=1)) or eta < 1e-12:
                    break
                eta *= 0.5
            u, x, obj = u_new, x_new, obj_new
        else:
            u = u - eta * g
            x = _state_values(spec, ops, u)
            if track:
                obj = _objective(spec, ops, x, u)
        it += 1

    gnorm, best_it, u, x, lam, obj = best
    converged = gnorm <= gd.grad_tol
    if not converged:
        log.info("subproblem on [%g, %g] stopped at |g|=%.3e after %d iterations", *spec.interval, gnorm, it)
    if not track:
        obj = _objective(spec, ops, x, u)
    return SubproblemResult(
        Trajectory(grid, x), Trajectory(grid, u), Trajectory(grid, lam), it, converged, gnorm, obj, history
    )
