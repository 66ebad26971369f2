"""Full-horizon reference solutions by two independent routes.

``solve_full_direct`` discretizes with forward Euler and solves the sparse KKT
system of the resulting equality-constrained QP.  ``solve_full_riccati`` uses
the Riccati feedback form.  The two should agree to first order in the step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .ltv_model import LQProblem
from .ode_engine import IntegratorConfig, TimeGrid, Trajectory
from .riccati_sensitivity import closed_loop_solution, solve_riccati, solve_vector_term

KKT_RESIDUAL_TOL = 1e-9


class TranscriptionError(RuntimeError):
    """The KKT system of the transcription is singular or badly solved."""


@dataclass
class DirectSolution:
    x: Trajectory
    u: Trajectory
    lam: Trajectory
    objective: float
    kkt_residual: float
    multipliers: np.ndarray = field(repr=False)

    def __iter__(self):
        return iter((self.x, self.u, self.lam))


@dataclass
class DiscreteLQTranscription:
    """Forward-Euler transcription on ``grid``.

    Decision vector ``[x_0, ..., x_N, u_0, ..., u_{N-1}]``; the running cost is
    summed with left-endpoint weights ``h_i``; constraints are ``x_0 = d0`` and
    ``(I + h_i A_i) x_i + h_i B_i u_i + h_i C_i d_i - x_{i+1} = 0``.
    """

    problem: LQProblem
    grid: TimeGrid
    hessian: sp.csr_matrix = field(init=False, repr=False)
    linear: np.ndarray = field(init=False, repr=False)
    constraints: sp.csr_matrix = field(init=False, repr=False)
    rhs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pr, grid = self.problem, self.grid
        n, m = pr.n_x, pr.n_u
        N = len(grid) - 1
        t = grid.nodes[:-1]
        h = grid.steps
        A, B, C = pr.A.sample(t), pr.B.sample(t), pr.C.sample(t)
        Q, R, H = pr.Q.sample(t), pr.R.sample(t), pr.H.sample(t)
        G, W = pr.G.sample(t), pr.W.sample(t)
        d = pr.d.sample(t)[:, :, 0]
        hh = h[:, None, None]

        Hxx = sp.block_diag(list(hh * Q) + [pr.Q_T], format="csr")
        Huu = sp.block_diag(list(hh * R), format="csr")
        Hux = sp.block_diag(list(hh * H), format="csr")
        Hux = sp.hstack([Hux, sp.csr_matrix((m * N, n))], format="csr")
        self.hessian = sp.bmat([[Hxx, Hux.T], [Hux, Huu]], format="csr")

        fx = np.concatenate([(h[:, None] * np.einsum("nji,nj->ni", G, d)).ravel(), pr.terminal_linear])
        fu = (h[:, None] * np.einsum("nji,nj->ni", W, d)).ravel()
        self.linear = np.concatenate([fx, fu])

        eye = np.broadcast_to(np.eye(n), (N, n, n))
        top = sp.hstack([sp.eye(n), sp.csr_matrix((n, n * N))])
        steps = sp.hstack([sp.block_diag(list(eye + hh * A)), sp.csr_matrix((n * N, n))])
        nexts = sp.hstack([sp.csr_matrix((n * N, n)), -sp.eye(n * N)])
        Ax = sp.vstack([top, steps + nexts])
        Au = sp.vstack([sp.csr_matrix((n, m * N)), sp.block_diag(list(hh * B))])
        self.constraints = sp.hstack([Ax, Au], format="csr")
        self.rhs = np.concatenate([pr.d0, -(h[:, None] * np.einsum("nij,nj->ni", C, d)).ravel()])

    @property
    def kkt_matrix(self) -> sp.csc_matrix:
        return sp.bmat([[self.hessian, self.constraints.T], [self.constraints, None]], format="csc")

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ (self.hessian @ z) + self.linear @ z)


def solve_full_direct(problem: LQProblem, grid: TimeGrid) -> DirectSolution:
    """Optimal solution of the forward-Euler transcription by one sparse KKT solve.

    The adjoint at node ``i < N`` is the multiplier of the constraint linking
    ``x_i`` to ``x_{i+1}``; at the final node it is the gradient of the terminal
    cost, which equals the last multiplier.  The control at the final node is
    recovered from stationarity.
    """
    if not grid.is_uniform:
        raise ValueError("the direct transcription expects a uniform grid")
    tr = DiscreteLQTranscription(problem, grid)
    n, m = problem.n_x, problem.n_u
    N = len(grid) - 1
    K = tr.kkt_matrix
    rhs = np.concatenate([-tr.linear, tr.rhs])
    try:
        sol = spla.splu(K).solve(rhs)
    except RuntimeError as exc:
        raise TranscriptionError(f"KKT matrix is singular ({exc}); check the step and the assumptions") from exc
    if not np.all(np.isfinite(sol)):
        raise TranscriptionError("KKT solve produced non-finite values")
    residual = float(np.max(np.abs(K @ sol - rhs)) / max(1.0, float(np.max(np.abs(rhs)))))
    if residual > KKT_RESIDUAL_TOL:
        raise TranscriptionError(f"KKT residual {residual:.3e} exceeds {KKT_RESIDUAL_TOL:g}")
    nz = n * (N + 1) + m * N
    z, mult = sol[:nz], sol[nz:]
    x = z[: n * (N + 1)].reshape(N + 1, n)
    u = np.empty((N + 1, m))
    u[:N] = z[n * (N + 1) :].reshape(N, m)
    mu = mult[n:].reshape(N, n)
    lam = np.empty((N + 1, n))
    lam[:N] = mu
    lam[N] = problem.Q_T @ x[N] + problem.terminal_linear
    tN = grid.t1
    rhs_u = problem.H(tN) @ x[N] + problem.B(tN).T @ lam[N] + problem.W(tN).T @ problem.d(tN)[:, 0]
    u[N] = -np.linalg.solve(problem.R(tN), rhs_u)
    return DirectSolution(
        Trajectory(grid, x), Trajectory(grid, u), Trajectory(grid, lam), tr.objective(z), residual, mult
    )


def stiffness_refinement(problem: LQProblem, grid: TimeGrid, target: float = 0.25, minimum: int = 2) -> int:
    """Refinement factor keeping ``h * L`` below ``target`` on the Riccati table.

    ``L`` bounds the closed-loop rate near the horizon, ``|A| + |Q_T B R^-1 B^T|``,
    which dominates when the terminal weight is large.
    """
    T = problem.T
    BRB = problem.B(T) @ np.linalg.solve(problem.R(T), problem.B(T).T)
    rate = np.linalg.norm(problem.A(T), 2) + np.linalg.norm(problem.Q_T @ BRB, 2)
    h = float(np.max(np.diff(grid.nodes)))
    return max(minimum, int(np.ceil(h * rate / target)))


def solve_full_riccati(problem: LQProblem, grid: TimeGrid, config: IntegratorConfig | None = None):
    """Optimal ``(x, u, lambda)`` via the Riccati feedback form.

    Both sweeps run on a table refined by :func:`stiffness_refinement`, so a
    coarse ``grid`` does not under-resolve the terminal boundary layer.
    """
    riccati = solve_riccati(problem, grid, config, refine=stiffness_refinement(problem, grid))
    solve_vector_term(problem, riccati, config)
    x, u, lam = closed_loop_solution(problem, riccati, riccati.table, config)
    step = riccati.refine
    return tuple(Trajectory(grid, tr.values[::step]) for tr in (x, u, lam))


def sup_distance(a, b) -> float:
    """Largest node-wise ``|dx| + |du| + |dlambda|`` between two solution triples."""
    a, b = tuple(a), tuple(b)
    total = np.zeros(len(a[0].grid))
    for ta, tb in zip(a, b):
        if ta.grid != tb.grid:
            raise ValueError("solutions live on different grids")
        total += np.linalg.norm(ta.values - tb.values, axis=1)
    return float(total.max())
