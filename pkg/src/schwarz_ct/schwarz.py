"""Overlapping Schwarz iteration in time.

The horizon is split at ``t_1 < ... < t_{m-1}``; subdomain ``j`` is widened
by overlaps on both sides.  Each outer iteration reads boundary states and
adjoints from the previous iterate, solves all subproblems independently and
keeps from subdomain ``j`` only the nodes in ``[t_{j-1}, t_j)``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .ltv_model import LQProblem
from .ode_engine import TimeGrid, Trajectory
from .pmp_subproblem import GDConfig, SubdomainSweeps, SubproblemSpec, solve_subproblem

log = logging.getLogger(__name__)

NOISE_FLOOR = 1e-12
Q_COND_LIMIT = 1e12


class RateUndefinedError(ValueError):
    """Too few errors above the noise floor to estimate a rate."""


@dataclass(frozen=True)
class PartitionSpec:
    """Breakpoints and per-subdomain overlaps (seconds) on ``[t0, T]``."""

    breakpoints: np.ndarray
    tau0: np.ndarray
    tau1: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.breakpoints, dtype=float)
        if b.size < 2 or np.any(np.diff(b) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        m = b.size - 1
        tau0 = np.broadcast_to(np.asarray(self.tau0, dtype=float), (m,)).copy()
        tau1 = np.broadcast_to(np.asarray(self.tau1, dtype=float), (m,)).copy()
        if np.any(tau0 < 0) or np.any(tau1 < 0):
            raise ValueError("overlaps must be nonnegative")
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "tau0", tau0)
        object.__setattr__(self, "tau1", tau1)
        if np.any(self.starts >= self.ends):
            raise ValueError("invalid partition: some subdomain is empty")

    @property
    def m(self) -> int:
        return self.breakpoints.size - 1

    @property
    def t0(self) -> float:
        return float(self.breakpoints[0])

    @property
    def T(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def starts(self) -> np.ndarray:
        """``t_j^0 = max(t_{j-1} - tau_j^0, t0)``."""
        return np.maximum(self.breakpoints[:-1] - self.tau0, self.t0)

    @property
    def ends(self) -> np.ndarray:
        """``t_j^1 = min(t_j + tau_j^1, T)``."""
        return np.minimum(self.breakpoints[1:] + self.tau1, self.T)

    @property
    def min_overlap(self) -> float:
        """Smallest overlap actually present at an interior breakpoint."""
        if self.m == 1:
            return float("inf")
        left = self.breakpoints[:-1] - self.starts
        right = self.ends - self.breakpoints[1:]
        return float(min(left[1:].min(), right[:-1].min()))

    def subdomain(self, j: int) -> tuple[float, float]:
        return float(self.starts[j]), float(self.ends[j])

    def snapped(self, grid: TimeGrid) -> "PartitionSpec":
        """Move breakpoints and overlap ends onto the nearest nodes of ``grid``."""
        nodes = grid.nodes
        snap = lambda t: float(nodes[grid.nearest_index(t)])  # noqa: E731
        b = np.array([snap(t) for t in self.breakpoints])
        b[0], b[-1] = grid.t0, grid.t1
        starts = np.array([snap(t) for t in self.starts])
        ends = np.array([snap(t) for t in self.ends])
        return PartitionSpec(b, b[:-1] - starts, ends - b[1:])


def build_partition(T: float, m: int, overlap_fraction: float, t0: float = 0.0, grid: TimeGrid | None = None) -> PartitionSpec:
    """Uniform partition with overlaps ``overlap_fraction * (T - t0) / m`` on both sides.

    With ``grid`` the result is snapped onto its nodes; the snapped overlaps are
    available as ``tau0``/``tau1``.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    if m > 1 and not overlap_fraction > 0:
        raise ValueError("overlap_fraction must be positive")
    if overlap_fraction < 0:
        raise ValueError("overlap_fraction must be nonnegative")
    b = np.linspace(t0, T, m + 1)
    tau = overlap_fraction * (T - t0) / m
    part = PartitionSpec(b, np.full(m, tau), np.full(m, tau))
    return part.snapped(grid) if grid is not None else part


@dataclass
class SchwarzIterate:
    x: Trajectory
    u: Trajectory
    lam: Trajectory
    k: int = 0
    subdomain_flags: list = field(default_factory=list)

    @property
    def grid(self) -> TimeGrid:
        return self.x.grid

    def __iter__(self):
        return iter((self.x, self.u, self.lam))


def initial_iterate(problem: LQProblem, grid: TimeGrid) -> SchwarzIterate:
    """``x`` held at ``x0``, zero control and adjoint."""
    return SchwarzIterate(
        Trajectory.constant(grid, problem.d0),
        Trajectory.zeros(grid, problem.n_u),
        Trajectory.zeros(grid, problem.n_x),
    )


def update_boundary_params(iterate: SchwarzIterate, partition: PartitionSpec, problem: LQProblem) -> list:
    """``p_j = x(t_j^0)`` (``x0`` for the first) and ``q_j = x(t_j^1) - Q(t_j^1)^-1 lambda(t_j^1)``."""
    grid = iterate.grid
    params = []
    for j in range(partition.m):
        lo, hi = partition.subdomain(j)
        p = problem.d0.copy() if j == 0 else iterate.x.values[grid.index_of(lo)].copy()
        if j == partition.m - 1:
            q = np.zeros(problem.n_x)
        else:
            i1 = grid.index_of(hi)
            Qe = problem.Q(hi)
            if np.linalg.cond(Qe) > Q_COND_LIMIT:
                raise ValueError(f"Q({hi:g}) is singular; boundary targets are undefined")
            q = iterate.x.values[i1] - np.linalg.solve(Qe, iterate.lam.values[i1])
        params.append((p, q))
    return params


class SchwarzWorkspace:
    """Subdomain grids and sweep operators reused across outer iterations."""

    def __init__(self, problem: LQProblem, partition: PartitionSpec, grid: TimeGrid, gd: GDConfig):
        self.problem = problem
        self.partition = partition
        self.grid = grid
        self.gd = gd
        self.index_ranges = []
        self.grids = []
        for j in range(partition.m):
            lo, hi = partition.subdomain(j)
            i0, i1 = grid.index_of(lo), grid.index_of(hi)
            self.index_ranges.append((i0, i1))
            self.grids.append(grid.slice(i0, i1))
        self.sweeps = [SubdomainSweeps(problem, g, gd.integrator) for g in self.grids]
        # aggregation ranges [t_{j-1}, t_j), the last one closed at T
        self.keep = []
        for j in range(partition.m):
            a = grid.index_of(partition.breakpoints[j])
            b = grid.index_of(partition.breakpoints[j + 1])
            self.keep.append((a, b + 1 if j == partition.m - 1 else b))

    def matches(self, problem, partition, grid, gd) -> bool:
        return (
            problem is self.problem
            and partition is self.partition
            and grid == self.grid
            and gd.integrator == self.gd.integrator
        )


def _initial_control(iterate: SchwarzIterate, ws: SchwarzWorkspace, j: int, k: int, warm_start: bool, seed) -> Trajectory:
    i0, i1 = ws.index_ranges[j]
    grid = ws.grids[j]
    if warm_start and k > 0 or seed is None:
        return Trajectory(grid, iterate.u.values[i0 : i1 + 1].copy())
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(j, k)))
    return Trajectory(grid, rng.standard_normal((len(grid), ws.problem.n_u)))


def schwarz_iterate(
    problem: LQProblem,
    partition: PartitionSpec,
    iterate: SchwarzIterate,
    gd: GDConfig,
    parallel: bool = True,
    *,
    threads: int | None = None,
    warm_start: bool = True,
    seed: int | None = None,
    workspace: SchwarzWorkspace | None = None,
    boundary_params: list | None = None,
) -> SchwarzIterate:
    """One outer iteration.

    Subproblem ``j`` starts gradient descent from the previous control on its
    subdomain, or from seeded standard normal samples when ``seed`` is given
    and this is the first iteration (every iteration with ``warm_start=False``).
    ``boundary_params`` overrides the values read from ``iterate``.
    """
    grid = iterate.grid
    if workspace is None or not workspace.matches(problem, partition, grid, gd):
        workspace = SchwarzWorkspace(problem, partition, grid, gd)
    params = boundary_params if boundary_params is not None else update_boundary_params(iterate, partition, problem)
    k = iterate.k

    def solve(j):
        p, q = params[j]
        spec = SubproblemSpec(
            problem, partition.subdomain(j), p, q, is_last=(j == partition.m - 1), sweeps=workspace.sweeps[j]
        )
        u0 = _initial_control(iterate, workspace, j, k, warm_start, seed)
        return solve_subproblem(spec, u0, gd)

    if parallel and partition.m > 1:
        with ThreadPoolExecutor(max_workers=threads or partition.m) as pool:
            results = list(pool.map(solve, range(partition.m)))
    else:
        results = [solve(j) for j in range(partition.m)]

    x = np.empty_like(iterate.x.values)
    u = np.empty_like(iterate.u.values)
    lam = np.empty_like(iterate.lam.values)
    flags = []
    for j, res in enumerate(results):
        a, b = workspace.keep[j]
        off = workspace.index_ranges[j][0]
        x[a:b] = res.x.values[a - off : b - off]
        u[a:b] = res.u.values[a - off : b - off]
        lam[a:b] = res.lam.values[a - off : b - off]
        flags.append({"converged": res.converged, "iterations": res.iterations, "grad_norm": res.grad_norm})
    return SchwarzIterate(Trajectory(grid, x), Trajectory(grid, u), Trajectory(grid, lam), k + 1, flags)


def error_metric(iterate, reference) -> float:
    """``max_t |dx(t)| + |du(t)| + |dlambda(t)|`` over the nodes of the common grid."""
    total = None
    for a, b in zip(iterate, reference):
        if a.grid != b.grid:
            raise ValueError("iterate and reference live on different grids")
        e = np.linalg.norm(a.values - b.values, axis=1)
        total = e if total is None else total + e
    return float(total.max())


def restrict_solution(solution, grid: TimeGrid):
    """Subsample a solution triple onto ``grid``, whose nodes must be nodes of the solution grid."""
    out = []
    for traj in solution:
        idx = np.array([traj.grid.index_of(t) for t in grid.nodes])
        out.append(Trajectory(grid, traj.values[idx]))
    return tuple(out)


def estimate_rate(errors, floor: float = NOISE_FLOOR) -> float:
    """Mean of consecutive ratios ``e_{k+1}/e_k`` over the prefix with both errors above ``floor``."""
    e = np.asarray(errors, dtype=float)
    floor = max(floor, NOISE_FLOOR)
    above = e > floor
    n = int(np.argmin(above)) if not above.all() else e.size
    if n < 2:
        raise RateUndefinedError("fewer than two errors above the noise floor")
    return float(np.mean(e[1:n] / e[: n - 1]))


def fit_exponential(points) -> tuple[float, float]:
    """Least-squares fit of ``rate = c exp(-rho tau)`` on ``log(rate)``."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("need at least two (tau, rate) points")
    if np.any(pts[:, 1] <= 0):
        raise ValueError("rates must be positive")
    slope, intercept = np.polyfit(pts[:, 0], np.log(pts[:, 1]), 1)
    return float(np.exp(intercept)), float(-slope)


@dataclass
class ConvergenceReport:
    errors: list
    rates: list
    mean_rate: float
    theoretical_rate: float
    converged: bool
    changes: list = field(default_factory=list)
    subdomain_flags: list = field(default_factory=list)
    fit_c: float = float("nan")
    fit_rho: float = float("nan")


def run_schwarz(
    problem: LQProblem,
    partition: PartitionSpec,
    init: SchwarzIterate,
    gd: GDConfig,
    max_outer: int = 50,
    stop_tol: float = 1e-8,
    reference=None,
    *,
    parallel: bool = True,
    threads: int | None = None,
    warm_start: bool = True,
    seed: int | None = None,
    theoretical_rate: float = float("nan"),
    rate_floor: float | None = None,
    stall_window: int | None = None,
) -> tuple[SchwarzIterate, ConvergenceReport]:
    """Outer loop until the error (or, without a reference, the change between iterates) drops below ``stop_tol``.

    ``errors[0]`` is the error of ``init``.  The mean rate uses only errors
    above ``rate_floor`` (default ``100 * stop_tol``); if the run stalls
    without reaching ``stop_tol``, errors within 10x of the smallest one are
    treated as the discretization plateau and excluded as well.  With
    ``stall_window`` the loop also stops once the best error has not improved
    by 1% over that many iterations.
    """
    grid = init.grid
    if not np.allclose(init.x.values[0], problem.d0, rtol=0, atol=1e-14):
        raise ValueError("initial iterate must satisfy x(t0) = x0")
    ws = SchwarzWorkspace(problem, partition, grid, gd)
    it = init
    errors, changes, flags = [], [], []
    if reference is not None:
        errors.append(error_metric(it, reference))
    converged = bool(errors and errors[0] <= stop_tol)
    while not converged and it.k < max_outer:
        nxt = schwarz_iterate(
            problem, partition, it, gd, parallel, threads=threads, warm_start=warm_start, seed=seed, workspace=ws
        )
        changes.append(error_metric(nxt, it))
        flags.append(nxt.subdomain_flags)
        it = nxt
        if reference is not None:
            errors.append(error_metric(it, reference))
            converged = errors[-1] <= stop_tol
        else:
            converged = changes[-1] <= stop_tol
        if not np.isfinite(changes[-1]):
            log.warning("Schwarz iteration diverged at k=%d", it.k)
            break
        if stall_window and not converged:
            hist = errors if reference is not None else changes
            if len(hist) > stall_window and min(hist[-stall_window:]) > 0.99 * min(hist[:-stall_window]):
                break
    series = errors if reference is not None else changes
    rates = [b / a for a, b in zip(series[:-1], series[1:]) if a > 0]
    floor = 100.0 * stop_tol if rate_floor is None else rate_floor
    if not converged and series:
        floor = max(floor, 10.0 * min(series))
    try:
        mean = estimate_rate(series, floor)
    except RateUndefinedError:
        mean = float("nan")
    report = ConvergenceReport(errors, rates, mean, theoretical_rate, converged, changes, flags)
    return it, report
