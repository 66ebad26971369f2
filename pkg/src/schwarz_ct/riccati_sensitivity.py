"""Riccati feedback, closed-loop solutions, decay constants and sensitivity experiments.

The optimal solution of an :class:`~schwarz_ct.ltv_model.LQProblem` is
``lambda = S x + v`` where ``S`` solves the backward Riccati equation

    S' = S B R^-1 B^T S - S Abar - Abar^T S - Qbar,      S(T) = Q_T,

with ``Abar = A - B R^-1 H`` and ``Qbar = Q - H^T R^-1 H``, and ``v`` solves

    v' = -Z^T v + Y^T d,      v(T) = G_T^T d_T,

with the feedback matrix ``Z = Abar - B R^-1 B^T S`` and
``Y = W R^-1 (B^T S + H) - (G + C^T S)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .controllability import UCCReport, check_ucc, dual_ucc_constants, shifted_ucc_constants
from .ltv_model import AssumptionReport, LQProblem, MatrixFunction, validate_assumptions
from .ode_engine import (
    TABLEAUS,
    AffineSweep,
    IntegrationError,
    IntegratorConfig,
    TimeGrid,
    Trajectory,
    evolution_operator,
    integrate_ivp,
)

ENVELOPE_RTOL = 1e-6
ENVELOPE_ATOL = 1e-9
PD_TOL = 1e-8


class RiccatiBreakdown(IntegrationError):
    """The Riccati solution lost positive definiteness."""


class HermiteTable:
    """Piecewise cubic Hermite interpolant of matrix samples with known derivatives."""

    def __init__(self, nodes: np.ndarray, values: np.ndarray, derivs: np.ndarray):
        self.nodes = np.asarray(nodes, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self.derivs = np.asarray(derivs, dtype=float)
        self.rows, self.cols = self.values.shape[1:] if self.values.ndim == 3 else (self.values.shape[1], 1)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
            self.derivs = self.derivs[:, :, None]

    def sample(self, times) -> np.ndarray:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        nodes = self.nodes
        i = np.clip(np.searchsorted(nodes, times, side="right") - 1, 0, nodes.size - 2)
        h = nodes[i + 1] - nodes[i]
        th = np.clip((times - nodes[i]) / h, 0.0, 1.0)
        t2, t3 = th * th, th * th * th
        w = [2 * t3 - 3 * t2 + 1, (t3 - 2 * t2 + th) * h, -2 * t3 + 3 * t2, (t3 - t2) * h]
        w = [x[:, None, None] for x in w]
        return w[0] * self.values[i] + w[1] * self.derivs[i] + w[2] * self.values[i + 1] + w[3] * self.derivs[i + 1]

    def __call__(self, t: float) -> np.ndarray:
        return self.sample([t])[0]

    def as_matrix_function(self) -> MatrixFunction:
        return MatrixFunction(self.rows, self.cols, self.sample, vectorized=True)


@dataclass
class _Coefficients:
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    H: np.ndarray
    C: np.ndarray
    W: np.ndarray
    G: np.ndarray
    d: np.ndarray
    Rinv: np.ndarray

    @classmethod
    def sample(cls, problem: LQProblem, times) -> "_Coefficients":
        times = np.atleast_1d(np.asarray(times, dtype=float))
        R = problem.R.sample(times)
        return cls(
            A=problem.A.sample(times),
            B=problem.B.sample(times),
            Q=problem.Q.sample(times),
            R=R,
            H=problem.H.sample(times),
            C=problem.C.sample(times),
            W=problem.W.sample(times),
            G=problem.G.sample(times),
            d=problem.d.sample(times)[:, :, 0],
            Rinv=np.linalg.inv(R),
        )

    def feedback(self, S: np.ndarray) -> np.ndarray:
        """``Z = A - B R^-1 (H + B^T S)``."""
        BtS_H = np.swapaxes(self.B, 1, 2) @ S + self.H
        return self.A - self.B @ self.Rinv @ BtS_H

    def y_matrix(self, S: np.ndarray) -> np.ndarray:
        """``Y = W R^-1 (B^T S + H) - (G + C^T S)``."""
        BtS_H = np.swapaxes(self.B, 1, 2) @ S + self.H
        return self.W @ self.Rinv @ BtS_H - (self.G + np.swapaxes(self.C, 1, 2) @ S)


def riccati_rhs(co: _Coefficients, S: np.ndarray) -> np.ndarray:
    """Right-hand side of the Riccati equation (batched over the leading axis)."""
    Bt = np.swapaxes(co.B, 1, 2)
    Ht = np.swapaxes(co.H, 1, 2)
    Abar = co.A - co.B @ co.Rinv @ co.H
    Qbar = co.Q - Ht @ co.Rinv @ co.H
    SB = S @ co.B
    return SB @ co.Rinv @ np.swapaxes(SB, 1, 2) - S @ Abar - np.swapaxes(Abar, 1, 2) @ S - Qbar


@dataclass
class RiccatiSolution:
    """Riccati (and optionally vector-term) solution stored on a refined table.

    ``grid`` is the grid requested by the caller; ``table`` refines it so that
    interpolated values at Runge-Kutta stage times stay fourth-order accurate.
    """

    grid: TimeGrid
    table: TimeGrid
    S_tab: np.ndarray = field(repr=False)
    dS_tab: np.ndarray = field(repr=False)
    v_tab: np.ndarray | None = field(default=None, repr=False)
    dv_tab: np.ndarray | None = field(default=None, repr=False)
    refine: int = 2

    @property
    def S(self) -> np.ndarray:
        """``S`` at the nodes of ``grid``, shape ``(N, n, n)``."""
        return self.S_tab[:: self.refine]

    @property
    def v(self) -> np.ndarray:
        if self.v_tab is None:
            raise ValueError("vector term has not been computed")
        return self.v_tab[:: self.refine]

    @property
    def S_interp(self) -> HermiteTable:
        return HermiteTable(self.table.nodes, self.S_tab, self.dS_tab)

    @property
    def v_interp(self) -> HermiteTable:
        if self.v_tab is None:
            raise ValueError("vector term has not been computed")
        return HermiteTable(self.table.nodes, self.v_tab, self.dv_tab)


def _symmetrize_flat(n):
    def project(y):
        S = y.reshape(n, n)
        return (0.5 * (S + S.T)).ravel()

    return project


@njit(cache=True, nogil=True)
def _riccati_kernel(S_end, Abar, Qbar, BRB, h, a, b, out):
    # Abar, Qbar, BRB: (steps, stages, n, n) sampled at stage times; h: signed step per row
    steps, stages = Abar.shape[0], Abar.shape[1]
    n = S_end.shape[0]
    out[0] = S_end
    S = S_end.copy()
    K = np.zeros((stages, n, n))
    for i in range(steps):
        for j in range(stages):
            Y = S.copy()
            for l in range(j):
                if a[j, l] != 0.0:
                    Y += h[i] * a[j, l] * K[l]
            SB = Y @ BRB[i, j]
            SA = Y @ Abar[i, j]
            K[j] = SB @ Y - SA - SA.T - Qbar[i, j]
        for j in range(stages):
            if b[j] != 0.0:
                S += h[i] * b[j] * K[j]
        S = 0.5 * (S + S.T)
        out[i + 1] = S


def _riccati_fixed(problem: LQProblem, table: TimeGrid, config: IntegratorConfig) -> np.ndarray:
    tab = TABLEAUS[config.method]
    nodes = table.nodes[::-1]
    t_from, span = nodes[:-1], np.diff(nodes)
    sub = 1 if config.step is None else max(1, int(np.ceil(np.max(np.abs(span)) / config.step - 1e-9)))
    h = np.repeat(span / sub, sub)
    starts = (t_from[:, None] + span[:, None] * np.arange(sub)[None, :] / sub).ravel()
    times = starts[:, None] + h[:, None] * tab.c[None, :]
    co = _Coefficients.sample(problem, times.ravel())
    Bt = np.swapaxes(co.B, 1, 2)
    Abar = co.A - co.B @ co.Rinv @ co.H
    Qbar = co.Q - np.swapaxes(co.H, 1, 2) @ co.Rinv @ co.H
    BRB = co.B @ co.Rinv @ Bt
    shape = times.shape + Abar.shape[1:]
    out = np.empty((h.size + 1,) + Abar.shape[1:])
    _riccati_kernel(
        np.ascontiguousarray(problem.Q_T), np.ascontiguousarray(Abar.reshape(shape)),
        np.ascontiguousarray(Qbar.reshape(shape)), np.ascontiguousarray(BRB.reshape(shape)),
        h, tab.a, tab.b, out,
    )
    return out[::sub][::-1]


def solve_riccati(problem: LQProblem, grid: TimeGrid, config: IntegratorConfig | None = None, refine: int = 2) -> RiccatiSolution:
    """Integrate the Riccati equation backward from ``S(T) = Q_T``.

    Uses an explicit method (RK4 by default) with re-symmetrization after every
    step.  Raises :class:`RiccatiBreakdown` if ``S`` loses positive definiteness.
    """
    if config is None:
        config = IntegratorConfig("RK4")
    if config.method == "BackwardEuler":
        raise ValueError("the Riccati equation is not affine; use an explicit method")
    if abs(grid.t0 - problem.t0) > 1e-12 or abs(grid.t1 - problem.T) > 1e-12:
        raise ValueError("grid must span the problem horizon")
    n = problem.n_x
    table = grid.refined(refine)
    with np.errstate(over="ignore", invalid="ignore"):
        if config.adaptive:

            def rhs(t, y):
                co = _Coefficients.sample(problem, [t])
                return riccati_rhs(co, y.reshape(1, n, n))[0].ravel()

            traj = integrate_ivp(rhs, problem.Q_T.ravel(), table, config, direction="backward", project=_symmetrize_flat(n))
            S = traj.values.reshape(-1, n, n)
        else:
            S = _riccati_fixed(problem, table, config)
    S = 0.5 * (S + np.swapaxes(S, 1, 2))
    if not np.all(np.isfinite(S)):
        raise RiccatiBreakdown("Riccati solution diverged; reduce the step")
    eigs = np.linalg.eigvalsh(S)
    bad = np.nonzero(eigs[:, 0] < -PD_TOL * max(1.0, float(np.abs(eigs).max())))[0]
    if bad.size:
        t_bad = table.nodes[bad[-1]]
        raise RiccatiBreakdown(
            f"Riccati solution lost positive definiteness at t={t_bad:g} (min eigenvalue {eigs[bad[-1], 0]:.3e})"
        )
    co = _Coefficients.sample(problem, table.nodes)
    return RiccatiSolution(grid, table, S, riccati_rhs(co, S), refine=refine)


def solve_vector_term(problem: LQProblem, riccati: RiccatiSolution, config: IntegratorConfig | None = None) -> RiccatiSolution:
    """Integrate the vector equation backward from ``v(T) = G_T^T d_T`` and attach it to ``riccati``."""
    if config is None:
        config = IntegratorConfig("RK4")
    table = riccati.table
    S_fn = riccati.S_interp
    n = problem.n_x

    def minus_zt(times):
        co = _Coefficients.sample(problem, times)
        return -np.swapaxes(co.feedback(S_fn.sample(times)), 1, 2)

    def forcing(times):
        co = _Coefficients.sample(problem, times)
        Y = co.y_matrix(S_fn.sample(times))
        return np.einsum("nji,nj->ni", Y, co.d)[:, :, None]

    sweep = AffineSweep(
        MatrixFunction(n, n, minus_zt, vectorized=True),
        MatrixFunction(n, 1, forcing, vectorized=True),
        table,
        config,
        direction="backward",
    )
    v = sweep.run(problem.terminal_linear, np.ones((len(table), 1)))
    co = _Coefficients.sample(problem, table.nodes)
    Z = co.feedback(riccati.S_tab)
    Y = co.y_matrix(riccati.S_tab)
    dv = -np.einsum("nji,nj->ni", Z, v) + np.einsum("nji,nj->ni", Y, co.d)
    riccati.v_tab = v
    riccati.dv_tab = dv
    return riccati


def closed_loop_solution(problem: LQProblem, riccati: RiccatiSolution, grid: TimeGrid | None = None, config: IntegratorConfig | None = None):
    """Optimal ``(x, u, lambda)`` from the feedback form.

    Integrates ``x' = Z x - B R^-1 B^T v + (C - B R^-1 W^T) d`` forward from
    ``x(t0) = d0`` and sets ``lambda = S x + v``,
    ``u = -R^-1 (H x + B^T lambda + W^T d)``.
    """
    if config is None:
        config = IntegratorConfig("RK4")
    if grid is None:
        grid = riccati.grid
    if riccati.v_tab is None:
        solve_vector_term(problem, riccati, config)
    S_fn, v_fn = riccati.S_interp, riccati.v_interp
    n = problem.n_x

    def z_of(times):
        co = _Coefficients.sample(problem, times)
        return co.feedback(S_fn.sample(times))

    def forcing(times):
        co = _Coefficients.sample(problem, times)
        v = v_fn.sample(times)[:, :, 0]
        BRinv = co.B @ co.Rinv
        out = -np.einsum("nij,nkj,nk->ni", BRinv, co.B, v)
        out += np.einsum("nij,nj->ni", co.C - BRinv @ np.swapaxes(co.W, 1, 2), co.d)
        return out[:, :, None]

    sweep = AffineSweep(
        MatrixFunction(n, n, z_of, vectorized=True),
        MatrixFunction(n, 1, forcing, vectorized=True),
        grid,
        config,
    )
    x = sweep.run(problem.d0, np.ones((len(grid), 1)))
    return _recover(problem, grid, x, S_fn.sample(grid.nodes), v_fn.sample(grid.nodes)[:, :, 0])


def _recover(problem, grid, x, S, v, d_weight=1.0):
    co = _Coefficients.sample(problem, grid.nodes)
    lam = np.einsum("nij,nj->ni", S, x) + v
    rhs = (
        np.einsum("nij,nj->ni", co.H, x)
        + np.einsum("nji,nj->ni", co.B, lam)
        + d_weight * np.einsum("nji,nj->ni", co.W, co.d)
    )
    u = -np.einsum("nij,nj->ni", co.Rinv, rhs)
    return Trajectory(grid, x), Trajectory(grid, u), Trajectory(grid, lam)


# ---------------------------------------------------------------------------
# Theoretical constants


@dataclass(frozen=True)
class ConstantsBundle:
    lambda_A: float
    lambda_B: float
    lambda_C: float
    lambda_Q: float
    lambda_H: float
    lambda_R: float
    lambda_W: float
    lambda_G: float
    gamma_R: float
    gamma_Q: float
    sigma: float
    alpha0: float
    alpha1: float
    alpha0p: float
    alpha1p: float
    alpha0t: float
    alpha1t: float
    c0: float
    c1: float
    c_Z: float
    rho_Z: float
    c_v: float
    Lambda_x: float
    Lambda_lam: float
    Lambda_u: float
    Lambda: float
    Lambda_xb: float
    Lambda_lamb: float
    Lambda_ub: float
    Lambda_b: float
    c_sigma: float
    schwarz: bool = False

    def schwarz_rate_bound(self, tau: float) -> float:
        """Contraction factor ``3 c(sigma) exp(-rho_Z tau)`` for overlap ``tau`` (seconds)."""
        return 3.0 * self.c_sigma * float(np.exp(-self.rho_Z * tau))

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def theoretical_constants(report: AssumptionReport, ucc: UCCReport, sigma: float, schwarz: bool = False) -> ConstantsBundle:
    """Evaluate the chain of decay constants from problem bounds and controllability constants.

    With ``schwarz=True`` the bounds are those of a Schwarz subproblem:
    ``lambda_G`` is replaced by ``lambda_Q`` and ``lambda_C = lambda_W = 0``.
    """
    if not report.passed:
        raise ValueError("problem does not satisfy the standing assumptions: " + "; ".join(report.notes))
    if not ucc.passed:
        raise ValueError("the pair (A, B) is not uniformly completely controllable for this sigma")
    lA, lB, lH = report.lambda_A, report.lambda_B, report.lambda_H
    lQ, lR = report.lambda_Q, report.lambda_R
    lC, lW, lG = report.lambda_C, report.lambda_W, report.lambda_G
    if schwarz:
        lG, lC, lW = lQ, 0.0, 0.0
    gR, gQ = report.gamma_R, report.gamma_Q
    if lA <= 0:
        raise ValueError("lambda_A must be positive")

    sh = shifted_ucc_constants(lA, lB, lH / gR, sigma, ucc.alpha0, ucc.alpha1)
    du = dual_ucc_constants(lA, lB, lH, gR, sigma)
    a0p, a1p = sh["alpha0p"], sh["alpha1p"]
    a0t, a1t = du["alpha0t"], du["alpha1t"]
    kappa = lA + lB * lH / gR

    c0 = min(
        2 * kappa / (lB**2 / gR * (1 + a1t / a0t) ** 2 + 1 / (gQ * a0t**2)),
        1 / (lB**2 / (2 * gR * kappa) + 1 / gQ),
    ) * np.exp(-2 * kappa * sigma)
    qh = lQ + lH**2 / gR
    c1 = max(
        (qh * (1 + a1p / a0p) ** 2 + lR * lB**2 / a0p**2) / (2 * kappa),
        qh * (1 + 1 / (2 * kappa)),
    ) * np.exp(2 * kappa * sigma)
    c_Z = np.sqrt(c1 / c0)
    rho_Z = gQ / (2 * c1)

    c_v = c_Z * ((lW * lB / gR + lC) * c1 + lW * lH / gR + lG)
    Lx = c_Z * (c_v * lB**2 / (2 * rho_Z * gR) + lW * lB / gR + lC)
    Llam = c1 * Lx + c_v
    Lu = (Lx * lH + Llam * lB) / gR
    Lxb = max(c_Z, c_Z**2 * lB**2 * lG / (2 * rho_Z * gR))
    Llamb = Lxb * (c1 + lG)
    Lub = (Lxb * lH + Llamb * lB) / gR
    Lb = Lxb + Llamb + Lub
    return ConstantsBundle(
        lambda_A=lA, lambda_B=lB, lambda_C=lC, lambda_Q=lQ, lambda_H=lH, lambda_R=lR, lambda_W=lW, lambda_G=lG,
        gamma_R=gR, gamma_Q=gQ, sigma=sigma, alpha0=ucc.alpha0, alpha1=ucc.alpha1,
        alpha0p=a0p, alpha1p=a1p, alpha0t=a0t, alpha1t=a1t,
        c0=float(c0), c1=float(c1), c_Z=float(c_Z), rho_Z=float(rho_Z), c_v=float(c_v),
        Lambda_x=float(Lx), Lambda_lam=float(Llam), Lambda_u=float(Lu), Lambda=float(Lx + Lu + Llam),
        Lambda_xb=float(Lxb), Lambda_lamb=float(Llamb), Lambda_ub=float(Lub), Lambda_b=float(Lb),
        c_sigma=float(Lb * (1 + 1 / gQ)), schwarz=schwarz,
    )


def problem_constants(problem: LQProblem, sigma: float, schwarz: bool = False, samples: int = 1000, scan_points: int = 21) -> ConstantsBundle:
    """Validate ``problem``, certify controllability with window ``sigma`` and evaluate the constants."""
    report = validate_assumptions(problem, samples)
    ucc = check_ucc(problem.A, problem.B, sigma, problem.T, scan_points=scan_points, t_start=problem.t0)
    return theoretical_constants(report, ucc, sigma, schwarz=schwarz)


def _within(measured, bound):
    return measured <= bound * (1 + ENVELOPE_RTOL) + ENVELOPE_ATOL


@dataclass
class DecayReport:
    pairs: list
    norms: np.ndarray
    bounds: np.ndarray
    passed: bool
    worst_margin: float


def evolution_decay_check(problem: LQProblem, riccati: RiccatiSolution, pairs, constants: ConstantsBundle) -> DecayReport:
    """Compare ``||Phi_Z(t1, t0)||`` with ``c_Z exp(-rho_Z (t1 - t0))`` for each pair."""
    S_fn = riccati.S_interp

    def Z(t):
        co = _Coefficients.sample(problem, [t])
        return co.feedback(S_fn.sample([t]))[0]

    norms, bounds = [], []
    for t0, t1 in pairs:
        if t1 < t0:
            raise ValueError("pairs must satisfy t0 <= t1")
        phi = evolution_operator(Z, t0, t1)
        norms.append(np.linalg.norm(phi, 2))
        bounds.append(constants.c_Z * np.exp(-constants.rho_Z * (t1 - t0)))
    norms, bounds = np.array(norms), np.array(bounds)
    ok = _within(norms, bounds)
    return DecayReport(list(pairs), norms, bounds, bool(np.all(ok)), float(np.min(bounds - norms)) if norms.size else 0.0)


# ---------------------------------------------------------------------------
# Sensitivity experiments


@dataclass
class PerturbationResponse:
    dx: Trajectory
    du: Trajectory
    dlam: Trajectory
    magnitude: np.ndarray
    envelope: np.ndarray | None
    mask: np.ndarray
    passed: bool | None
    worst_ratio: float
    slopes: tuple

    @property
    def grid(self) -> TimeGrid:
        return self.dx.grid


def _log_slope(distance, values):
    keep = values > 1e-14 * max(values.max(), 1e-300)
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(distance[keep], np.log(values[keep]), 1)[0])


def _envelope_result(dx, du, dlam, envelope, mask, slopes):
    mag = np.linalg.norm(dx.values, axis=1) + np.linalg.norm(du.values, axis=1) + np.linalg.norm(dlam.values, axis=1)
    if envelope is None:
        return PerturbationResponse(dx, du, dlam, mag, None, mask, None, float("nan"), slopes)
    ok = _within(mag[mask], envelope[mask])
    ratio = mag[mask] / np.maximum(envelope[mask], 1e-300)
    return PerturbationResponse(dx, du, dlam, mag, envelope, mask, bool(np.all(ok)), float(ratio.max()), slopes)


def boundary_perturbation_response(
    problem: LQProblem,
    l0,
    lT,
    grid: TimeGrid,
    config: IntegratorConfig | None = None,
    constants: ConstantsBundle | None = None,
    riccati: RiccatiSolution | None = None,
) -> PerturbationResponse:
    """Response of the optimal solution to ``d0 -> d0 + l0`` and ``dT -> dT + lT``.

    The envelope ``Lambda_b (|l0| e^{-rho_Z t} + |lT| e^{-rho_Z (T - t)})`` is
    checked when ``constants`` is given.  ``slopes`` holds the fitted log-decay
    rates of the response magnitude away from the initial and terminal ends.
    """
    l0 = np.asarray(l0, dtype=float).ravel()
    lT = np.asarray(lT, dtype=float).ravel()
    if riccati is None:
        riccati = solve_riccati(problem, grid, config)
    base = solve_vector_term(problem, RiccatiSolution(grid, riccati.table, riccati.S_tab, riccati.dS_tab, refine=riccati.refine), config)
    pert_problem = problem.with_(d0=problem.d0 + l0, dT=problem.dT + lT)
    pert = solve_vector_term(pert_problem, RiccatiSolution(grid, riccati.table, riccati.S_tab, riccati.dS_tab, refine=riccati.refine), config)
    x0, u0, lam0 = closed_loop_solution(problem, base, grid, config)
    x1, u1, lam1 = closed_loop_solution(pert_problem, pert, grid, config)
    dx = Trajectory(grid, x1.values - x0.values)
    du = Trajectory(grid, u1.values - u0.values)
    dlam = Trajectory(grid, lam1.values - lam0.values)
    t = grid.nodes - problem.t0
    span = problem.T - problem.t0
    envelope = None
    if constants is not None:
        envelope = constants.Lambda_b * (
            np.linalg.norm(l0) * np.exp(-constants.rho_Z * t) + np.linalg.norm(lT) * np.exp(-constants.rho_Z * (span - t))
        )
    mag = np.linalg.norm(dx.values, axis=1) + np.linalg.norm(du.values, axis=1) + np.linalg.norm(dlam.values, axis=1)
    half = t <= 0.5 * span
    slopes = (
        _log_slope(t[half], mag[half]) if np.any(l0) else float("nan"),
        _log_slope(span - t[~half], mag[~half]) if np.any(lT) else float("nan"),
    )
    return _envelope_result(dx, du, dlam, envelope, np.ones(len(grid), dtype=bool), slopes)


def point_perturbation_response(
    problem: LQProblem,
    t_prime: float,
    l,
    grid: TimeGrid,
    config: IntegratorConfig | None = None,
    constants: ConstantsBundle | None = None,
    riccati: RiccatiSolution | None = None,
) -> PerturbationResponse:
    """Exact response to a Dirac perturbation ``d -> d + l delta(t - t')``.

    Uses the evolution-operator representation: ``dv(t) = -Phi_Z^T(t', t) Y^T(t') l``
    for ``t <= t'``, the state driven by ``-B R^-1 B^T dv`` plus a jump
    ``(C - B R^-1 W^T)(t') l`` at ``t'``.  Node values at ``t'`` are left limits
    and are excluded from the envelope check.
    """
    if not problem.t0 < t_prime < problem.T:
        raise ValueError(f"t_prime must lie strictly inside ({problem.t0}, {problem.T})")
    if config is None:
        config = IntegratorConfig("RK4")
    l = np.asarray(l, dtype=float).ravel()
    k = grid.index_of(t_prime)
    if riccati is None:
        riccati = solve_riccati(problem, grid, config)
    S_fn = riccati.S_interp
    n = problem.n_x
    N = len(grid)

    def z_of(times):
        co = _Coefficients.sample(problem, times)
        return co.feedback(S_fn.sample(times))

    def minus_zt(times):
        return -np.swapaxes(z_of(times), 1, 2)

    co_p = _Coefficients.sample(problem, [t_prime])
    S_p = S_fn.sample([t_prime])
    Y_p = co_p.y_matrix(S_p)[0]
    jump = (co_p.C[0] - co_p.B[0] @ co_p.Rinv[0] @ co_p.W[0].T) @ l

    dv = np.zeros((N, n))
    dx = np.zeros((N, n))
    zero_forcing = MatrixFunction.zeros(n, 1)
    if k > 0:
        left = grid.slice(0, k)
        dv[: k + 1] = AffineSweep(
            MatrixFunction(n, n, minus_zt, vectorized=True), zero_forcing, left, config, direction="backward"
        ).run(-Y_p.T @ l, np.zeros((k + 1, 1)))
        dv_der = -np.einsum("nji,nj->ni", z_of(left.nodes), dv[: k + 1])
        dv_fn = HermiteTable(left.nodes, dv[: k + 1], dv_der)

        def forcing(times):
            co = _Coefficients.sample(problem, times)
            vals = dv_fn.sample(times)[:, :, 0]
            return -np.einsum("nij,njk,nlk,nl->ni", co.B, co.Rinv, co.B, vals)[:, :, None]

        dx[: k + 1] = AffineSweep(
            MatrixFunction(n, n, z_of, vectorized=True), MatrixFunction(n, 1, forcing, vectorized=True), left, config
        ).run(np.zeros(n), np.ones((k + 1, 1)))
    x_right_start = dx[k] + jump
    if k < N - 1:
        right = grid.slice(k, N - 1)
        xr = AffineSweep(MatrixFunction(n, n, z_of, vectorized=True), zero_forcing, right, config).run(
            x_right_start, np.zeros((N - k, 1))
        )
        dx[k + 1 :] = xr[1:]
    S_nodes = S_fn.sample(grid.nodes)
    co = _Coefficients.sample(problem, grid.nodes)
    dlam = np.einsum("nij,nj->ni", S_nodes, dx) + dv
    du = -np.einsum("nij,nj->ni", co.Rinv, np.einsum("nij,nj->ni", co.H, dx) + np.einsum("nji,nj->ni", co.B, dlam))

    envelope = None
    dist = np.abs(grid.nodes - t_prime)
    if constants is not None:
        envelope = constants.Lambda * np.linalg.norm(l) * np.exp(-constants.rho_Z * dist)
    mask = np.ones(N, dtype=bool)
    mask[k] = False
    mag = np.linalg.norm(dx, axis=1) + np.linalg.norm(du, axis=1) + np.linalg.norm(dlam, axis=1)
    lo = np.arange(N) < k
    hi = np.arange(N) > k
    slopes = (_log_slope(dist[lo], mag[lo]), _log_slope(dist[hi], mag[hi]))
    return _envelope_result(Trajectory(grid, dx), Trajectory(grid, du), Trajectory(grid, dlam), envelope, mask, slopes)
