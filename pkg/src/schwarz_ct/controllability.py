"""Controllability Gramians, uniform complete controllability and its constants."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ode_engine import IntegratorConfig, TimeGrid, Trajectory, integrate_ivp, quadrature

COND_LIMIT = 1e12

_PHI_CONFIG = IntegratorConfig("RK45Adaptive", abs_tol=1e-12, rel_tol=1e-12)


class NotControllableError(ValueError):
    pass


def _transitions_to(A, t_ref: float, times: np.ndarray) -> np.ndarray:
    """``Phi_A(t_ref, s)`` for every ``s`` in ``times`` (ascending, ``times[0] == t_ref``).

    Uses ``d/ds Phi(t_ref, s) = -Phi(t_ref, s) A(s)``.
    """
    n = np.atleast_2d(A(t_ref)).shape[0]
    if times.size == 1:
        return np.eye(n)[None]

    def rhs(s, y):
        return -(y.reshape(n, n) @ np.asarray(A(s), dtype=float)).ravel()

    traj = integrate_ivp(rhs, np.eye(n).ravel(), TimeGrid(times), _PHI_CONFIG)
    return traj.values.reshape(-1, n, n)


def default_panels(t0: float, t1: float, step: float | None = None) -> int:
    if step is None:
        return 32
    return max(32, int(np.ceil((t1 - t0) / step)))


def gramian(A, B, t0: float, t1: float, quad_panels: int = 32) -> np.ndarray:
    """Controllability Gramian ``int_{t0}^{t1} Phi(t0,s) B B^T Phi(t0,s)^T ds`` (Simpson)."""
    if not t1 > t0:
        raise ValueError("gramian requires t0 < t1")
    nodes = np.linspace(t0, t1, 2 * quad_panels + 1)
    phis = _transitions_to(A, t0, nodes)
    lookup = dict(zip(nodes.tolist(), phis))

    def integrand(s):
        pb = lookup[s] @ np.asarray(B(s), dtype=float)
        return pb @ pb.T

    W = quadrature(integrand, t0, t1, quad_panels)
    return 0.5 * (W + W.T)


@dataclass(frozen=True)
class UCCReport:
    sigma: float
    alpha0: float
    alpha1: float
    beta0: float
    beta1: float
    worst_t0: float
    passed: bool


def check_ucc(A, B, sigma: float, T: float, scan_points: int = 21, quad_panels: int = 32, t_start: float = 0.0) -> UCCReport:
    """Scan ``t0`` over ``[t_start, T - sigma]`` and bound the Gramians on windows of length ``sigma``.

    ``alpha`` bounds the eigenvalues of ``W(t0, t0+sigma)``, ``beta`` those of
    ``Phi(t1,t0) W Phi(t1,t0)^T``.
    """
    if not 0 < sigma < T - t_start:
        raise ValueError("sigma must lie in (0, T)")
    lo, hi, blo, bhi = np.inf, -np.inf, np.inf, -np.inf
    worst = t_start
    for t0 in np.linspace(t_start, T - sigma, scan_points):
        t1 = t0 + sigma
        W = gramian(A, B, t0, t1, quad_panels)
        phi = _transitions_to(A, t0, np.array([t0, t1]))
        phi_fwd = np.linalg.inv(phi[-1])  # Phi(t1, t0)
        WB = phi_fwd @ W @ phi_fwd.T
        ew = np.linalg.eigvalsh(W)
        eb = np.linalg.eigvalsh(0.5 * (WB + WB.T))
        if ew[0] < lo:
            lo, worst = ew[0], t0
        hi = max(hi, ew[-1])
        blo = min(blo, eb[0])
        bhi = max(bhi, eb[-1])
    return UCCReport(sigma, float(lo), float(hi), float(blo), float(bhi), float(worst), bool(lo > 0 and blo > 0))


def zero_steering_control(A, B, grid: TimeGrid, x0) -> Trajectory:
    """Control ``u(t) = -B^T(t) Phi^T(t0, t) W^{-1} x0`` that drives ``x0`` to zero at the grid end."""
    x0 = np.asarray(x0, dtype=float).ravel()
    t0, t1 = grid.t0, grid.t1
    n_u = np.atleast_2d(B(t0)).shape[1]
    if not np.any(x0):
        return Trajectory.zeros(grid, n_u)
    W = gramian(A, B, t0, t1, default_panels(t0, t1, float(np.min(grid.steps))))
    if np.linalg.cond(W) > COND_LIMIT:
        raise NotControllableError("Gramian is singular: the pair is not controllable on this interval")
    eta = np.linalg.solve(W, x0)
    phis = _transitions_to(A, t0, grid.nodes)
    u = np.stack([-np.asarray(B(t), dtype=float).T @ (phi.T @ eta) for t, phi in zip(grid.nodes, phis)])
    return Trajectory(grid, u)


def shifted_ucc_constants(lambda_A, lambda_B, lambda_F, sigma, alpha0, alpha1) -> dict:
    """Gramian bounds that survive the feedback shift ``A -> A + B F`` with ``|F| <= lambda_F``."""
    if lambda_A <= 0:
        raise ValueError("lambda_A must be positive for the shifted-pair bounds")
    if min(lambda_B, sigma, alpha0, alpha1) <= 0 or lambda_F < 0:
        raise ValueError("inputs must be positive")
    L = lambda_A + lambda_B * lambda_F
    a1 = lambda_B**2 * np.expm1(2 * sigma * L) / (2 * L)
    a0 = 1.0 / (2.0 / alpha0 + (lambda_F**2 / lambda_A) * (1 + alpha1 / alpha0) ** 2 * np.expm1(2 * lambda_A * sigma))
    return {
        "alpha0p": float(a0),
        "alpha1p": float(a1),
        "beta0p": float(a0 * np.exp(-2 * L * sigma)),
        "beta1p": float(a1 * np.exp(2 * L * sigma)),
    }


def dual_ucc_constants(lambda_A, lambda_B, lambda_H, gamma_R, sigma) -> dict:
    """Gramian bounds of the adjoint closed-loop pair, with ``kappa = lambda_A + lambda_B lambda_H / gamma_R``."""
    if gamma_R <= 0 or sigma <= 0:
        raise ValueError("gamma_R and sigma must be positive")
    kappa = lambda_A + lambda_B * lambda_H / gamma_R
    if kappa * sigma < 1e-8:
        a0 = a1 = sigma
    else:
        a0 = -np.expm1(-2 * kappa * sigma) / (2 * kappa)
        a1 = np.expm1(2 * kappa * sigma) / (2 * kappa)
    return {
        "alpha0t": float(a0),
        "alpha1t": float(a1),
        "beta0t": float(a0 * np.exp(-2 * kappa * sigma)),
        "beta1t": float(a1 * np.exp(2 * kappa * sigma)),
    }
