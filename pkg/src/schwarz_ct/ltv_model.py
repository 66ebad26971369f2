"""Time-varying linear-quadratic problem data.

A problem couples a state ``x`` (``n_x``), a control ``u`` (``n_u``) and an
exogenous parameter trajectory ``d`` (``n_d``)::

    minimize   1/2 int [x; u; d]^T [[Q, H^T, G^T], [H, R, W^T], [G, W, 0]] [x; u; d] dt
               + 1/2 x(T)^T Q_T x(T) + x(T)^T G_T^T d_T
    subject to x' = A x + B u + C d,   x(t0) = d0.

The terminal parameter ``d_T`` may have its own dimension; ``G_T`` has shape
``(len(d_T), n_x)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

SYMMETRY_TOL = 1e-10
POSITIVITY_TOL = 1e-12


class ValidationError(ValueError):
    pass


class MatrixFunction:
    """Matrix-valued function of time with a declared shape.

    Parameters
    ----------
    rows, cols : int
    fn : callable
        ``fn(t) -> (rows, cols)`` array.  Must be re-entrant.
    vectorized : bool
        If true, ``fn`` also accepts a 1-D array of times and returns
        ``(len(t), rows, cols)``.
    """

    def __init__(self, rows: int, cols: int, fn, vectorized: bool = False):
        if rows < 1 or cols < 1:
            raise ValueError("matrix dimensions must be positive")
        self.rows = rows
        self.cols = cols
        self._fn = fn
        self._vectorized = vectorized
        self._constant = None

    @classmethod
    def constant(cls, value) -> "MatrixFunction":
        value = np.atleast_2d(np.asarray(value, dtype=float)).copy()
        value.setflags(write=False)
        mf = cls(value.shape[0], value.shape[1], lambda t: value)
        mf._constant = value
        return mf

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "MatrixFunction":
        return cls.constant(np.zeros((rows, cols)))

    @property
    def is_constant(self) -> bool:
        return self._constant is not None

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    def __call__(self, t: float) -> np.ndarray:
        if self._constant is not None:
            return self._constant
        out = np.asarray(self._fn(float(t)), dtype=float).reshape(self.rows, self.cols)
        return out

    def sample(self, times) -> np.ndarray:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        if self._constant is not None:
            return np.broadcast_to(self._constant, (times.size, self.rows, self.cols)).copy()
        if self._vectorized:
            return np.asarray(self._fn(times), dtype=float).reshape(times.size, self.rows, self.cols)
        return np.stack([self(t) for t in times])

    @property
    def T(self) -> "MatrixFunction":
        """Pointwise transpose."""
        if self._constant is not None:
            return MatrixFunction.constant(self._constant.T)
        return MatrixFunction(self.cols, self.rows, lambda t: self(t).T)

    def __neg__(self) -> "MatrixFunction":
        if self._constant is not None:
            return MatrixFunction.constant(-self._constant)
        return MatrixFunction(self.rows, self.cols, lambda t: -self(t))


def hstack(*fns: MatrixFunction) -> MatrixFunction:
    """Horizontal concatenation of matrix functions sharing a row count."""
    rows = fns[0].rows
    if any(f.rows != rows for f in fns):
        raise ValueError("row counts differ")
    if all(f.is_constant for f in fns):
        return MatrixFunction.constant(np.hstack([f(0.0) for f in fns]))
    cols = sum(f.cols for f in fns)
    mf = MatrixFunction(rows, cols, lambda t: np.hstack([f(t) for f in fns]))
    mf.sample = lambda times: np.concatenate([f.sample(times) for f in fns], axis=2)
    return mf


def _as_mf(value, shape, name) -> MatrixFunction:
    if isinstance(value, MatrixFunction):
        mf = value
    elif callable(value):
        mf = MatrixFunction(shape[0], shape[1], value)
    else:
        mf = MatrixFunction.constant(np.asarray(value, dtype=float).reshape(shape))
    if mf.shape != shape:
        raise ValidationError(f"{name} has shape {mf.shape}, expected {shape}")
    return mf


@dataclass(frozen=True, eq=False)
class LQProblem:
    """Parameterized time-varying LQ problem on ``[t0, T]``.

    Matrix entries may be given as arrays (constant), callables of time, or
    :class:`MatrixFunction` instances; missing coupling terms default to zero.
    """

    T: float
    A: MatrixFunction
    B: MatrixFunction
    Q: MatrixFunction
    R: MatrixFunction
    Q_T: np.ndarray
    d0: np.ndarray
    H: MatrixFunction | None = None
    C: MatrixFunction | None = None
    W: MatrixFunction | None = None
    G: MatrixFunction | None = None
    d: MatrixFunction | None = None
    G_T: np.ndarray | None = None
    dT: np.ndarray | None = None
    t0: float = 0.0
    n_d: int = 1
    name: str = field(default="", compare=False)

    def __post_init__(self):
        if not self.T > self.t0:
            raise ValidationError(f"horizon end {self.T} must exceed start {self.t0}")
        a = self.A if isinstance(self.A, MatrixFunction) else None
        n_x = a.rows if a is not None else np.atleast_2d(self.A(self.t0) if callable(self.A) else self.A).shape[0]
        b = self.B if isinstance(self.B, MatrixFunction) else None
        n_u = b.cols if b is not None else np.atleast_2d(self.B(self.t0) if callable(self.B) else self.B).shape[1]
        n_d = self.n_d
        s = object.__setattr__
        s(self, "A", _as_mf(self.A, (n_x, n_x), "A"))
        s(self, "B", _as_mf(self.B, (n_x, n_u), "B"))
        s(self, "Q", _as_mf(self.Q, (n_x, n_x), "Q"))
        s(self, "R", _as_mf(self.R, (n_u, n_u), "R"))
        s(self, "H", _as_mf(np.zeros((n_u, n_x)) if self.H is None else self.H, (n_u, n_x), "H"))
        s(self, "C", _as_mf(np.zeros((n_x, n_d)) if self.C is None else self.C, (n_x, n_d), "C"))
        s(self, "W", _as_mf(np.zeros((n_d, n_u)) if self.W is None else self.W, (n_d, n_u), "W"))
        s(self, "G", _as_mf(np.zeros((n_d, n_x)) if self.G is None else self.G, (n_d, n_x), "G"))
        s(self, "d", _as_mf(np.zeros((n_d, 1)) if self.d is None else self.d, (n_d, 1), "d"))
        q_t = np.atleast_2d(np.asarray(self.Q_T, dtype=float))
        if q_t.shape != (n_x, n_x):
            raise ValidationError(f"Q_T has shape {q_t.shape}, expected {(n_x, n_x)}")
        s(self, "Q_T", q_t)
        d0 = np.atleast_1d(np.asarray(self.d0, dtype=float)).ravel()
        if d0.shape != (n_x,):
            raise ValidationError(f"d0 has shape {d0.shape}, expected {(n_x,)}")
        s(self, "d0", d0)
        if self.G_T is None:
            s(self, "G_T", np.zeros((1, n_x)))
            s(self, "dT", np.zeros(1))
        else:
            g_t = np.atleast_2d(np.asarray(self.G_T, dtype=float))
            if g_t.shape[1] != n_x:
                raise ValidationError(f"G_T must have {n_x} columns, got shape {g_t.shape}")
            d_t = np.zeros(g_t.shape[0]) if self.dT is None else np.atleast_1d(np.asarray(self.dT, dtype=float)).ravel()
            if d_t.shape != (g_t.shape[0],):
                raise ValidationError(f"dT has shape {d_t.shape}, expected {(g_t.shape[0],)}")
            s(self, "G_T", g_t)
            s(self, "dT", d_t)

    @property
    def n_x(self) -> int:
        return self.A.rows

    @property
    def n_u(self) -> int:
        return self.B.cols

    @property
    def terminal_linear(self) -> np.ndarray:
        """Gradient of the linear terminal term, ``G_T^T d_T``."""
        return self.G_T.T @ self.dT

    def with_(self, **changes) -> "LQProblem":
        return replace(self, **changes)


@dataclass(frozen=True)
class AssumptionReport:
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
    qT_min: float
    qT_max: float
    min_eig_Q: float
    passed: bool
    notes: tuple[str, ...] = ()

    @property
    def pass_(self) -> bool:
        return self.passed


def _check_symmetric(mats: np.ndarray, times: np.ndarray, name: str):
    for M, t in zip(mats, times):
        norm = np.linalg.norm(M)
        if np.linalg.norm(M - M.T) > SYMMETRY_TOL * max(norm, 1.0):
            raise ValidationError(f"{name}(t) is not symmetric at t={t:g}")


def validate_assumptions(problem: LQProblem, samples: int = 1000) -> AssumptionReport:
    """Sample the problem data and report the bounds used by the decay theory.

    ``lambda_*`` are suprema of spectral norms, ``gamma_R`` the smallest
    eigenvalue of ``R`` and ``gamma_Q`` that of ``Q - H^T R^{-1} H``.
    """
    if samples < 2:
        raise ValueError("samples must be at least 2")
    ts = np.linspace(problem.t0, problem.T, samples)
    Q = problem.Q.sample(ts)
    R = problem.R.sample(ts)
    H = problem.H.sample(ts)
    _check_symmetric(Q, ts, "Q")
    _check_symmetric(R, ts, "R")
    _check_symmetric(problem.Q_T[None], ts[-1:], "Q_T")

    def sup_norm(mf):
        return float(np.max(np.linalg.norm(mf.sample(ts), ord=2, axis=(1, 2))))

    r_eigs = np.linalg.eigvalsh(0.5 * (R + R.transpose(0, 2, 1)))
    gamma_R = float(r_eigs.min())
    notes = []
    if gamma_R > POSITIVITY_TOL:
        schur = Q - np.einsum("nji,njk,nkl->nil", H, np.linalg.inv(R), H)
        gamma_Q = float(np.linalg.eigvalsh(0.5 * (schur + schur.transpose(0, 2, 1))).min())
    else:
        gamma_Q = float("nan")
        notes.append("R is not positive definite")
    min_eig_Q = float(np.linalg.eigvalsh(0.5 * (Q + Q.transpose(0, 2, 1))).min())
    qT = np.linalg.eigvalsh(0.5 * (problem.Q_T + problem.Q_T.T))
    lambdas = dict(
        lambda_A=sup_norm(problem.A),
        lambda_B=sup_norm(problem.B),
        lambda_C=sup_norm(problem.C),
        lambda_Q=max(sup_norm(problem.Q), float(np.abs(qT).max())),
        lambda_H=sup_norm(problem.H),
        lambda_R=sup_norm(problem.R),
        lambda_W=sup_norm(problem.W),
        lambda_G=sup_norm(problem.G),
    )
    ok = gamma_R > POSITIVITY_TOL and gamma_Q > POSITIVITY_TOL
    if ok and qT.min() < gamma_Q - POSITIVITY_TOL:
        notes.append("Q_T is below the running-cost lower bound gamma_Q")
        ok = False
    if not all(np.isfinite(v) for v in lambdas.values()):
        notes.append("unbounded problem data")
        ok = False
    if gamma_Q <= POSITIVITY_TOL:
        notes.append("Q - H^T R^-1 H is not positive definite")
    return AssumptionReport(
        **lambdas,
        gamma_R=gamma_R,
        gamma_Q=gamma_Q,
        qT_min=float(qT.min()),
        qT_max=float(qT.max()),
        min_eig_Q=min_eig_Q,
        passed=bool(ok),
        notes=tuple(notes),
    )


def truncate_to_subproblem(problem: LQProblem, t0: float, t1: float, p, q, is_last: bool) -> LQProblem:
    """Subproblem on ``[t0, t1]`` with initial state ``p``.

    The last subproblem keeps the original terminal cost.  Interior ones get
    ``1/2 x^T Q(t1) x - x^T Q(t1) q``, i.e. ``Q_T = Q(t1)``, ``G_T = -Q(t1)``,
    ``dT = q``.
    """
    if not t1 > t0:
        raise ValueError(f"subproblem interval must satisfy t0 < t1, got [{t0}, {t1}]")
    if t0 < problem.t0 - 1e-12 or t1 > problem.T + 1e-12:
        raise ValueError(f"[{t0}, {t1}] is outside the horizon [{problem.t0}, {problem.T}]")
    p = np.asarray(p, dtype=float).ravel()
    if is_last:
        return replace(problem, t0=float(t0), T=float(t1), d0=p)
    q_end = problem.Q(t1)
    return replace(
        problem,
        t0=float(t0),
        T=float(t1),
        d0=p,
        Q_T=q_end.copy(),
        G_T=-q_end,
        dT=np.asarray(q, dtype=float).ravel(),
    )


def schorlepp_linearized(
    xi: float = 4.0,
    T: float = 5.0,
    theta: float = 3.0,
    alpha: float = 100.0,
    n_diag=(1.0, 0.25),
    x0=(0.0, 0.0),
) -> LQProblem:
    """Two-state benchmark: stable diagonal drift, soft terminal target ``x1 + 2 x2 = theta``.

    The penalty ``alpha/2 (c^T x(T) - theta)^2`` with ``c = (1, 2)`` becomes
    ``Q_T = alpha c c^T`` and the linear term ``G_T = c^T``, ``dT = -alpha theta``;
    the constant is dropped.
    """
    if xi <= 0:
        raise ValueError("xi must be positive")
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    c = np.array([1.0, 2.0])
    return LQProblem(
        T=T,
        A=np.diag([-1.0, -xi]),
        B=np.diag(np.asarray(n_diag, dtype=float)),
        Q=np.eye(2),
        R=np.eye(2),
        Q_T=alpha * np.outer(c, c),
        d0=np.asarray(x0, dtype=float),
        G_T=c[None, :],
        dT=np.array([-alpha * theta]),
        name="schorlepp_linearized",
    )


def decay_test_problem(T: float = 10.0, coupled: bool = False) -> LQProblem:
    """Two-state problem meeting every standing assumption with margin.

    ``Q = 2I, R = I, H = 0.1 * ones, A = -I, B = I, Q_T = 2I``; the terminal
    weight sits between ``gamma_Q`` and ``lambda_Q``.  With
    ``coupled=True`` a scalar parameter enters the dynamics (``C``) and the
    running cost (``G``, ``W``) so that interior perturbations propagate.
    """
    kwargs = {}
    if coupled:
        kwargs = dict(C=np.array([[1.0], [0.5]]), G=np.array([[0.3, -0.2]]), W=np.array([[0.2, 0.1]]), n_d=1)
    return LQProblem(
        T=T,
        A=-np.eye(2),
        B=np.eye(2),
        Q=2.0 * np.eye(2),
        R=np.eye(2),
        H=0.1 * np.ones((2, 2)),
        Q_T=2.0 * np.eye(2),
        d0=np.array([1.0, -1.0]),
        name="decay_test",
        **kwargs,
    )


def scalar_problem(a=0.0, b=1.0, q=1.0, r=1.0, q_T=1.0, T=1.0, x0=1.0, h=0.0) -> LQProblem:
    """Scalar LQ problem with constant coefficients."""
    return LQProblem(
        T=T, A=[[a]], B=[[b]], Q=[[q]], R=[[r]], H=[[h]], Q_T=[[q_T]], d0=[x0], name="scalar"
    )


REGISTRY = {
    "schorlepp_linearized": schorlepp_linearized,
    "decay_test": decay_test_problem,
    "scalar": scalar_problem,
}


def registry_problem(name: str, **params) -> LQProblem:
    """Build a registered problem by name."""
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; available: {', '.join(sorted(REGISTRY))}") from None
    return factory(**params)
