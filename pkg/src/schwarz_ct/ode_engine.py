"""Time grids, trajectories and ODE integration.

Two integration paths share the same Butcher tableaus and step-size controller:

* :func:`integrate_ivp` accepts an arbitrary Python right-hand side and is used
  wherever flexibility matters more than speed (Riccati equations, evolution
  operators, tests).
* :class:`AffineSweep` specializes to ``y' = M(t) y + F(t) z(t)`` where ``z`` is
  sampled on the output grid and interpolated linearly.  Fixed-step methods are
  reduced to precomputed per-interval operators, adaptive methods run in a
  compiled kernel.  This is what the gradient-descent sweeps use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

FIXED_METHODS = ("ForwardEuler", "BackwardEuler", "RK4", "RK45Fixed")
ADAPTIVE_METHODS = ("RK23Adaptive", "RK45Adaptive")
METHODS = FIXED_METHODS + ADAPTIVE_METHODS

_ALIASES = {
    "fe": "ForwardEuler",
    "be": "BackwardEuler",
    "rk4": "RK4",
    "rk45": "RK45Fixed",
    "rk45fixed": "RK45Fixed",
    "rk23": "RK23Adaptive",
    "rk23adaptive": "RK23Adaptive",
    "ode23": "RK23Adaptive",
    "rk45adaptive": "RK45Adaptive",
    "ode45": "RK45Adaptive",
    "forwardeuler": "ForwardEuler",
    "backwardeuler": "BackwardEuler",
}

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0


class IntegrationError(RuntimeError):
    """Raised when an integrator cannot complete (stiffness, budget, singular step)."""


def canonical_method(name: str) -> str:
    """Map a user-facing method name (e.g. ``"FE"``, ``"ode23"``) to its canonical form."""
    if name in METHODS:
        return name
    key = name.replace("-", "").replace("_", "").lower()
    if key in _ALIASES:
        return _ALIASES[key]
    raise ValueError(f"unknown integration method {name!r}; choose from {', '.join(METHODS)}")


@dataclass(frozen=True)
class Tableau:
    c: np.ndarray
    a: np.ndarray
    b: np.ndarray
    b_err: np.ndarray | None = None
    err_order: int = 0

    @property
    def stages(self) -> int:
        return len(self.c)


def _tableau(c, a, b, b_err=None, err_order=0) -> Tableau:
    return Tableau(
        np.asarray(c, dtype=float),
        np.asarray(a, dtype=float),
        np.asarray(b, dtype=float),
        None if b_err is None else np.asarray(b_err, dtype=float),
        err_order,
    )


FORWARD_EULER = _tableau([0.0], [[0.0]], [1.0])

RK4 = _tableau(
    [0.0, 0.5, 0.5, 1.0],
    [[0, 0, 0, 0], [0.5, 0, 0, 0], [0, 0.5, 0, 0], [0, 0, 1.0, 0]],
    [1 / 6, 1 / 3, 1 / 3, 1 / 6],
)

BOGACKI_SHAMPINE = _tableau(
    [0.0, 0.5, 0.75, 1.0],
    [[0, 0, 0, 0], [0.5, 0, 0, 0], [0, 0.75, 0, 0], [2 / 9, 1 / 3, 4 / 9, 0]],
    [2 / 9, 1 / 3, 4 / 9, 0.0],
    [7 / 24, 1 / 4, 1 / 3, 1 / 8],
    err_order=2,
)

DORMAND_PRINCE = _tableau(
    [0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0],
    [
        [0, 0, 0, 0, 0, 0, 0],
        [1 / 5, 0, 0, 0, 0, 0, 0],
        [3 / 40, 9 / 40, 0, 0, 0, 0, 0],
        [44 / 45, -56 / 15, 32 / 9, 0, 0, 0, 0],
        [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0, 0, 0],
        [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0, 0],
        [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0],
    ],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0],
    [5179 / 57600, 0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40],
    err_order=4,
)

TABLEAUS = {
    "ForwardEuler": FORWARD_EULER,
    "RK4": RK4,
    "RK45Fixed": DORMAND_PRINCE,
    "RK23Adaptive": BOGACKI_SHAMPINE,
    "RK45Adaptive": DORMAND_PRINCE,
}


@dataclass(frozen=True)
class IntegratorConfig:
    """Integrator choice and its numerical knobs.

    ``step`` is the maximal internal step of the fixed-step methods; when it is
    ``None`` one step per output-grid interval is taken.
    """

    method: str = "RK4"
    step: float | None = None
    abs_tol: float = 1e-9
    rel_tol: float = 1e-7
    max_steps: int = 1_000_000
    refine: int = 4

    def __post_init__(self):
        object.__setattr__(self, "method", canonical_method(self.method))
        if self.step is not None and self.step <= 0:
            raise ValueError("step must be positive")
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_steps < 1 or self.refine < 1:
            raise ValueError("max_steps and refine must be positive")

    @property
    def adaptive(self) -> bool:
        return self.method in ADAPTIVE_METHODS


class TimeGrid:
    """Strictly increasing sequence of time nodes."""

    def __init__(self, nodes):
        nodes = np.array(nodes, dtype=float).ravel()
        if nodes.size < 2:
            raise ValueError("a time grid needs at least 2 nodes")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("grid nodes must be strictly increasing")
        self.nodes = nodes
        self.nodes.setflags(write=False)

    @classmethod
    def uniform(cls, t0: float, t1: float, step: float) -> "TimeGrid":
        """Uniform grid on [t0, t1] whose spacing is the closest to ``step`` that divides the interval."""
        if t1 <= t0:
            raise ValueError("interval must satisfy t0 < t1")
        if step <= 0:
            raise ValueError("step must be positive")
        n = max(1, int(round((t1 - t0) / step)))
        return cls(np.linspace(t0, t1, n + 1))

    def __len__(self) -> int:
        return self.nodes.size

    def __eq__(self, other) -> bool:
        return isinstance(other, TimeGrid) and np.array_equal(self.nodes, other.nodes)

    def __repr__(self) -> str:
        return f"TimeGrid([{self.t0:g}, {self.t1:g}], n={len(self)})"

    @property
    def t0(self) -> float:
        return float(self.nodes[0])

    @property
    def t1(self) -> float:
        return float(self.nodes[-1])

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def is_uniform(self) -> bool:
        h = self.steps
        return bool(np.all(np.abs(h - h[0]) <= 1e-9 * max(h[0], 1e-300)))

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        """Index of the node equal to ``t`` (within ``tol`` times the local spacing)."""
        i = int(np.argmin(np.abs(self.nodes - t)))
        scale = float(np.min(self.steps)) if len(self) > 1 else 1.0
        if abs(self.nodes[i] - t) > tol * scale:
            raise ValueError(f"time {t} is not a grid node")
        return i

    def nearest_index(self, t: float) -> int:
        return int(np.argmin(np.abs(self.nodes - t)))

    def slice(self, i0: int, i1: int) -> "TimeGrid":
        """Sub-grid with nodes ``i0..i1`` inclusive."""
        return TimeGrid(self.nodes[i0 : i1 + 1])

    def restrict(self, t0: float, t1: float) -> "TimeGrid":
        return self.slice(self.index_of(t0), self.index_of(t1))

    def refined(self, factor: int) -> "TimeGrid":
        """Grid with every interval split into ``factor`` equal parts."""
        if factor == 1:
            return self
        frac = np.arange(factor) / factor
        inner = (self.nodes[:-1, None] + self.steps[:, None] * frac[None, :]).ravel()
        return TimeGrid(np.append(inner, self.nodes[-1]))


@dataclass
class Trajectory:
    """Vector-valued samples on a time grid; ``values`` has shape ``(len(grid), dim)``."""

    grid: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] != len(self.grid):
            raise ValueError(
                f"trajectory values of shape {values.shape} do not match a grid of {len(self.grid)} nodes"
            )
        self.values = values

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes

    def at(self, t: float) -> np.ndarray:
        """Value at time ``t`` by linear interpolation."""
        nodes = self.grid.nodes
        return np.array([np.interp(t, nodes, self.values[:, k]) for k in range(self.dim)])

    def restrict(self, grid: TimeGrid) -> "Trajectory":
        """Restriction to a sub-grid made of nodes of this grid."""
        i0 = self.grid.index_of(grid.t0)
        i1 = i0 + len(grid) - 1
        if i1 >= len(self.grid) or not np.allclose(self.grid.nodes[i0 : i1 + 1], grid.nodes, rtol=0, atol=1e-9):
            raise ValueError("grid is not a contiguous sub-grid")
        return Trajectory(grid, self.values[i0 : i1 + 1].copy())

    def resample(self, grid: TimeGrid) -> "Trajectory":
        """Linear interpolation onto another grid."""
        out = np.empty((len(grid), self.dim))
        for k in range(self.dim):
            out[:, k] = np.interp(grid.nodes, self.grid.nodes, self.values[:, k])
        return Trajectory(grid, out)

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> "Trajectory":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.tile(value, (len(grid), 1)))

    @classmethod
    def zeros(cls, grid: TimeGrid, dim: int) -> "Trajectory":
        return cls(grid, np.zeros((len(grid), dim)))


def sample_matrix(fn, times) -> np.ndarray:
    """Evaluate a matrix-valued function at each time, returning ``(len(times), r, c)``."""
    times = np.asarray(times, dtype=float)
    sampler = getattr(fn, "sample", None)
    if sampler is not None:
        return sampler(times)
    return np.stack([np.atleast_2d(np.asarray(fn(t), dtype=float)) for t in times.ravel()]).reshape(
        times.shape + np.atleast_2d(fn(float(times.ravel()[0]))).shape
    )


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x)))


def _initial_step(rhs, t, y, f0, span, order, atol, rtol) -> float:
    scale = atol + rtol * np.abs(y)
    d0 = _rms(y / scale)
    d1 = _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = y + h0 * f0
    d2 = _rms((rhs(t + h0, y1) - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / (order + 1))
    return min(100 * h0, h1, span)


def _hermite(theta, h, y0, f0, y1, f1):
    t2 = theta * theta
    t3 = t2 * theta
    return (
        (2 * t3 - 3 * t2 + 1) * y0
        + (t3 - 2 * t2 + theta) * h * f0
        + (-2 * t3 + 3 * t2) * y1
        + (t3 - t2) * h * f1
    )


def _forward_view(rhs, affine, nodes, direction):
    """Express a problem on ``nodes`` as a forward problem in ``s`` (``s = -t`` when backward)."""
    if direction == "forward":
        return rhs, affine, nodes
    if direction != "backward":
        raise ValueError("direction must be 'forward' or 'backward'")

    def rhs_s(s, y):
        return -np.asarray(rhs(-s, y), dtype=float)

    affine_s = None
    if affine is not None:

        def affine_s(s):
            m, b = affine(-s)
            return -np.asarray(m, dtype=float), -np.asarray(b, dtype=float)

    return rhs_s, affine_s, -nodes[::-1]


def integrate_ivp(rhs, y0, grid, config: IntegratorConfig, direction: str = "forward", affine=None, project=None):
    """Integrate ``y' = rhs(t, y)`` and sample the solution on ``grid``.

    Parameters
    ----------
    rhs : callable
        ``rhs(t, y) -> dy`` with ``y`` a 1-D array.
    y0 : array_like
        Value at the first node (forward) or the last node (backward).
    grid : TimeGrid or (t0, t1)
        Output grid; an interval is turned into a two-node grid.
    config : IntegratorConfig
    direction : {"forward", "backward"}
        Backward integration starts from the terminal node; the result is still
        ordered by ascending time.
    affine : callable, optional
        ``affine(t) -> (M, b)`` with ``rhs(t, y) = M y + b``.  Required for
        BackwardEuler, whose steps are linear solves.
    project : callable, optional
        Applied to the state after every accepted step (e.g. re-symmetrization).

    Returns
    -------
    Trajectory
    """
    if not isinstance(grid, TimeGrid):
        grid = TimeGrid(grid)
    y0 = np.atleast_1d(np.asarray(y0, dtype=float)).copy()
    f, aff, s_nodes = _forward_view(rhs, affine, grid.nodes, direction)
    if config.method == "BackwardEuler" and aff is None:
        raise ValueError("BackwardEuler requires the affine structure of the right-hand side")
    if config.adaptive:
        out = _adaptive_python(f, y0, s_nodes, config, project)
    else:
        out = _fixed_python(f, aff, y0, s_nodes, config, project)
    if direction == "backward":
        out = out[::-1]
    return Trajectory(grid, out)


def _fixed_python(f, aff, y0, s_nodes, config, project):
    n = y0.size
    out = np.empty((s_nodes.size, n))
    out[0] = y0
    y = y0
    eye = np.eye(n)
    tab = TABLEAUS.get(config.method)
    steps = 0
    for i in range(s_nodes.size - 1):
        s_a, s_b = s_nodes[i], s_nodes[i + 1]
        span = s_b - s_a
        sub = 1 if config.step is None else max(1, int(np.ceil(span / config.step - 1e-9)))
        h = span / sub
        for k in range(sub):
            s = s_a + k * h
            if config.method == "BackwardEuler":
                m, b = aff(s + h)
                try:
                    y = np.linalg.solve(eye - h * np.asarray(m), y + h * np.asarray(b))
                except np.linalg.LinAlgError as exc:
                    raise IntegrationError(f"singular implicit step at t={s + h}") from exc
            else:
                y = _explicit_step(f, tab, s, y, h)[0]
            if project is not None:
                y = project(y)
            steps += 1
            if steps > config.max_steps:
                raise IntegrationError("step budget exceeded")
        out[i + 1] = y
    return out


def _explicit_step(f, tab: Tableau, s, y, h, k0=None):
    ks = []
    for j in range(tab.stages):
        if j == 0 and k0 is not None:
            ks.append(k0)
            continue
        yj = y.copy()
        for l in range(j):
            if tab.a[j, l] != 0.0:
                yj += h * tab.a[j, l] * ks[l]
        ks.append(np.asarray(f(s + tab.c[j] * h, yj), dtype=float))
    k = np.array(ks)
    y_new = y + h * (tab.b @ k)
    err = None if tab.b_err is None else h * ((tab.b - tab.b_err) @ k)
    return y_new, err


def _adaptive_python(f, y0, s_nodes, config, project):
    tab = TABLEAUS[config.method]
    atol, rtol = config.abs_tol, config.rel_tol
    s, s_end = s_nodes[0], s_nodes[-1]
    span = s_end - s
    out = np.empty((s_nodes.size, y0.size))
    out[0] = y0
    y = y0
    f0 = np.asarray(f(s, y), dtype=float)
    h = _initial_step(f, s, y, f0, span, tab.err_order, atol, rtol)
    h_min = 1e-14 * max(span, abs(s_end), 1.0)
    nxt = 1
    steps = 0
    while nxt < s_nodes.size:
        if steps >= config.max_steps:
            raise IntegrationError("step budget exceeded")
        h = min(h, s_end - s)
        if h < h_min:
            raise IntegrationError(f"step size underflow at t={s:g}: problem is too stiff for {config.method}")
        y_new, err = _explicit_step(f, tab, s, y, h, k0=f0)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        en = _rms(err / scale)
        steps += 1
        if en <= 1.0:
            if project is not None:
                y_new = project(y_new)
            s_new = s + h if s_end - (s + h) > h_min else s_end
            f1 = np.asarray(f(s_new, y_new), dtype=float)
            while nxt < s_nodes.size and s_nodes[nxt] <= s_new + h_min:
                theta = min(1.0, (s_nodes[nxt] - s) / h)
                out[nxt] = _hermite(theta, h, y, f0, y_new, f1)
                nxt += 1
            s, y, f0 = s_new, y_new, f1
            factor = MAX_FACTOR if en == 0.0 else min(MAX_FACTOR, max(MIN_FACTOR, SAFETY * en ** (-1.0 / (tab.err_order + 1))))
        else:
            factor = max(MIN_FACTOR, SAFETY * en ** (-1.0 / (tab.err_order + 1)))
        h *= factor
    return out


def evolution_operator(A, t0: float, t1: float, config: IntegratorConfig | None = None) -> np.ndarray:
    """Transition matrix ``Phi_A(t1, t0)`` of ``x' = A(t) x``.

    ``t1 < t0`` is allowed and integrates backward in time, giving the inverse
    transition.  ``Phi_A(t0, t0)`` is the identity exactly.
    """
    a0 = np.atleast_2d(np.asarray(A(t0), dtype=float))
    n = a0.shape[0]
    if t1 == t0:
        return np.eye(n)
    if config is None:
        config = IntegratorConfig("RK45Adaptive", abs_tol=1e-12, rel_tol=1e-12)

    def rhs(t, y):
        return (np.asarray(A(t), dtype=float) @ y.reshape(n, n)).ravel()

    def aff(t):
        return np.kron(np.asarray(A(t), dtype=float), np.eye(n)), np.zeros(n * n)

    lo, hi = min(t0, t1), max(t0, t1)
    direction = "forward" if t1 > t0 else "backward"
    traj = integrate_ivp(rhs, np.eye(n).ravel(), (lo, hi), config, direction=direction, affine=aff)
    return traj.values[-1 if direction == "forward" else 0].reshape(n, n)


def quadrature(f, t0: float, t1: float, n_panels: int) -> np.ndarray:
    """Composite Simpson rule for a (matrix-valued) integrand over [t0, t1]."""
    if not t1 > t0:
        raise ValueError("quadrature requires t0 < t1")
    if n_panels < 1:
        raise ValueError("n_panels must be at least 1")
    ts = np.linspace(t0, t1, 2 * n_panels + 1)
    w = np.ones(ts.size)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    w *= (t1 - t0) / (6.0 * n_panels)
    vals = np.array([np.asarray(f(t), dtype=float) for t in ts])
    return np.tensordot(w, vals, axes=1)


def trapezoid_weights(nodes: np.ndarray) -> np.ndarray:
    h = np.diff(nodes)
    w = np.zeros(nodes.size)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


# ---------------------------------------------------------------------------
# Affine sweeps with linearly interpolated input signals


@njit(cache=True, nogil=True)
def _recurrence(P, c, y0, out):
    n = y0.shape[0]
    for k in range(n):
        out[0, k] = y0[k]
    for i in range(P.shape[0]):
        for r in range(n):
            acc = c[i, r]
            for k in range(n):
                acc += P[i, r, k] * out[i, k]
            out[i + 1, r] = acc


@njit(cache=True, nogil=True)
def _interp_index(tab, s, hint):
    i = hint
    last = tab.shape[0] - 2
    while i < last and tab[i + 1] <= s:
        i += 1
    while i > 0 and tab[i] > s:
        i -= 1
    return i


@njit(cache=True, nogil=True)
def _affine_rhs(s, y, tab_s, Mtab, Ftab, node_s, z, hint, out):
    # Coefficients and input interpolated linearly; hint holds the last table/node indices.
    n = y.shape[0]
    nz = z.shape[1]
    i = _interp_index(tab_s, s, hint[0])
    hint[0] = i
    w = (s - tab_s[i]) / (tab_s[i + 1] - tab_s[i])
    if w < 0.0:
        w = 0.0
    elif w > 1.0:
        w = 1.0
    j = _interp_index(node_s, s, hint[1])
    hint[1] = j
    v = (s - node_s[j]) / (node_s[j + 1] - node_s[j])
    if v < 0.0:
        v = 0.0
    elif v > 1.0:
        v = 1.0
    for r in range(n):
        acc = 0.0
        for k in range(n):
            acc += ((1.0 - w) * Mtab[i, r, k] + w * Mtab[i + 1, r, k]) * y[k]
        for k in range(nz):
            zk = (1.0 - v) * z[j, k] + v * z[j + 1, k]
            acc += ((1.0 - w) * Ftab[i, r, k] + w * Ftab[i + 1, r, k]) * zk
        out[r] = acc


@njit(cache=True, nogil=True)
def _adaptive_kernel(tab_s, Mtab, Ftab, node_s, z, y0, c, a, b, be, err_order, atol, rtol, max_steps, h_init, out):
    n = y0.shape[0]
    S = c.shape[0]
    s = node_s[0]
    s_end = node_s[-1]
    span = s_end - s
    h_min = 1e-14 * max(span, abs(s_end), 1.0)
    hint = np.zeros(2, dtype=np.int64)
    y = y0.copy()
    K = np.zeros((S, n))
    ytmp = np.zeros(n)
    ynew = np.zeros(n)
    f0 = np.zeros(n)
    f1 = np.zeros(n)
    _affine_rhs(s, y, tab_s, Mtab, Ftab, node_s, z, hint, f0)
    for k in range(n):
        out[0, k] = y[k]
    h = h_init
    nxt = 1
    steps = 0
    expo = -1.0 / (err_order + 1.0)
    while nxt < node_s.shape[0]:
        if steps >= max_steps:
            return -1, steps
        if h > s_end - s:
            h = s_end - s
        if h < h_min:
            return -2, steps
        for k in range(n):
            K[0, k] = f0[k]
        for j in range(1, S):
            for k in range(n):
                acc = y[k]
                for l in range(j):
                    acc += h * a[j, l] * K[l, k]
                ytmp[k] = acc
            _affine_rhs(s + c[j] * h, ytmp, tab_s, Mtab, Ftab, node_s, z, hint, K[j])
        en = 0.0
        for k in range(n):
            acc = y[k]
            e = 0.0
            for j in range(S):
                acc += h * b[j] * K[j, k]
                e += h * (b[j] - be[j]) * K[j, k]
            ynew[k] = acc
            sc = atol + rtol * max(abs(y[k]), abs(acc))
            en += (e / sc) ** 2
        en = np.sqrt(en / n)
        steps += 1
        if en <= 1.0:
            s_new = s + h
            if s_end - s_new <= h_min:
                s_new = s_end
            _affine_rhs(s_new, ynew, tab_s, Mtab, Ftab, node_s, z, hint, f1)
            while nxt < node_s.shape[0] and node_s[nxt] <= s_new + h_min:
                th = (node_s[nxt] - s) / h
                if th > 1.0:
                    th = 1.0
                t2 = th * th
                t3 = t2 * th
                for k in range(n):
                    out[nxt, k] = (
                        (2 * t3 - 3 * t2 + 1) * y[k]
                        + (t3 - 2 * t2 + th) * h * f0[k]
                        + (-2 * t3 + 3 * t2) * ynew[k]
                        + (t3 - t2) * h * f1[k]
                    )
                nxt += 1
            s = s_new
            for k in range(n):
                y[k] = ynew[k]
                f0[k] = f1[k]
            if en == 0.0:
                fac = MAX_FACTOR
            else:
                fac = min(MAX_FACTOR, max(MIN_FACTOR, SAFETY * en**expo))
        else:
            fac = max(MIN_FACTOR, SAFETY * en**expo)
        h *= fac
    return 0, steps


class AffineSweep:
    """Repeated solves of ``y' = M(t) y + F(t) z(t)`` on a fixed grid.

    ``z`` is supplied per call as node values on ``grid`` and is interpolated
    linearly inside intervals.  Everything that does not depend on ``z`` or on
    the initial value is computed once at construction, so a sweep costs one
    batched matrix product plus a compiled recurrence.  Adaptive methods read
    ``M`` and ``F`` from tables on a ``config.refine`` times finer grid with
    linear interpolation, so for time-varying coefficients their accuracy is
    limited by that table as well as by the tolerances.

    Parameters
    ----------
    M, F : callable
        Matrix functions of time (objects with a ``sample`` method are evaluated
        in one vectorized call).
    grid : TimeGrid
    config : IntegratorConfig
    direction : {"forward", "backward"}
    """

    def __init__(self, M, F, grid: TimeGrid, config: IntegratorConfig, direction: str = "forward"):
        if direction not in ("forward", "backward"):
            raise ValueError("direction must be 'forward' or 'backward'")
        self.grid = grid
        self.config = config
        self.direction = direction
        self._M = M
        self._F = F
        if config.adaptive:
            self._build_adaptive()
        else:
            self._build_fixed()

    # fixed-step methods reduce to y_to = P y_from + E0 z_from + E1 z_to per interval
    def _build_fixed(self):
        cfg = self.config
        nodes = self.grid.nodes
        if self.direction == "forward":
            t_from, t_to = nodes[:-1], nodes[1:]
        else:
            t_from, t_to = nodes[1:], nodes[:-1]
        span = t_to - t_from
        sub = 1 if cfg.step is None else max(1, int(np.ceil(np.max(np.abs(span)) / cfg.step - 1e-9)))
        h = span / sub
        m = t_from.size
        if cfg.method == "BackwardEuler":
            theta = (np.arange(1, sub + 1) / sub)[None, :, None]
        else:
            tab = TABLEAUS[cfg.method]
            theta = (np.arange(sub)[:, None] + tab.c[None, :]) / sub
            theta = theta[None, :, :]
        times = t_from[:, None, None] + span[:, None, None] * theta
        Ms = sample_matrix(self._M, times.ravel())
        Fs = sample_matrix(self._F, times.ravel())
        n, nz = Ms.shape[-1], Fs.shape[-1]
        Ms = Ms.reshape(times.shape + (n, n))
        Fs = Fs.reshape(times.shape + (n, nz))
        eye = np.broadcast_to(np.eye(n), (m, n, n))
        P = eye.copy()
        E = np.zeros((m, n, 2 * nz))
        hh = h[:, None, None]
        for k in range(sub):
            if cfg.method == "BackwardEuler":
                th = theta[0, k, 0]
                lhs = eye - hh * Ms[:, k, 0]
                Fz = np.concatenate([(1 - th) * Fs[:, k, 0], th * Fs[:, k, 0]], axis=2)
                Pk = np.linalg.inv(lhs)
                Ek = Pk @ (hh * Fz)
            else:
                tab = TABLEAUS[cfg.method]
                Ky, Kz = [], []
                for j in range(tab.stages):
                    ay = eye.copy()
                    az = np.zeros((m, n, 2 * nz))
                    for l in range(j):
                        if tab.a[j, l] != 0.0:
                            ay = ay + hh * tab.a[j, l] * Ky[l]
                            az = az + hh * tab.a[j, l] * Kz[l]
                    th = theta[0, k, j]
                    Fz = np.concatenate([(1 - th) * Fs[:, k, j], th * Fs[:, k, j]], axis=2)
                    Ky.append(Ms[:, k, j] @ ay)
                    Kz.append(Ms[:, k, j] @ az + Fz)
                Pk = eye + hh * sum(tab.b[j] * Ky[j] for j in range(tab.stages) if tab.b[j] != 0.0)
                Ek = hh * sum(tab.b[j] * Kz[j] for j in range(tab.stages) if tab.b[j] != 0.0)
            P = Pk @ P
            E = Pk @ E + Ek
        self._P = np.ascontiguousarray(P)
        self._E0 = np.ascontiguousarray(E[:, :, :nz])
        self._E1 = np.ascontiguousarray(E[:, :, nz:])
        self.n, self.nz = n, nz

    def _build_adaptive(self):
        nodes = self.grid.nodes
        tab_t = self.grid.refined(self.config.refine).nodes
        Ms = sample_matrix(self._M, tab_t)
        Fs = sample_matrix(self._F, tab_t)
        self.n, self.nz = Ms.shape[-1], Fs.shape[-1]
        if self.direction == "forward":
            self._tab_s, self._Mtab, self._Ftab, self._node_s = tab_t, Ms, Fs, nodes
        else:
            self._tab_s = np.ascontiguousarray(-tab_t[::-1])
            self._Mtab = np.ascontiguousarray(-Ms[::-1])
            self._Ftab = np.ascontiguousarray(-Fs[::-1])
            self._node_s = np.ascontiguousarray(-nodes[::-1])
        tab = TABLEAUS[self.config.method]
        self._tab = tab
        self.last_steps = 0

    @property
    def operators(self):
        """Per-interval ``(P, E0, E1)`` of a fixed-step sweep (forward: interval i maps node i to i+1)."""
        return self._P, self._E0, self._E1

    def run(self, y_start, z) -> np.ndarray:
        """Solve from ``y_start`` (first node if forward, last if backward); returns node values."""
        y_start = np.ascontiguousarray(np.atleast_1d(np.asarray(y_start, dtype=float)))
        z = np.asarray(z, dtype=float).reshape(len(self.grid), -1)
        N = len(self.grid)
        out = np.empty((N, self.n))
        if self.config.adaptive:
            zs = z if self.direction == "forward" else z[::-1]
            zs = np.ascontiguousarray(zs)
            h0 = self._first_step(y_start, zs)
            tab = self._tab
            status, steps = _adaptive_kernel(
                self._tab_s, self._Mtab, self._Ftab, self._node_s, zs, y_start,
                tab.c, tab.a, tab.b, tab.b_err, tab.err_order,
                self.config.abs_tol, self.config.rel_tol, self.config.max_steps, h0, out,
            )
            self.last_steps = steps
            if status == -1:
                raise IntegrationError("step budget exceeded")
            if status == -2:
                raise IntegrationError(f"step size underflow: problem is too stiff for {self.config.method}")
            return out if self.direction == "forward" else out[::-1].copy()
        if self.direction == "forward":
            z_from, z_to = z[:-1], z[1:]
        else:
            z_from, z_to = z[1:], z[:-1]
        c = np.einsum("mij,mj->mi", self._E0, z_from) + np.einsum("mij,mj->mi", self._E1, z_to)
        if self.direction == "forward":
            _recurrence(self._P, c, y_start, out)
            return out
        # interval i maps node i+1 to node i; run the recurrence on reversed intervals
        _recurrence(self._P[::-1].copy(), np.ascontiguousarray(c[::-1]), y_start, out)
        return out[::-1].copy()

    def _first_step(self, y0, zs):
        s0 = self._node_s[0]
        span = self._node_s[-1] - s0
        tab_s, Mtab, Ftab, node_s = self._tab_s, self._Mtab, self._Ftab, self._node_s

        def rhs(s, y):
            out = np.empty(self.n)
            _affine_rhs(s, y, tab_s, Mtab, Ftab, node_s, zs, np.zeros(2, dtype=np.int64), out)
            return out

        f0 = rhs(s0, y0)
        return _initial_step(rhs, s0, y0, f0, span, self._tab.err_order, self.config.abs_tol, self.config.rel_tol)
