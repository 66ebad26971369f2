"""Experiment drivers behind the command-line runner.

Every driver takes an :class:`ExperimentConfig` and returns an
:class:`ExperimentResult` holding CSV tables and named checks; the CLI only
writes them out.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .controllability import check_ucc
from .ltv_model import registry_problem, validate_assumptions
from .ode_engine import IntegratorConfig, TimeGrid
from .pmp_subproblem import GDConfig
from .reference_solver import solve_full_direct, solve_full_riccati
from .riccati_sensitivity import (
    boundary_perturbation_response,
    evolution_decay_check,
    point_perturbation_response,
    problem_constants,
    solve_riccati,
)
from .schwarz import (
    build_partition,
    fit_exponential,
    initial_iterate,
    restrict_solution,
    run_schwarz,
)

log = logging.getLogger(__name__)

EXPERIMENTS = (
    "overlap_sweep",
    "integrator_compare",
    "stiff_compare",
    "eds_boundary",
    "eds_point",
    "constants_report",
    "ucc_report",
)


@dataclass
class ExperimentConfig:
    experiment: str = "overlap_sweep"
    problem: str = "schorlepp_linearized"
    problem_params: dict = field(default_factory=dict)
    dt_reference: float = 1e-3
    dt_subproblem: float | None = None
    reference_route: str = "riccati"
    m: int = 3
    overlaps: tuple = (1.0, 5.0, 10.0, 20.0, 30.0, 60.0)
    eta: float = 1e-2
    grad_tol: float = 1e-6
    max_iters: int = 20_000
    seed: int | None = 0
    integrators: tuple = ("RK4",)
    abs_tol: float = 1e-9
    rel_tol: float = 1e-7
    max_outer: int = 40
    stop_tol: float = 1e-7
    stall_window: int | None = 5
    sigma: float = 1.0
    decay_pairs: int = 50
    l0: tuple | None = None
    lT: tuple | None = None
    t_prime: float | None = None
    l_point: tuple | None = None
    threads: int | None = None
    parallel: bool = True
    output_dir: str = "out"

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; available: {', '.join(EXPERIMENTS)}")
        if self.dt_reference <= 0 or (self.dt_subproblem is not None and self.dt_subproblem <= 0):
            raise ValueError("time steps must be positive")
        if self.reference_route not in ("riccati", "direct"):
            raise ValueError("reference_route must be 'riccati' or 'direct'")
        if self.m < 1:
            raise ValueError("partition m must be positive")
        self.integrators = tuple(IntegratorConfig(name).method for name in self.integrators)


@dataclass
class Check:
    name: str
    passed: bool
    measured: float
    bound: float
    mandatory: bool = True

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"CHECK {self.name} {status} {self.measured:.6g} {self.bound:.6g}"


@dataclass
class ExperimentResult:
    errors: list = field(default_factory=list)  # (experiment_id, series, k, e_k)
    rates: list = field(default_factory=list)  # (overlap, mean_rate, theoretical_bound)
    fit: list = field(default_factory=list)  # (units, c_hat, rho_hat)
    constants: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if c.mandatory)


def build_problem(cfg: ExperimentConfig):
    return registry_problem(cfg.problem, **cfg.problem_params)


def _integrator(cfg: ExperimentConfig, method: str) -> IntegratorConfig:
    return IntegratorConfig(method, abs_tol=cfg.abs_tol, rel_tol=cfg.rel_tol)


def reference_solution(problem, cfg: ExperimentConfig, grid: TimeGrid):
    """Full-horizon reference on the fine grid, subsampled onto ``grid``."""
    fine = TimeGrid.uniform(problem.t0, problem.T, cfg.dt_reference)
    if cfg.reference_route == "direct":
        ref = tuple(solve_full_direct(problem, fine))
    else:
        ref = solve_full_riccati(problem, fine)
    return ref if grid == fine else restrict_solution(ref, grid)


def _schwarz_grid(problem, cfg: ExperimentConfig) -> TimeGrid:
    dt = cfg.dt_subproblem or cfg.dt_reference
    ratio = dt / cfg.dt_reference
    if abs(ratio - round(ratio)) > 1e-9:
        raise ValueError("dt_subproblem must be an integer multiple of dt_reference")
    return TimeGrid.uniform(problem.t0, problem.T, dt)


def _constants_or_none(problem, cfg, schwarz=False, result: ExperimentResult | None = None):
    try:
        return problem_constants(problem, cfg.sigma, schwarz=schwarz)
    except ValueError as exc:
        if result is not None:
            result.notes.append(f"theoretical constants unavailable: {exc}")
        return None


def _loglinear(errors, floor) -> float:
    """Correlation coefficient of log(e_k) against k over the pre-plateau segment."""
    e = np.asarray(errors, dtype=float)
    keep = np.nonzero(e > floor)[0]
    if keep.size < 3:
        return float("nan")
    n = keep[-1] + 1
    k = np.arange(n)
    return float(np.corrcoef(k, np.log(e[:n]))[0, 1])


def _run_series(problem, cfg, grid, ref, method, fraction, constants=None):
    part = build_partition(problem.T, cfg.m, fraction, t0=problem.t0, grid=grid)
    gd = GDConfig(cfg.eta, cfg.grad_tol, cfg.max_iters, _integrator(cfg, method))
    bound = constants.schwarz_rate_bound(part.min_overlap) if constants is not None else float("nan")
    start = time.perf_counter()
    _, report = run_schwarz(
        problem, part, initial_iterate(problem, grid), gd, cfg.max_outer, cfg.stop_tol, ref,
        parallel=cfg.parallel, threads=cfg.threads, seed=cfg.seed, theoretical_rate=bound,
        stall_window=cfg.stall_window,
    )
    log.info("%s, overlap %.3g%%: %d iterations in %.1fs, mean rate %.4g",
             method, 100 * fraction, len(report.errors) - 1, time.perf_counter() - start, report.mean_rate)
    return part, report


def overlap_sweep(cfg: ExperimentConfig) -> ExperimentResult:
    problem = build_problem(cfg)
    res = ExperimentResult()
    grid = _schwarz_grid(problem, cfg)
    ref = reference_solution(problem, cfg, grid)
    constants = _constants_or_none(problem, cfg, schwarz=True, result=res)
    method = cfg.integrators[0]
    points_pct, points_time = [], []
    for pct in cfg.overlaps:
        part, rep = _run_series(problem, cfg, grid, ref, method, pct / 100.0, constants)
        for k, e in enumerate(rep.errors):
            res.errors.append(("overlap_sweep", f"{pct:g}%", k, e))
        res.rates.append((pct, rep.mean_rate, rep.theoretical_rate))
        points_pct.append((pct, rep.mean_rate))
        points_time.append((part.min_overlap, rep.mean_rate))
        floor = max(100 * cfg.stop_tol, 10 * min(rep.errors))
        corr = _loglinear(rep.errors, floor)
        res.checks.append(Check(f"loglinear_decay_{pct:g}pct", bool(corr <= -0.9), corr, -0.9))
        if constants is not None and rep.theoretical_rate < 1:
            res.checks.append(
                Check(f"rate_below_bound_{pct:g}pct", rep.mean_rate <= rep.theoretical_rate, rep.mean_rate, rep.theoretical_rate)
            )
    rates = np.array([r for _, r in points_pct])
    order = np.argsort([p for p, _ in points_pct])
    diffs = np.diff(rates[order])
    res.checks.append(Check("rates_strictly_decreasing", bool(np.all(diffs < 0)), float(np.max(diffs)) if diffs.size else 0.0, 0.0))
    if constants is not None:
        vacuous = all(r[2] >= 1 for r in res.rates)
        res.notes.append(
            "rate bound 3 c(sigma) exp(-rho_Z tau) is >= 1 for every overlap (vacuous)" if vacuous
            else "rate bound compared where it is below 1"
        )
        res.constants = constants.as_dict()
    if len(points_pct) >= 2 and np.all(np.isfinite(rates)) and np.all(rates > 0):
        c_pct, rho_pct = fit_exponential(points_pct)
        c_t, rho_t = fit_exponential(points_time)
        res.fit = [("percent", c_pct, rho_pct), ("time", c_t, rho_t)]
        res.checks.append(Check("fit_c_hat", 0.85 <= c_pct <= 1.05, c_pct, 0.98, mandatory=False))
        res.checks.append(Check("fit_rho_hat", 0.03 <= rho_pct <= 0.08, rho_pct, 0.05, mandatory=False))
    return res


def integrator_compare(cfg: ExperimentConfig, experiment_id: str = "integrator_compare") -> ExperimentResult:
    problem = build_problem(cfg)
    res = ExperimentResult()
    grid = _schwarz_grid(problem, cfg)
    ref = reference_solution(problem, cfg, grid)
    pct = cfg.overlaps[0]
    finals = {}
    for method in cfg.integrators:
        rate = float("nan")
        try:
            _, rep = _run_series(problem, cfg, grid, ref, method, pct / 100.0)
            errors, rate = rep.errors, rep.mean_rate
        except (ArithmeticError, RuntimeError) as exc:
            res.notes.append(f"{method}: {exc}")
            errors = [float("inf")]
        for k, e in enumerate(errors):
            res.errors.append((experiment_id, method, k, e))
        finals[method] = errors
        res.rates.append((f"{pct:g}%/{method}", rate, float("nan")))
    res.tables["final_errors"] = {m: e[-1] for m, e in finals.items()}
    if experiment_id == "integrator_compare":
        ladder = [m for m in ("RK45Fixed", "BackwardEuler", "ForwardEuler") if m in finals]
        for better, worse in zip(ladder[:-1], ladder[1:]):
            a, b = finals[better][-1], finals[worse][-1]
            res.checks.append(Check(f"order_{better}_below_{worse}", bool(a < b), a, b))
            res.checks.append(Check(f"gap2x_{better}_{worse}", bool(2 * a <= b), b / a if a > 0 else float("inf"), 2.0))
    return res


def stiff_compare(cfg: ExperimentConfig) -> ExperimentResult:
    res = integrator_compare(cfg, "stiff_compare")
    by_method = {}
    for _, method, k, e in res.errors:
        by_method.setdefault(method, []).append(e)
    for method, errors in by_method.items():
        e = np.asarray(errors[1:], dtype=float)
        if method == "ForwardEuler":
            all_e = np.asarray(errors, dtype=float)
            for name, first, rest, mandatory in (
                ("fe_no_reduction", all_e[0], all_e[1:], True),
                ("fe_no_reduction_after_first", e[0], e[1:], False),
            ):
                if not np.isfinite(first) or not np.all(np.isfinite(rest)):
                    res.checks.append(Check(name, True, float("inf"), 1.0, mandatory))
                else:
                    ratio = float(np.min(rest) / first)
                    res.checks.append(Check(name, bool(ratio >= 1 - 1e-6), ratio, 1.0, mandatory))
        elif method in ("RK23Adaptive", "RK45Adaptive"):
            steps = e[1:] / e[:-1]
            res.checks.append(Check(f"{method}_monotone", bool(np.all(steps <= 1 + 1e-6)), float(np.max(steps)), 1.0))
    return res


def eds_boundary(cfg: ExperimentConfig) -> ExperimentResult:
    problem = build_problem(cfg)
    res = ExperimentResult()
    grid = TimeGrid.uniform(problem.t0, problem.T, cfg.dt_reference)
    constants = _constants_or_none(problem, cfg, result=res)
    l0 = np.asarray(cfg.l0 if cfg.l0 is not None else np.eye(problem.n_x)[0], dtype=float)
    lT = np.asarray(cfg.lT if cfg.lT is not None else np.zeros(problem.dT.size), dtype=float)
    resp = boundary_perturbation_response(problem, l0, lT, grid, _integrator(cfg, "RK4"), constants)
    _perturbation_tables(res, "eds_boundary", resp)
    if resp.passed is not None:
        res.checks.append(Check("boundary_envelope", resp.passed, resp.worst_ratio, 1.0))
        res.constants = constants.as_dict()
    if np.any(l0):
        res.checks.append(Check("boundary_slope_initial", resp.slopes[0] < 0, resp.slopes[0], 0.0))
    if np.any(lT):
        res.checks.append(Check("boundary_slope_terminal", resp.slopes[1] < 0, resp.slopes[1], 0.0))
    return res


def eds_point(cfg: ExperimentConfig) -> ExperimentResult:
    problem = build_problem(cfg)
    res = ExperimentResult()
    grid = TimeGrid.uniform(problem.t0, problem.T, cfg.dt_reference)
    constants = _constants_or_none(problem, cfg, result=res)
    t_prime = cfg.t_prime if cfg.t_prime is not None else float(grid.nodes[grid.nearest_index(0.5 * (problem.t0 + problem.T))])
    l = np.asarray(cfg.l_point if cfg.l_point is not None else np.ones(problem.C.cols), dtype=float)
    resp = point_perturbation_response(problem, t_prime, l, grid, _integrator(cfg, "RK4"), constants)
    _perturbation_tables(res, "eds_point", resp)
    if resp.passed is not None:
        res.checks.append(Check("point_envelope", resp.passed, resp.worst_ratio, 1.0))
        res.constants = constants.as_dict()
    res.checks.append(Check("point_slope_left", resp.slopes[0] < 0, resp.slopes[0], 0.0))
    res.checks.append(Check("point_slope_right", resp.slopes[1] < 0, resp.slopes[1], 0.0))
    return res


def _perturbation_tables(res: ExperimentResult, name: str, resp):
    rows = []
    env = resp.envelope if resp.envelope is not None else np.full(len(resp.grid), np.nan)
    for t, mag, bound in zip(resp.grid.nodes, resp.magnitude, env):
        rows.append((t, mag, bound))
    res.tables["response"] = rows


def constants_report(cfg: ExperimentConfig) -> ExperimentResult:
    problem = build_problem(cfg)
    res = ExperimentResult()
    constants = problem_constants(problem, cfg.sigma)
    res.constants = constants.as_dict()
    grid = TimeGrid.uniform(problem.t0, problem.T, cfg.dt_reference)
    riccati = solve_riccati(problem, grid, _integrator(cfg, "RK4"))
    eigs = np.linalg.eigvalsh(riccati.S_tab)
    lo, hi = float(eigs.min()), float(eigs.max())
    res.checks.append(Check("riccati_lower_bound", lo >= constants.c0 * (1 - 1e-6), lo, constants.c0))
    res.checks.append(Check("riccati_upper_bound", hi <= constants.c1 * (1 + 1e-6), hi, constants.c1))
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed or 0))
    pairs = [tuple(sorted(rng.uniform(problem.t0, problem.T, 2))) for _ in range(cfg.decay_pairs)]
    rep = evolution_decay_check(problem, riccati, pairs, constants)
    ratio = float(np.max(rep.norms / rep.bounds))
    res.checks.append(Check("evolution_decay", rep.passed, ratio, 1.0))
    res.tables["decay"] = [(a, b, n, bnd) for (a, b), n, bnd in zip(pairs, rep.norms, rep.bounds)]
    return res


def ucc_report(cfg: ExperimentConfig) -> ExperimentResult:
    problem = build_problem(cfg)
    res = ExperimentResult()
    report = validate_assumptions(problem)
    ucc = check_ucc(problem.A, problem.B, cfg.sigma, problem.T, t_start=problem.t0)
    res.constants = {
        "sigma": ucc.sigma, "alpha0": ucc.alpha0, "alpha1": ucc.alpha1, "beta0": ucc.beta0, "beta1": ucc.beta1,
        "worst_t0": ucc.worst_t0, "gamma_Q": report.gamma_Q, "gamma_R": report.gamma_R,
    }
    res.checks.append(Check("ucc_alpha0_positive", ucc.alpha0 > 0, ucc.alpha0, 0.0))
    res.checks.append(Check("ucc_beta0_positive", ucc.beta0 > 0, ucc.beta0, 0.0))
    res.checks.append(Check("assumptions", report.passed, report.gamma_Q, report.qT_min, mandatory=False))
    res.notes.extend(report.notes)
    return res


DRIVERS = {
    "overlap_sweep": overlap_sweep,
    "integrator_compare": integrator_compare,
    "stiff_compare": stiff_compare,
    "eds_boundary": eds_boundary,
    "eds_point": eds_point,
    "constants_report": constants_report,
    "ucc_report": ucc_report,
}


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    return DRIVERS[cfg.experiment](cfg)
