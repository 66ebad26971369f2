import numpy as np
import pytest

from schwarz_ct.ltv_model import decay_test_problem
from schwarz_ct.ode_engine import IntegratorConfig, TimeGrid, Trajectory
from schwarz_ct.pmp_subproblem import GDConfig, SubproblemSpec, solve_subproblem
from schwarz_ct.schwarz import (
    PartitionSpec,
    RateUndefinedError,
    SchwarzIterate,
    build_partition,
    error_metric,
    estimate_rate,
    fit_exponential,
    initial_iterate,
    restrict_solution,
    run_schwarz,
    schwarz_iterate,
    update_boundary_params,
)

RK4 = IntegratorConfig("RK4")
GD = GDConfig(0.05, 1e-9, 20000, RK4)


@pytest.fixture(scope="module")
def small_case():
    pr = decay_test_problem(T=3.0, coupled=True)
    grid = TimeGrid.uniform(0.0, 3.0, 0.01)
    return pr, grid


def test_partition_example():
    part = build_partition(5.0, 3, 0.05)
    np.testing.assert_allclose(part.tau0, 1 / 12)
    np.testing.assert_allclose(part.starts, [0.0, 5 / 3 - 1 / 12, 10 / 3 - 1 / 12])
    np.testing.assert_allclose(part.ends, [5 / 3 + 1 / 12, 10 / 3 + 1 / 12, 5.0])
    assert part.min_overlap == pytest.approx(1 / 12)


def test_single_subdomain_ignores_overlap():
    part = build_partition(5.0, 1, 0.3)
    assert part.subdomain(0) == (0.0, 5.0)
    assert part.min_overlap == float("inf")


def test_overlap_clamped_at_horizon():
    part = build_partition(5.0, 3, 0.6)
    assert part.subdomain(1) == pytest.approx((5 / 3 - 1, 10 / 3 + 1))
    assert part.subdomain(0)[0] == 0.0 and part.subdomain(2)[1] == 5.0


def test_partition_validation():
    with pytest.raises(ValueError):
        build_partition(5.0, 0, 0.1)
    with pytest.raises(ValueError):
        build_partition(5.0, 3, 0.0)
    with pytest.raises(ValueError):
        PartitionSpec([0.0, 2.0, 1.0], 0.1, 0.1)


def test_snapped_partition_lies_on_grid():
    grid = TimeGrid.uniform(0.0, 5.0, 0.01)
    part = build_partition(5.0, 3, 0.05, grid=grid)
    for t in np.concatenate([part.breakpoints, part.starts, part.ends]):
        grid.index_of(t)


def test_boundary_params_at_reference(benchmark_problem, benchmark_grid, riccati_reference):
    pr = benchmark_problem
    part = build_partition(pr.T, 3, 0.05, grid=benchmark_grid)
    x, u, lam = riccati_reference
    params = update_boundary_params(SchwarzIterate(x, u, lam), part, pr)
    np.testing.assert_array_equal(params[0][0], pr.d0)
    np.testing.assert_array_equal(params[-1][1], np.zeros(2))
    lo, hi = part.subdomain(1)
    np.testing.assert_allclose(params[1][0], x.at(lo))
    np.testing.assert_allclose(params[1][1], x.at(hi) - np.linalg.solve(pr.Q(hi), lam.at(hi)))


def test_boundary_params_of_initial_iterate(small_case):
    pr, grid = small_case
    params = update_boundary_params(initial_iterate(pr, grid), build_partition(pr.T, 3, 0.1, grid=grid), pr)
    for p, q in params[1:]:
        np.testing.assert_array_equal(p, pr.d0)
    for p, q in params[:-1]:
        np.testing.assert_array_equal(q, pr.d0)


def test_single_subdomain_is_the_subproblem_solver(small_case):
    pr, grid = small_case
    part = build_partition(pr.T, 1, 0.0, grid=grid)
    it = schwarz_iterate(pr, part, initial_iterate(pr, grid), GD, parallel=False)
    res = solve_subproblem(SubproblemSpec(pr, (0.0, pr.T), pr.d0, is_last=True), Trajectory.zeros(grid, pr.n_u), GD)
    for a, b in zip(it, res):
        np.testing.assert_array_equal(a.values, b.values)


def test_converged_iterate_is_a_fixed_point(small_case):
    pr, grid = small_case
    part = build_partition(pr.T, 3, 0.1, grid=grid)
    gd = GDConfig(0.05, 1e-11, 50000, RK4)
    it, rep = run_schwarz(pr, part, initial_iterate(pr, grid), gd, max_outer=60, stop_tol=1e-9, parallel=False)
    assert rep.converged
    nxt = schwarz_iterate(pr, part, it, gd, parallel=False)
    assert error_metric(nxt, it) <= 1e-8


def test_parallel_matches_serial(small_case):
    pr, grid = small_case
    part = build_partition(pr.T, 4, 0.1, grid=grid)
    init = initial_iterate(pr, grid)
    a = schwarz_iterate(pr, part, init, GD, parallel=True, threads=4, seed=3)
    b = schwarz_iterate(pr, part, init, GD, parallel=False, seed=3)
    for ta, tb in zip(a, b):
        assert np.array_equal(ta.values, tb.values)
    assert a.k == 1 and len(a.subdomain_flags) == 4


def test_run_from_reference_stops_at_once(small_case):
    pr, grid = small_case
    part = build_partition(pr.T, 3, 0.1, grid=grid)
    init = initial_iterate(pr, grid)
    it, rep = run_schwarz(pr, part, init, GD, reference=init)
    assert rep.converged and it.k == 0 and rep.errors == [0.0]


def test_initial_state_checked(small_case):
    pr, grid = small_case
    init = initial_iterate(pr, grid)
    bad = SchwarzIterate(Trajectory.zeros(grid, pr.n_x), init.u, init.lam)
    with pytest.raises(ValueError, match="x0"):
        run_schwarz(pr, build_partition(pr.T, 2, 0.1, grid=grid), bad, GD)


def test_aggregation_takes_owned_nodes(small_case):
    pr, grid = small_case
    part = build_partition(pr.T, 3, 0.2, grid=grid)
    init = initial_iterate(pr, grid)
    it = schwarz_iterate(pr, part, init, GD, parallel=False)
    params = update_boundary_params(init, part, pr)
    for j in range(3):
        lo, hi = part.subdomain(j)
        sub = grid.restrict(lo, hi)
        spec = SubproblemSpec(pr, (lo, hi), *params[j], is_last=j == 2)
        res = solve_subproblem(spec, init.u.restrict(sub), GD)
        a = grid.index_of(part.breakpoints[j])
        b = grid.index_of(part.breakpoints[j + 1])
        own = TimeGrid(grid.nodes[a : b + 1 if j == 2 else b])
        np.testing.assert_array_equal(it.x.restrict(own).values, res.x.restrict(own).values)


def test_error_metric_examples():
    grid = TimeGrid.uniform(0.0, 1.0, 0.5)
    z = Trajectory.zeros(grid, 2)
    one = Trajectory.constant(grid, [3.0, 4.0])
    assert error_metric((z, z, z), (z, z, z)) == 0.0
    assert error_metric((one, z, z), (z, z, z)) == 5.0
    assert error_metric((one, one, one), (z, z, z)) == 15.0
    with pytest.raises(ValueError):
        error_metric((z, z, z), (Trajectory.zeros(TimeGrid.uniform(0, 1, 0.25), 2),) * 3)


def test_restrict_solution():
    fine = TimeGrid.uniform(0.0, 1.0, 0.25)
    coarse = TimeGrid.uniform(0.0, 1.0, 0.5)
    tr = Trajectory(fine, np.arange(5.0))
    out = restrict_solution((tr, tr, tr), coarse)
    assert out[0].values[:, 0].tolist() == [0.0, 2.0, 4.0]


def test_rate_estimates():
    assert estimate_rate([1.0, 0.5, 0.25, 0.125]) == pytest.approx(0.5)
    assert estimate_rate([1.0, 0.5, 0.25, 1e-14]) == pytest.approx(0.5)
    with pytest.raises(RateUndefinedError):
        estimate_rate([1.0])
    with pytest.raises(RateUndefinedError):
        estimate_rate([1.0, 0.5], floor=0.7)


def test_exponential_fit_is_exact_on_two_points():
    c, rho = fit_exponential([(0.0, 2.0), (1.0, 2.0 * np.exp(-0.5))])
    assert c == pytest.approx(2.0) and rho == pytest.approx(0.5)
    with pytest.raises(ValueError):
        fit_exponential([(0.0, 1.0)])
    with pytest.raises(ValueError):
        fit_exponential([(0.0, 1.0), (1.0, 0.0)])


def test_wider_overlap_contracts_faster(small_case):
    pr, grid = small_case
    rates = []
    for frac in (0.05, 0.3):
        part = build_partition(pr.T, 3, frac, grid=grid)
        _, rep = run_schwarz(pr, part, initial_iterate(pr, grid), GD, max_outer=8, stop_tol=1e-7, parallel=False)
        rates.append(rep.changes[-1] / rep.changes[-2])
    assert rates[1] < rates[0] < 1
