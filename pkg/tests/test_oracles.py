import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from debal.data import SyntheticConfig, generate_confounded
from debal.exceptions import ContractError, ConvergenceError, InfeasibleError
from debal.oracles import (
    BalanceProblem,
    BiasReport,
    analytic_bias,
    dual_grid_search,
    dual_value,
    finite_diff_check,
    monte_carlo_bias,
    read_problem,
    solve_entropy_balance,
)


def random_problem(rng, n_max=50, two_blocks=False):
    n = int(rng.integers(2, n_max + 1))
    a = rng.normal(size=n) * rng.uniform(0.1, 5.0)
    t = rng.uniform(0.01, 1.0)
    split = None
    lo, hi = n * t * a.min(), n * t * a.max()
    if two_blocks:
        n2 = int(rng.integers(2, n_max + 1))
        a2, t2 = rng.normal(size=n2), rng.uniform(0.01, 1.0)
        split = (a2, t2)
        lo, hi = lo + n2 * t2 * a2.min(), hi + n2 * t2 * a2.max()
    m = lo + (hi - lo) * rng.uniform(0.02, 0.98)
    return BalanceProblem(a, t, m, split)


def enumerate_one_stratum(p_high=0.8, p_low=0.2, nominal=0.5):
    """E[(o - p) / p * (e - c)] by listing the four (h, o) outcomes; e = h."""
    out = {}
    for name, c in (("ips", 0.0), ("dr", 0.5)):
        total = 0.0
        for h, p_h in ((1, p_high), (0, p_low)):
            for o, prob_o in ((1, p_h), (0, 1 - p_h)):
                total += 0.5 * prob_o * (o - nominal) / nominal * (h - c)
        out[name] = total
    return out


class TestSolver:
    def test_uniform_already_feasible(self):
        sol = solve_entropy_balance(BalanceProblem([1.0, 3.0], 0.5, 2.0))
        assert np.allclose(sol.flat_weights, [0.5, 0.5], rtol=0, atol=1e-12)
        assert sol.duals["nu"] == 0.0

    def test_determined_case(self):
        sol = solve_entropy_balance(BalanceProblem([1.0, 3.0], 0.5, 2.5))
        assert np.allclose(sol.flat_weights, [0.25, 0.75], rtol=0, atol=1e-12)

    def test_infeasible_reports_interval(self):
        with pytest.raises(InfeasibleError) as info:
            solve_entropy_balance(BalanceProblem([1.0, 3.0], 0.5, 10.0))
        assert info.value.interval == (1.0, 3.0)

    def test_boundary_is_infeasible(self):
        with pytest.raises(InfeasibleError):
            solve_entropy_balance(BalanceProblem([1.0, 3.0], 0.5, 3.0))

    def test_degenerate_equal_moments(self):
        sol = solve_entropy_balance(BalanceProblem([2.0, 2.0, 2.0], 1.0, 6.0))
        assert np.allclose(sol.flat_weights, 1.0)

    def test_iteration_cap(self):
        with pytest.raises(ConvergenceError):
            solve_entropy_balance(BalanceProblem(np.linspace(-3, 40, 30), 0.1, 110.0), max_iter=2)

    def test_bad_problem(self):
        with pytest.raises(ContractError):
            BalanceProblem([], 0.5, 1.0)
        with pytest.raises(ContractError):
            BalanceProblem([1.0, np.nan], 0.5, 1.0)
        with pytest.raises(ContractError):
            BalanceProblem([1.0, 2.0], 0.0, 1.0)

    @pytest.mark.parametrize("two_blocks", [False, True])
    def test_random_problems_against_grid(self, two_blocks):
        rng = np.random.default_rng(7 + two_blocks)
        for _ in range(100):
            problem = random_problem(rng, two_blocks=two_blocks)
            sol = solve_entropy_balance(problem)
            assert sol.kkt_residual < 1e-8
            for w, (a, t) in zip(sol.weights, problem.blocks):
                assert np.all(w > 0)
                assert abs(w.mean() - t) <= 1e-10 * max(1.0, t)
            moment = sum(float(w @ a) for w, (a, _) in zip(sol.weights, problem.blocks))
            assert abs(moment - problem.moment_target) <= 1e-10 * max(1.0, abs(problem.moment_target))
            nu, grid_w = dual_grid_search(problem)
            assert np.abs(sol.flat_weights - np.concatenate(grid_w)).max() < 1e-6
            assert abs(sol.duals["nu"] - nu) < 1e-6 * max(1.0, abs(nu))

    def test_solution_maximizes_dual(self):
        rng = np.random.default_rng(11)
        problem = random_problem(rng, 20)
        nu = solve_entropy_balance(problem).duals["nu"]
        best = dual_value(problem, nu)
        for d in (1e-3, 1e-2, 0.1, 1.0):
            assert dual_value(problem, nu + d) <= best + 1e-12
            assert dual_value(problem, nu - d) <= best + 1e-12

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 100_000))
    def test_feasible_perturbations_lose_entropy(self, seed):
        rng = np.random.default_rng(seed)
        problem = random_problem(rng, 30)
        sol = solve_entropy_balance(problem)
        w = sol.flat_weights
        a = problem.moments
        # project a random direction onto {sum d = 0, sum d a = 0}
        A = np.vstack([np.ones_like(a), a])
        for _ in range(10):
            d = rng.normal(size=len(a))
            d -= A.T @ np.linalg.lstsq(A @ A.T, A @ d, rcond=None)[0]
            if np.linalg.norm(d) < 1e-8:  # n = 2: the feasible set is a point
                continue
            step = 0.5 * np.min(w) / max(np.abs(d).max(), 1e-300)
            v = w + step * d
            assert np.sum(v * np.log(v)) >= np.sum(w * np.log(w)) - 1e-12


class TestReadProblem:
    def test_round_trip(self, tmp_path):
        p = tmp_path / "p.txt"
        p.write_text("# two-sample preset\na = 1, 3\nmean_target = 0.5\nmoment_target = 2.5\n")
        prob = read_problem(p)
        assert prob.moments.tolist() == [1.0, 3.0] and prob.split is None

    def test_two_blocks(self, tmp_path):
        p = tmp_path / "p.txt"
        p.write_text("a = 1 2\nmean_target = 0.5\na2 = 0 4\nmean_target2 = 0.25\nmoment_target = 2\n")
        prob = read_problem(p)
        assert prob.split[0].tolist() == [0.0, 4.0] and prob.split[1] == 0.25

    def test_missing_field(self, tmp_path):
        p = tmp_path / "p.txt"
        p.write_text("a = 1 2\nmean_target = 0.5\n")
        with pytest.raises(ContractError, match="moment_target"):
            read_problem(p)


class TestBias:
    def test_enumeration_values(self):
        assert enumerate_one_stratum() == pytest.approx({"ips": 0.3, "dr": 0.3}, abs=1e-15)

    def test_analytic_matches_enumeration(self):
        world, _, _ = generate_confounded(SyntheticConfig.one_stratum(), seed=0)
        expected = enumerate_one_stratum()
        assert analytic_bias(world, "ips") == pytest.approx(expected["ips"], abs=1e-12)
        assert analytic_bias(world, "dr") == pytest.approx(expected["dr"], abs=1e-12)

    @pytest.mark.parametrize("estimator", ["ips", "dr"])
    def test_one_stratum_monte_carlo(self, estimator):
        world, _, _ = generate_confounded(SyntheticConfig.one_stratum(), seed=0)
        rep = monte_carlo_bias(world, estimator, replicates=10_000, seed=1)
        assert rep.standard_error > 0
        assert abs(rep.z_score) < 3

    @pytest.mark.parametrize("estimator", ["ips", "dr"])
    def test_no_confounding(self, estimator):
        world, _, _ = generate_confounded(SyntheticConfig.one_stratum(confound_strength=0.0), seed=0)
        rep = monte_carlo_bias(world, estimator, replicates=10_000, seed=2)
        assert rep.analytic_bias == 0.0
        assert abs(rep.empirical_bias) < 3 * rep.standard_error

    @pytest.mark.parametrize("strength", [0.0, 0.25, 0.5, 1.0])
    @pytest.mark.parametrize("estimator", ["ips", "dr"])
    def test_grid_of_strengths(self, strength, estimator):
        cfg = SyntheticConfig(num_users=8, num_items=10, confound_strength=strength, rating_noise=0.3)
        world, _, _ = generate_confounded(cfg, seed=3)
        rep = monte_carlo_bias(world, estimator, replicates=5000, seed=4)
        assert abs(rep.z_score) < 3

    def test_true_propensity_is_unbiased(self):
        world, _, _ = generate_confounded(SyntheticConfig(num_users=6, num_items=6, confound_strength=0.8), seed=5)
        rep = monte_carlo_bias(world, "ips", "true", replicates=5000, seed=6)
        assert rep.analytic_bias == 0.0 and abs(rep.z_score) < 3

    def test_misspecified_propensity(self):
        world, _, _ = generate_confounded(SyntheticConfig(num_users=6, num_items=6, confound_strength=0.0), seed=5)
        rep = monte_carlo_bias(world, "ips", "misspecified", replicates=5000, seed=6)
        assert rep.analytic_bias < 0 and abs(rep.z_score) < 3

    def test_deterministic_and_csv(self):
        world, _, _ = generate_confounded(SyntheticConfig.one_stratum(), seed=0)
        a = monte_carlo_bias(world, "ips", replicates=200, seed=9)
        b = monte_carlo_bias(world, "ips", replicates=200, seed=9)
        assert a.to_csv() == b.to_csv()
        lines = a.to_csv().split("\n")
        assert lines[0] == ",".join(BiasReport.HEADER) and lines[-1] == ""

    def test_replicate_floor(self):
        world, _, _ = generate_confounded(SyntheticConfig.one_stratum(), seed=0)
        with pytest.raises(ContractError):
            monte_carlo_bias(world, "ips", replicates=1)

    def test_unsupported_estimator(self):
        world, _, _ = generate_confounded(SyntheticConfig.one_stratum(), seed=0)
        with pytest.raises(ContractError):
            monte_carlo_bias(world, "autodebias", replicates=100)


class TestFiniteDiff:
    def test_quadratic(self):
        x = np.random.default_rng(0).normal(size=30)
        assert finite_diff_check(lambda y: (0.5 * y @ y, y.copy()), x) < 1e-9

    def test_constant(self):
        err, info = finite_diff_check(lambda y: (3.0, np.zeros_like(y)), np.ones(5), return_details=True)
        assert err == 0.0 and not info["numeric"].any()

    def test_detects_wrong_gradient(self):
        assert finite_diff_check(lambda y: (float(np.sum(np.sin(y))), np.cos(y) * 1.01), np.ones(4)) > 1e-3

    def test_subsamples_coordinates(self):
        _, info = finite_diff_check(lambda y: (float(y @ y), 2 * y), np.ones(500), max_coords=50, return_details=True)
        assert len(info["coords"]) == 50

    def test_non_finite(self):
        with pytest.raises(FloatingPointError):
            finite_diff_check(lambda y: (float("nan"), y), np.ones(2))
