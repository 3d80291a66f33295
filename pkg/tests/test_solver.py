"""Successive-approximation solver tests: exact identities, hand-derived
iterates, closed-form solutions, contraction behavior, and the per-time
equivalence between the vectorized step and the scalar MC estimator."""

import numpy as np
import pytest

from nielab import engine
from nielab.engine import DTensor
from nielab.quadrature import (
    GridFunction,
    IntegrationSpec,
    Interval,
    interp_values,
    mc_integrate,
)
from nielab.solver import (
    Fredholm,
    IEProblem,
    NonFiniteError,
    SolverConfig,
    SolverError,
    Volterra,
    default_init,
    free_values,
    identity_nonlinearity,
    picard_step,
    residual_metric,
    scaled_identity_kernel,
    solve_ie,
)


def _exp_problem(lam=1.0):
    """y = 1 + lam * integral_0^t y ds, solution e^(lam t)."""
    return IEProblem(
        d=1,
        free_fn=lambda t: np.array([1.0]),
        kernel=scaled_identity_kernel(lam, 1),
        nonlinearity=identity_nonlinearity,
        family=Volterra(),
    )


def _cfg(n=2000, seed=42, max_iter=15, tol=1e-12, metric="relative-l2"):
    return SolverConfig(max_iter=max_iter, tolerance=tol, metric=metric,
                        mc=IntegrationSpec(n_samples=n, seed=seed))


class TestResidualMetric:
    def test_identical_is_zero(self):
        g = GridFunction([0.0, 1.0], [[1.0], [2.0]])
        assert residual_metric(g, g) == 0.0

    def test_max_abs_offset(self):
        grid = [0.0, 1.0]
        a = GridFunction(grid, np.ones((2, 1)))
        b = GridFunction(grid, np.zeros((2, 1)))
        assert residual_metric(a, b, "max-abs") == 1.0

    def test_relative_l2_single_entry(self):
        grid = [0.0, 1.0]
        a = GridFunction(grid, [[2.0], [2.0]])
        b = GridFunction(grid, [[1.0], [1.0]])
        assert residual_metric(a, b) == pytest.approx(1.0, rel=1e-9)

    def test_grid_mismatch_rejected(self):
        a = GridFunction([0.0, 1.0], np.ones((2, 1)))
        b = GridFunction([0.0, 2.0], np.ones((2, 1)))
        with pytest.raises(SolverError, match="grids"):
            residual_metric(a, b)


class TestExactIdentities:
    def test_zero_kernel_returns_free_function_bitwise(self):
        """With K = 0 the solver must hand back f exactly, converging on the
        second iteration from any initial guess."""
        grid = np.linspace(0.0, 2.0, 9)
        problem = IEProblem(
            d=2,
            free_fn=lambda t: np.array([np.sin(t), np.cos(t)]),
            kernel=scaled_identity_kernel(0.0, 2),
            nonlinearity=identity_nonlinearity,
            family=Volterra(),
        )
        init = GridFunction(grid, np.random.default_rng(0).normal(size=(9, 2)))
        traj = solve_ie(problem, init, _cfg(n=50, max_iter=10, tol=1e-12))
        f_vals = free_values(problem, grid)
        assert traj.iterations_used == 2
        assert traj.converged
        assert traj.residuals[-1] == 0.0
        assert np.array_equal(traj.grid_fn.values.data, f_vals)

    def test_volterra_start_equals_f_at_every_iteration(self):
        """The causal family pins y(t_0) = f(t_0) bitwise on each iterate."""
        grid = np.linspace(0.0, 1.0, 7)
        problem = _exp_problem()
        f_vals = free_values(problem, grid)
        y = GridFunction(grid, np.random.default_rng(1).normal(size=(7, 1)))
        cfg = _cfg(n=64, seed=5)
        for _ in range(4):
            y = picard_step(problem, y, cfg)
            assert np.array_equal(y.values.data[0], f_vals[0])

    def test_first_picard_iterate_computed_by_hand(self):
        """For y = 1 + integral_0^t y ds from y_0 = 1 the integrand is the
        constant 1, so the MC estimate is exact: y_1(t) = 1 + t."""
        grid = np.linspace(0.0, 1.0, 11)
        problem = _exp_problem()
        y0 = GridFunction(grid, np.ones((11, 1)))
        y1 = picard_step(problem, y0, _cfg(n=100, seed=3))
        np.testing.assert_allclose(y1.values.data[:, 0], 1.0 + grid, rtol=1e-14)


class TestClosedFormSolutions:
    def test_exponential_growth(self):
        """y = 1 + integral_0^t y ds on [0, 1] solves to e^t."""
        grid = np.linspace(0.0, 1.0, 100)
        problem = _exp_problem()
        traj = solve_ie(problem, default_init(problem, grid), _cfg())
        y = traj.grid_fn.values.data[:, 0]
        rel = np.abs(y - np.exp(grid)) / np.exp(grid)
        assert rel.max() < 0.02

    def test_fredholm_constant_offset(self):
        """y(t) = t + 0.5 * integral_0^1 y(s) ds has the fixed point
        c = 0.5 * (0.5 + c), i.e. y = t + 0.5. The iteration contracts with
        factor 0.5, so accumulated MC noise is below
        3 * 0.5 * std(s + c) / sqrt(n) / (1 - 0.5)."""
        grid = np.linspace(0.0, 1.0, 100)
        n = 4000
        problem = IEProblem(
            d=1,
            free_fn=lambda t: np.array([t]),
            kernel=scaled_identity_kernel(0.5, 1),
            nonlinearity=identity_nonlinearity,
            family=Fredholm(0.0, 1.0),
        )
        traj = solve_ie(problem, default_init(problem, grid),
                        _cfg(n=n, seed=7, max_iter=40, tol=1e-10))
        sigma_step = 0.5 * np.sqrt(1.0 / 12.0) / np.sqrt(n)
        bound = 3.0 * sigma_step / (1.0 - 0.5)
        err = np.abs(traj.grid_fn.values.data[:, 0] - (grid + 0.5))
        assert err.max() < bound

    def test_contraction_residuals_decrease(self):
        """For K = lam*I with lam*(t_max - t_0) < 1 and F = id, residuals
        shrink by at least the contraction factor, up to 5x the MC noise."""
        lam, span, n = 0.5, 1.0, 5000
        grid = np.linspace(0.0, span, 60)
        problem = _exp_problem(lam)
        traj = solve_ie(problem, default_init(problem, grid),
                        _cfg(n=n, seed=13, max_iter=10, tol=0.0))
        y = traj.grid_fn.values.data
        sigma_rel = 5.0 * lam * span * float(np.std(y)) / np.sqrt(n) / float(
            np.linalg.norm(y) / np.sqrt(y.size))
        for prev, cur in zip(traj.residuals[:-1], traj.residuals[1:]):
            assert cur < prev * lam * span + sigma_rel

    def test_solution_invariant_to_initial_guess(self):
        """A contractive problem run to convergence forgets its init."""
        grid = np.linspace(0.0, 1.0, 40)
        problem = _exp_problem(0.5)
        cfg = _cfg(n=3000, seed=21, max_iter=30, tol=1e-12)
        a = solve_ie(problem, default_init(problem, grid), cfg)
        init_b = GridFunction(grid, 5.0 * np.random.default_rng(2).normal(size=(40, 1)))
        b = solve_ie(problem, init_b, cfg)
        sigma = 3.0 * 0.5 * float(np.std(a.grid_fn.values.data)) / np.sqrt(3000)
        diff = np.abs(a.grid_fn.values.data - b.grid_fn.values.data).max()
        assert diff < max(sigma, 1e-9)


class TestStepEquivalence:
    def test_vectorized_step_matches_scalar_mc_estimates(self):
        """picard_step at grid time t_j must equal
        f(t_j) + mc_integrate(s -> K(t_j, s) F(y(s)), t_j) with t_index=j."""
        grid = np.linspace(0.0, 1.0, 9)
        n = 33

        def kernel(t_arr, s_arr):
            c = np.cos(t_arr - s_arr)
            out = np.zeros((len(t_arr), 2, 2))
            out[:, 0, 0] = c
            out[:, 1, 1] = 2.0 * c
            out[:, 0, 1] = 0.5
            return out

        def nonlin(y):
            return engine.tanh(y)

        problem = IEProblem(
            d=2,
            free_fn=lambda t: np.array([t, 1.0 - t]),
            kernel=kernel,
            nonlinearity=nonlin,
            family=Volterra(),
        )
        y_i = GridFunction(grid, np.random.default_rng(4).normal(size=(9, 2)))
        cfg = _cfg(n=n, seed=17)
        stepped = picard_step(problem, y_i, cfg)

        f_vals = free_values(problem, grid)
        spec = IntegrationSpec(n_samples=n, seed=17,
                               domain=Interval.causal(grid[0]))
        for j, t in enumerate(grid):
            def integrand(s):
                y_s = interp_values(y_i, s)
                fy = nonlin(y_s)
                k = DTensor(kernel(np.full(n, t), s))
                return engine.reshape(
                    engine.rowmatvec(k, engine.reshape(fy, (1, n, 2))), (n, 2))

            expected = f_vals[j] + mc_integrate(integrand, t, spec, t_index=j).data
            np.testing.assert_array_equal(stepped.values.data[j], expected)

    def test_batched_step_matches_unbatched(self):
        grid = np.linspace(0.0, 1.0, 12)
        problem = _exp_problem(0.7)
        rng = np.random.default_rng(5)
        curves = rng.normal(size=(3, 12, 1))
        cfg = _cfg(n=40, seed=23)
        f_vals = free_values(problem, grid)
        batched = picard_step(
            problem, GridFunction(grid, curves, batched=True), cfg,
            f_vals=np.broadcast_to(f_vals, (3, 12, 1)))
        for b in range(3):
            single = picard_step(problem, GridFunction(grid, curves[b]), cfg)
            np.testing.assert_array_equal(batched.values.data[b], single.values.data)


class TestErrorPaths:
    def test_non_finite_iterate_reports_time(self):
        grid = np.linspace(0.0, 1.0, 5)

        def bad_kernel(t_arr, s_arr):
            out = np.zeros((len(t_arr), 1, 1))
            out[:, 0, 0] = np.where(t_arr > 0.5, np.inf, 1.0)
            return out

        problem = IEProblem(
            d=1, free_fn=lambda t: np.array([1.0]),
            kernel=bad_kernel, nonlinearity=identity_nonlinearity,
            family=Volterra(),
        )
        with pytest.raises(NonFiniteError, match="t="):
            picard_step(problem, default_init(problem, grid), _cfg(n=8, seed=1))

    def test_fredholm_bounds_must_be_ordered(self):
        with pytest.raises(SolverError, match="a <= b"):
            Fredholm(1.0, 0.0)

    def test_fredholm_bounds_must_lie_on_grid(self):
        grid = np.linspace(0.0, 1.0, 5)
        problem = IEProblem(
            d=1, free_fn=lambda t: np.array([1.0]),
            kernel=scaled_identity_kernel(1.0, 1),
            nonlinearity=identity_nonlinearity,
            family=Fredholm(0.0, 2.0),
        )
        with pytest.raises(SolverError, match="outside grid"):
            solve_ie(problem, default_init(problem, grid), _cfg(n=8))

    def test_kernel_shape_validated(self):
        grid = np.linspace(0.0, 1.0, 4)
        problem = IEProblem(
            d=2, free_fn=lambda t: np.array([1.0, 1.0]),
            kernel=lambda t, s: np.zeros((len(t), 3, 3)),
            nonlinearity=identity_nonlinearity,
            family=Volterra(),
        )
        with pytest.raises(SolverError, match="kernel"):
            picard_step(problem, default_init(problem, grid), _cfg(n=8))

    def test_nonconvergence_is_reported_not_raised(self):
        grid = np.linspace(0.0, 1.0, 30)
        traj = solve_ie(_exp_problem(), default_init(_exp_problem(), grid),
                        _cfg(n=200, seed=2, max_iter=2, tol=1e-12))
        assert not traj.converged
        assert traj.iterations_used == 2
        assert len(traj.residuals) == 2


class TestEndToEndGradient:
    def test_solve_loss_gradient_matches_finite_differences(self):
        """Gradient through a 2-iteration unrolled solve with fixed MC seeds,
        against central differences on the same seeds."""
        from nielab.networks import KernelIntegralModel
        model = KernelIntegralModel(d=1, t_span=(0.0, 1.0), hidden=(6,),
                                    nonlin_hidden=(5,), seed=10)
        grid = np.linspace(0.0, 1.0, 10)
        f = GridFunction(grid, np.ones((10, 1)))
        cfg = _cfg(n=25, seed=31, max_iter=2, tol=0.0)
        target = np.exp(grid)[:, None]

        def fn():
            traj = model.solve(f, cfg)
            diff = engine.sub(traj.grid_fn.values, DTensor(target))
            return engine.tsum(engine.mul(diff, diff))

        assert engine.grad_check(fn, model.params(), eps=1e-5) < 1e-3
