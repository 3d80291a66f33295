"""Iterative solver for integral equations of the form

    y(t) = f(t) + integral_{alpha(t)}^{beta(t)} K(t, s) F(y(s)) ds

by successive approximation: y^{i+1} = f + quadrature(K, F, y^i), repeated
until consecutive iterates stop moving or the iteration budget runs out.
K and F are pluggable -- closed-form callables or differentiable networks --
so a recorded solve backpropagates through every unrolled iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from . import engine
from .engine import DTensor
from .quadrature import (
    GridFunction,
    IntegrationSpec,
    Interval,
    QuadratureError,
    _uniform_block,
    interp_weights,
)


class SolverError(Exception):
    pass


class NonFiniteError(SolverError):
    pass


@dataclass
class Volterra:
    """Causal family: integrate from the grid start up to the current time."""


@dataclass
class Fredholm:
    """Fixed-bounds family: integrate over [a, b] for every evaluation time."""

    a: float
    b: float

    def __post_init__(self):
        if self.b < self.a:
            raise SolverError(f"Fredholm bounds need a <= b, got [{self.a}, {self.b}]")


@dataclass
class IEProblem:
    """One integral equation: free function, kernel, nonlinearity, bounds.

    free_fn: t -> vector[d] callable, or a GridFunction holding the values.
    kernel: (t_array [M], s_array [M]) -> [M, d, d] (DTensor or ndarray).
    nonlinearity: DTensor [M, d] -> DTensor [M, d].
    """

    d: int
    free_fn: Union[Callable, GridFunction]
    kernel: Callable
    nonlinearity: Callable
    family: Union[Volterra, Fredholm]


@dataclass
class SolverConfig:
    max_iter: int = 3
    tolerance: float = 1e-3
    mc: IntegrationSpec = field(default_factory=IntegrationSpec)
    metric: str = "relative-l2"

    def __post_init__(self):
        if self.max_iter < 1:
            raise SolverError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.tolerance < 0:
            raise SolverError(f"tolerance must be >= 0, got {self.tolerance}")


@dataclass
class SolutionTrajectory:
    grid_fn: GridFunction
    residuals: list
    iterations_used: int
    converged: bool


def residual_metric(a: GridFunction, b: GridFunction, metric="relative-l2"):
    """Distance between two iterates: relative-l2 or max-abs."""
    if a.grid.shape != b.grid.shape or not np.array_equal(a.grid, b.grid):
        raise SolverError("residual_metric: grids differ")
    va, vb = a.values.data, b.values.data
    if va.shape != vb.shape:
        raise SolverError(f"residual_metric: value shapes differ: {va.shape} vs {vb.shape}")
    name = metric.lower()
    if name == "relative-l2":
        return float(np.linalg.norm(va - vb) / (np.linalg.norm(vb) + 1e-12))
    if name == "max-abs":
        return float(np.max(np.abs(va - vb)))
    raise SolverError(f"unknown metric {metric!r}")


def family_interval(family, grid) -> Interval:
    if isinstance(family, Volterra):
        return Interval.causal(grid[0])
    if isinstance(family, Fredholm):
        if family.a < grid[0] or family.b > grid[-1]:
            raise SolverError(
                f"Fredholm bounds [{family.a}, {family.b}] outside grid "
                f"[{grid[0]}, {grid[-1]}]"
            )
        return Interval.constant(family.a, family.b)
    raise SolverError(f"unknown equation family {family!r}")


def free_values(problem: IEProblem, grid) -> np.ndarray:
    """Free function sampled on the grid, shape [N, d]."""
    f = problem.free_fn
    if isinstance(f, GridFunction):
        if f.batched or f.space is not None:
            raise SolverError("free-function GridFunction must be a plain [N, d] series")
        if np.array_equal(f.grid, grid):
            return f.values.data
        idx, w = interp_weights(f.grid, grid)
        lo, hi = f.values.data[idx], f.values.data[idx + 1]
        return (1.0 - w)[:, None] * lo + w[:, None] * hi
    out = np.stack([np.asarray(f(float(t)), dtype=np.float64).reshape(-1) for t in grid])
    if out.shape[1] != problem.d:
        raise SolverError(f"free function returned dimension {out.shape[1]}, expected {problem.d}")
    return out


class TimeQuadrature:
    """Fixed Monte Carlo sample layout for one (grid, family, spec) triple.

    Per grid time t_j the sample block is the same uniform stream that
    mc_integrate(t_index=j) draws, so a vectorized solver step reproduces
    the per-time estimates exactly.
    """

    def __init__(self, grid, family, spec: IntegrationSpec):
        interval = family_interval(family, grid)
        n = spec.n_samples
        lows = np.array([interval.lower(t) for t in grid])
        highs = np.array([interval.upper(t) for t in grid])
        if np.any(highs < lows):
            raise QuadratureError("integration bounds inverted on the grid")
        blocks = np.stack([
            _uniform_block(spec.seed, j, n, 1) for j in range(grid.size)
        ])
        self.points = lows[:, None] + (highs - lows)[:, None] * blocks   # [N, n]
        self.lengths = highs - lows                                      # [N]
        self.idx, self.w = interp_weights(grid, self.points.reshape(-1))
        self.n_samples = n
        self.t_rep = np.repeat(grid, n)
        self.s_flat = self.points.reshape(-1)


def _apply_integral_operator(problem, y: GridFunction, quad: TimeQuadrature):
    """Differentiable evaluation of the quadrature term at every grid time.

    Returns a DTensor [B, N, d] (B=1 when y is unbatched).
    """
    grid = y.grid
    n_time, n, d = grid.size, quad.n_samples, problem.d
    vals = y.values
    batch = vals.shape[0] if y.batched else 1
    flat = engine.reshape(vals, (batch, n_time, d))

    y_s = engine.interp(flat, quad.idx, quad.w, n_time)        # [B, N*n, d]
    f_of_y = problem.nonlinearity(engine.reshape(y_s, (batch * n_time * n, d)))
    if not isinstance(f_of_y, DTensor):
        f_of_y = DTensor(f_of_y)
    if f_of_y.shape != (batch * n_time * n, d):
        raise SolverError(
            f"nonlinearity changed dimension: got {f_of_y.shape}, "
            f"expected {(batch * n_time * n, d)}"
        )

    k_vals = problem.kernel(quad.t_rep, quad.s_flat)
    if not isinstance(k_vals, DTensor):
        k_vals = DTensor(k_vals)
    if k_vals.shape != (n_time * n, d, d):
        raise SolverError(
            f"kernel must return [{n_time * n}, {d}, {d}], got {k_vals.shape}"
        )

    f3 = engine.reshape(f_of_y, (batch, n_time * n, d))
    integrand = engine.rowmatvec(k_vals, f3)                   # [B, N*n, d]
    integrand = engine.reshape(integrand, (batch, n_time, n, d))
    means = engine.tmean(integrand, axis=2)                    # [B, N, d]
    scale = DTensor(quad.lengths.reshape(1, n_time, 1))
    return engine.mul(means, scale)


def picard_step(problem: IEProblem, y_i: GridFunction, cfg: SolverConfig,
                quad: TimeQuadrature = None, f_vals=None) -> GridFunction:
    """One successive-approximation update: f + quadrature(K, F, y_i)."""
    grid = y_i.grid
    if quad is None:
        quad = TimeQuadrature(grid, problem.family, cfg.mc)
    if f_vals is None:
        f_vals = free_values(problem, grid)
    integral = _apply_integral_operator(problem, y_i, quad)
    batch = y_i.values.shape[0] if y_i.batched else 1
    if f_vals.ndim == 2:
        f_block = f_vals.reshape(1, grid.size, problem.d)
    else:
        f_block = f_vals
    new_vals = engine.add(DTensor(np.broadcast_to(f_block, (batch, grid.size, problem.d)).copy()),
                          integral)
    if not y_i.batched:
        new_vals = engine.reshape(new_vals, (grid.size, problem.d))
    bad = ~np.isfinite(new_vals.data)
    if bad.any():
        j = int(np.argwhere(bad.reshape(batch, grid.size, -1).any(axis=(0, 2)))[0, 0])
        raise NonFiniteError(f"non-finite iterate value at t={grid[j]} (grid index {j})")
    return y_i.with_values(new_vals)


def iterate_to_fixed_point(step, init: GridFunction, cfg: SolverConfig) -> SolutionTrajectory:
    """Shared solver loop: run `step` until the residual metric is within
    tolerance or max_iter is reached. Non-convergence is reported, not raised.
    """
    y = init
    residuals = []
    converged = False
    for _ in range(cfg.max_iter):
        y_next = step(y)
        residuals.append(residual_metric(y_next, y, cfg.metric))
        y = y_next
        if residuals[-1] <= cfg.tolerance:
            converged = True
            break
    return SolutionTrajectory(
        grid_fn=y,
        residuals=residuals,
        iterations_used=len(residuals),
        converged=converged,
    )


def default_init(problem: IEProblem, grid) -> GridFunction:
    """Zeroth iterate: the free function sampled on the grid."""
    return GridFunction(grid, free_values(problem, grid))


def solve_ie(problem: IEProblem, init: GridFunction, cfg: SolverConfig) -> SolutionTrajectory:
    """Solve the integral equation by successive approximation from `init`."""
    grid = init.grid
    quad = TimeQuadrature(grid, problem.family, cfg.mc)
    f_vals = free_values(problem, grid)
    return iterate_to_fixed_point(
        lambda y: picard_step(problem, y, cfg, quad=quad, f_vals=f_vals),
        init,
        cfg,
    )


def kernel_from_scalar(fn, d):
    """Vectorize a scalar (t, s) -> [d, d] kernel over sample arrays."""
    def kernel(t_arr, s_arr):
        return np.stack([
            np.asarray(fn(float(t), float(s)), dtype=np.float64).reshape(d, d)
            for t, s in zip(t_arr, s_arr)
        ])
    return kernel


def scaled_identity_kernel(scale, d):
    """K(t, s) = scale * I, vectorized."""
    def kernel(t_arr, s_arr):
        out = np.zeros((len(t_arr), d, d))
        out[:, np.arange(d), np.arange(d)] = scale
        return out
    return kernel


def identity_nonlinearity(y):
    return y
