"""Monte Carlo integration over time intervals and box x interval domains,
plus the grid interpolation that lets integrands read a discretized function
between its nodes.

Sample streams are keyed by (seed, time index): every evaluation time gets
its own deterministic uniform block, so estimates are bitwise reproducible
and uncorrelated across the grid. Estimates are differentiable through the
integrand values (the bound lengths and sample positions are constants).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from . import engine
from .engine import DTensor


class QuadratureError(Exception):
    pass


@dataclass
class Interval:
    """Time bounds t -> [lower(t), upper(t)]."""

    lower: Callable[[float], float]
    upper: Callable[[float], float]

    @staticmethod
    def constant(a, b):
        return Interval(lambda t: a, lambda t: b)

    @staticmethod
    def causal(t0):
        """Integration from a fixed start up to the current time."""
        return Interval(lambda t: t0, lambda t: t)


@dataclass
class Box:
    """Axis-aligned spatial domain: per-axis [lo, hi]."""

    bounds: tuple

    def __post_init__(self):
        self.bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        for lo, hi in self.bounds:
            if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
                raise QuadratureError(f"invalid box axis [{lo}, {hi}]")

    @property
    def ndim(self):
        return len(self.bounds)

    @property
    def volume(self):
        vol = 1.0
        for lo, hi in self.bounds:
            vol *= hi - lo
        return vol


@dataclass
class SpaceTimeDomain:
    box: Box
    interval: Interval


@dataclass
class IntegrationSpec:
    """Monte Carlo configuration: sample count, stream seed, and the domain.

    domain may be left None when the caller (e.g. the IE solver) derives it
    from the equation family.
    """

    n_samples: int = 100
    seed: int = 0
    domain: object = None

    def __post_init__(self):
        if self.n_samples < 1:
            raise QuadratureError(f"n_samples must be >= 1, got {self.n_samples}")


class GridFunction:
    """A function discretized on a strictly increasing time grid.

    values holds one row per time point: shape [N, d], [N, X1..Xn, d] for
    spatial problems, or with a leading batch axis when batched=True.
    """

    def __init__(self, grid, values, space=None, batched=False):
        self.grid = np.ascontiguousarray(grid, dtype=np.float64)
        self.values = values if isinstance(values, DTensor) else DTensor(values)
        self.space = None
        self.batched = batched
        if self.grid.ndim != 1 or self.grid.size < 1:
            raise QuadratureError("grid must be a 1-d array of time points")
        if self.grid.size > 1 and not np.all(np.diff(self.grid) > 0):
            raise QuadratureError("grid must be strictly increasing")
        if space is not None:
            axes = tuple(np.ascontiguousarray(ax, dtype=np.float64) for ax in space)
            for ax in axes:
                if ax.size > 1:
                    steps = np.diff(ax)
                    if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
                        raise QuadratureError("spatial lattice must be regular")
            self.space = axes
        expected_rank = 2 + (len(self.space) if self.space else 0) + (1 if batched else 0)
        if self.values.ndim != expected_rank:
            raise QuadratureError(
                f"values rank {self.values.ndim} does not match grid layout "
                f"(expected {expected_rank})"
            )
        time_axis = 1 if batched else 0
        if self.values.shape[time_axis] != self.grid.size:
            raise QuadratureError(
                f"values have {self.values.shape[time_axis]} rows for "
                f"{self.grid.size} grid points"
            )

    @property
    def n_time(self):
        return self.grid.size

    @property
    def d(self):
        return self.values.shape[-1]

    @property
    def space_shape(self):
        return tuple(ax.size for ax in self.space) if self.space else ()

    def with_values(self, values):
        return GridFunction(self.grid, values, space=self.space, batched=self.batched)


def interp_weights(grid, queries):
    """Segment indices and fractional weights for linear interpolation.

    Queries must lie inside [grid[0], grid[-1]]; exact node hits reproduce
    the node value bitwise.
    """
    queries = np.asarray(queries, dtype=np.float64)
    if grid.size < 2:
        raise QuadratureError("interpolation needs at least two grid points")
    if queries.size and (queries.min() < grid[0] or queries.max() > grid[-1]):
        raise QuadratureError(
            f"query outside grid range [{grid[0]}, {grid[-1]}]"
        )
    idx = np.clip(np.searchsorted(grid, queries, side="right") - 1, 0, grid.size - 2)
    w = (queries - grid[idx]) / (grid[idx + 1] - grid[idx])
    return idx.astype(np.int64), w


def interp_values(f: GridFunction, queries):
    """Differentiable piecewise-linear interpolation at many query times.

    Returns a DTensor shaped [M, ...] matching f's per-time layout (with the
    batch axis leading when f is batched).
    """
    idx, w = interp_weights(f.grid, queries)
    vals = f.values
    n = f.n_time
    trailing = vals.shape[2:] if f.batched else vals.shape[1:]
    batch = vals.shape[0] if f.batched else 1
    flat_d = int(np.prod(trailing, dtype=np.int64))
    flat = engine.reshape(vals, (batch, n, flat_d))
    picked = engine.interp(flat, idx, w, n)
    m = len(np.atleast_1d(queries))
    if f.batched:
        return engine.reshape(picked, (batch, m) + trailing)
    return engine.reshape(picked, (m,) + trailing)


def interp_linear(f: GridFunction, query_t: float):
    """Interpolate f at one time; returns a DTensor of f's per-time shape."""
    out = interp_values(f, np.asarray([float(query_t)]))
    key = (slice(None), 0) if f.batched else (0,)
    return engine.tslice(out, key)


@lru_cache(maxsize=256)
def _uniform_block(seed, key, n, cols):
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, key & 0xFFFFFFFFFFFFFFFF])
    block = rng.random((n, cols)) if cols > 1 else rng.random(n)
    block.flags.writeable = False
    return block


def _time_key(t, t_index):
    if t_index is not None:
        return int(t_index)
    return int(np.float64(t).view(np.uint64))


def _check_samples(vals, n):
    arr = vals.data if isinstance(vals, DTensor) else np.asarray(vals)
    if arr.ndim != 2 or arr.shape[0] != n:
        raise QuadratureError(
            f"integrand must return [n_samples, d] values, got shape {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise QuadratureError("non-finite integrand sample")


def mc_integrate(integrand, t, spec: IntegrationSpec, t_index=None):
    """Plain Monte Carlo estimate of the integral of `integrand` over the
    interval spec.domain evaluated at global time t.

    integrand maps an array of local times [n] to values [n, d] (DTensor or
    array). The estimate is (upper-lower) * mean(integrand(samples)) with
    samples deterministic in (seed, t) -- or (seed, t_index) when an index
    is supplied. A degenerate interval yields the zero vector exactly.
    """
    dom = spec.domain
    if not isinstance(dom, Interval):
        raise QuadratureError("mc_integrate needs an Interval domain")
    a = float(dom.lower(t))
    b = float(dom.upper(t))
    if not (np.isfinite(a) and np.isfinite(b)):
        raise QuadratureError(f"non-finite bounds [{a}, {b}] at t={t}")
    if a > b:
        raise QuadratureError(f"lower bound {a} exceeds upper bound {b} at t={t}")
    u = _uniform_block(spec.seed, _time_key(t, t_index), spec.n_samples, 1)
    points = a + (b - a) * u
    vals = integrand(points)
    _check_samples(vals, spec.n_samples)
    if not isinstance(vals, DTensor):
        vals = DTensor(vals)
    return engine.smul(engine.tmean(vals, axis=0), b - a)


def mc_integrate_spacetime(integrand, t, spec: IntegrationSpec, t_index=None):
    """Monte Carlo estimate over a Box x Interval product domain.

    integrand maps (x_points [n, k], s_points [n]) to values [n, d]. The
    estimate is volume(box) * (upper-lower) * mean(...); a zero-volume box
    or degenerate interval yields the zero vector exactly.
    """
    dom = spec.domain
    if not isinstance(dom, SpaceTimeDomain):
        raise QuadratureError("mc_integrate_spacetime needs a SpaceTimeDomain")
    a = float(dom.interval.lower(t))
    b = float(dom.interval.upper(t))
    if not (np.isfinite(a) and np.isfinite(b)):
        raise QuadratureError(f"non-finite bounds [{a}, {b}] at t={t}")
    if a > b:
        raise QuadratureError(f"lower bound {a} exceeds upper bound {b} at t={t}")
    k = dom.box.ndim
    u = _uniform_block(spec.seed, _time_key(t, t_index), spec.n_samples, k + 1)
    u = u.reshape(spec.n_samples, k + 1)
    lo = np.array([ax[0] for ax in dom.box.bounds])
    hi = np.array([ax[1] for ax in dom.box.bounds])
    x_points = lo + (hi - lo) * u[:, :k]
    s_points = a + (b - a) * u[:, k]
    vals = integrand(x_points, s_points)
    _check_samples(vals, spec.n_samples)
    if not isinstance(vals, DTensor):
        vals = DTensor(vals)
    return engine.smul(engine.tmean(vals, axis=0), dom.box.volume * (b - a))
