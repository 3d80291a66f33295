"""Synthetic trajectory datasets and their on-disk format.

Generators cover a predator-prey system, the Lorenz system, and 2D curves
produced by solving a causal integral equation with a cosine kernel and
tanh nonlinearity. Datasets serialize as a directory: manifest.json plus
one CSV per curve (rows = time points, spatial lattices flattened
row-major), with floats printed at 17 significant digits so a write/read
round trip is bitwise exact.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .quadrature import GridFunction, IntegrationSpec
from .solver import (
    IEProblem,
    NonFiniteError,
    SolverConfig,
    SolutionTrajectory,
    Volterra,
    default_init,
    solve_ie,
)


class DatagenError(Exception):
    pass


@dataclass
class Dataset:
    """A batch of trajectories on one shared grid.

    values: [n_curves, N_time, (X1..Xn,) d]; space is the optional lattice
    (tuple of per-axis coordinate arrays); manifest records provenance.
    """

    values: np.ndarray
    grid: np.ndarray
    space: tuple = None
    manifest: dict = field(default_factory=dict)
    channels: tuple = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        self.grid = np.ascontiguousarray(self.grid, dtype=np.float64)
        if self.channels is None:
            self.channels = tuple(f"y{i}" for i in range(self.values.shape[-1]))
        spatial_rank = len(self.space) if self.space else 0
        if self.values.ndim != 3 + spatial_rank:
            raise DatagenError(
                f"values rank {self.values.ndim} inconsistent with "
                f"{spatial_rank} spatial axes"
            )
        if self.values.shape[1] != self.grid.size:
            raise DatagenError(
                f"{self.values.shape[1]} time rows vs {self.grid.size} grid points"
            )

    @property
    def n_curves(self):
        return self.values.shape[0]

    @property
    def n_time(self):
        return self.grid.size

    @property
    def d(self):
        return self.values.shape[-1]

    @property
    def space_shape(self):
        return tuple(ax.size for ax in self.space) if self.space else ()

    def curve(self, i) -> GridFunction:
        return GridFunction(self.grid, self.values[i], space=self.space)


def rk4_integrate(fieldfn, y0, grid, substeps=1):
    """Classical fixed-step RK4 along `grid`, with `substeps` uniform
    internal steps per grid interval.

    fieldfn(state, t) -> state; y0 may be [d] or [B, d] to advance a whole
    batch at once. Returns [N, d] (or [B, N, d]).
    """
    y0 = np.asarray(y0, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    batched = y0.ndim == 2
    y = y0.copy()
    out = np.empty((grid.size,) + y0.shape)
    out[0] = y
    for j in range(1, grid.size):
        h = (grid[j] - grid[j - 1]) / substeps
        t = grid[j - 1]
        for _ in range(substeps):
            k1 = np.asarray(fieldfn(y, t))
            k2 = np.asarray(fieldfn(y + 0.5 * h * k1, t + 0.5 * h))
            k3 = np.asarray(fieldfn(y + 0.5 * h * k2, t + 0.5 * h))
            k4 = np.asarray(fieldfn(y + h * k3, t + h))
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t += h
        if not np.all(np.isfinite(y)):
            raise NonFiniteError(f"non-finite state at t={grid[j]} (step {j})")
        out[j] = y
    if batched:
        return np.swapaxes(out, 0, 1)
    return out


def lotka_volterra_field(a, b, c, d):
    """Predator-prey vector field dx = a x - b x y, dy = -c y + d b x y.

    Coexistence equilibrium sits at x = c/(d b), y = a/b. Parameters may be
    scalars or per-curve arrays matching a batched state."""
    def fieldfn(state, t):
        x, y = state[..., 0], state[..., 1]
        return np.stack([a * x - b * x * y, -c * y + d * b * x * y], axis=-1)
    return fieldfn


def gen_lotka_volterra(n_curves=100, seed=0, n_time=100, t_max=15.0, substeps=20):
    """Predator-prey curves: per-curve rates a,b ~ U[0.5,1.5], c ~ U[0.5,2.5],
    d ~ U[0.25,1.25], all started from 10 prey and 5 predators."""
    grid = np.linspace(0.0, t_max, n_time)
    params = np.empty((n_curves, 4))
    for i in range(n_curves):
        rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, i])
        params[i] = [
            rng.uniform(0.5, 1.5),
            rng.uniform(0.5, 1.5),
            rng.uniform(0.5, 2.5),
            rng.uniform(0.25, 1.25),
        ]
    a, b, c, d = params.T
    fieldfn = lotka_volterra_field(a, b, c, d)
    y0 = np.tile([10.0, 5.0], (n_curves, 1))
    values = rk4_integrate(fieldfn, y0, grid, substeps=substeps)
    manifest = {
        "generator": "lotka-volterra",
        "seed": int(seed),
        "params": {"n_curves": n_curves, "n_time": n_time, "t_max": t_max,
                   "substeps": substeps, "x0": [10.0, 5.0]},
    }
    return Dataset(values, grid, manifest=manifest, channels=("x", "y"))


LORENZ_SIGMA = 10.0
LORENZ_RHO = 28.0
LORENZ_BETA = 8.0 / 3.0


def lorenz_field(state, t):
    x, y, z = state[..., 0], state[..., 1], state[..., 2]
    return np.stack([
        LORENZ_SIGMA * (y - x),
        x * (LORENZ_RHO - z) - y,
        x * y - LORENZ_BETA * z,
    ], axis=-1)


def gen_lorenz(n_curves=100, seed=0, n_time=100, t_max=100.0, substeps=200):
    """Lorenz system at sigma=10, rho=28, beta=8/3 from initial states
    uniform in [0, 0.5]^3. The coarse output grid is subsampled from a much
    finer internal step; the system is far too stiff for unit-size RK4 steps."""
    grid = np.linspace(0.0, t_max, n_time)
    y0 = np.empty((n_curves, 3))
    for i in range(n_curves):
        rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, i])
        y0[i] = rng.uniform(0.0, 0.5, size=3)
    values = rk4_integrate(lorenz_field, y0, grid, substeps=substeps)
    manifest = {
        "generator": "lorenz",
        "seed": int(seed),
        "params": {"n_curves": n_curves, "n_time": n_time, "t_max": t_max,
                   "substeps": substeps, "sigma": LORENZ_SIGMA,
                   "rho": LORENZ_RHO, "beta": LORENZ_BETA},
    }
    return Dataset(values, grid, manifest=manifest, channels=("x", "y", "z"))


def spiral_free_fn(theta):
    """Two antiphase cosine channels; theta scales the time argument."""
    def f(t):
        return np.array([np.cos(theta * t), np.cos(theta * t + np.pi)])
    return f


def spiral_kernel(t_arr, s_arr):
    """cos(2*pi*t - 2*pi*s) times the 2x2 identity, vectorized."""
    c = np.cos(2.0 * np.pi * t_arr - 2.0 * np.pi * s_arr)
    out = np.zeros((len(t_arr), 2, 2))
    out[:, 0, 0] = c
    out[:, 1, 1] = c
    return out


def spiral_nonlinearity(y):
    return engine.tanh(engine.smul(y, 2.0 * np.pi))


def spiral_problem(theta=1.0) -> IEProblem:
    return IEProblem(
        d=2,
        free_fn=spiral_free_fn(theta),
        kernel=spiral_kernel,
        nonlinearity=spiral_nonlinearity,
        family=Volterra(),
    )


def _spiral_curve(args):
    seed, i, n_time, n_samples, max_iter, theta_range = args
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, i])
    theta = 1.0 if i == 0 else rng.uniform(*theta_range)
    mc_seed = int(rng.integers(0, 2**63))
    grid = np.linspace(0.0, 1.0, n_time)
    cfg = SolverConfig(
        max_iter=max_iter,
        tolerance=0.0,
        mc=IntegrationSpec(n_samples=n_samples, seed=mc_seed),
    )
    problem = spiral_problem(theta)
    traj = solve_ie(problem, default_init(problem, grid), cfg)
    return i, theta, traj.grid_fn.values.data


def gen_ie_spirals(n_curves=500, seed=0, n_time=100, n_samples=10000,
                   max_iter=3, theta_range=(1.0, 6.0), workers=1):
    """2D curves from the causal cosine-kernel integral equation on [0, 1].

    Curve 0 uses the base free function (theta=1); the others draw theta
    uniformly from theta_range so the dataset holds distinct curves. Curves
    solve independently, so workers > 1 parallelizes without changing the
    result (per-curve seed streams).
    """
    grid = np.linspace(0.0, 1.0, n_time)
    values = np.empty((n_curves, n_time, 2))
    thetas = np.empty(n_curves)
    jobs = [(seed, i, n_time, n_samples, max_iter, theta_range)
            for i in range(n_curves)]
    if workers > 1:
        from multiprocessing import Pool
        with Pool(workers) as pool:
            results = pool.map(_spiral_curve, jobs)
    else:
        results = map(_spiral_curve, jobs)
    for i, theta, curve in results:
        thetas[i] = theta
        values[i] = curve
    manifest = {
        "generator": "ie-spirals",
        "seed": int(seed),
        "params": {"n_curves": n_curves, "n_time": n_time,
                   "n_samples": n_samples, "max_iter": max_iter,
                   "theta_range": list(theta_range),
                   "thetas": [float(x) for x in thetas]},
    }
    return Dataset(values, grid, manifest=manifest, channels=("y0", "y1"))


def dataset_from_trajectories(trajs, grid, generator="solve", channels=None,
                              manifest_extra=None):
    """Bundle solver outputs (SolutionTrajectory or arrays) into a Dataset."""
    rows = []
    for tr in trajs:
        arr = tr.grid_fn.values.data if isinstance(tr, SolutionTrajectory) else np.asarray(tr)
        rows.append(arr)
    values = np.stack(rows)
    manifest = {"generator": generator, "seed": None, "params": {}}
    if manifest_extra:
        manifest.update(manifest_extra)
    return Dataset(values, grid, manifest=manifest, channels=channels)


# ---------------------------------------------------------------------------
# Disk format.

def _column_names(channels, space_shape):
    if not space_shape:
        return list(channels)
    cells = int(np.prod(space_shape))
    return [f"{ch}_c{cell}" for cell in range(cells) for ch in channels]


def write_dataset(ds: Dataset, path):
    """Write manifest.json + curves/curve_<k>.csv under `path`."""
    os.makedirs(os.path.join(path, "curves"), exist_ok=True)
    manifest = dict(ds.manifest)
    manifest.update({
        "n_curves": ds.n_curves,
        "n_time": ds.n_time,
        "channels": list(ds.channels),
        "grid": [float(t) for t in ds.grid],
        "space": {"axes": [[float(x) for x in ax] for ax in ds.space]} if ds.space else None,
        "curve_files": [f"curves/curve_{k}.csv" for k in range(ds.n_curves)],
    })
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    names = _column_names(ds.channels, ds.space_shape)
    flat = ds.values.reshape(ds.n_curves, ds.n_time, -1)
    for k in range(ds.n_curves):
        with open(os.path.join(path, f"curves/curve_{k}.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(names)
            for row in flat[k]:
                writer.writerow([f"{x:.17g}" for x in row])


def read_dataset(path) -> Dataset:
    """Read a dataset directory; raises DatagenError on malformed content."""
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DatagenError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    grid = np.asarray(manifest["grid"], dtype=np.float64)
    channels = tuple(manifest["channels"])
    space = None
    space_shape = ()
    if manifest.get("space"):
        space = tuple(np.asarray(ax, dtype=np.float64) for ax in manifest["space"]["axes"])
        space_shape = tuple(ax.size for ax in space)
    n_curves = int(manifest["n_curves"])
    n_time = int(manifest["n_time"])
    files = manifest.get("curve_files", [])
    if len(files) != n_curves:
        raise DatagenError(
            f"manifest lists {n_curves} curves but {len(files)} curve files"
        )
    cells = int(np.prod(space_shape)) if space_shape else 1
    width = cells * len(channels)
    flat = np.empty((n_curves, n_time, width))
    for k, rel in enumerate(files):
        fpath = os.path.join(path, rel)
        if not os.path.exists(fpath):
            raise DatagenError(f"missing curve file: {fpath}")
        with open(fpath, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or len(header) != width:
                raise DatagenError(
                    f"{rel}: expected {width} columns, found "
                    f"{0 if header is None else len(header)}"
                )
            rows = list(reader)
        if len(rows) != n_time:
            raise DatagenError(f"{rel}: expected {n_time} rows, found {len(rows)}")
        for r, row in enumerate(rows):
            if len(row) != width:
                raise DatagenError(f"{rel}: row {r} has {len(row)} cells, expected {width}")
            for c, cell in enumerate(row):
                try:
                    flat[k, r, c] = float(cell)
                except ValueError:
                    raise DatagenError(
                        f"{rel}: non-numeric cell at row {r}, column {c}: {cell!r}"
                    ) from None
    values = flat.reshape((n_curves, n_time) + space_shape + (len(channels),))
    keep = {k: v for k, v in manifest.items()
            if k not in ("grid", "space", "curve_files", "channels", "n_curves", "n_time")}
    return Dataset(values, grid, space=space, manifest=keep, channels=channels)
