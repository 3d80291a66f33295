"""Small dense networks used as learnable kernels and nonlinearities.

A KernelIntegralModel pairs two MLPs -- K(t, s) -> d x d and F(y) -> y' --
and solves the induced integral equation with the shared successive-
approximation loop, keeping every iterate on the gradient tape.
"""

from __future__ import annotations

import numpy as np

from . import engine
from .engine import DTensor
from .quadrature import GridFunction
from .solver import (
    IEProblem,
    SolverConfig,
    SolutionTrajectory,
    TimeQuadrature,
    Volterra,
    free_values,
    iterate_to_fixed_point,
    picard_step,
)


class MLP:
    """Fully connected layers with tanh hidden activations.

    Weights start uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]; the final
    layer is additionally damped by out_scale so freshly initialized models
    perturb the solver iteration only mildly.
    """

    def __init__(self, sizes, rng, name, activation="tanh", out_scale=1.0):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        self.name = name
        self.weights = []
        self.biases = []
        n_layers = len(self.sizes) - 1
        for i in range(n_layers):
            fan_in = self.sizes[i]
            bound = 1.0 / np.sqrt(fan_in)
            scale = out_scale if i == n_layers - 1 else 1.0
            w = rng.uniform(-bound, bound, size=(fan_in, self.sizes[i + 1])) * scale
            b = rng.uniform(-bound, bound, size=(1, self.sizes[i + 1])) * scale
            self.weights.append(DTensor(w))
            self.biases.append(DTensor(b))

    def params(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{self.name}.w{i}"] = w
            out[f"{self.name}.b{i}"] = b
        return out

    def __call__(self, x: DTensor) -> DTensor:
        act = engine.tanh if self.activation == "tanh" else engine.relu
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = engine.add(engine.matmul(h, w), b)
            if i != last:
                h = act(h)
        return h

    def n_params(self):
        return sum(p.size for p in self.params().values())


class KernelIntegralModel:
    """Learnable integral operator: MLP kernel and MLP nonlinearity.

    Kernel inputs (t, s) are affinely mapped from t_span onto [-1, 1]; the
    nonlinearity works in normalized state space, F(y) = y_scale *
    net(y / y_scale), so freshly initialized nets see O(1) activations and
    produce state-sized outputs. Both scales are fixed data-scale choices,
    not trained.
    """

    def __init__(self, d, t_span, hidden=(32,), nonlin_hidden=(32,),
                 y_scale=1.0, kernel_out_scale=0.1, seed=0, family=None):
        self.d = int(d)
        self.t_span = (float(t_span[0]), float(t_span[1]))
        self.y_scale = float(y_scale)
        self.family = family if family is not None else Volterra()
        rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0x6B65726E])
        self.kernel_net = MLP((2, *hidden, d * d), rng, "kernel",
                              out_scale=kernel_out_scale)
        self.nonlin_net = MLP((d, *nonlin_hidden, d), rng, "nonlin")

    def params(self):
        out = dict(self.kernel_net.params())
        out.update(self.nonlin_net.params())
        return out

    def n_params(self):
        return sum(p.size for p in self.params().values())

    def _scale_times(self, arr):
        t0, t1 = self.t_span
        return 2.0 * (arr - t0) / (t1 - t0) - 1.0

    def kernel(self, t_arr, s_arr):
        inputs = DTensor(np.stack(
            [self._scale_times(t_arr), self._scale_times(s_arr)], axis=1))
        flat = self.kernel_net(inputs)
        return engine.reshape(flat, (len(t_arr), self.d, self.d))

    def nonlinearity(self, y: DTensor) -> DTensor:
        return engine.smul(self.nonlin_net(engine.smul(y, 1.0 / self.y_scale)),
                           self.y_scale)

    def problem(self, free_fn) -> IEProblem:
        return IEProblem(
            d=self.d,
            free_fn=free_fn,
            kernel=self.kernel,
            nonlinearity=self.nonlinearity,
            family=self.family,
        )

    def solve(self, f: GridFunction, cfg: SolverConfig) -> SolutionTrajectory:
        """Solve from the free function as initial guess; f supplies the grid."""
        problem = self.problem(f)
        quad = TimeQuadrature(f.grid, self.family, cfg.mc)
        f_vals = free_values(problem, f.grid)
        init = f.with_values(DTensor(f_vals.copy())) if not f.batched else f
        return iterate_to_fixed_point(
            lambda y: picard_step(problem, y, cfg, quad=quad, f_vals=f_vals),
            init,
            cfg,
        )

    def solve_values(self, f: GridFunction, cfg: SolverConfig) -> DTensor:
        """Batched solve used in training: f is a batched GridFunction;
        returns the final iterate values [B, N, d] on the active record."""
        problem = self.problem(None)
        quad = TimeQuadrature(f.grid, self.family, cfg.mc)
        f_vals = f.values.data
        traj = iterate_to_fixed_point(
            lambda y: picard_step(problem, y, cfg, quad=quad, f_vals=f_vals),
            f,
            cfg,
        )
        return traj.grid_fn.values
