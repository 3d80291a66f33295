"""Masked multi-head self-attention as a drop-in integral operator.

Tokens are raw concatenations (y, space coords, time); attention replaces
the quadrature term in the successive-approximation loop, with no mask
playing the role of fixed integration bounds and a causal-in-time mask the
role of integration up to the current time. Per-head attention weights of
the last forward pass stay available for inspection and export.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import DTensor
from .quadrature import GridFunction
from .solver import (
    NonFiniteError,
    SolverConfig,
    SolutionTrajectory,
    iterate_to_fixed_point,
)


class AttentionError(Exception):
    pass


@dataclass
class MaskSpec:
    """Attention mask family: "none" (fixed bounds) or "causal-in-time"."""

    kind: str = "none"

    def __post_init__(self):
        if self.kind not in ("none", "causal-in-time"):
            raise AttentionError(f"unknown mask kind {self.kind!r}")


class TokenBatch:
    """Flattened (y, x, t) tokens plus the layout that maps token index back
    to its grid position. Token order is time-major, space row-major."""

    def __init__(self, tokens: DTensor, time_index, coords, grid, space_shape, d, batched):
        self.tokens = tokens
        self.time_index = time_index
        self.coords = coords
        self.grid = grid
        self.space_shape = space_shape
        self.d = d
        self.batched = batched

    @property
    def length(self):
        return self.tokens.shape[1]

    @property
    def coord_dims(self):
        return self.coords.shape[1]


def token_coordinates(grid, space):
    """Per-token coordinate channels [(x...), t] and time indices, time-major."""
    n_time = grid.size
    if space:
        cells = np.stack(np.meshgrid(*space, indexing="ij"), axis=-1)
        cells = cells.reshape(-1, len(space))
    else:
        cells = np.zeros((1, 0))
    n_space = cells.shape[0]
    coords = np.concatenate(
        [np.tile(cells, (n_time, 1)), np.repeat(grid, n_space)[:, None]], axis=1
    )
    time_index = np.repeat(np.arange(n_time), n_space)
    return coords, time_index


def embed_tokens(y: GridFunction) -> TokenBatch:
    """Concatenate solution values with their literal grid coordinates."""
    if not np.all(np.isfinite(y.values.data)):
        raise AttentionError("cannot embed non-finite values")
    coords, time_index = token_coordinates(y.grid, y.space)
    length = coords.shape[0]
    d = y.d
    batch = y.values.shape[0] if y.batched else 1
    flat = engine.reshape(y.values, (batch, length, d))
    coord_block = DTensor(np.broadcast_to(coords[None], (batch, length, coords.shape[1])).copy())
    tokens = engine.concat([flat, coord_block], axis=2)
    return TokenBatch(tokens, time_index, coords, y.grid,
                      y.space_shape, d, y.batched)


def strip_coordinates(tb: TokenBatch):
    """Inverse of embed_tokens on the value channels (numpy view for tests)."""
    vals = tb.tokens.data[:, :, : tb.d]
    shape = (len(tb.grid),) + tb.space_shape + (tb.d,)
    if tb.batched:
        return vals.reshape((vals.shape[0],) + shape)
    return vals.reshape(shape)


def build_mask(time_index, mask: MaskSpec):
    """Boolean [L, L] keep-matrix; None when every pair may interact."""
    if mask.kind == "none":
        return None
    return time_index[None, :] <= time_index[:, None]


class AttentionModel:
    """Token embedding plus one multi-head self-attention block.

    Coordinates enter raw (no positional encoding); the output projection is
    initialized 10x smaller than the rest so an untrained model stays close
    to the free function during the first solver sweeps.
    """

    def __init__(self, d, coord_dims, d_model=64, n_heads=4, seed=0):
        if d_model % n_heads != 0:
            raise AttentionError(
                f"d_model={d_model} not divisible by n_heads={n_heads}"
            )
        self.d = int(d)
        self.coord_dims = int(coord_dims)
        self.d_model = int(d_model)
        self.n_heads = int(n_heads)
        self.head_dim = d_model // n_heads
        rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0x617474])

        def uniform(fan_in, shape, scale=1.0):
            bound = 1.0 / np.sqrt(fan_in)
            return DTensor(rng.uniform(-bound, bound, size=shape) * scale)

        d_in = self.d + self.coord_dims
        self.w_in = uniform(d_in, (d_in, d_model))
        self.b_in = uniform(d_in, (1, 1, d_model))
        self.w_q = uniform(d_model, (d_model, d_model))
        self.b_q = uniform(d_model, (1, 1, d_model))
        self.w_k = uniform(d_model, (d_model, d_model))
        self.b_k = uniform(d_model, (1, 1, d_model))
        self.w_v = uniform(d_model, (d_model, d_model))
        self.b_v = uniform(d_model, (1, 1, d_model))
        self.w_out = uniform(d_model, (d_model, d), scale=0.1)
        self.b_out = uniform(d_model, (1, 1, d), scale=0.1)
        self._head_weights = None

    @property
    def last_attention(self):
        """Per-head weights [n_heads, B, L, L] of the latest forward pass."""
        if self._head_weights is None:
            return None
        return np.stack(self._head_weights)

    def params(self):
        return {
            "att.w_in": self.w_in, "att.b_in": self.b_in,
            "att.w_q": self.w_q, "att.b_q": self.b_q,
            "att.w_k": self.w_k, "att.b_k": self.b_k,
            "att.w_v": self.w_v, "att.b_v": self.b_v,
            "att.w_out": self.w_out, "att.b_out": self.b_out,
        }

    def n_params(self):
        return sum(p.size for p in self.params().values())


def attention_integral(model: AttentionModel, tb: TokenBatch, mask: MaskSpec) -> DTensor:
    """Scaled-dot-product multi-head attention over the token batch.

    Returns [B, L, d]; masked key positions receive weight exactly 0. The
    per-head weights are cached on the model as [n_heads, B, L, L].
    """
    tokens = tb.tokens
    if tokens.shape[-1] != model.d + model.coord_dims:
        raise AttentionError(
            f"token width {tokens.shape[-1]} does not match model input "
            f"{model.d + model.coord_dims}"
        )
    keep = build_mask(tb.time_index, mask)
    if keep is not None:
        keep = np.ascontiguousarray(keep, dtype=np.uint8)
    h = engine.add(engine.matmul(tokens, model.w_in), model.b_in)

    dh = model.head_dim
    head_outs = []
    head_weights = []
    for i in range(model.n_heads):
        wcols = (slice(None), slice(i * dh, (i + 1) * dh))
        bcols = (slice(None), slice(None), slice(i * dh, (i + 1) * dh))
        q_h = engine.add(engine.matmul(h, engine.tslice(model.w_q, wcols)),
                         engine.tslice(model.b_q, bcols))
        k_h = engine.add(engine.matmul(h, engine.tslice(model.w_k, wcols)),
                         engine.tslice(model.b_k, bcols))
        v_h = engine.add(engine.matmul(h, engine.tslice(model.w_v, wcols)),
                         engine.tslice(model.b_v, bcols))
        scores = engine.smul(engine.matmul(q_h, engine.transpose(k_h)), 1.0 / np.sqrt(dh))
        probs = engine.softmax(scores, mask=keep)
        head_weights.append(probs.data)
        head_outs.append(engine.matmul(probs, v_h))
    model._head_weights = head_weights
    merged = engine.concat(head_outs, axis=2) if model.n_heads > 1 else head_outs[0]
    return engine.add(engine.matmul(merged, model.w_out), model.b_out)


def solve_anie(model: AttentionModel, f: GridFunction, mask: MaskSpec,
               cfg: SolverConfig) -> SolutionTrajectory:
    """Successive approximation with attention as the integral term:
    y^{i+1} = f + attention(embed(y^i)). Same stopping rule and residual
    reporting as the quadrature solver; the final iteration's attention
    weights stay cached on the model."""
    f_data = f.values.data
    batch = f_data.shape[0] if f.batched else 1
    length = f.n_time * int(np.prod(f.space_shape or (1,), dtype=np.int64))
    f_flat = DTensor(f_data.reshape(batch, length, f.d).copy())

    def step(y: GridFunction) -> GridFunction:
        tb = embed_tokens(y)
        out = attention_integral(model, tb, mask)
        new_flat = engine.add(f_flat, out)
        if not np.all(np.isfinite(new_flat.data)):
            bad = ~np.isfinite(new_flat.data.reshape(batch, length, -1))
            tok = int(np.argwhere(bad.any(axis=(0, 2)))[0])
            t_idx = tb.time_index[tok]
            raise NonFiniteError(
                f"non-finite iterate value at t={f.grid[t_idx]} (token {tok})"
            )
        new_vals = engine.reshape(new_flat, y.values.shape)
        return y.with_values(new_vals)

    init = f.with_values(DTensor(f_data.copy()))
    return iterate_to_fixed_point(step, init, cfg)


def export_attention(model: AttentionModel, tb: TokenBatch, mask: MaskSpec,
                     out_dir=None):
    """Per-head weight matrices [n_heads, L, L] from the latest forward pass.

    With out_dir set, writes one CSV per head (row = query token) plus a
    layout.json mapping token index to its (x, t) position.
    """
    if model.last_attention is None:
        raise AttentionError("no forward pass has been run; nothing to export")
    weights = model.last_attention
    if weights.shape[-1] != tb.length:
        raise AttentionError(
            f"cached attention is for {weights.shape[-1]} tokens, batch has {tb.length}"
        )
    if weights.shape[1] != 1:
        raise AttentionError("attention export expects an unbatched token batch")
    weights = weights[:, 0]
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for i in range(weights.shape[0]):
            with open(os.path.join(out_dir, f"head_{i}.csv"), "w") as fh:
                for row in weights[i]:
                    fh.write(",".join(f"{x:.17g}" for x in row) + "\n")
        layout = [
            {
                "index": int(i),
                "x": [float(c) for c in tb.coords[i, :-1]],
                "t": float(tb.coords[i, -1]),
            }
            for i in range(tb.length)
        ]
        with open(os.path.join(out_dir, "layout.json"), "w") as fh:
            json.dump({"mask": mask.kind, "tokens": layout}, fh, indent=1)
    return weights


class AttentionIntegralModel:
    """Training-facing wrapper: an AttentionModel (or one per iteration)
    plus its mask, exposing the same solve surface as KernelIntegralModel."""

    def __init__(self, d, coord_dims=1, d_model=64, n_heads=4, seed=0,
                 mask=None, per_iteration=False, n_iterations=1):
        self.mask = mask if mask is not None else MaskSpec("causal-in-time")
        self.per_iteration = per_iteration
        count = int(n_iterations) if per_iteration else 1
        self.blocks = [
            AttentionModel(d, coord_dims, d_model=d_model, n_heads=n_heads,
                           seed=seed + 101 * i)
            for i in range(count)
        ]

    @property
    def model(self):
        return self.blocks[0]

    @property
    def last_attention(self):
        return self.blocks[-1].last_attention

    def params(self):
        if not self.per_iteration:
            return self.blocks[0].params()
        out = {}
        for i, blk in enumerate(self.blocks):
            for name, p in blk.params().items():
                out[f"iter{i}.{name}"] = p
        return out

    def n_params(self):
        return sum(p.size for p in self.params().values())

    def _block(self, iteration):
        if not self.per_iteration:
            return self.blocks[0]
        return self.blocks[min(iteration, len(self.blocks) - 1)]

    def solve(self, f: GridFunction, cfg: SolverConfig) -> SolutionTrajectory:
        if not self.per_iteration:
            return solve_anie(self.blocks[0], f, self.mask, cfg)
        counter = {"i": 0}
        f_flat = DTensor(f.values.data.copy())

        def step(y):
            blk = self._block(counter["i"])
            counter["i"] += 1
            tb = embed_tokens(y)
            out = attention_integral(blk, tb, self.mask)
            flat = engine.reshape(out, y.values.shape)
            return y.with_values(engine.add(f_flat, flat))

        init = f.with_values(DTensor(f.values.data.copy()))
        return iterate_to_fixed_point(step, init, cfg)

    def solve_values(self, f: GridFunction, cfg: SolverConfig) -> DTensor:
        return self.solve(f, cfg).grid_fn.values
