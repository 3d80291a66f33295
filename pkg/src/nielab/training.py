"""Model fitting: loss and metrics, Adam, free-function initialization
protocols, the training loop, extrapolation evaluation, and walltime
benchmarking.

The free function carries the initialization: an observed prefix (or
window) of each curve is copied onto the grid and the last observed value
is held for the remaining points. The loss is taken on the predicted
segment only.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import DTensor, Record
from .quadrature import GridFunction
from .solver import NonFiniteError, SolverConfig


class TrainingError(Exception):
    pass


@dataclass
class InitProtocol:
    """How much of each observed curve seeds the free function."""

    kind: str = "first-half"   # first-half | first-k | single-point
    k: int = 20

    def prefix(self, n_time):
        if self.kind == "first-half":
            return n_time // 2
        if self.kind == "first-k":
            if not 0 < self.k < n_time:
                raise TrainingError(f"init prefix k={self.k} outside (0, {n_time})")
            return self.k
        if self.kind == "single-point":
            return 1
        raise TrainingError(f"unknown init protocol {self.kind!r}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    epochs: int = 100
    batch_size: int = 10
    l2_weight: float = 0.0
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    init_protocol: InitProtocol = field(default_factory=InitProtocol)
    clip_norm: float = 10.0    # 0 disables clipping
    val_fraction: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise TrainingError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        if self.l2_weight < 0:
            raise TrainingError(f"l2_weight must be >= 0, got {self.l2_weight}")


@dataclass
class MetricsReport:
    mse: float
    r_squared: float
    r_squared_sd: float = 0.0
    per_point_abs_error: np.ndarray = None
    walltime_per_iteration: tuple = None   # (mean_seconds, sd_seconds)

    def to_dict(self):
        out = {
            "mse": self.mse,
            "r_squared": self.r_squared,
            "r_squared_sd": self.r_squared_sd,
        }
        if self.per_point_abs_error is not None:
            out["per_point_abs_error"] = [float(x) for x in self.per_point_abs_error]
        if self.walltime_per_iteration is not None:
            out["walltime_per_iteration"] = {
                "mean": self.walltime_per_iteration[0],
                "sd": self.walltime_per_iteration[1],
            }
        return out


def _values_of(x):
    if isinstance(x, GridFunction):
        return x.values
    return x if isinstance(x, DTensor) else DTensor(x)


def mse_loss(pred, obs) -> DTensor:
    """Mean over all entries of the squared difference (differentiable)."""
    p, o = _values_of(pred), _values_of(obs)
    if p.shape != o.shape:
        raise TrainingError(f"mse_loss: shape mismatch {p.shape} vs {o.shape}")
    diff = engine.sub(p, o)
    return engine.tmean(engine.mul(diff, diff))


def r_squared(pred, obs) -> float:
    """1 - SS_res/SS_tot about the observation mean, all channels jointly."""
    p = _values_of(pred).data.reshape(-1)
    o = _values_of(obs).data.reshape(-1)
    if p.shape != o.shape:
        raise TrainingError(f"r_squared: shape mismatch {p.shape} vs {o.shape}")
    ss_tot = float(np.sum((o - o.mean()) ** 2))
    if ss_tot == 0.0:
        raise TrainingError("r_squared: observations have zero variance")
    ss_res = float(np.sum((p - o) ** 2))
    return 1.0 - ss_res / ss_tot


class AdamState:
    """First/second moment accumulators, zero until the first step."""

    def __init__(self):
        self.step = 0
        self.m = {}
        self.v = {}


def adam_step(params, grads, state: AdamState, lr, l2_weight=0.0,
              betas=(0.9, 0.999), eps=1e-8):
    """Bias-corrected Adam update, in place on the parameter buffers.

    l2_weight adds l2_weight * theta to the gradient before the moment
    updates (plain L2 regularization, not decoupled decay).
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, DTensor) else np.asarray(g)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if l2_weight:
            g = g + l2_weight * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def hold_last_free_values(curve, k):
    """Observed prefix of length k, then the k-th value held to the end."""
    out = np.empty_like(curve)
    out[:k] = curve[:k]
    out[k:] = curve[k - 1]
    return out


def shifted_free_values(curve, k):
    """Observed window [k, 2k) re-based to the grid start, last value held.

    The model sees the same free-function layout it was trained with, but
    built from a window it never saw as an initialization."""
    n = curve.shape[0]
    if n < 2 * k:
        raise TrainingError(f"curve of {n} points too short for shifted window k={k}")
    out = np.empty_like(curve)
    out[:k] = curve[k:2 * k]
    out[k:] = curve[2 * k - 1]
    return out


def single_point_free_values(curve, k=0):
    """One observed time point held across the whole grid."""
    out = np.empty_like(curve)
    out[:] = curve[k]
    return out


def _clip_global(gvecs, clip_norm):
    if not clip_norm:
        return gvecs
    total = np.sqrt(sum(float(np.sum(g * g)) for g in gvecs.values()))
    if total > clip_norm:
        scale = clip_norm / total
        gvecs = {name: g * scale for name, g in gvecs.items()}
    return gvecs


def _train_iteration(model, params, f_batch, obs_batch, grid, k, cfg, adam):
    """One full step: batched solve, segment loss, backward, clip, Adam."""
    with Record() as rec:
        for p in params.values():
            rec.watch(p)
        f_gf = GridFunction(grid, DTensor(f_batch), batched=True)
        y = model.solve_values(f_gf, cfg.solver)
        pred_seg = engine.tslice(y, (slice(None), slice(k, None), slice(None)))
        loss = mse_loss(pred_seg, DTensor(obs_batch[:, k:]))
    grads = rec.backward(loss)
    gvecs = {name: rec.grad(grads, p).data for name, p in params.items()}
    gvecs = _clip_global(gvecs, cfg.clip_norm)
    adam_step(params, gvecs, adam, cfg.learning_rate, cfg.l2_weight)
    return loss.data.item()


def train_model(model, ds, cfg: TrainConfig):
    """Fit a model to a Dataset; returns (model, MetricsReport, loss_history).

    Deterministic for a fixed (config, dataset) pair under single-worker
    execution: batching order, initialization and quadrature streams are all
    seeded. Metrics are computed on the held-out split when val_fraction > 0,
    otherwise on the training curves.
    """
    if ds.space:
        raise TrainingError("training expects time-series datasets (no spatial axes)")
    n = ds.n_curves
    k = cfg.init_protocol.prefix(ds.n_time)
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    n_val = int(round(cfg.val_fraction * n))
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    if train_idx.size == 0:
        raise TrainingError("no training curves left after validation split")

    f_all = np.stack([hold_last_free_values(ds.values[i], k) for i in range(n)])
    params = model.params()
    adam = AdamState()
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        batch_losses = []
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            try:
                batch_losses.append(_train_iteration(
                    model, params, f_all[batch], ds.values[batch],
                    ds.grid, k, cfg, adam,
                ))
            except NonFiniteError as err:
                raise TrainingError(
                    f"epoch {epoch}, batch starting at {start}: {err}"
                ) from err
        history.append(float(np.mean(batch_losses)))

    eval_idx = val_idx if n_val else train_idx
    report = evaluate(model, ds, cfg.solver, k, curve_indices=eval_idx)
    return model, report, history


def _predict(model, ds, solver_cfg, f_builder, curve_indices, chunk=64):
    """Batched no-grad solve over selected curves; returns [C, N, d]."""
    grid = ds.grid
    preds = []
    for start in range(0, len(curve_indices), chunk):
        sel = curve_indices[start:start + chunk]
        f_batch = np.stack([f_builder(ds.values[i]) for i in sel])
        f_gf = GridFunction(grid, DTensor(f_batch), batched=True)
        preds.append(model.solve_values(f_gf, solver_cfg).data)
    return np.concatenate(preds, axis=0)


def _segment_report(pred_seg, true_seg):
    """Metrics on the predicted segment: per-curve R2, joint MSE, per-point error."""
    mse = float(np.mean((pred_seg - true_seg) ** 2))
    r2s = []
    for c in range(pred_seg.shape[0]):
        r2s.append(r_squared(DTensor(pred_seg[c]), DTensor(true_seg[c])))
    per_point = np.mean(np.abs(pred_seg - true_seg), axis=(0, 2))
    return MetricsReport(
        mse=mse,
        r_squared=float(np.mean(r2s)),
        r_squared_sd=float(np.std(r2s)),
        per_point_abs_error=per_point,
    )


def evaluate(model, ds, solver_cfg: SolverConfig, k, curve_indices=None) -> MetricsReport:
    """Prefix-initialized prediction quality on the segment after point k."""
    idx = np.arange(ds.n_curves) if curve_indices is None else np.asarray(curve_indices)
    preds = _predict(model, ds, solver_cfg,
                     lambda curve: hold_last_free_values(curve, k), idx)
    return _segment_report(preds[:, k:], ds.values[idx][:, k:])


def evaluate_shifted_init(model, ds, k=20, solver_cfg=None, mode="window") -> MetricsReport:
    """Extrapolation from an initialization window never seen in training.

    mode="window": the free function is built from points [k, 2k) placed at
    the grid start (a new initial condition in the training layout); model
    output at grid position j then lines up with ground-truth point k + j,
    and the remainder of the curve, points [2k, N), is scored.
    mode="single-point": one observed point (index k) is held everywhere and
    the points after it are scored.
    """
    if solver_cfg is None:
        solver_cfg = SolverConfig()
    n = ds.n_time
    idx = np.arange(ds.n_curves)
    if mode == "window":
        if n < 2 * k:
            raise TrainingError(f"need >= {2 * k} time points, dataset has {n}")
        preds = _predict(model, ds, solver_cfg,
                         lambda curve: shifted_free_values(curve, k), idx)
        return _segment_report(preds[:, k:n - k], ds.values[:, 2 * k:])
    if mode == "single-point":
        preds = _predict(model, ds, solver_cfg,
                         lambda curve: single_point_free_values(curve, k), idx)
        return _segment_report(preds[:, 1:n - k], ds.values[:, k + 1:])
    raise TrainingError(f"unknown shifted-init mode {mode!r}")


def benchmark_walltime(model_factory, ds, cfg: TrainConfig, repeats=5,
                       measure_iters=10) -> dict:
    """Seconds per full training iteration (solve + backward + optimizer),
    averaged over `repeats` runs with fresh random model initialization and
    one excluded warm-up iteration each."""
    n = ds.n_curves
    k = cfg.init_protocol.prefix(ds.n_time)
    batch = np.arange(min(cfg.batch_size, n))
    f_batch = np.stack([hold_last_free_values(ds.values[i], k) for i in batch])
    obs = ds.values[batch]
    samples = []
    for r in range(repeats):
        model = model_factory(cfg.seed + 1000 + r)
        params = model.params()
        adam = AdamState()
        _train_iteration(model, params, f_batch, obs, ds.grid, k, cfg, adam)
        t0 = time.perf_counter()
        for _ in range(measure_iters):
            _train_iteration(model, params, f_batch, obs, ds.grid, k, cfg, adam)
        samples.append((time.perf_counter() - t0) / measure_iters)
    return {
        "seconds_per_iteration_mean": float(np.mean(samples)),
        "seconds_per_iteration_sd": float(np.std(samples)),
        "samples": [float(s) for s in samples],
        "repeats": repeats,
        "measure_iters": measure_iters,
    }
