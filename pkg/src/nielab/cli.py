"""Command line front end: generate / solve / train / eval / bench / attn-dump.

Every run resolves its options as flags > config file > built-in defaults
(> NIELAB_SEED for the seed), then writes the resolved snapshot to
<out>/config.json and its results to <out>/metrics.json, so re-running with
--config <out>/config.json reproduces the run. Exit codes: 0 success,
1 usage error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import backend, checkpoint, datagen, engine, training
from ._svg import heatmap_svg, line_svg
from .attention import (
    AttentionIntegralModel,
    MaskSpec,
    embed_tokens,
    export_attention,
)
from .datagen import DatagenError, Dataset, read_dataset, write_dataset
from .engine import EngineError
from .networks import KernelIntegralModel
from .quadrature import GridFunction, IntegrationSpec, QuadratureError
from .solver import (
    Fredholm,
    IEProblem,
    NonFiniteError,
    SolverConfig,
    SolverError,
    Volterra,
    default_init,
    identity_nonlinearity,
    scaled_identity_kernel,
    solve_ie,
)
from .training import InitProtocol, TrainConfig, TrainingError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

_UNSET = object()


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# Option tables: (flags, dest, type, default, help[, choices]).
_COMMON = [
    (("--out",), "out", str, None, "output directory (default: runs/<command>)"),
    (("--seed",), "seed", int, 0, "global seed; NIELAB_SEED is the fallback"),
    (("--config",), "config", str, None, "JSON config file with flat dotted keys"),
    (("--workers",), "workers", int, 1, "worker processes; 1 guarantees determinism"),
]

_SOLVER_OPTS = [
    (("--max-iter",), "max_iter", int, 3, "solver iteration budget"),
    (("--tolerance",), "tolerance", float, 1e-3, "residual stopping tolerance"),
    (("--n-samples",), "n_samples", int, 100, "Monte Carlo samples per time point"),
    (("--metric",), "metric", str, "relative-l2", "residual metric", ("relative-l2", "max-abs")),
]

_ARCH_OPTS = [
    (("--d-model",), "d_model", int, 64, "attention embedding width"),
    (("--n-heads",), "n_heads", int, 4, "attention heads"),
    (("--mask",), "mask", str, "causal-in-time", "attention mask", ("none", "causal-in-time")),
    (("--hidden",), "hidden", str, "32", "kernel net hidden sizes, comma separated"),
    (("--nonlin-hidden",), "nonlin_hidden", str, "32", "nonlinearity net hidden sizes"),
    (("--y-scale",), "y_scale", str, "auto", "state scale fed to the nets, or 'auto'"),
]

_TRAIN_OPTS = [
    (("--model",), "model", str, "anie", "model kind", ("nie", "anie")),
    (("--data",), "data", str, None, "dataset directory"),
    (("--epochs",), "epochs", int, 300, "training epochs"),
    (("--lr",), "lr", float, 1e-2, "Adam learning rate"),
    (("--l2",), "l2", float, 0.0, "L2 regularization weight"),
    (("--batch-size",), "batch_size", int, 25, "curves per batch"),
    (("--init",), "init", str, "first-k", "initialization protocol",
     ("first-half", "first-k", "single-point")),
    (("--k",), "k", int, 20, "prefix/window length for the init protocol"),
    (("--clip-norm",), "clip_norm", float, 10.0, "gradient clip (0 disables)"),
    (("--val-fraction",), "val_fraction", float, 0.0, "held-out fraction for metrics"),
]

_TABLES = {
    "generate": _COMMON + [
        (("--system",), "system", str, "ie-spirals", "generator",
         ("lotka-volterra", "lorenz", "ie-spirals")),
        (("--curves",), "curves", int, 100, "number of curves"),
        (("--n-time",), "n_time", int, 100, "time points per curve"),
        (("--n-samples",), "n_samples", int, 10000, "MC samples (ie-spirals only)"),
        (("--max-iter",), "max_iter", int, 3, "solver iterations (ie-spirals only)"),
    ],
    "solve": _COMMON + [
        (("--demo",), "demo", str, "exponential", "analytic problem",
         ("exponential", "fredholm-linear", "spiral")),
        (("--grid-points",), "grid_points", int, 100, "time grid size"),
        (("--n-samples",), "n_samples", int, 2000, "Monte Carlo samples per time point"),
        (("--max-iter",), "max_iter", int, 15, "solver iteration budget"),
        (("--tolerance",), "tolerance", float, 1e-6, "residual stopping tolerance"),
        (("--svg",), "svg", bool, False, "also write an SVG line plot"),
    ],
    "train": _COMMON + _TRAIN_OPTS + _SOLVER_OPTS + _ARCH_OPTS,
    "eval": _COMMON + _SOLVER_OPTS + [
        (("--checkpoint",), "checkpoint", str, None, "trained model checkpoint"),
        (("--data",), "data", str, None, "dataset directory"),
        (("--protocol",), "protocol", str, "shifted", "evaluation protocol",
         ("prefix", "shifted", "single-point")),
        (("--k",), "k", int, 20, "prefix/window length"),
    ],
    "bench": _COMMON + _SOLVER_OPTS + _ARCH_OPTS + [
        (("--model",), "model", str, "both", "model kind", ("nie", "anie", "both")),
        (("--data",), "data", str, None, "dataset directory (generated when omitted)"),
        (("--system",), "system", str, "lotka-volterra", "fallback generator",
         ("lotka-volterra", "lorenz", "ie-spirals")),
        (("--curves",), "curves", int, 16, "curves when generating"),
        (("--batch-size",), "batch_size", int, 16, "curves per timed iteration"),
        (("--repeats",), "repeats", int, 5, "random-init repeats"),
        (("--iters",), "iters", int, 10, "measured iterations per repeat"),
        (("--k",), "k", int, 20, "init prefix length"),
        (("--lr",), "lr", float, 1e-2, "Adam learning rate"),
    ],
    "attn-dump": _COMMON + _SOLVER_OPTS + [
        (("--checkpoint",), "checkpoint", str, None, "trained attention checkpoint"),
        (("--data",), "data", str, None, "dataset directory"),
        (("--curve",), "curve", int, 0, "curve index to run the forward pass on"),
        (("--k",), "k", int, 20, "init prefix length"),
        (("--svg",), "svg", bool, False, "also write per-head heatmaps"),
    ],
}

_HELP = {
    "generate": "write a synthetic trajectory dataset",
    "solve": "run the quadrature solver on an analytic demo problem",
    "train": "fit a model to a dataset and write a checkpoint",
    "eval": "evaluate a checkpoint under an extrapolation protocol",
    "bench": "measure seconds per training iteration (5 random-init repeats)",
    "attn-dump": "export per-head attention weight matrices as CSV",
}


def _build_parser():
    parser = _Parser(prog="nielab", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, table in _TABLES.items():
        p = sub.add_parser(name, help=_HELP[name], description=_HELP[name],
                           add_help=True)
        p.error = parser.error
        for row in table:
            flags, dest, typ, default, helptext = row[:5]
            choices = row[5] if len(row) > 5 else None
            suffix = "" if default is None else f" (default: {default})"
            if typ is bool:
                p.add_argument(*flags, dest=dest, action="store_const", const=True,
                               default=_UNSET, help=f"{helptext} (default: off)")
            else:
                p.add_argument(*flags, dest=dest, type=typ, default=_UNSET,
                               choices=choices, help=helptext + suffix)
    return parser


def _resolve(args):
    """Merge flags > config file > defaults into a flat dict."""
    table = _TABLES[args.command]
    raw = vars(args)
    file_cfg = {}
    cfg_path = raw.get("config")
    if cfg_path is not _UNSET and cfg_path:
        if not os.path.exists(cfg_path):
            raise UsageError(f"config file not found: {cfg_path}")
        with open(cfg_path) as fh:
            for key, val in json.load(fh).items():
                if key == "command":
                    continue
                if "." in key:
                    scope, key = key.split(".", 1)
                    if scope != args.command:
                        continue
                file_cfg[key.replace("-", "_")] = val
    resolved = {"command": args.command}
    for row in table:
        dest, typ, default = row[1], row[2], row[3]
        val = raw.get(dest, _UNSET)
        if val is _UNSET:
            val = file_cfg.get(dest, _UNSET)
        if val is _UNSET:
            val = default
        if dest == "seed" and raw.get("seed") is _UNSET and "seed" not in file_cfg:
            val = int(os.environ.get("NIELAB_SEED", default))
        resolved[dest] = val
    if not resolved.get("out"):
        resolved["out"] = os.path.join("runs", args.command)
    return resolved


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _snapshot(cfg):
    os.makedirs(cfg["out"], exist_ok=True)
    _write_json(os.path.join(cfg["out"], "config.json"), cfg)


def _finish(cfg, metrics):
    metrics = dict(metrics)
    metrics["backend"] = backend.BACKEND_NAME
    _write_json(os.path.join(cfg["out"], "metrics.json"), metrics)
    return EXIT_OK


def _load_dataset(path):
    if not path:
        raise UsageError("missing --data dataset directory")
    if not os.path.isdir(path):
        raise UsageError(f"dataset directory not found: {path}")
    return read_dataset(path)


def _parse_sizes(text):
    return tuple(int(s) for s in str(text).split(",") if s.strip())


def _solver_config(cfg):
    return SolverConfig(
        max_iter=cfg["max_iter"],
        tolerance=cfg["tolerance"],
        mc=IntegrationSpec(n_samples=cfg["n_samples"], seed=cfg["seed"]),
        metric=cfg["metric"],
    )


def _resolve_y_scale(cfg, ds):
    if str(cfg["y_scale"]) != "auto":
        return float(cfg["y_scale"])
    peak = float(np.max(np.abs(ds.values)))
    return max(1.0, peak)


def _build_model(kind, cfg, ds, seed):
    if kind == "nie":
        return KernelIntegralModel(
            d=ds.d,
            t_span=(float(ds.grid[0]), float(ds.grid[-1])),
            hidden=_parse_sizes(cfg["hidden"]),
            nonlin_hidden=_parse_sizes(cfg["nonlin_hidden"]),
            y_scale=_resolve_y_scale(cfg, ds),
            seed=seed,
        )
    return AttentionIntegralModel(
        d=ds.d,
        coord_dims=1,
        d_model=cfg["d_model"],
        n_heads=cfg["n_heads"],
        seed=seed,
        mask=MaskSpec(cfg["mask"]),
    )


def _model_meta(kind, cfg, ds):
    meta = {"kind": kind, "d": ds.d,
            "grid": [float(ds.grid[0]), float(ds.grid[-1])]}
    if kind == "nie":
        meta.update({
            "hidden": list(_parse_sizes(cfg["hidden"])),
            "nonlin_hidden": list(_parse_sizes(cfg["nonlin_hidden"])),
            "y_scale": _resolve_y_scale(cfg, ds),
        })
    else:
        meta.update({
            "d_model": cfg["d_model"],
            "n_heads": cfg["n_heads"],
            "mask": cfg["mask"],
        })
    return meta


def load_model(path):
    """Rebuild a model from a checkpoint written by the train subcommand."""
    if not path:
        raise UsageError("missing --checkpoint")
    if not os.path.exists(path):
        raise UsageError(f"checkpoint not found: {path}")
    params, meta = checkpoint.load_params(path)
    kind = meta.get("kind")
    if kind == "nie":
        model = KernelIntegralModel(
            d=meta["d"], t_span=tuple(meta["grid"]),
            hidden=tuple(meta["hidden"]), nonlin_hidden=tuple(meta["nonlin_hidden"]),
            y_scale=meta["y_scale"],
        )
    elif kind == "anie":
        model = AttentionIntegralModel(
            d=meta["d"], coord_dims=1, d_model=meta["d_model"],
            n_heads=meta["n_heads"], mask=MaskSpec(meta["mask"]),
        )
    else:
        raise UsageError(f"checkpoint has unknown model kind {kind!r}")
    own = model.params()
    if set(own) != set(params):
        raise UsageError("checkpoint parameters do not match the model layout")
    for name, p in own.items():
        if p.shape != params[name].shape:
            raise UsageError(
                f"checkpoint shape mismatch for {name}: "
                f"{params[name].shape} vs {p.shape}"
            )
        p.data[:] = params[name].data
    return model, meta


def _write_predictions(out_dir, preds, ds, name="predictions"):
    pred_ds = Dataset(preds, ds.grid, manifest={"generator": name, "seed": None,
                                                "params": {}},
                      channels=ds.channels)
    write_dataset(pred_ds, os.path.join(out_dir, name))


def _write_per_point_error(out_dir, report, predict_from, grid):
    path = os.path.join(out_dir, "per_point_error.csv")
    with open(path, "w") as fh:
        fh.write("t,abs_error\n")
        for j, err in enumerate(report.per_point_abs_error):
            fh.write(f"{grid[predict_from + j]:.17g},{err:.17g}\n")


# ---------------------------------------------------------------------------
# Subcommands.

def _cmd_generate(cfg):
    _snapshot(cfg)
    system, seed = cfg["system"], cfg["seed"]
    if system == "lotka-volterra":
        ds = datagen.gen_lotka_volterra(cfg["curves"], seed=seed, n_time=cfg["n_time"])
    elif system == "lorenz":
        ds = datagen.gen_lorenz(cfg["curves"], seed=seed, n_time=cfg["n_time"])
    else:
        ds = datagen.gen_ie_spirals(cfg["curves"], seed=seed, n_time=cfg["n_time"],
                                    n_samples=cfg["n_samples"],
                                    max_iter=cfg["max_iter"],
                                    workers=cfg["workers"])
    write_dataset(ds, cfg["out"])
    print(f"wrote {ds.n_curves} curves x {ds.n_time} points to {cfg['out']}")
    return _finish(cfg, {
        "generator": system,
        "n_curves": ds.n_curves,
        "n_time": ds.n_time,
        "channels": list(ds.channels),
        "value_range": [float(ds.values.min()), float(ds.values.max())],
    })


_DEMOS = {
    "exponential": {
        "problem": lambda: IEProblem(
            d=1, free_fn=lambda t: np.array([1.0]),
            kernel=scaled_identity_kernel(1.0, 1),
            nonlinearity=identity_nonlinearity, family=Volterra()),
        "span": (0.0, 1.0),
        "truth": lambda grid: np.exp(grid)[:, None],
        "channels": ("y",),
    },
    "fredholm-linear": {
        "problem": lambda: IEProblem(
            d=1, free_fn=lambda t: np.array([t]),
            kernel=scaled_identity_kernel(0.5, 1),
            nonlinearity=identity_nonlinearity, family=Fredholm(0.0, 1.0)),
        "span": (0.0, 1.0),
        "truth": lambda grid: (grid + 0.5)[:, None],
        "channels": ("y",),
    },
    "spiral": {
        "problem": lambda: datagen.spiral_problem(theta=1.0),
        "span": (0.0, 1.0),
        "truth": None,
        "channels": ("y0", "y1"),
    },
}


def _cmd_solve(cfg):
    _snapshot(cfg)
    demo = _DEMOS[cfg["demo"]]
    grid = np.linspace(*demo["span"], cfg["grid_points"])
    problem = demo["problem"]()
    solver_cfg = SolverConfig(
        max_iter=cfg["max_iter"], tolerance=cfg["tolerance"],
        mc=IntegrationSpec(n_samples=cfg["n_samples"], seed=cfg["seed"]),
    )
    traj = solve_ie(problem, default_init(problem, grid), solver_cfg)
    values = traj.grid_fn.values.data
    metrics = {
        "demo": cfg["demo"],
        "iterations_used": traj.iterations_used,
        "converged": traj.converged,
        "residuals": [float(r) for r in traj.residuals],
    }
    if demo["truth"] is not None:
        truth = demo["truth"](grid)
        rel = np.abs(values - truth) / np.maximum(np.abs(truth), 1e-12)
        metrics["max_rel_error"] = float(rel.max())
        metrics["max_abs_error"] = float(np.abs(values - truth).max())
        print(f"{cfg['demo']}: max rel. error vs closed form = {rel.max():.4%}")
    else:
        print(f"{cfg['demo']}: solved, {traj.iterations_used} iterations")
    sol = Dataset(values[None], grid,
                  manifest={"generator": f"solve-{cfg['demo']}", "seed": cfg["seed"],
                            "params": {}},
                  channels=demo["channels"])
    write_dataset(sol, os.path.join(cfg["out"], "solution"))
    if cfg["svg"]:
        line_svg(os.path.join(cfg["out"], "solution.svg"), grid, values,
                 title=f"demo: {cfg['demo']}", labels=list(demo["channels"]))
    return _finish(cfg, metrics)


def _train_config(cfg, protocol):
    return TrainConfig(
        learning_rate=cfg["lr"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        l2_weight=cfg["l2"],
        seed=cfg["seed"],
        solver=_solver_config(cfg),
        init_protocol=protocol,
        clip_norm=cfg["clip_norm"],
        val_fraction=cfg["val_fraction"],
    )


def _cmd_train(cfg):
    _snapshot(cfg)
    ds = _load_dataset(cfg["data"])
    protocol = InitProtocol(kind=cfg["init"], k=cfg["k"])
    train_cfg = _train_config(cfg, protocol)
    model = _build_model(cfg["model"], cfg, ds, cfg["seed"])
    n_params = model.n_params()
    print(f"training {cfg['model']} ({n_params} parameters) on "
          f"{ds.n_curves} curves for {cfg['epochs']} epochs")
    model, report, history = training.train_model(model, ds, train_cfg)
    k = protocol.prefix(ds.n_time)
    meta = _model_meta(cfg["model"], cfg, ds)
    checkpoint.save_params(model.params(), os.path.join(cfg["out"], "checkpoint.bin"),
                           meta=meta)
    idx = np.arange(ds.n_curves)
    preds = training._predict(model, ds, train_cfg.solver,
                              lambda curve: training.hold_last_free_values(curve, k), idx)
    _write_predictions(cfg["out"], preds, ds)
    _write_per_point_error(cfg["out"], report, k, ds.grid)
    print(f"final loss {history[-1]:.6g}; eval mse {report.mse:.6g}; "
          f"eval R2 {report.r_squared:.4f}")
    return _finish(cfg, {
        "model": cfg["model"],
        "n_parameters": n_params,
        "loss_history": [float(x) for x in history],
        **report.to_dict(),
    })


def _cmd_eval(cfg):
    _snapshot(cfg)
    ds = _load_dataset(cfg["data"])
    model, meta = load_model(cfg["checkpoint"])
    solver_cfg = _solver_config(cfg)
    k = cfg["k"]
    if cfg["protocol"] == "prefix":
        report = training.evaluate(model, ds, solver_cfg, k)
        predict_from = k
        builder = lambda curve: training.hold_last_free_values(curve, k)
    elif cfg["protocol"] == "shifted":
        report = training.evaluate_shifted_init(model, ds, k=k, solver_cfg=solver_cfg)
        predict_from = 2 * k
        builder = lambda curve: training.shifted_free_values(curve, k)
    else:
        report = training.evaluate_shifted_init(model, ds, k=k, solver_cfg=solver_cfg,
                                                mode="single-point")
        predict_from = k + 1
        builder = lambda curve: training.single_point_free_values(curve, k)
    idx = np.arange(ds.n_curves)
    preds = training._predict(model, ds, solver_cfg, builder, idx)
    _write_predictions(cfg["out"], preds, ds)
    _write_per_point_error(cfg["out"], report, predict_from, ds.grid)
    print(f"{cfg['protocol']} eval: mse {report.mse:.6g}, "
          f"R2 {report.r_squared:.4f} +- {report.r_squared_sd:.4f}")
    return _finish(cfg, {
        "model": meta.get("kind"),
        "protocol": cfg["protocol"],
        "k": k,
        **report.to_dict(),
    })


def _cmd_bench(cfg):
    _snapshot(cfg)
    if cfg["data"]:
        ds = _load_dataset(cfg["data"])
    elif cfg["system"] == "lotka-volterra":
        ds = datagen.gen_lotka_volterra(cfg["curves"], seed=cfg["seed"])
    elif cfg["system"] == "lorenz":
        ds = datagen.gen_lorenz(cfg["curves"], seed=cfg["seed"])
    else:
        ds = datagen.gen_ie_spirals(cfg["curves"], seed=cfg["seed"],
                                    n_samples=1000, workers=cfg["workers"])
    kinds = ("nie", "anie") if cfg["model"] == "both" else (cfg["model"],)
    protocol = InitProtocol(kind="first-k", k=cfg["k"])
    results = {}
    for kind in kinds:
        results[kind] = {}
        for label, max_iter in (("base", cfg["max_iter"]), ("doubled", 2 * cfg["max_iter"])):
            run_cfg = dict(cfg, max_iter=max_iter, tolerance=0.0)
            tcfg = _train_config(run_cfg, protocol)
            bench = training.benchmark_walltime(
                lambda seed, k=kind, c=run_cfg: _build_model(k, c, ds, seed),
                ds, tcfg, repeats=cfg["repeats"], measure_iters=cfg["iters"],
            )
            results[kind][label] = bench
            print(f"{kind} max_iter={max_iter}: "
                  f"{bench['seconds_per_iteration_mean']:.4f} s/iter "
                  f"+- {bench['seconds_per_iteration_sd']:.4f} (n={cfg['repeats']})")
        base = results[kind]["base"]["seconds_per_iteration_mean"]
        results[kind]["doubling_factor"] = (
            results[kind]["doubled"]["seconds_per_iteration_mean"] / base
        )
        print(f"{kind} doubling factor: {results[kind]['doubling_factor']:.2f}")
    return _finish(cfg, {"system": cfg["system"] if not cfg["data"] else "dataset",
                         "results": results})


def _cmd_attn_dump(cfg):
    _snapshot(cfg)
    ds = _load_dataset(cfg["data"])
    model, meta = load_model(cfg["checkpoint"])
    if meta.get("kind") != "anie":
        raise UsageError("attn-dump needs an attention-model checkpoint")
    if not 0 <= cfg["curve"] < ds.n_curves:
        raise UsageError(f"curve index {cfg['curve']} outside dataset "
                         f"(n_curves={ds.n_curves})")
    curve = ds.values[cfg["curve"]]
    f_vals = training.hold_last_free_values(curve, cfg["k"])
    f = GridFunction(ds.grid, f_vals, space=ds.space)
    traj = model.solve(f, _solver_config(cfg))
    tb = embed_tokens(traj.grid_fn)
    attn_dir = os.path.join(cfg["out"], "attn")
    weights = export_attention(model.model, tb, model.mask, out_dir=attn_dir)
    if cfg["svg"]:
        for h in range(weights.shape[0]):
            heatmap_svg(os.path.join(attn_dir, f"head_{h}.svg"), weights[h],
                        title=f"head {h}")
    print(f"wrote {weights.shape[0]} head matrices ({weights.shape[1]} tokens) "
          f"to {attn_dir}")
    return _finish(cfg, {
        "n_heads": int(weights.shape[0]),
        "n_tokens": int(weights.shape[1]),
        "curve": cfg["curve"],
        "row_sum_max_dev": float(np.abs(weights.sum(axis=-1) - 1.0).max()),
    })


_COMMANDS = {
    "generate": _cmd_generate,
    "solve": _cmd_solve,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "attn-dump": _cmd_attn_dump,
}


def run(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        raise UsageError(parser.format_usage())
    cfg = _resolve(args)
    return _COMMANDS[args.command](cfg)


def main(argv=None):
    try:
        return run(argv)
    except SystemExit as exc:       # argparse --help
        return exc.code or EXIT_OK
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except DatagenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, SolverError, TrainingError, QuadratureError,
            EngineError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
