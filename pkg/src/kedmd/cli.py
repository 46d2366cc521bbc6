"""Command-line front end.

Subcommands cover the full experiment cycle: ``generate`` simulation data,
``train`` a kernel, ``prune`` it, ``finetune`` on more centers, ``predict``
test trajectories, export the ``spectrum`` with residuals, evaluate
``losses`` of a checkpoint, and run the ``equivalence-check`` oracle.
Figures (PNG) are rendered alongside the CSV outputs; the CSVs are the
source of truth.

Exit codes: 0 success, 1 check failure, 2 configuration error, 3 numeric
abort, 4 divergence.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import plots, storage
from .config import dump_config, load_config, parse_config, preset_config
from .errors import (
    ConfigError,
    DegenerateKernelError,
    DivergedError,
    NumericError,
    TrainingAbortError,
)
from .koopman import (
    equivalence_check,
    fit_modes,
    fit_projection,
    fit_sk,
    predict,
    residuals,
)
from .losses import combined_loss, loss_tr_suite
from .systems import ModuloSpec, generate_dataset, modulo_true_eigenvalues
from .training import fine_tune, subsample_centers, train
from .koopman import fit_tr

OUT_ENV_VAR = "KEDMD_OUT"

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_DIVERGED = 4


def _say(args, msg):
    if not args.quiet:
        print(msg)


def _out_dir(args, default_name):
    out = args.out or os.environ.get(OUT_ENV_VAR)
    if out is None:
        out = Path("runs") / default_name
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plots").mkdir(exist_ok=True)
    return out


def _resolve_config(args):
    if args.config and args.preset:
        raise ConfigError("config: give either --config or --preset, not both")
    if args.config:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    elif args.preset:
        doc = preset_config(args.preset)
    else:
        raise ConfigError("config: one of --config or --preset is required")
    if args.seed is not None:
        doc = copy.deepcopy(doc)
        doc.setdefault("data", {})["seed"] = args.seed
        doc["data"]["test_seed"] = args.seed + 1
        doc.setdefault("train", {})["seed"] = args.seed
    return parse_config(doc)


def _dataset_meta(cfg, role, stride, seed):
    return {
        "experiment": cfg.name,
        "role": role,
        "system": cfg.raw["system"],
        "seed": seed,
        "dt": cfg.system.dt,
        "pair_stride": stride,
        "pairing": "pairs (x_t, x_{t+1}) for t = 0, stride, 2*stride, ...",
    }


def cmd_generate(args):
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg.name)
    written = []
    for role, n_ic, seed, stride in (
        ("train", cfg.data.train_ics, cfg.data.seed, cfg.data.pair_stride),
        ("test", cfg.data.test_ics, cfg.data.test_seed, cfg.data.test_pair_stride),
    ):
        bundle = generate_dataset(cfg.system, n_ic, cfg.data.steps, seed)
        pairs = storage.pairs_from_bundle(bundle, stride)
        path = out / f"{role}.csv"
        storage.write_pairs(path, pairs, metadata=_dataset_meta(cfg, role, stride, seed))
        written.append(str(path))
        _say(args, f"wrote {path} ({len(pairs)} pairs, {n_ic} trajectories)")
    dump_config(cfg.raw, out / "config.json")
    storage.write_manifest(out, "generate", cfg.raw, written)
    return EXIT_OK


def _load_train_pairs(args, cfg, out):
    path = Path(args.data) if args.data else out / "train.csv"
    if not path.exists():
        raise ConfigError(f"data: {path} not found (run the generate command first or pass --data)")
    return storage.read_pairs(path).to_snapshots()


def _epoch_printer(args, config):
    def on_batch(epoch, b, model, report):
        if args.verbose:
            print(f"  epoch {epoch:3d} batch {b}: pred={report.pred:.4e} total={report.total:.4e}")
        if not args.quiet and b == config.batches - 1:
            print(f"epoch {epoch:3d}/{config.epochs}: pred={report.pred:.4e} "
                  f"dict={report.dict:.4e} eig_pred={report.eig_pred:.4e}")
    return on_batch


def _finalize_run(args, cfg, out, kernel, history, data, command):
    """Fit the final model, export everything, render the loss figure."""
    centers = subsample_centers(data, min(cfg.train.n_centers, len(data)), cfg.train.seed)
    beta_final = cfg.train.beta_koop_schedule[-1][1]
    model = fit_sk(kernel, centers, beta_final)
    res = residuals(model)
    written = []
    for name, writer in (
        ("kernel.json", lambda p: storage.save_kernel(p, kernel)),
        ("model.json", lambda p: storage.save_model(p, model, res)),
        ("history.csv", lambda p: storage.write_history(p, history)),
    ):
        writer(out / name)
        written.append(str(out / name))
    plots.plot_loss_curves(history, out / "plots" / "loss_curves.png")
    dump_config(cfg.raw, out / "config.json")
    storage.write_manifest(out, command, cfg.raw, written)
    means = history.epoch_means()
    _say(args, f"final epoch mean pred loss: {means[-1].pred:.4e}")
    _say(args, f"trained kernel: {kernel!r}")
    return model


def cmd_train(args):
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg.name)
    data = _load_train_pairs(args, cfg, out)
    kernel = storage.load_kernel(args.kernel) if args.kernel else cfg.build_kernel()
    if args.reset:
        kernel = kernel.reset_to_initial()
    tc = cfg.train
    if args.epochs is not None:
        tc = dataclasses.replace(tc, epochs=args.epochs)
    if args.n_centers is not None:
        tc = dataclasses.replace(tc, n_centers=args.n_centers)
    kernel, history = train(kernel, data, tc, on_batch=_epoch_printer(args, tc))
    cfg.train = tc
    _finalize_run(args, cfg, out, kernel, history, data, "train")
    return EXIT_OK


def cmd_finetune(args):
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg.name)
    data = _load_train_pairs(args, cfg, out)
    model = storage.load_model(args.model)
    n_centers = args.n_centers or cfg.stages.finetune_n_centers or cfg.train.n_centers
    epochs = args.epochs or cfg.stages.finetune_epochs or cfg.train.epochs
    tc = dataclasses.replace(cfg.train, n_centers=min(n_centers, len(data)), epochs=epochs)
    kernel, history = fine_tune(model.kernel, data, tc, on_batch=_epoch_printer(args, tc))
    cfg.train = tc
    _finalize_run(args, cfg, out, kernel, history, data, "finetune")
    return EXIT_OK


def cmd_prune(args):
    out = _out_dir(args, "pruned")
    if args.model:
        kernel = storage.load_model(args.model).kernel
    elif args.kernel:
        kernel = storage.load_kernel(args.kernel)
    else:
        raise ConfigError("prune: one of --model or --kernel is required")
    keep = [int(i) for i in args.keep.split(",")] if args.keep else None
    pruned = kernel.prune(
        keep=keep, threshold=args.threshold,
        keep_largest=args.keep_largest,
    )
    path = out / "pruned_kernel.json"
    storage.save_kernel(path, pruned)
    _say(args, f"kept {pruned.n_primitives} of {kernel.n_primitives} primitives -> {path}")
    _say(args, f"pruned kernel: {pruned!r}")
    return EXIT_OK


def _true_trajectories(pairs, horizon):
    """Reassemble per-trajectory state sequences from a stride-1 pair table."""
    out = []
    for tid in np.unique(pairs.traj_id):
        rows = np.flatnonzero(pairs.traj_id == tid)
        rows = rows[np.argsort(pairs.step[rows])]
        x0 = pairs.X[rows[0]]
        states = pairs.Y[rows][:horizon] if horizon else pairs.Y[rows][:0]
        out.append((int(tid), x0, states))
    return out


def cmd_predict(args):
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg.name)
    path = Path(args.data) if args.data else out / "test.csv"
    if not path.exists():
        raise ConfigError(f"data: {path} not found")
    pairs = storage.read_pairs(path)
    model = storage.load_model(args.model or out / "model.json")
    method = args.method or cfg.eval.method
    horizon = cfg.eval.horizon if args.horizon is None else args.horizon
    model = fit_projection(model, cfg.train.beta_modes)
    model = fit_modes(model, 0.0)
    pred_dir = out / "predictions"
    pred_dir.mkdir(exist_ok=True)

    trajs = _true_trajectories(pairs, horizon)
    dt = cfg.system.dt
    per_traj = []
    sq_by_step = np.zeros(horizon)
    cnt_by_step = np.zeros(horizon, dtype=int)
    plot_pairs = []
    written = []
    for tid, x0, truth in trajs:
        h = min(horizon, truth.shape[0]) if horizon else 0
        diverged_at = None
        try:
            pred = predict(model, x0, h, method=method)
        except DivergedError as exc:
            pred = exc.trajectory if exc.trajectory is not None else np.zeros((0, model.centers.dim))
            diverged_at = exc.steps_completed + 1
        p = pred_dir / f"traj_{tid:04d}.csv"
        storage.write_trajectory(p, pred, truth[:h], dt, diverged_at)
        written.append(str(p))
        n_ok = min(pred.shape[0], h)
        err2 = np.sum((pred[:n_ok] - truth[:n_ok]) ** 2, axis=1)
        sq_by_step[:n_ok] += err2
        cnt_by_step[:n_ok] += 1
        per_traj.append((tid, float(np.mean(err2)) if n_ok else float("nan"), diverged_at))
        if len(plot_pairs) < 10:
            plot_pairs.append((pred, truth[:h]))

    with open(out / "errors.csv", "w", encoding="utf-8") as fh:
        fh.write("traj_id,mse,diverged_at_step\n")
        for tid, mse, dv in per_traj:
            fh.write(f"{tid},{storage.fmt(mse)},{dv if dv is not None else ''}\n")
        fh.write("\nstep,mse\n")
        for t in range(horizon):
            if cnt_by_step[t]:
                fh.write(f"{t + 1},{storage.fmt(sq_by_step[t] / cnt_by_step[t])}\n")
    written.append(str(out / "errors.csv"))

    n_div = sum(1 for _, _, dv in per_traj if dv is not None)
    ok_mses = [m for _, m, _ in per_traj if np.isfinite(m)]
    _say(args, f"predicted {len(per_traj)} trajectories ({method}, horizon {horizon}); "
               f"diverged: {n_div}")
    if ok_mses:
        _say(args, f"mean trajectory MSE: {np.mean(ok_mses):.4e}")
    if horizon and plot_pairs:
        d = model.centers.dim
        if d == 2:
            plots.plot_phase_portraits(plot_pairs, out / "plots" / "phase_portraits.png")
        elif d >= 8:
            pred, truth = plot_pairs[0]
            plots.plot_field_heatmaps(pred, truth, dt, out / "plots" / "field_heatmaps.png")
        elif d == 1:
            plots.plot_scalar_trajectories(plot_pairs[:5], dt, out / "plots" / "trajectories.png")
    storage.write_manifest(out, "predict", cfg.raw, written)
    return EXIT_OK


def cmd_spectrum(args):
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg.name)
    if args.kernel:
        # fit a fresh operator for this kernel on the configured centers
        kernel = storage.load_kernel(args.kernel)
        data = _load_train_pairs(args, cfg, out)
        centers = subsample_centers(data, min(cfg.train.n_centers, len(data)), cfg.train.seed)
        model = fit_sk(kernel, centers, args.beta)
    else:
        model = storage.load_model(args.model or out / "model.json")
    eval_set = None
    if args.data and not args.kernel:
        eval_set = storage.read_pairs(args.data).to_snapshots()
    res = residuals(model, eval_set)
    storage.write_spectrum(out / "spectrum.csv", model.eigenvalues, res)
    overlay = None
    if isinstance(cfg.system, ModuloSpec):
        overlay = modulo_true_eigenvalues(cfg.system.omega, 20)
    plots.plot_spectrum(model.eigenvalues, out / "plots" / "spectrum.png",
                        residual_values=res, true_eigenvalues=overlay)
    _say(args, f"wrote {out / 'spectrum.csv'} ({model.n_eig} eigenpairs)")
    _say(args, f"residuals min/median/max: {res.min():.3e} / {np.median(res):.3f} / {res.max():.3f}")
    storage.write_manifest(out, "spectrum", cfg.raw, [str(out / "spectrum.csv")])
    return EXIT_OK


def cmd_losses(args):
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg.name)
    path = Path(args.data) if args.data else out / "train.csv"
    if not path.exists():
        raise ConfigError(f"data: {path} not found")
    data = storage.read_pairs(path).to_snapshots()
    model = storage.load_model(args.model or out / "model.json")
    model = fit_modes(fit_projection(model, cfg.train.beta_modes), 0.0)
    tr_model = fit_modes(fit_tr(model.kernel, model.centers), 0.0)
    report, _ = combined_loss(model.kernel, model, data, cfg.train.loss_weights,
                              tr_model=tr_model)
    report = report.scaled(1.0 / len(data))
    with open(out / "losses.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,batch," + ",".join(report.FIELDS) + "\n")
        fh.write("0,0," + ",".join(storage.fmt(v) for v in report.as_row()) + "\n")
    for name in report.FIELDS:
        _say(args, f"{name:12s} {getattr(report, name):.6e}")
    return EXIT_OK


def cmd_equivalence_check(args):
    kernel = storage.load_kernel(args.kernel) if args.kernel else None
    rep = equivalence_check(instances=args.instances, max_points=args.n_points,
                            seed=args.seed or 0, kernel=kernel)
    ok = rep.passed(args.tol)
    print(f"instances:            {rep.instances}")
    print(f"count mismatches:     {rep.count_mismatches}")
    print(f"max eigenvalue gap:   {rep.max_eigenvalue_gap:.3e}")
    print(f"max eigvector defect: {rep.max_eigenvector_defect:.3e}")
    print("PASS" if ok else f"FAIL (tolerance {args.tol:g})")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def build_parser():
    p = argparse.ArgumentParser(
        prog="kedmd",
        description="Kernel dictionary learning for kernel-based extended DMD.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="experiment config JSON")
            sp.add_argument("--preset", help="built-in preset name (duffing|modulo|kse)")
            sp.add_argument("--seed", type=int, help="override data and training seeds")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV_VAR} or runs/<name>)")
        sp.add_argument("--quiet", action="store_true")
        sp.add_argument("--verbose", action="store_true")

    sp = sub.add_parser("generate", help="simulate train/test snapshot datasets")
    common(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("train", help="run kernel dictionary learning")
    common(sp)
    sp.add_argument("--data", help="training pairs CSV (default <out>/train.csv)")
    sp.add_argument("--kernel", help="start from this kernel spec instead of the config's")
    sp.add_argument("--reset", action="store_true", help="reset the kernel to its initialization")
    sp.add_argument("--epochs", type=int, help="override the configured epoch count")
    sp.add_argument("--n-centers", type=int, help="override the configured center count")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("prune", help="drop primitives by outer-weight magnitude")
    common(sp, config=False)
    sp.add_argument("--model", help="model export to read the kernel from")
    sp.add_argument("--kernel", help="kernel spec JSON to prune")
    sp.add_argument("--keep-largest", type=int, help="keep the n largest |w|")
    sp.add_argument("--threshold", type=float, help="drop primitives with |w| below this")
    sp.add_argument("--keep", help="comma-separated primitive indices to keep")
    sp.set_defaults(func=cmd_prune)

    sp = sub.add_parser("finetune", help="continue training on resampled (larger) centers")
    common(sp)
    sp.add_argument("--model", required=True, help="model export to continue from")
    sp.add_argument("--data", help="training pairs CSV (default <out>/train.csv)")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--n-centers", type=int)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("predict", help="roll out and score test trajectories")
    common(sp)
    sp.add_argument("--model", help="model export (default <out>/model.json)")
    sp.add_argument("--data", help="test pairs CSV (default <out>/test.csv)")
    sp.add_argument("--method", choices=["spectral", "recursive"])
    sp.add_argument("--horizon", type=int)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("spectrum", help="export eigenvalues with residuals")
    common(sp)
    sp.add_argument("--model", help="model export (default <out>/model.json)")
    sp.add_argument("--kernel", help="fit a fresh operator for this kernel spec on the "
                                     "configured centers instead of loading a model")
    sp.add_argument("--beta", type=float, default=0.0,
                    help="Koopman regularization for the --kernel fit (default 0: "
                         "rank-truncated pseudoinverse)")
    sp.add_argument("--data", help="evaluation pairs CSV (default: the model's centers; "
                                   "with --kernel, the source of the centers)")
    sp.set_defaults(func=cmd_spectrum)

    sp = sub.add_parser("losses", help="evaluate the full loss suite of a model on a dataset")
    common(sp)
    sp.add_argument("--model", help="model export (default <out>/model.json)")
    sp.add_argument("--data", help="pairs CSV (default <out>/train.csv)")
    sp.set_defaults(func=cmd_losses)

    sp = sub.add_parser("equivalence-check",
                        help="randomized oracle: truncated and kernel-section fits share spectra")
    common(sp, config=False)
    sp.add_argument("--kernel", help="kernel spec JSON (default: random strictly-PD sums)")
    sp.add_argument("--instances", type=int, default=200)
    sp.add_argument("--n-points", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=float, default=1e-8)
    sp.set_defaults(func=cmd_equivalence_check)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, DegenerateKernelError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TrainingAbortError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DivergedError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
