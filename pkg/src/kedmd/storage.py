"""File formats: datasets, kernels, models, histories, spectra, manifests.

All numeric text is written with 17 significant digits, which round-trips
64-bit floats exactly; re-exporting an imported dataset is byte-identical.
Model files are UTF-8 JSON carrying the kernel record list (one primitive
per record), the center matrices, the operator matrix, eigenvalues, and
residuals; loading refits from the kernel and centers and cross-checks the
stored operator.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import ConfigError
from .kernels import WeightedKernelSum
from .koopman import SnapshotSet, fit_sk, fit_tr
from .losses import LossReport


def fmt(x):
    """Float to decimal text, lossless for binary64."""
    return f"{float(x):.17g}"


# -- datasets ---------------------------------------------------------------


@dataclass(frozen=True)
class PairTable:
    """Snapshot pairs with their provenance: trajectory id and step index."""

    traj_id: np.ndarray
    step: np.ndarray
    X: np.ndarray
    Y: np.ndarray

    def to_snapshots(self):
        return SnapshotSet(self.X, self.Y)

    def __len__(self):
        return self.X.shape[0]


def pairs_from_bundle(bundle, pair_stride=1):
    t0 = bundle.pair_start_indices(pair_stride)
    n_ic, d = bundle.n_trajectories, bundle.dim
    ids = np.repeat(np.arange(n_ic), len(t0))
    steps = np.tile(t0, n_ic)
    X = bundle.trajectories[:, t0, :].reshape(-1, d)
    Y = bundle.trajectories[:, t0 + 1, :].reshape(-1, d)
    return PairTable(traj_id=ids, step=steps, X=X, Y=Y)


def write_pairs(path, pairs, metadata=None):
    """One CSV row per snapshot pair; optional sidecar metadata JSON."""
    path = Path(path)
    d = pairs.X.shape[1]
    header = (["traj_id", "step"]
              + [f"x{i}" for i in range(d)]
              + [f"y{i}" for i in range(d)])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for n in range(len(pairs)):
            w.writerow(
                [int(pairs.traj_id[n]), int(pairs.step[n])]
                + [fmt(v) for v in pairs.X[n]]
                + [fmt(v) for v in pairs.Y[n]]
            )
    if metadata is not None:
        with open(path.with_suffix(".meta.json"), "w", encoding="utf-8") as fh:
            json.dump(metadata, fh, indent=2)
            fh.write("\n")


def read_pairs(path):
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        d = (len(header) - 2) // 2
        ids, steps, X, Y = [], [], [], []
        for row in r:
            ids.append(int(row[0]))
            steps.append(int(row[1]))
            X.append([float(v) for v in row[2:2 + d]])
            Y.append([float(v) for v in row[2 + d:2 + 2 * d]])
    return PairTable(
        traj_id=np.asarray(ids, dtype=int), step=np.asarray(steps, dtype=int),
        X=np.asarray(X, dtype=float), Y=np.asarray(Y, dtype=float),
    )


# -- kernels and models -----------------------------------------------------


def save_kernel(path, kernel):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(kernel.spec(), fh, indent=2)
        fh.write("\n")


def load_kernel(path):
    with open(path, encoding="utf-8") as fh:
        return WeightedKernelSum.from_spec(json.load(fh))


def save_model(path, model, residual_values=None):
    doc = {
        "variant": model.variant,
        "beta_koop": model.beta_koop,
        "kernel": model.kernel.spec(),
        "centers": {"X": model.centers.X.tolist(), "Y": model.centers.Y.tolist()},
        "K": model.K.tolist() if model.variant == "sk" else
             {"real": model.K.real.tolist()},
        "eigenvalues": [{"re": float(z.real), "im": float(z.imag)}
                        for z in model.eigenvalues],
    }
    if residual_values is not None:
        doc["residuals"] = [float(v) for v in residual_values]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_model(path):
    """Rebuild a model from its export by refitting from kernel + centers.

    The stored operator matrix is compared against the refit; disagreement
    beyond round-off means the file was edited or produced elsewhere and is
    reported as a warning, with the refit winning.
    """
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    kernel = WeightedKernelSum.from_spec(doc["kernel"])
    centers = SnapshotSet(np.asarray(doc["centers"]["X"]), np.asarray(doc["centers"]["Y"]))
    if doc["variant"] == "sk":
        model = fit_sk(kernel, centers, float(doc["beta_koop"]))
        K_stored = np.asarray(doc["K"], dtype=float)
    elif doc["variant"] == "tr":
        model = fit_tr(kernel, centers)
        K_stored = np.asarray(doc["K"]["real"], dtype=float)
    else:
        raise ConfigError(f"model: unknown variant {doc['variant']!r}")
    if K_stored.shape == model.K.shape:
        gap = np.max(np.abs(K_stored - model.K)) / max(1.0, np.max(np.abs(model.K)))
        if gap > 1e-8:
            warnings.warn(f"model {path}: stored K deviates from refit by {gap:.2e}")
    else:
        warnings.warn(f"model {path}: stored K shape {K_stored.shape} != refit {model.K.shape}")
    return model


# -- histories, spectra, trajectories ---------------------------------------


def write_history(path, history):
    header = ["epoch", "batch"] + list(LossReport.FIELDS)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for rec in history.batch_records:
            w.writerow([rec.epoch, rec.batch] + [fmt(v) for v in rec.report.as_row()])


def write_spectrum(path, eigenvalues, residual_values):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "re", "im", "magnitude", "residual"])
        for j, z in enumerate(eigenvalues):
            w.writerow([j, fmt(z.real), fmt(z.imag), fmt(abs(z)), fmt(residual_values[j])])


def write_trajectory(path, predicted, truth=None, dt=1.0, diverged_at=None):
    """Per-step predicted (and optionally true) states for one trajectory."""
    d = predicted.shape[1] if predicted.size else (truth.shape[1] if truth is not None else 0)
    header = ["step", "t"] + [f"pred{i}" for i in range(d)]
    if truth is not None:
        header += [f"true{i}" for i in range(d)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        steps = truth.shape[0] if truth is not None else predicted.shape[0]
        for t in range(steps):
            row = [t + 1, fmt((t + 1) * dt)]
            if t < predicted.shape[0]:
                row += [fmt(v) for v in predicted[t]]
            else:
                row += [""] * d
            if truth is not None:
                row += [fmt(v) for v in truth[t]]
            w.writerow(row)
    if diverged_at is not None:
        return {"diverged_at_step": diverged_at}
    return {}


# -- manifests ---------------------------------------------------------------


def config_hash(doc):
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def write_manifest(out_dir, command, config_doc, outputs):
    doc = {
        "command": command,
        "config": config_doc,
        "config_sha256": config_hash(config_doc),
        "outputs": sorted(outputs),
        "versions": {
            "kedmd": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    path = Path(out_dir) / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    return path
