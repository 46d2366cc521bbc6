"""Stochastic gradient training of kernel parameters.

One run is the alternating loop: subsample centers once, then per epoch set
the Koopman regularization from the schedule, split the training pairs into
fresh batches, and for every batch refit (K, C_p, and the modes when
tracked) with the current parameters, evaluate the combined loss holding
those matrices fixed, and take one SGD step.  Runs are deterministic given
the seed: centers come from the seed itself, the epoch-e permutation from
seed XOR e.

The update rule treats the two parameter groups differently.  Outer weights
take plain steps w <- w - eta * dL/dw (they are sign-free and cross zero
during training).  Inner parameters take multiplicative steps

    theta <- theta * exp(-eta * theta * dL/dtheta),

i.e. gradient descent on log|theta| at rate eta.  Scale parameters such as
RBF length scales span orders of magnitude (initializations of 1e3 train
down to single digits within tens of steps at published rates), which a
constant-step rule on the raw value cannot traverse: the raw gradient
|dL/dsigma| stays many orders of magnitude too small at large sigma.  A
zero-valued inner parameter is a fixed point of both the rule and the
gradient itself.

History rows store per-snapshot means (batch values divided by the batch
size); the update uses the gradient of the plain batch-summed loss.

Pruning restarts: drop primitives by weight magnitude, reset the survivors
to their initialization values, and train again.  Fine-tuning resamples the
centers at a larger count and continues from the current parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrainingAbortError
from .koopman import SnapshotSet, fit_modes, fit_projection, fit_sk, fit_tr
from .losses import LossReport, LossWeights, combined_loss


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run.

    ``beta_koop_schedule`` is piecewise constant: ordered (start_epoch,
    value) pairs with the first entry at epoch 1.  ``grad_clip`` caps the
    gradient max-norm and exists for diagnostics only; the published runs
    use none.
    """

    learning_rate: float
    epochs: int
    n_centers: int
    batches: int
    beta_koop_schedule: tuple = ((1, 0.0),)
    beta_modes: float = 0.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    optimizer: str = "sgd"
    inner_step_scale: str = "log"
    track_all_losses: bool = True
    track_tr_losses: bool = False
    grad_clip: float | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("train.learning_rate: must be >= 0")
        if self.epochs < 1:
            raise ConfigError("train.epochs: must be a positive integer")
        if self.n_centers < 1:
            raise ConfigError("train.n_centers: must be a positive integer")
        if self.batches < 1:
            raise ConfigError("train.batches: must be a positive integer")
        if self.beta_modes < 0:
            raise ConfigError("train.beta_modes: must be >= 0")
        if self.optimizer != "sgd":
            raise ConfigError(f"train.optimizer: only 'sgd' is supported, got {self.optimizer!r}")
        if self.inner_step_scale not in ("log", "raw"):
            raise ConfigError("train.inner_step_scale: must be 'log' or 'raw'")
        sched = tuple((int(e), float(v)) for e, v in self.beta_koop_schedule)
        if not sched or sched[0][0] != 1:
            raise ConfigError("train.beta_koop_schedule: first entry must start at epoch 1")
        starts = [e for e, _ in sched]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError("train.beta_koop_schedule: start epochs must be strictly increasing")
        if any(v < 0 for _, v in sched):
            raise ConfigError("train.beta_koop_schedule: values must be >= 0")
        object.__setattr__(self, "beta_koop_schedule", sched)


@dataclass
class BatchRecord:
    epoch: int
    batch: int
    report: LossReport


@dataclass
class TrainHistory:
    """Per-batch loss reports plus a parameter snapshot at the end of every
    epoch.  Loss values are the ones seen inside the loop: evaluated on the
    current batch with the K fitted at the top of that step."""

    batch_records: list = field(default_factory=list)
    epoch_params: list = field(default_factory=list)

    @property
    def n_epochs(self):
        return len(self.epoch_params)

    def epoch_means(self):
        """Mean LossReport over the batches of each epoch, in epoch order."""
        by_epoch = {}
        for rec in self.batch_records:
            by_epoch.setdefault(rec.epoch, []).append(rec.report)
        return [LossReport.mean(by_epoch[e]) for e in sorted(by_epoch)]

    def extend(self, other):
        offset = self.n_epochs
        for rec in other.batch_records:
            self.batch_records.append(BatchRecord(rec.epoch + offset, rec.batch, rec.report))
        self.epoch_params.extend(other.epoch_params)
        return self


def schedule_lookup(schedule, epoch):
    """Piecewise-constant lookup: value of the latest entry whose start
    epoch is <= epoch."""
    value = None
    for start, v in schedule:
        if start <= epoch:
            value = v
        else:
            break
    if value is None:
        raise ConfigError(f"schedule: no entry covers epoch {epoch}")
    return value


def subsample_centers(data, n, seed):
    """Uniform paired-row subsample without replacement, fixed by the seed."""
    if n > len(data):
        raise ConfigError(f"subsample: n_centers {n} exceeds data size {len(data)}")
    idx = np.random.default_rng(seed).choice(len(data), size=n, replace=False)
    return data.subset(idx)


def make_batches(data, batches, seed, epoch):
    """Split a fresh per-epoch permutation of the rows into ``batches``
    contiguous chunks whose sizes differ by at most one."""
    if batches > len(data):
        raise ConfigError(f"batches: {batches} batches exceed data size {len(data)}")
    perm = np.random.default_rng(seed ^ epoch).permutation(len(data))
    return [data.subset(chunk) for chunk in np.array_split(perm, batches)]


def _step_models(kernel, centers, beta_koop, config):
    """Fit everything the loss evaluation of one batch step needs.

    ``beta_modes`` regularizes the state-space projection C_p.  The Koopman
    modes are fit with the spectral-cutoff least squares (beta = 0): the
    eigenbasis of a non-normal K needs mode coefficients whose magnitude a
    ridge penalty at the C_p scale suppresses, which would decouple the
    mode-expansion loss from the prediction loss.
    """
    model = fit_sk(kernel, centers, beta_koop)
    model = fit_projection(model, config.beta_modes)
    alpha = config.loss_weights.alpha
    if alpha[3] != 0.0 or config.track_all_losses:
        model = fit_modes(model, 0.0)
    tr_model = None
    if config.track_tr_losses:
        tr_model = fit_modes(fit_tr(kernel, centers), 0.0)
    return model, tr_model


def _apply_step(params, grad, kernel, config):
    """One optimizer update: plain step on outer weights, multiplicative
    (log-scale) step on inner parameters unless configured raw.  The exp
    argument is capped at +-30 to keep an extreme batch gradient from
    overflowing a scale parameter."""
    eta = config.learning_rate
    M = kernel.n_primitives
    out = params.copy()
    out[:M] = params[:M] - eta * grad[:M]
    if config.inner_step_scale == "raw":
        out[M:] = params[M:] - eta * grad[M:]
    else:
        arg = np.clip(-eta * params[M:] * grad[M:], -30.0, 30.0)
        out[M:] = params[M:] * np.exp(arg)
    return out


def train(kernel, data, config, on_batch=None):
    """Run the alternating SGD loop; returns (trained kernel, history).

    ``on_batch(epoch, batch_index, model, report)`` is called after every
    step, before the parameter update is applied elsewhere visible; it
    exists for logging and for tests that pin the frozen-matrix contract.
    The recorded reports are per-snapshot means; non-finite loss or
    gradient aborts with the failure coordinates.
    """
    if kernel.n_primitives < 1:
        raise ConfigError("train: kernel has no primitives")
    centers = subsample_centers(data, config.n_centers, config.seed)
    params = kernel.flat_params
    history = TrainHistory()
    for epoch in range(1, config.epochs + 1):
        beta_koop = schedule_lookup(config.beta_koop_schedule, epoch)
        for b, batch in enumerate(make_batches(data, config.batches, config.seed, epoch)):
            current = kernel.with_flat_params(params)
            model, tr_model = _step_models(current, centers, beta_koop, config)
            report, grad = combined_loss(
                current, model, batch, config.loss_weights,
                with_grad=True, track_all=config.track_all_losses, tr_model=tr_model,
            )
            report = report.scaled(1.0 / len(batch))
            history.batch_records.append(BatchRecord(epoch, b, report))
            if on_batch is not None:
                on_batch(epoch, b, model, report)
            if not np.isfinite(report.total) or not np.all(np.isfinite(grad)):
                raise TrainingAbortError(
                    f"non-finite loss/gradient at epoch {epoch}, batch {b}",
                    epoch=epoch, batch=b, last_params=params.copy(),
                )
            if config.grad_clip is not None:
                gmax = np.max(np.abs(grad))
                if gmax > config.grad_clip:
                    grad = grad * (config.grad_clip / gmax)
            params = _apply_step(params, grad, current, config)
        history.epoch_params.append(params.copy())
    return kernel.with_flat_params(params), history


def prune_and_retrain(kernel, data, config, keep=None, threshold=None,
                      keep_largest=None, reset=True, on_batch=None):
    """Prune by outer-weight magnitude, optionally reset the survivors to
    their initialization values, and train the reduced sum."""
    pruned = kernel.prune(keep=keep, threshold=threshold, keep_largest=keep_largest)
    if reset:
        pruned = pruned.reset_to_initial()
    return train(pruned, data, config, on_batch=on_batch)


def fine_tune(kernel, data, config, prior_history=None, on_batch=None):
    """Continue training from the current parameters with freshly sampled
    centers (typically at a larger count).  Extends ``prior_history`` in
    place when given."""
    tuned, hist = train(kernel, data, config, on_batch=on_batch)
    if prior_history is not None:
        return tuned, prior_history.extend(hist)
    return tuned, hist
