"""Loss functions for kernel dictionary learning, with analytic gradients.

Every loss treats the fitted matrices (K, the projection C_p, the modes C_m,
and the eigendecomposition) as constants of the current step; gradients flow
only through the kernel Gram factors evaluated on the batch.  This is the
alternating contract: refit the matrices with the current parameters, then
take one gradient step holding them fixed.

Writing Psi(P) = g(Xc, P) for the dictionary evaluated at points P against
the centers Xc, and Phi = W Psi for the approximate eigenfunctions:

    pred      ||Y^T - C_p K Psi(X)||_F^2
    dict      ||Psi(Y) - K Psi(X)||_F^2 / c^2
    eig       ||Phi(Y) - Lambda Phi(X)||_F^2 / c^2
    eig_pred  ||Y^T - C_m Lambda Phi(X)||_F^2

where c estimates the integral of ||Psi|| over the state distribution by the
mean dictionary-column norm over all centers.  Complex-valued products are
compared against real targets in the full complex Frobenius norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateKernelError
from .koopman import eigenfunctions_at

_NAN = float("nan")


@dataclass(frozen=True)
class LossWeights:
    """Combination weights: alpha = (dict, pred, eig, eig_pred), an L1
    constant on the normalized outer weights and an L2 constant on the inner
    parameters.  ``l1_on_raw_weights`` switches the L1 term to the raw
    weights, which actually induces sparsity pressure; the normalized form
    is identically beta1 and contributes no gradient."""

    alpha: tuple = (0.0, 1.0, 0.0, 0.0)
    beta1: float = 0.0
    beta2: float = 0.0
    l1_on_raw_weights: bool = False

    def __post_init__(self):
        if len(self.alpha) != 4 or any(a < 0 for a in self.alpha):
            raise ConfigError("loss_weights.alpha: need 4 nonnegative reals")
        if self.beta1 < 0 or self.beta2 < 0:
            raise ConfigError("loss_weights.beta1/beta2: must be nonnegative")


@dataclass
class LossReport:
    """Scalar values of every tracked loss for one evaluation.

    ``total`` is the alpha-weighted sum of the four trainable losses plus
    regularization; the truncated-variant diagnostics are NaN unless a
    truncated model was supplied.
    """

    pred: float = _NAN
    dict: float = _NAN
    eig: float = _NAN
    eig_pred: float = _NAN
    tr_dict: float = _NAN
    tr_eig: float = _NAN
    tr_eig_pred: float = _NAN
    reg: float = 0.0
    total: float = _NAN

    FIELDS = ("pred", "dict", "eig", "eig_pred", "tr_dict", "tr_eig", "tr_eig_pred", "reg", "total")

    def as_row(self):
        return [getattr(self, f) for f in self.FIELDS]

    def scaled(self, factor):
        """Uniformly rescaled copy (e.g. batch sum -> per-snapshot mean)."""
        return LossReport(**{f: getattr(self, f) * factor for f in self.FIELDS})

    @classmethod
    def mean(cls, reports):
        """Fieldwise mean; NaN fields stay NaN only if NaN everywhere."""
        vals = {}
        for f in cls.FIELDS:
            xs = [getattr(r, f) for r in reports if not math.isnan(getattr(r, f))]
            vals[f] = sum(xs) / len(xs) if xs else _NAN
        return cls(**vals)


@dataclass
class TrLosses:
    """Truncated-variant diagnostic losses; ``w_rank_deficient`` flags that
    the left-eigenvector matrix was inverted via pseudoinverse."""

    dict: float
    eig: float
    eig_pred: float
    w_rank_deficient: bool = False


def _batch_grams(kernel, centers, points, with_grad):
    if with_grad:
        return kernel.gram_with_grads(centers.X, points)
    return kernel.gram(centers.X, points), None


def _contract(dG, dLdG):
    """Fold a per-entry loss gradient against the per-parameter Gram
    derivatives: grad_p = sum_ij dL/dG_ij * dG_p,ij."""
    return np.tensordot(dG, dLdG, axes=([1, 2], [0, 1]))


def _norm_estimate(kernel, centers, with_grad=False):
    """Monte Carlo estimate of the dictionary-norm integral: the mean of
    ||Psi(x)||_2 over all centers, with Psi evaluated against the centers
    themselves (columns of g(Xc, Xc))."""
    if with_grad:
        Gc, dGc = kernel.gram_with_grads(centers.X, centers.X)
    else:
        Gc, dGc = kernel.gram(centers.X, centers.X), None
    colnorm = np.sqrt(np.sum(Gc * Gc, axis=0))
    c = float(np.mean(colnorm))
    if c == 0.0:
        raise DegenerateKernelError("dictionary norm estimate is zero")
    if not with_grad:
        return c, None
    # dc/dGc[i,j] = Gc[i,j] / (N * colnorm_j)
    dc_dG = Gc / (len(centers) * colnorm[None, :])
    return c, _contract(dGc, dc_dG)


def loss_pred(kernel, model, batch, with_grad=False):
    """Trajectory-prediction loss ||Y^T - C_p K Psi(X)||_F^2.

    ``model`` must carry C_p fitted with the same kernel parameters; the
    gradient flows only through Psi(X) = g(Xc, X_batch).
    """
    if model.C_p is None:
        raise ConfigError("loss_pred: model has no projection matrix (run fit_projection)")
    Gx, dGx = _batch_grams(kernel, model.centers, batch.X, with_grad)
    A = model.C_p @ model.K
    R = A @ Gx - batch.Y.T
    value = float(np.sum(R * R))
    if not with_grad:
        return value, None
    return value, _contract(dGx, 2.0 * (A.T @ R))


def loss_dict(kernel, model, batch, with_grad=False):
    """Normalized dictionary loss ||Psi(Y) - K Psi(X)||_F^2 / c^2."""
    Gy, dGy = _batch_grams(kernel, model.centers, batch.Y, with_grad)
    Gx, dGx = _batch_grams(kernel, model.centers, batch.X, with_grad)
    c, dc = _norm_estimate(kernel, model.centers, with_grad)
    R = Gy - model.K @ Gx
    num = float(np.sum(R * R))
    value = num / c ** 2
    if not with_grad:
        return value, None
    grad = _contract(dGy, 2.0 * R) + _contract(dGx, -2.0 * (model.K.T @ R))
    grad = grad / c ** 2 + (-2.0 * num / c ** 3) * dc
    return value, grad


def loss_eig(kernel, model, batch, with_grad=False):
    """Normalized eigenfunction loss ||Phi(Y) - Lambda Phi(X)||_F^2 / c^2."""
    Gy, dGy = _batch_grams(kernel, model.centers, batch.Y, with_grad)
    Gx, dGx = _batch_grams(kernel, model.centers, batch.X, with_grad)
    c, dc = _norm_estimate(kernel, model.centers, with_grad)
    W = model.left_vectors
    LW = model.eigenvalues[:, None] * W
    R = W @ Gy - LW @ Gx
    num = float(np.sum(np.abs(R) ** 2))
    value = num / c ** 2
    if not with_grad:
        return value, None
    grad = (
        _contract(dGy, 2.0 * np.real(W.T @ np.conj(R)))
        + _contract(dGx, -2.0 * np.real(LW.T @ np.conj(R)))
    )
    grad = grad / c ** 2 + (-2.0 * num / c ** 3) * dc
    return value, grad


def loss_eig_pred(kernel, model, batch, with_grad=False):
    """Mode-expansion prediction loss ||Y^T - C_m Lambda Phi(X)||_F^2."""
    if model.C_m is None:
        raise ConfigError("loss_eig_pred: model has no Koopman modes (run fit_modes)")
    Gx, dGx = _batch_grams(kernel, model.centers, batch.X, with_grad)
    A = model.C_m @ (model.eigenvalues[:, None] * model.left_vectors)
    R = A @ Gx - batch.Y.T
    value = float(np.sum(np.abs(R) ** 2))
    if not with_grad:
        return value, None
    return value, _contract(dGx, 2.0 * np.real(A.T @ np.conj(R)))


def loss_tr_suite(kernel, model, batch):
    """Diagnostic losses for the truncated variant on a batch.

    Uses Phi(P) = W S^+ Z^T g(Xc, P) and Vhat, the inverse of the left
    eigenvector matrix (pseudoinverse with a warning flag when rank
    deficient):

        tr_dict      ||Vhat Phi(Y) - Vhat Lambda Phi(X)||_F^2
        tr_eig       ||Phi(Y) - Lambda Phi(X)||_F^2
        tr_eig_pred  ||Y^T - C_m Lambda Phi(X)||_F^2
    """
    if model.variant != "tr":
        raise ConfigError("loss_tr_suite: model must be the truncated variant")
    if model.C_m is None:
        raise ConfigError("loss_tr_suite: model has no Koopman modes (run fit_modes)")
    Phi_x = eigenfunctions_at(model, batch.X)
    Phi_y = eigenfunctions_at(model, batch.Y)
    W = model.left_vectors
    rank_deficient = False
    try:
        Vhat = np.linalg.inv(W)
        if not np.all(np.isfinite(Vhat)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        Vhat = np.linalg.pinv(W, rcond=1e-12)
        rank_deficient = True
    D = Phi_y - model.eigenvalues[:, None] * Phi_x
    tr_eig = float(np.sum(np.abs(D) ** 2))
    tr_dict = float(np.sum(np.abs(Vhat @ D) ** 2))
    P = model.C_m @ (model.eigenvalues[:, None] * Phi_x) - batch.Y.T
    tr_eig_pred = float(np.sum(np.abs(P) ** 2))
    return TrLosses(dict=tr_dict, eig=tr_eig, eig_pred=tr_eig_pred,
                    w_rank_deficient=rank_deficient)


def regularization(kernel, beta1, beta2, l1_on_raw_weights=False, with_grad=False):
    """beta1 * sum_i |w~_i| + beta2 * sum_i ||theta_i||_2^2.

    Under weight normalization the L1 term is identically beta1 and its
    gradient vanishes (the sign contributions cancel through wbar; the
    subgradient at w_i = 0 is taken as 0).  With ``l1_on_raw_weights`` the
    term is beta1 * sum |w_i| with gradient beta1 * sign(w).
    """
    w = kernel.weights
    inner = [p.params for p in kernel.primitives]
    if l1_on_raw_weights:
        l1 = float(np.sum(np.abs(w)))
    else:
        l1 = float(np.sum(np.abs(kernel.normalized_weights()))) if beta1 != 0.0 else 1.0
    l2 = float(sum(np.sum(p * p) for p in inner))
    value = beta1 * l1 + beta2 * l2
    if not with_grad:
        return value, None
    grad = np.zeros(kernel.n_params)
    if l1_on_raw_weights:
        grad[:kernel.n_primitives] = beta1 * np.sign(w)
    grad[kernel.n_primitives:] = 2.0 * beta2 * np.concatenate(inner) if inner else 0.0
    return value, grad


# how combined_loss maps alpha entries onto loss functions, in alpha order
_ALPHA_TERMS = (("dict", loss_dict), ("pred", loss_pred),
                ("eig", loss_eig), ("eig_pred", loss_eig_pred))


def combined_loss(kernel, model, batch, weights=LossWeights(), with_grad=False,
                  track_all=True, tr_model=None):
    """Alpha-weighted sum of the four losses plus regularization.

    Terms with alpha = 0 contribute nothing to the total or gradient but are
    still evaluated for the report when ``track_all`` (and skipped if the
    model lacks the matrices they need).  Passing a fitted truncated twin as
    ``tr_model`` additionally fills the diagnostic columns.

    Returns ``(LossReport, gradient | None)`` with the gradient laid out
    like the kernel's flat parameter vector.
    """
    values = {}
    grad = np.zeros(kernel.n_params) if with_grad else None
    total = 0.0
    for (name, fn), a in zip(_ALPHA_TERMS, weights.alpha):
        if a == 0.0 and not track_all:
            continue
        if name == "pred" and model.C_p is None and a == 0.0:
            continue
        if name == "eig_pred" and model.C_m is None and a == 0.0:
            continue
        need_grad = with_grad and a != 0.0
        v, g = fn(kernel, model, batch, with_grad=need_grad)
        values[name] = v
        if a != 0.0:
            total += a * v
            if with_grad:
                grad += a * g
    reg, reg_grad = regularization(
        kernel, weights.beta1, weights.beta2,
        l1_on_raw_weights=weights.l1_on_raw_weights, with_grad=with_grad,
    )
    total += reg
    if with_grad:
        grad += reg_grad
    report = LossReport(reg=reg, total=total, **values)
    if tr_model is not None:
        tr = loss_tr_suite(kernel, tr_model, batch)
        report.tr_dict, report.tr_eig, report.tr_eig_pred = tr.dict, tr.eig, tr.eig_pred
    return report, grad
