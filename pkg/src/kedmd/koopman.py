"""Koopman operator approximation from kernel Gram matrices.

Two constructions over the same snapshot centers (X, Y), y_n = T(x_n):

* ``fit_sk`` -- EDMD over the dictionary of kernel sections
  {g(., x_1), ..., g(., x_N)}.  Writing G = g(X, X) and A with entries
  A[i, j] = g(x_i, y_j), the operator matrix is K = A (G + beta I)^+.

* ``fit_tr`` -- the truncated-SVD kernel DMD built on the symmetric
  eigendecomposition G = Z S^2 Z^T, with K = (Z S^+)^T A (Z S^+) on the
  numerically retained rank.

The two share their nonzero spectrum, and eigenvectors map linearly between
them through Z S (``map_spectrum``).  Fitted models are immutable; the
augmentation steps (projection matrix, Koopman modes) return copies.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (
    ConfigError,
    DegenerateKernelError,
    DivergedError,
    NumericError,
    VariantError,
)

# Relative singular-value cutoff used whenever a pseudoinverse replaces a
# regularized solve (beta = 0).
PINV_RCOND = 1e-10

# Default relative cutoff on singular values of the feature matrix in the
# truncated fit; squares to PINV_RCOND on the Gram spectrum so the two
# variants truncate consistently.
RANK_TOL = 1e-5


@dataclass(frozen=True)
class SnapshotSet:
    """Paired state matrices: row n of Y is the image of row n of X."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.array(self.X, dtype=float))
        Y = np.atleast_2d(np.array(self.Y, dtype=float))
        if X.shape != Y.shape:
            raise ConfigError(f"snapshots: X shape {X.shape} != Y shape {Y.shape}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise NumericError("snapshots contain non-finite entries")
        X.flags.writeable = False
        Y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    def __len__(self):
        return self.X.shape[0]

    @property
    def dim(self):
        return self.X.shape[1]

    def subset(self, idx):
        return SnapshotSet(self.X[idx], self.Y[idx])


@dataclass(frozen=True)
class EigenpairReport:
    eigenvalue: complex
    left_vector: np.ndarray
    residual: float


@dataclass(frozen=True)
class KoopmanModel:
    """A fitted finite-dimensional Koopman approximation.

    ``left_vectors`` holds left eigenvectors as rows (W K = Lambda W),
    ``right_vectors`` right eigenvectors as columns (K V = V Lambda).
    For the truncated variant, ``Z`` and ``sigma`` hold the retained Gram
    eigenvectors and singular values.  ``gram_xx`` caches g(X, X) from fit
    time so the augmentation steps reuse the exact matrices of the fit.
    """

    kernel: object
    centers: SnapshotSet
    variant: str
    K: np.ndarray
    eigenvalues: np.ndarray
    left_vectors: np.ndarray
    right_vectors: np.ndarray
    beta_koop: float
    gram_xx: np.ndarray
    Z: np.ndarray | None = None
    sigma: np.ndarray | None = None
    C_p: np.ndarray | None = None
    C_m: np.ndarray | None = None

    @property
    def n_eig(self):
        return self.eigenvalues.shape[0]


def _reg_inverse(G, beta):
    """(G + beta I)^+: plain inverse for beta > 0, else a rank-truncated
    pseudoinverse with relative cutoff PINV_RCOND."""
    if beta > 0.0:
        return np.linalg.inv(G + beta * np.eye(G.shape[0]))
    return np.linalg.pinv(G, rcond=PINV_RCOND, hermitian=True)


def _left_right_eig(K):
    """Eigenvalues with paired left/right eigenvectors, ordered by
    descending |lambda|, ties by descending real part."""
    evals, vl, vr = scipy.linalg.eig(K, left=True, right=True)
    W = vl.conj().T
    order = np.lexsort((-evals.real, -np.abs(evals)))
    return evals[order], W[order], vr[:, order]


def _check_gram(M, name):
    if not np.all(np.isfinite(M)):
        raise NumericError(f"{name} contains non-finite entries")


def fit_sk(kernel, centers, beta_koop=0.0):
    """Fit the kernel-section EDMD operator K = g(X,Y-block) (g(X,X) + beta I)^+.

    The cross block has entry (i, j) = g(x_i, y_j), i.e. the dictionary
    evaluated on the successor states, so K maps Psi(x) to Psi(T(x)) in the
    least-squares sense.
    """
    if len(centers) == 0:
        raise ConfigError("fit_sk: empty centers")
    if beta_koop < 0.0:
        raise ConfigError("fit_sk: beta_koop must be >= 0")
    G = kernel.gram(centers.X, centers.X)
    A = kernel.gram(centers.X, centers.Y)
    _check_gram(G, "g(X, X)")
    _check_gram(A, "g(X, Y)")
    K = A @ _reg_inverse(G, beta_koop)
    evals, W, V = _left_right_eig(K)
    return KoopmanModel(
        kernel=kernel, centers=centers, variant="sk", K=K,
        eigenvalues=evals, left_vectors=W, right_vectors=V,
        beta_koop=beta_koop, gram_xx=G,
    )


def fit_tr(kernel, centers, rank_tol=RANK_TOL):
    """Fit the truncated-SVD variant from the Gram eigendecomposition.

    g(X, X) = Z S^2 Z^T (eigenvalues clipped at zero); components with
    singular value S_ii <= rank_tol * max(S) are discarded and
    K = (Z S^+)^T A (Z S^+) is formed on the retained rank.
    """
    if len(centers) == 0:
        raise ConfigError("fit_tr: empty centers")
    G = kernel.gram(centers.X, centers.X)
    A = kernel.gram(centers.X, centers.Y)
    _check_gram(G, "g(X, X)")
    _check_gram(A, "g(X, Y)")
    mu, Zfull = np.linalg.eigh(G)
    sig = np.sqrt(np.clip(mu, 0.0, None))
    keep = sig > rank_tol * np.max(sig)
    if not np.any(keep):
        raise DegenerateKernelError("fit_tr: no singular values above the rank cutoff")
    order = np.argsort(sig[keep])[::-1]
    Z = Zfull[:, keep][:, order]
    sigma = sig[keep][order]
    ZSp = Z / sigma
    K = ZSp.T @ A @ ZSp
    evals, W, V = _left_right_eig(K)
    return KoopmanModel(
        kernel=kernel, centers=centers, variant="tr", K=K,
        eigenvalues=evals, left_vectors=W, right_vectors=V,
        beta_koop=0.0, gram_xx=G, Z=Z, sigma=sigma,
    )


def map_spectrum(model, direction, left_vectors=None, right_vectors=None):
    """Map eigenvectors between the truncated and kernel-section coordinates.

    ``model`` must carry the Gram factors Z and sigma (truncated variant).
    For ``"tr_to_sk"`` the model's own eigenvectors are mapped by default:

        w_sk = w_tr S^+ Z^T,    v_sk = Z S v_tr.

    For ``"sk_to_tr"`` pass the kernel-section eigenvectors explicitly:

        w_tr = w_sk Z S,        v_tr = S^+ Z^T v_sk.

    Returns ``(left_mapped, right_mapped)`` with rows / columns aligned to
    the input ordering.
    """
    if model.Z is None or model.sigma is None:
        raise VariantError("map_spectrum: model does not carry Z / sigma (need variant 'tr')")
    ZS = model.Z * model.sigma          # Z S, shape (N, r)
    ZSp = model.Z / model.sigma         # Z S^+, shape (N, r)
    if direction == "tr_to_sk":
        W = model.left_vectors if left_vectors is None else left_vectors
        V = model.right_vectors if right_vectors is None else right_vectors
        return W @ ZSp.T, ZS @ V
    if direction == "sk_to_tr":
        if left_vectors is None or right_vectors is None:
            raise ConfigError("map_spectrum: sk_to_tr needs the sk eigenvectors")
        return left_vectors @ ZS, ZSp.T @ right_vectors
    raise ConfigError(f"map_spectrum: unknown direction {direction!r}")


def eigenfunctions_at(model, points):
    """Evaluate all approximate eigenfunctions at the given points.

    Returns a complex (n_eig, m) matrix whose row j is phi_j at each point:
    W g(X, points) for the kernel-section variant, W S^+ Z^T g(X, points)
    for the truncated one.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != model.centers.dim:
        raise ConfigError(
            f"eigenfunctions_at: point dimension {pts.shape[1]} != centers dimension {model.centers.dim}"
        )
    Gp = model.kernel.gram(model.centers.X, pts)
    if model.variant == "tr":
        Gp = (model.Z / model.sigma).T @ Gp
    return model.left_vectors @ Gp


def fit_projection(model, beta_modes=0.0):
    """Attach the state-space projection C_p = X^T (g(X,X) + beta I)^+."""
    C_p = model.centers.X.T @ _reg_inverse(model.gram_xx, beta_modes)
    return dataclasses.replace(model, C_p=C_p)


def fit_modes(model, beta=0.0):
    """Attach the Koopman modes, the regularized least-squares solution of

        min_C || Y^T - C Lambda Phi(X) ||_F^2

    over complex d x n_eig matrices, with the identity observable."""
    Phi_c = eigenfunctions_at(model, model.centers.X)
    B = model.eigenvalues[:, None] * Phi_c
    Yt = model.centers.Y.T
    if beta > 0.0:
        M = B @ B.conj().T + beta * np.eye(B.shape[0])
        R = Yt @ B.conj().T
        C_m = np.linalg.solve(M.T, R.T).T
    else:
        C_m = np.linalg.lstsq(B.T, Yt.T, rcond=PINV_RCOND)[0].T
    return dataclasses.replace(model, C_m=C_m)


def predict(model, x0, steps, method="spectral"):
    """Roll a predicted trajectory forward from x0 for the given step count.

    ``spectral`` evaluates Re(C_m Lambda^t Phi(x0)) for t = 1..steps;
    ``recursive`` iterates x <- C_p K g(X, x).  Returns a (steps, d) array.
    Raises DivergedError carrying the finite prefix if the state leaves the
    finite range.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    d = model.centers.dim
    if x0.shape[0] != d:
        raise ConfigError(f"predict: x0 dimension {x0.shape[0]} != {d}")
    out = np.empty((steps, d))
    if steps == 0:
        return out
    if method == "spectral":
        if model.C_m is None:
            raise ConfigError("predict: spectral method needs fitted modes (fit_modes)")
        phi = eigenfunctions_at(model, x0[None, :])[:, 0]
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(steps):
                phi = model.eigenvalues * phi
                xt = np.real(model.C_m @ phi)
                if not np.all(np.isfinite(xt)):
                    raise DivergedError(
                        f"prediction diverged at step {t + 1}", steps_completed=t,
                        trajectory=out[:t].copy(),
                    )
                out[t] = xt
        return out
    if method == "recursive":
        if model.C_p is None:
            raise ConfigError("predict: recursive method needs a fitted projection (fit_projection)")
        if model.variant == "tr":
            # Pull the operator back to dictionary coordinates through Z S.
            ZS = model.Z * model.sigma
            K = ZS @ model.K @ (model.Z / model.sigma).T
        else:
            K = model.K
        CpK = model.C_p @ K
        x = x0
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(steps):
                try:
                    psi = model.kernel.gram(model.centers.X, x[None, :])[:, 0]
                    x = CpK @ psi
                except NumericError:
                    x = np.full(d, np.inf)
                if not np.all(np.isfinite(x)):
                    raise DivergedError(
                        f"prediction diverged at step {t + 1}", steps_completed=t,
                        trajectory=out[:t].copy(),
                    )
                out[t] = x
        return out
    raise ConfigError(f"predict: unknown method {method!r}")


def residuals(model, eval_set=None):
    """Data-driven residuals ||K phi_j - lambda_j phi_j|| / ||phi_j|| per
    eigenpair, discretized over the evaluation snapshot pairs.

    With phi_j evaluated on (X, Y) of ``eval_set`` (the fitting centers by
    default), the squared residual is ||phi_j(Y) - lambda_j phi_j(X)||^2 /
    ||phi_j(X)||^2; round-off can make the expanded numerator marginally
    negative, so it is clamped at zero before the square root.
    """
    es = model.centers if eval_set is None else eval_set
    Phi_x = eigenfunctions_at(model, es.X)
    Phi_y = eigenfunctions_at(model, es.Y)
    den2 = np.sum(np.abs(Phi_x) ** 2, axis=1)
    if np.any(den2 == 0.0):
        raise DegenerateKernelError("residuals: an eigenfunction vanishes on the evaluation set")
    diff = Phi_y - model.eigenvalues[:, None] * Phi_x
    num2 = np.maximum(np.sum(np.abs(diff) ** 2, axis=1), 0.0)
    return np.sqrt(num2 / den2)


def residual(model, eigen_index, eval_set=None):
    """Residual of a single eigenpair on the evaluation set."""
    if not 0 <= eigen_index < model.n_eig:
        raise ConfigError(f"residual: eigen_index {eigen_index} out of range 0..{model.n_eig - 1}")
    return float(residuals(model, eval_set)[eigen_index])


def eigenpair_reports(model, eval_set=None):
    """Residual-annotated eigenpairs, in the model's eigenvalue order."""
    res = residuals(model, eval_set)
    return [
        EigenpairReport(
            eigenvalue=complex(model.eigenvalues[j]),
            left_vector=model.left_vectors[j],
            residual=float(res[j]),
        )
        for j in range(model.n_eig)
    ]


@dataclass
class EquivalenceReport:
    instances: int
    count_mismatches: int
    max_eigenvalue_gap: float
    max_eigenvector_defect: float

    def passed(self, tol=1e-8):
        return (self.count_mismatches == 0
                and self.max_eigenvalue_gap <= tol
                and self.max_eigenvector_defect <= tol)


def _nonzero_eigs(model):
    mags = np.abs(model.eigenvalues)
    return model.eigenvalues[mags > 1e-8 * np.max(mags)]


def equivalence_check(instances=200, max_points=20, seed=0, kernel=None):
    """Randomized oracle for the equivalence of the two fit variants.

    Per instance: draw a well-separated random snapshot set (separation
    keeps the Gram numerically full rank, where the exact-arithmetic
    equivalence is representable in floating point) and a strictly positive
    definite kernel sum, fit both variants at beta = 0, and compare the
    nonzero-eigenvalue multisets (optimal complex matching) plus the
    eigen-equation defect of the mapped eigenvectors.
    """
    from scipy.optimize import linear_sum_assignment

    from .kernels import LinearKernel, NNGPKernel, RBFKernel, WeightedKernelSum

    rng = np.random.default_rng(seed)

    def separated(n, d):
        while True:
            P = rng.normal(size=(n, d))
            dist = np.sqrt(np.sum((P[:, None, :] - P[None, :, :]) ** 2, axis=-1))
            if (dist + np.eye(n)).min() >= 0.05:
                return P

    mismatches = 0
    max_gap = 0.0
    max_defect = 0.0
    for _ in range(instances):
        n = int(rng.integers(1, max_points + 1))
        d = int(rng.integers(1, 4))
        ss = SnapshotSet(separated(n, d), separated(n, d))
        if kernel is None:
            # sharp first component acts as a numerical nugget
            k = WeightedKernelSum(
                [RBFKernel([0.01]), RBFKernel([rng.uniform(0.5, 1.5)]),
                 LinearKernel([rng.uniform(0.3, 1.0)]),
                 NNGPKernel([rng.uniform(0.5, 1.5), rng.uniform(0.3, 1.0)])],
                rng.uniform(0.3, 1.5, size=4), _validated=True,
            )
        else:
            k = kernel
        m_sk = fit_sk(k, ss, 0.0)
        m_tr = fit_tr(k, ss)
        a, b = _nonzero_eigs(m_sk), _nonzero_eigs(m_tr)
        if len(a) != len(b):
            mismatches += 1
            continue
        if len(a):
            cost = np.abs(a[:, None] - b[None, :])
            r, c = linear_sum_assignment(cost)
            max_gap = max(max_gap, float(cost[r, c].max()))
        W_m, V_m = map_spectrum(m_tr, "tr_to_sk")
        nK = np.linalg.norm(m_sk.K)
        if nK > 0:
            max_defect = max(
                max_defect,
                float(np.max(np.abs(W_m @ m_sk.K - m_tr.eigenvalues[:, None] * W_m))) / nK,
                float(np.max(np.abs(m_sk.K @ V_m - V_m * m_tr.eigenvalues[None, :]))) / nK,
            )
    return EquivalenceReport(
        instances=instances, count_mismatches=mismatches,
        max_eigenvalue_gap=max_gap, max_eigenvector_defect=max_defect,
    )
