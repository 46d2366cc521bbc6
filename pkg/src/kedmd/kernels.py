"""Parameterized kernel primitives and their normalized weighted sum.

The learnable object is a weighted sum of primitive kernels

    g(x, y) = sum_i (w_i / wbar)^2 g_i(x, y),    wbar = sum_i |w_i|,

with outer weights ``w_i`` and per-primitive inner parameters (RBF length
scale, linear scale, cosine frequency, NNGP variances).  Squaring the
normalized weights keeps the sum positive semidefinite whenever every
primitive is, and makes the sign of the raw weights irrelevant for
evaluation.  Gram assembly and the analytic parameter gradients (including
the chain rule through the weight normalization) are vectorized over point
sets; everything here is pure and safe to call concurrently.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateKernelError, NumericError

# Guards 1/sigma^2 when SGD pushes a length scale through zero.
SIGMA_EPS = 1e-12

_SYMMETRY_TOL = 1e-12
_TWO_PI = 2.0 * np.pi


class KernelPsdWarning(UserWarning):
    """Emitted for primitives that are not guaranteed positive semidefinite."""


def _pairwise_sqdist(A, B):
    """Squared Euclidean distances between the rows of A (m,d) and B (n,d).

    Computed from explicit differences so equal rows give an exact zero and
    entry (i, j) is bitwise equal to entry (j, i) of the swapped call.
    Chunked over rows of A to bound the temporary (m, n, d) buffer.
    """
    m, n = A.shape[0], B.shape[0]
    out = np.empty((m, n))
    chunk = max(1, int(4_000_000 // max(1, n * A.shape[1])))
    for lo in range(0, m, chunk):
        diff = A[lo:lo + chunk, None, :] - B[None, :, :]
        out[lo:lo + chunk] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def circle_embedding(A):
    """Componentwise angle embedding x -> (cos x, sin x), mapping (m,d) to (m,2d)."""
    return np.concatenate([np.cos(A), np.sin(A)], axis=1)


EMBEDDINGS = {"circle": circle_embedding}


class PrimitiveKernel:
    """Base class for symmetric primitive kernels.

    Subclasses define ``kind``, ``param_names``, Gram assembly, and the
    analytic Gram derivative with respect to each inner parameter.
    Instances are immutable; parameter updates go through ``with_params``.
    """

    kind = "base"
    param_names: tuple = ()

    def __init__(self, params):
        p = np.atleast_1d(np.asarray(params, dtype=float)).copy()
        if p.shape != (len(self.param_names),):
            raise ConfigError(
                f"kernel.{self.kind}: expected {len(self.param_names)} "
                f"parameter(s) {self.param_names}, got {p.size}"
            )
        p.flags.writeable = False
        self.params = p

    def with_params(self, params):
        return type(self)(params)

    def gram(self, A, B):
        """Gram block with entry (i, j) = g(a_i, b_j)."""
        raise NotImplementedError

    def gram_param_grads(self, A, B):
        """Return (G, [dG/dp for each inner parameter])."""
        raise NotImplementedError

    def spec(self):
        return {
            "kind": self.kind,
            "params": {n: float(v) for n, v in zip(self.param_names, self.params)},
        }

    def __repr__(self):
        vals = ", ".join(f"{n}={v:.6g}" for n, v in zip(self.param_names, self.params))
        return f"{type(self).__name__}({vals})"


class RBFKernel(PrimitiveKernel):
    """Gaussian kernel exp(-|x - y|^2 / (2 sigma^2))."""

    kind = "rbf"
    param_names = ("sigma",)

    def _sqdist(self, A, B):
        return _pairwise_sqdist(A, B)

    def gram(self, A, B):
        s2 = self.params[0] ** 2 + SIGMA_EPS
        return np.exp(-self._sqdist(A, B) / (2.0 * s2))

    def gram_param_grads(self, A, B):
        sigma = self.params[0]
        s2 = sigma ** 2 + SIGMA_EPS
        d2 = self._sqdist(A, B)
        G = np.exp(-d2 / (2.0 * s2))
        return G, [G * d2 * (sigma / s2 ** 2)]


class EmbeddedRBFKernel(RBFKernel):
    """RBF applied after a fixed, non-learnable embedding of the inputs.

    Only the length scale is trainable; the embedding is looked up by name
    (componentwise circle map by default), which keeps instances
    serializable.
    """

    kind = "embedded_rbf"
    param_names = ("sigma",)

    def __init__(self, params, embedding="circle"):
        super().__init__(params)
        if embedding not in EMBEDDINGS:
            raise ConfigError(
                f"kernel.embedded_rbf: unknown embedding {embedding!r}; "
                f"available: {sorted(EMBEDDINGS)}"
            )
        self.embedding = embedding
        self._embed = EMBEDDINGS[embedding]

    def with_params(self, params):
        return EmbeddedRBFKernel(params, embedding=self.embedding)

    def _sqdist(self, A, B):
        return _pairwise_sqdist(self._embed(A), self._embed(B))

    def spec(self):
        out = super().spec()
        out["embedding"] = self.embedding
        return out


class LinearKernel(PrimitiveKernel):
    """Homogeneous linear kernel c1^2 <x, y>."""

    kind = "linear"
    param_names = ("c1",)

    def gram(self, A, B):
        return self.params[0] ** 2 * (A @ B.T)

    def gram_param_grads(self, A, B):
        dot = A @ B.T
        return self.params[0] ** 2 * dot, [2.0 * self.params[0] * dot]


class CosineKernel(PrimitiveKernel):
    """cos(a |x - y|^2).  Not positive semidefinite in general; construction
    of a weighted sum containing it warns instead of rejecting."""

    kind = "cosine"
    param_names = ("a",)

    def gram(self, A, B):
        return np.cos(self.params[0] * _pairwise_sqdist(A, B))

    def gram_param_grads(self, A, B):
        d2 = _pairwise_sqdist(A, B)
        ad2 = self.params[0] * d2
        return np.cos(ad2), [-d2 * np.sin(ad2)]


class NNGPKernel(PrimitiveKernel):
    """Closed-form infinite-width ReLU network covariance.

    With the base covariance g0(x, y) = b1^2 <x, y>/d + b2^2 and the angle
    omega = arccos(g0(x, y) / sqrt(g0(x, x) g0(y, y))), the kernel is

        g(x, y) = b2^2 + b1^2/(2 pi) * sqrt(g0(x,x) g0(y,y))
                  * (sin omega + (pi - omega) cos omega).

    The arccos argument is clamped to [-1, 1] before use; floating point can
    push it marginally past 1.  Requires strictly positive diagonals, i.e.
    b2 != 0 or inputs with nonzero norm.
    """

    kind = "nngp"
    param_names = ("b1", "b2")

    def _pieces(self, A, B):
        b1, b2 = self.params
        d = A.shape[1]
        dot = A @ B.T
        qa = b1 * b1 * np.einsum("ij,ij->i", A, A) / d + b2 * b2
        qb = b1 * b1 * np.einsum("ij,ij->i", B, B) / d + b2 * b2
        g0 = b1 * b1 * dot / d + b2 * b2
        s = np.sqrt(np.outer(qa, qb))
        if np.any(s <= 0.0):
            raise NumericError(
                "nngp kernel: g0(x, x) = 0 for some input; "
                "zero-norm points require b2 != 0"
            )
        rho_raw = g0 / s
        rho = np.clip(rho_raw, -1.0, 1.0)
        return dot, qa, qb, g0, s, rho_raw, rho

    @staticmethod
    def _angular(rho):
        omega = np.arccos(rho)
        F = np.sqrt(np.maximum(1.0 - rho * rho, 0.0)) + (np.pi - omega) * rho
        return omega, F

    def gram(self, A, B):
        b1, b2 = self.params
        _, _, _, _, s, _, rho = self._pieces(A, B)
        _, F = self._angular(rho)
        return b2 * b2 + (b1 * b1 / _TWO_PI) * s * F

    def gram_param_grads(self, A, B):
        b1, b2 = self.params
        d = A.shape[1]
        dot, qa, qb, g0, s, rho_raw, rho = self._pieces(A, B)
        omega, F = self._angular(rho)
        G = b2 * b2 + (b1 * b1 / _TWO_PI) * s * F

        # dF/drho = pi - omega (the sqrt singularities cancel); the clamp
        # contributes zero derivative outside the open interval.
        Fp = np.pi - omega
        active = (rho_raw > -1.0) & (rho_raw < 1.0)

        na = np.einsum("ij,ij->i", A, A) / d
        nb = np.einsum("ij,ij->i", B, B) / d

        def total(dqa, dqb, dg0, dlead):
            ds = (np.outer(dqa, qb) + np.outer(qa, dqb)) / (2.0 * s)
            drho = np.where(active, (dg0 - rho * ds) / s, 0.0)
            return dlead + (b1 * b1 / _TWO_PI) * (ds * F + s * Fp * drho)

        db1 = total(2.0 * b1 * na, 2.0 * b1 * nb, 2.0 * b1 * dot / d,
                    (2.0 * b1 / _TWO_PI) * s * F)
        db2 = total(2.0 * b2 * np.ones_like(qa), 2.0 * b2 * np.ones_like(qb),
                    2.0 * b2 * np.ones_like(g0), 2.0 * b2 * np.ones_like(G))
        return G, [db1, db2]


_KINDS = {
    "rbf": RBFKernel,
    "embedded_rbf": EmbeddedRBFKernel,
    "linear": LinearKernel,
    "cosine": CosineKernel,
    "nngp": NNGPKernel,
}

# Accepted in kernel specs but bound to no formula; kept for compatibility
# with parameter lists that enumerate it alongside c1.
_IGNORED_PARAM_KEYS = {"c2"}


def make_primitive(kind, params, embedding=None):
    """Build a primitive kernel from its config record.

    ``params`` may be a mapping of parameter names to values or a plain
    sequence in declaration order.  Unknown parameter keys raise, except the
    conventionally ignored ones.
    """
    if kind not in _KINDS:
        raise ConfigError(f"kernel.kind: unknown kind {kind!r}; available: {sorted(_KINDS)}")
    cls = _KINDS[kind]
    if isinstance(params, dict):
        extra = set(params) - set(cls.param_names) - _IGNORED_PARAM_KEYS
        if extra:
            raise ConfigError(f"kernel.{kind}: unknown parameter(s) {sorted(extra)}")
        missing = set(cls.param_names) - set(params)
        if missing:
            raise ConfigError(f"kernel.{kind}: missing parameter(s) {sorted(missing)}")
        values = [float(params[n]) for n in cls.param_names]
    else:
        values = [float(v) for v in params]
    if kind == "embedded_rbf":
        return cls(values, embedding=embedding or "circle")
    return cls(values)


@dataclass(frozen=True)
class ParamGradient:
    """Partials of a kernel evaluation: one per outer weight, and a ragged
    list with one array per primitive's inner parameters."""

    outer: np.ndarray
    inner: list


class WeightedKernelSum:
    """Normalized, squared-weight sum of primitive kernels.

    Immutable; SGD steps produce new instances via ``with_flat_params``.
    The parameter values present at first construction are retained through
    updates and pruning so a pruned kernel can be reset to its
    initialization.
    """

    def __init__(self, primitives, weights, _initial=None, _validated=False):
        primitives = tuple(primitives)
        if not primitives:
            raise DegenerateKernelError("weighted kernel sum needs at least one primitive")
        w = np.asarray(weights, dtype=float).copy()
        if w.shape != (len(primitives),):
            raise ConfigError(
                f"kernel.weights: expected {len(primitives)} outer weights, got {w.shape}"
            )
        w.flags.writeable = False
        self.primitives = primitives
        self.weights = w
        self._offsets = np.cumsum([0] + [len(p.params) for p in primitives])
        if _initial is None:
            _initial = self.flat_params
        self._initial = np.asarray(_initial, dtype=float).copy()
        self._initial.flags.writeable = False
        if not _validated:
            self._validate()

    def _validate(self):
        rng = np.random.default_rng(1234)
        for dim in (1, 3):
            P = rng.uniform(0.5, 1.5, size=(3, dim))
            Q = rng.uniform(-1.5, -0.5, size=(3, dim))
            for i, prim in enumerate(self.primitives):
                gap = np.max(np.abs(prim.gram(P, Q) - prim.gram(Q, P).T))
                if not gap <= _SYMMETRY_TOL:
                    raise ConfigError(
                        f"kernel.primitives[{i}]: {prim.kind} kernel is not symmetric "
                        f"(probe asymmetry {gap:.3e})"
                    )
        for i, prim in enumerate(self.primitives):
            if isinstance(prim, CosineKernel):
                warnings.warn(
                    f"primitive {i} (cosine) is not guaranteed positive "
                    "semidefinite; Gram matrices containing it may be indefinite",
                    KernelPsdWarning,
                    stacklevel=3,
                )

    # -- parameter vector layout: [w_1..w_M, inner params per primitive] --

    @property
    def n_primitives(self):
        return len(self.primitives)

    @property
    def n_params(self):
        return self.n_primitives + int(self._offsets[-1])

    @property
    def flat_params(self):
        return np.concatenate([self.weights] + [p.params for p in self.primitives])

    @property
    def initial_flat_params(self):
        return self._initial

    def with_flat_params(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ConfigError(f"kernel params: expected length {self.n_params}, got {flat.shape}")
        M = self.n_primitives
        prims = [
            p.with_params(flat[M + self._offsets[i]:M + self._offsets[i + 1]])
            for i, p in enumerate(self.primitives)
        ]
        return WeightedKernelSum(prims, flat[:M], _initial=self._initial, _validated=True)

    def reset_to_initial(self):
        return self.with_flat_params(self._initial)

    def split_flat(self, flat):
        """Split a flat parameter (or gradient) vector into (outer, inner list)."""
        M = self.n_primitives
        inner = [
            np.asarray(flat[M + self._offsets[i]:M + self._offsets[i + 1]])
            for i in range(M)
        ]
        return np.asarray(flat[:M]), inner

    @property
    def w_bar(self):
        return float(np.sum(np.abs(self.weights)))

    def normalized_weights(self):
        wbar = self.w_bar
        if wbar == 0.0:
            raise DegenerateKernelError("all outer weights are zero (w_bar = 0)")
        return self.weights / wbar

    # -- evaluation --

    def _primitive_grams(self, A, B):
        blocks = []
        for i, prim in enumerate(self.primitives):
            Gi = prim.gram(A, B)
            if not np.all(np.isfinite(Gi)):
                r, c = np.argwhere(~np.isfinite(Gi))[0]
                raise NumericError(
                    f"primitive {i} ({prim.kind}) produced a non-finite Gram "
                    f"entry at ({r}, {c})"
                )
            blocks.append(Gi)
        return blocks

    def gram(self, A, B):
        """Gram matrix with entry (i, j) = g(a_i, b_j) for rows of A and B."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        if A.shape[1] != B.shape[1]:
            raise ConfigError(f"gram: dimension mismatch {A.shape[1]} vs {B.shape[1]}")
        wt2 = self.normalized_weights() ** 2
        blocks = self._primitive_grams(A, B)
        G = np.zeros((A.shape[0], B.shape[0]))
        for c, Gi in zip(wt2, blocks):
            G += c * Gi
        return G

    def eval(self, x, y):
        """Kernel value g(x, y) for two state vectors."""
        x = np.asarray(x, dtype=float).reshape(1, -1)
        y = np.asarray(y, dtype=float).reshape(1, -1)
        return float(self.gram(x, y)[0, 0])

    def gram_with_grads(self, A, B):
        """Gram matrix plus its derivative with respect to every parameter.

        Returns ``(G, dG)`` where ``dG`` has shape (n_params, m, n) in flat
        parameter order.  Outer-weight derivatives include the chain rule
        through wbar:

            dG/dw_j = (2/wbar) * (wtilde_j G_j - sign(w_j) G).
        """
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        if A.shape[1] != B.shape[1]:
            raise ConfigError(f"gram: dimension mismatch {A.shape[1]} vs {B.shape[1]}")
        wbar = self.w_bar
        if wbar == 0.0:
            raise DegenerateKernelError("all outer weights are zero (w_bar = 0)")
        wt = self.weights / wbar
        M = self.n_primitives

        G = np.zeros((A.shape[0], B.shape[0]))
        dG = np.zeros((self.n_params, A.shape[0], B.shape[0]))
        blocks = []
        for i, prim in enumerate(self.primitives):
            Gi, inner_grads = prim.gram_param_grads(A, B)
            if not np.all(np.isfinite(Gi)):
                raise NumericError(f"primitive {i} ({prim.kind}) produced non-finite Gram entries")
            blocks.append(Gi)
            G += wt[i] ** 2 * Gi
            for k, dGik in enumerate(inner_grads):
                dG[M + self._offsets[i] + k] = wt[i] ** 2 * dGik
        sgn = np.sign(self.weights)
        for j in range(M):
            dG[j] = (2.0 / wbar) * (wt[j] * blocks[j] - sgn[j] * G)
        return G, dG

    def grad_params(self, x, y):
        """Exact partials of eval(x, y) with respect to every parameter."""
        x = np.asarray(x, dtype=float).reshape(1, -1)
        y = np.asarray(y, dtype=float).reshape(1, -1)
        _, dG = self.gram_with_grads(x, y)
        outer, inner = self.split_flat(dG[:, 0, 0])
        return ParamGradient(outer=outer, inner=inner)

    # -- pruning --

    def prune(self, keep=None, threshold=None, keep_largest=None):
        """Drop primitives by explicit index set, |w| threshold, or count.

        Kept weights are carried over unmodified; evaluation renormalizes
        through wbar.  Removing every primitive is an error.  Ties in |w|
        are broken by removing the lowest index first.
        """
        given = [keep is not None, threshold is not None, keep_largest is not None]
        if sum(given) != 1:
            raise ConfigError("prune: specify exactly one of keep / threshold / keep_largest")
        absw = np.abs(self.weights)
        if keep is not None:
            idx = sorted(set(int(i) for i in keep))
            if any(i < 0 or i >= self.n_primitives for i in idx):
                raise ConfigError(f"prune.keep: index out of range 0..{self.n_primitives - 1}")
        elif threshold is not None:
            idx = [i for i in range(self.n_primitives) if absw[i] >= threshold]
        else:
            if keep_largest < 1:
                raise ConfigError("prune.keep_largest: must keep at least one primitive")
            removal_order = np.argsort(absw, kind="stable")
            drop = set(removal_order[:max(0, self.n_primitives - int(keep_largest))])
            idx = [i for i in range(self.n_primitives) if i not in drop]
        if not idx:
            raise DegenerateKernelError("prune: would remove every primitive")

        init_w, init_inner = self.split_flat(self._initial)
        new_initial = np.concatenate(
            [init_w[idx]] + [init_inner[i] for i in idx]
        )
        return WeightedKernelSum(
            [self.primitives[i] for i in idx],
            self.weights[idx],
            _initial=new_initial,
            _validated=True,
        )

    # -- serialization --

    def spec(self):
        init_w, init_inner = self.split_flat(self._initial)
        records = []
        for i, prim in enumerate(self.primitives):
            rec = prim.spec()
            rec["weight"] = float(self.weights[i])
            rec["init"] = {
                "weight": float(init_w[i]),
                "params": {n: float(v) for n, v in zip(prim.param_names, init_inner[i])},
            }
            records.append(rec)
        return {"primitives": records}

    @classmethod
    def from_spec(cls, spec):
        prims, weights, init_w, init_inner = [], [], [], []
        records = spec.get("primitives")
        if not records:
            raise ConfigError("kernel.primitives: empty or missing")
        for rec in records:
            prim = make_primitive(rec["kind"], rec["params"], embedding=rec.get("embedding"))
            prims.append(prim)
            weights.append(float(rec.get("weight", 1.0)))
            init = rec.get("init")
            if init is None:
                init_w.append(weights[-1])
                init_inner.append(np.asarray(prim.params))
            else:
                init_w.append(float(init["weight"]))
                init_inner.append(np.array([float(init["params"][n]) for n in prim.param_names]))
        initial = np.concatenate([np.asarray(init_w)] + init_inner)
        return cls(prims, weights, _initial=initial)

    def __repr__(self):
        parts = ", ".join(f"{w:.4g}*{p!r}" for w, p in zip(self.weights, self.primitives))
        return f"WeightedKernelSum[{parts}]"
