"""Snapshot data generation for the three benchmark systems.

* Duffing oscillator  x1' = x2, x2' = -d1 x2 - d2 x1 - d3 x1^3, integrated
  with classical RK4 using fixed substeps per snapshot interval.
* Circle shift map    x <- (x + omega) mod 2pi, whose Koopman eigenvalues
  are exactly exp(i omega j).
* Kuramoto-Sivashinsky  u_t + 4 u_xxxx + gamma (u_xx + u u_x) = 0 on a
  periodic grid over [0, 2pi), advanced pseudo-spectrally (rfft, 2/3-rule
  dealiasing of the quadratic term) with ETDRK4 time stepping; the stiff
  linear coefficients are evaluated by the usual complex contour mean.

Initial conditions are drawn from per-trajectory counter-based streams
(Philox keyed by (seed, ic_index)), so the draw for trajectory i does not
depend on how many trajectories precede it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DivergedError
from .koopman import SnapshotSet

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class TrajectoryBundle:
    """Simulated trajectories: ics (n, d), trajectories (n, steps+1, d)."""

    ics: np.ndarray
    trajectories: np.ndarray
    dt: float

    @property
    def n_trajectories(self):
        return self.trajectories.shape[0]

    @property
    def steps(self):
        return self.trajectories.shape[1] - 1

    @property
    def dim(self):
        return self.trajectories.shape[2]

    def pair_start_indices(self, pair_stride=1):
        """Start indices of the (x_t, x_{t+1}) pairs a stride selects."""
        if pair_stride < 1:
            raise ConfigError("pair_stride: must be >= 1")
        return np.arange(0, self.steps, pair_stride)

    def to_snapshots(self, pair_stride=1):
        """Pair consecutive states into a SnapshotSet, trajectory-major.

        ``pair_stride`` keeps every stride-th pair; 1 keeps all consecutive
        pairs, 2 every second one (half the rows per trajectory).
        """
        t0 = self.pair_start_indices(pair_stride)
        X = self.trajectories[:, t0, :].reshape(-1, self.dim)
        Y = self.trajectories[:, t0 + 1, :].reshape(-1, self.dim)
        return SnapshotSet(X, Y)


def _rk4_step(rhs, x, h):
    k1 = rhs(x)
    k2 = rhs(x + 0.5 * h * k1)
    k3 = rhs(x + 0.5 * h * k2)
    k4 = rhs(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _iterate_map_batch(step, X0, steps):
    """Advance a batch of states (rows of X0) through a vectorized map."""
    out = np.empty((X0.shape[0], steps + 1, X0.shape[1]))
    out[:, 0] = X0
    X = X0
    for t in range(1, steps + 1):
        X = step(X)
        if not np.all(np.isfinite(X)):
            bad = int(np.argwhere(~np.isfinite(X).all(axis=1))[0])
            raise DivergedError(
                f"trajectory {bad} left the finite range at step {t}",
                steps_completed=t - 1, trajectory=out[:, :t].copy(),
            )
        out[:, t] = X
    return out


@dataclass(frozen=True)
class DuffingSpec:
    """Unforced Duffing oscillator; the defaults give two stable equilibria
    at (+-1, 0) separated by a saddle at the origin."""

    delta1: float = 0.5
    delta2: float = -1.0
    delta3: float = 1.0
    dt: float = 0.1
    substeps: int = 10
    ic_box: float = 2.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError("system.dt: must be positive")
        if self.substeps < 1:
            raise ConfigError("system.substeps: must be >= 1")

    @property
    def dim(self):
        return 2

    def rhs(self, x):
        # x has shape (..., 2); vectorized over leading axes
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack(
            [x2, -self.delta1 * x2 - self.delta2 * x1 - self.delta3 * x1 ** 3],
            axis=-1,
        )

    def step(self, x):
        h = self.dt / self.substeps
        for _ in range(self.substeps):
            x = _rk4_step(self.rhs, x, h)
        return x

    def sample_ic(self, rng):
        return rng.uniform(-self.ic_box, self.ic_box, size=2)

    def trajectory(self, x0, steps):
        x0 = np.asarray(x0, dtype=float)
        return _iterate_map_batch(self.step, x0[None, :], steps)[0]

    def trajectories(self, X0, steps):
        return _iterate_map_batch(self.step, np.asarray(X0, dtype=float), steps)


@dataclass(frozen=True)
class ModuloSpec:
    """Circle shift x <- (x + omega) mod 2pi on the scalar state."""

    omega: float = 1.1 * np.pi

    @property
    def dim(self):
        return 1

    @property
    def dt(self):
        return 1.0

    def step(self, x):
        return np.mod(x + self.omega, TWO_PI)

    def sample_ic(self, rng):
        return rng.uniform(0.0, TWO_PI, size=1)

    def trajectory(self, x0, steps):
        x0 = np.asarray(x0, dtype=float)
        return _iterate_map_batch(self.step, x0[None, :], steps)[0]

    def trajectories(self, X0, steps):
        return _iterate_map_batch(self.step, np.asarray(X0, dtype=float), steps)


def modulo_step(omega, x):
    """One application of the shift map, wrapped into [0, 2pi)."""
    return float(np.mod(x + omega, TWO_PI))


def modulo_true_eigenvalues(omega, count):
    """exp(i omega j) for j = 0..count-1; all on the unit circle."""
    return np.exp(1j * omega * np.arange(count))


class _EtdRk4:
    """ETDRK4 stepper for the KSE in rfft space.

    Linear multiplier L_k = -4 k^4 + gamma k^2 on integer wavenumbers of
    the periodic grid; the phi-function coefficients are computed by a
    32-point contour mean (Kassam-Trefethen style), which is robust at the
    removable singularity near L = 0.
    """

    def __init__(self, spec, h):
        n = spec.grid_points
        k = np.arange(n // 2 + 1, dtype=float)
        L = -4.0 * k ** 4 + spec.gamma * k ** 2
        self.n = n
        self.ik = 1j * k
        self.gamma = spec.gamma
        self.dealias = k <= (n // 3) if spec.dealias else np.ones_like(k, dtype=bool)
        self.E = np.exp(h * L)
        self.E2 = np.exp(0.5 * h * L)
        M = 32
        r = np.exp(1j * np.pi * (np.arange(1, M + 1) - 0.5) / M)
        LR = h * L[:, None] + r[None, :]
        eLR = np.exp(LR)
        self.Q = h * np.real(np.mean((np.exp(LR / 2.0) - 1.0) / LR, axis=1))
        self.f1 = h * np.real(np.mean((-4.0 - LR + eLR * (4.0 - 3.0 * LR + LR ** 2)) / LR ** 3, axis=1))
        self.f2 = h * np.real(np.mean((2.0 + LR + eLR * (-2.0 + LR)) / LR ** 3, axis=1))
        self.f3 = h * np.real(np.mean((-4.0 - 3.0 * LR - LR ** 2 + eLR * (4.0 - LR)) / LR ** 3, axis=1))

    def nonlinear(self, v):
        # -gamma * u u_x = -(gamma/2) d/dx (u^2), 2/3-rule dealiased
        u = np.fft.irfft(np.where(self.dealias, v, 0.0), n=self.n)
        return -0.5 * self.gamma * self.ik * np.where(
            self.dealias, np.fft.rfft(u * u), 0.0
        )

    def step(self, v):
        Nv = self.nonlinear(v)
        a = self.E2 * v + self.Q * Nv
        Na = self.nonlinear(a)
        b = self.E2 * v + self.Q * Na
        Nb = self.nonlinear(b)
        c = self.E2 * a + self.Q * (2.0 * Nb - Nv)
        Nc = self.nonlinear(c)
        return self.E * v + Nv * self.f1 + 2.0 * (Na + Nb) * self.f2 + Nc * self.f3


@dataclass(frozen=True)
class KseSpec:
    """Kuramoto-Sivashinsky on [0, 2pi) with periodic boundary.

    The initial-condition family is u(x, 0) = tau1 sin(2 pi x)
    + tau2 exp(cos(2 pi x)) evaluated on the grid x_j = 2 pi j / n (right
    endpoint excluded, as usual for periodic grids), with tau drawn
    uniformly from the configured boxes.
    """

    gamma: float = 16.0
    grid_points: int = 50
    dt: float = 0.005
    substeps: int = 512
    dealias: bool = True
    tau1_range: tuple = (0.8, 1.0)
    tau2_range: tuple = (0.5, 1.0)

    def __post_init__(self):
        if self.grid_points < 8 or self.grid_points % 2 != 0:
            raise ConfigError("system.grid_points: must be even and >= 8")
        if self.dt <= 0:
            raise ConfigError("system.dt: must be positive")
        if self.substeps < 1:
            raise ConfigError("system.substeps: must be >= 1")

    @property
    def dim(self):
        return self.grid_points

    def grid(self):
        return TWO_PI * np.arange(self.grid_points) / self.grid_points

    def sample_ic(self, rng):
        tau1 = rng.uniform(*self.tau1_range)
        tau2 = rng.uniform(*self.tau2_range)
        x = self.grid()
        return tau1 * np.sin(TWO_PI * x) + tau2 * np.exp(np.cos(TWO_PI * x))

    def trajectories(self, U0, steps):
        """Advance a batch of fields (rows of U0); the stepper broadcasts
        over the batch axis, so all trajectories share the FFT calls."""
        U0 = np.atleast_2d(np.asarray(U0, dtype=float))
        if U0.shape[1] != self.grid_points:
            raise ConfigError(f"kse: fields must have {self.grid_points} grid values")
        stepper = _EtdRk4(self, self.dt / self.substeps)
        out = np.empty((U0.shape[0], steps + 1, self.grid_points))
        out[:, 0] = U0
        v = np.fft.rfft(U0, axis=-1)
        for t in range(1, steps + 1):
            for _ in range(self.substeps):
                v = stepper.step(v)
            u = np.fft.irfft(v, n=self.grid_points, axis=-1)
            if not np.all(np.isfinite(u)):
                bad = int(np.argwhere(~np.isfinite(u).all(axis=1))[0])
                raise DivergedError(
                    f"kse field {bad} blew up at snapshot step {t}",
                    steps_completed=t - 1, trajectory=out[:, :t].copy(),
                )
            out[:, t] = u
        return out

    def trajectory(self, u0, steps):
        u0 = np.asarray(u0, dtype=float)
        if u0.shape != (self.grid_points,):
            raise ConfigError(f"kse: initial condition must have shape ({self.grid_points},)")
        return self.trajectories(u0[None, :], steps)[0]

    def step(self, u):
        return self.trajectory(u, 1)[1]


def duffing_trajectory(spec, x0, steps):
    """Snapshots of the Duffing flow at multiples of spec.dt, including t=0."""
    return spec.trajectory(x0, steps)


def kse_solve(spec, u0, steps):
    """Snapshots of the KSE field at multiples of spec.dt, including t=0."""
    return spec.trajectory(u0, steps)


SYSTEM_KINDS = {"duffing": DuffingSpec, "modulo": ModuloSpec, "kse": KseSpec}


def generate_dataset(spec, n_ic, steps, seed):
    """Simulate ``n_ic`` trajectories of ``steps`` snapshot intervals.

    Trajectory i draws its initial condition from an independent Philox
    stream keyed by (seed, i), so the draw does not depend on how many
    trajectories precede it; the batch is then advanced together and
    results are ordered by trajectory index.
    """
    ics = np.empty((n_ic, spec.dim))
    for i in range(n_ic):
        rng = np.random.Generator(np.random.Philox(key=np.array([seed, i], dtype=np.uint64)))
        ics[i] = spec.sample_ic(rng)
    if n_ic == 0:
        return TrajectoryBundle(ics=ics, trajectories=np.empty((0, steps + 1, spec.dim)), dt=spec.dt)
    trajs = spec.trajectories(ics, steps)
    return TrajectoryBundle(ics=ics, trajectories=trajs, dt=spec.dt)
