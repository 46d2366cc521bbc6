"""Operator fits, spectral maps, eigenfunctions, prediction, residuals."""

import dataclasses

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from kedmd.errors import ConfigError, DegenerateKernelError, DivergedError, VariantError
from kedmd.kernels import (
    EmbeddedRBFKernel,
    LinearKernel,
    NNGPKernel,
    RBFKernel,
    WeightedKernelSum,
)
from kedmd.koopman import (
    SnapshotSet,
    eigenfunctions_at,
    equivalence_check,
    fit_modes,
    fit_projection,
    fit_sk,
    fit_tr,
    map_spectrum,
    predict,
    residual,
    residuals,
)
from kedmd.systems import ModuloSpec, generate_dataset, modulo_true_eigenvalues
from kedmd.training import subsample_centers


def pd_kernel(rng=None):
    rng = rng or np.random.default_rng(0)
    return WeightedKernelSum(
        [RBFKernel([0.01]), RBFKernel([rng.uniform(0.6, 1.4)]),
         LinearKernel([rng.uniform(0.4, 1.0)])],
        rng.uniform(0.4, 1.2, size=3),
    )


def separated(rng, n, d):
    while True:
        P = rng.normal(size=(n, d))
        dist = np.sqrt(np.sum((P[:, None] - P[None, :]) ** 2, -1)) + np.eye(n)
        if dist.min() >= 0.05:
            return P


def identity_snapshots(n=8, d=2, seed=1):
    X = separated(np.random.default_rng(seed), n, d)
    return SnapshotSet(X, X)


def test_snapshot_validation():
    with pytest.raises(ConfigError):
        SnapshotSet(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(Exception):
        SnapshotSet(np.array([[np.nan, 0.0]]), np.array([[0.0, 0.0]]))


def test_identity_system_gives_identity_operator():
    ss = identity_snapshots()
    m = fit_sk(WeightedKernelSum([RBFKernel([1.0])], [1.0]), ss, 0.0)
    assert np.max(np.abs(np.abs(m.eigenvalues) - 1.0)) <= 1e-8
    # eigen-equations hold for both sides
    defect_l = np.max(np.abs(m.left_vectors @ m.K - m.eigenvalues[:, None] * m.left_vectors))
    defect_r = np.max(np.abs(m.K @ m.right_vectors - m.right_vectors * m.eigenvalues[None, :]))
    assert max(defect_l, defect_r) <= 1e-8 * np.linalg.norm(m.K)


def test_scalar_linear_system_recovers_decay_rate():
    rng = np.random.default_rng(2)
    X = rng.uniform(1.0, 3.0, size=(5, 1))
    m = fit_sk(WeightedKernelSum([LinearKernel([1.0])], [1.0]), SnapshotSet(X, 0.5 * X), 0.0)
    nz = m.eigenvalues[np.abs(m.eigenvalues) > 1e-8]
    assert len(nz) == 1
    assert nz[0] == pytest.approx(0.5, abs=1e-10)
    assert np.max(np.abs(np.delete(m.eigenvalues, np.argmax(np.abs(m.eigenvalues))))) <= 1e-8


def test_modulo_embedded_kernel_spectrum():
    # shift map angles: a circle-embedded RBF dictionary recovers exp(i w j)
    spec = ModuloSpec()
    data = generate_dataset(spec, 100, 50, seed=77).to_snapshots()
    centers = subsample_centers(data, 40, 99)
    m = fit_sk(WeightedKernelSum([EmbeddedRBFKernel([6.0])], [1.0]), centers, 0.0)
    big = m.eigenvalues[np.abs(m.eigenvalues) > 0.5]
    true = modulo_true_eigenvalues(spec.omega, 20)
    assert len(big) == 9
    for lam in big:
        j = np.argmin(np.abs(true - lam))
        assert abs(lam.real - true[j].real) <= 1e-3
        assert abs(lam.imag - true[j].imag) <= 1e-3


def test_fit_tr_identity():
    ss = identity_snapshots()
    m = fit_tr(WeightedKernelSum([RBFKernel([1.0])], [1.0]), ss)
    assert np.max(np.abs(m.eigenvalues - 1.0)) <= 1e-8


def test_tr_and_sk_share_nonzero_spectrum():
    rng = np.random.default_rng(4)
    for _ in range(30):
        n, d = int(rng.integers(2, 15)), int(rng.integers(1, 4))
        ss = SnapshotSet(separated(rng, n, d), separated(rng, n, d))
        k = pd_kernel(rng)
        a = fit_sk(k, ss, 0.0).eigenvalues
        b = fit_tr(k, ss).eigenvalues
        nz = lambda v: v[np.abs(v) > 1e-8 * np.max(np.abs(v))]
        a, b = nz(a), nz(b)
        assert len(a) == len(b)
        cost = np.abs(a[:, None] - b[None, :])
        r, c = linear_sum_assignment(cost)
        assert cost[r, c].max() <= 1e-8


def test_tr_handles_duplicated_rows():
    rng = np.random.default_rng(6)
    X = separated(rng, 6, 2)
    X = np.vstack([X, X[2]])  # exact duplicate row
    Y = separated(rng, 7, 2)
    ss = SnapshotSet(X, Y)
    k = pd_kernel(rng)
    m_tr = fit_tr(k, ss)
    assert m_tr.K.shape[0] < 7
    a = fit_sk(k, ss, 0.0).eigenvalues
    b = m_tr.eigenvalues
    nz = lambda v: v[np.abs(v) > 1e-8 * np.max(np.abs(v))]
    a, b = nz(a), nz(b)
    assert len(a) == len(b)
    cost = np.abs(a[:, None] - b[None, :])
    r, c = linear_sum_assignment(cost)
    assert cost[r, c].max() <= 1e-8


def test_map_spectrum_round_trip_and_eigen_equations():
    rng = np.random.default_rng(8)
    for _ in range(10):
        n = int(rng.integers(3, 12))
        ss = SnapshotSet(separated(rng, n, 2), separated(rng, n, 2))
        k = pd_kernel(rng)
        m_sk, m_tr = fit_sk(k, ss, 0.0), fit_tr(k, ss)
        W_sk, V_sk = map_spectrum(m_tr, "tr_to_sk")
        # mapped left vectors satisfy the kernel-section eigen-equation
        defect = np.max(np.abs(W_sk @ m_sk.K - m_tr.eigenvalues[:, None] * W_sk))
        assert defect <= 1e-8 * np.linalg.norm(m_sk.K)
        # round trip back to truncated coordinates, up to scale
        W_back, V_back = map_spectrum(m_tr, "sk_to_tr", left_vectors=W_sk, right_vectors=V_sk)
        for j in range(m_tr.n_eig):
            w0, w1 = m_tr.left_vectors[j], W_back[j]
            cos = np.abs(np.vdot(w0, w1)) / (np.linalg.norm(w0) * np.linalg.norm(w1))
            assert cos >= 1.0 - 1e-8


def test_map_spectrum_requires_tr_factors():
    ss = identity_snapshots()
    m = fit_sk(pd_kernel(), ss, 0.0)
    with pytest.raises(VariantError):
        map_spectrum(m, "tr_to_sk")


def test_identity_retained_factors_orthonormal():
    ss = identity_snapshots()
    m = fit_tr(pd_kernel(), ss)
    r = m.sigma.shape[0]
    ZSp_ZS = (m.Z / m.sigma).T @ (m.Z * m.sigma)
    assert np.allclose(ZSp_ZS, np.eye(r), atol=1e-10)


def test_eigenfunctions_at_centers_match_tr_formula():
    rng = np.random.default_rng(10)
    ss = SnapshotSet(separated(rng, 9, 2), separated(rng, 9, 2))
    m = fit_tr(pd_kernel(rng), ss)
    lhs = eigenfunctions_at(m, ss.X)
    rhs = m.left_vectors @ (m.sigma[:, None] * m.Z.T)
    assert np.max(np.abs(lhs - rhs)) <= 1e-8


def test_eigenfunctions_identity_and_eigen_equation():
    ss = identity_snapshots()
    k = pd_kernel()
    m = fit_sk(k, ss, 0.0)
    assert np.array_equal(eigenfunctions_at(m, ss.Y), eigenfunctions_at(m, ss.X))
    rng = np.random.default_rng(12)
    ss2 = SnapshotSet(separated(rng, 10, 2), separated(rng, 10, 2))
    m2 = fit_sk(k, ss2, 0.0)
    lhs = eigenfunctions_at(m2, ss2.Y)
    rhs = m2.eigenvalues[:, None] * eigenfunctions_at(m2, ss2.X)
    assert np.max(np.abs(lhs - rhs)) <= 1e-6


def test_eigenfunctions_dimension_mismatch():
    m = fit_sk(pd_kernel(), identity_snapshots(d=2), 0.0)
    with pytest.raises(ConfigError):
        eigenfunctions_at(m, np.zeros((3, 5)))


def test_projection_interpolates_at_zero_beta():
    ss = identity_snapshots(n=10)
    m = fit_projection(fit_sk(pd_kernel(), ss, 0.0), 0.0)
    recon = m.C_p @ m.gram_xx
    assert np.max(np.abs(recon - ss.X.T)) <= 1e-6


def test_projection_error_decreases_with_beta():
    rng = np.random.default_rng(14)
    ss = SnapshotSet(separated(rng, 12, 2), separated(rng, 12, 2))
    model = fit_sk(pd_kernel(rng), ss, 0.0)
    errs = []
    for beta in (1e-2, 1e-4, 1e-6, 1e-8):
        m = fit_projection(model, beta)
        errs.append(np.linalg.norm(ss.X.T - m.C_p @ m.gram_xx))
    assert all(a >= b - 1e-12 for a, b in zip(errs, errs[1:]))


def test_projection_single_center_scalar_formula():
    x = np.array([[1.7]])
    ss = SnapshotSet(x, x)
    k = WeightedKernelSum([RBFKernel([1.0])], [1.0])
    beta = 0.1
    m = fit_projection(fit_sk(k, ss, 0.0), beta)
    g = k.eval(x[0], x[0])
    assert m.C_p[0, 0] == pytest.approx(1.7 / (g + beta), rel=1e-12)


def test_modes_identity_reconstruction():
    ss = identity_snapshots(n=10)
    m = fit_modes(fit_sk(pd_kernel(), ss, 0.0), 0.0)
    recon = m.C_m @ (m.eigenvalues[:, None] * eigenfunctions_at(m, ss.X))
    assert np.max(np.abs(recon - ss.X.T)) <= 1e-6


def test_modes_rank_one_linear_system():
    rng = np.random.default_rng(16)
    X = rng.uniform(1.0, 2.0, size=(5, 1))
    ss = SnapshotSet(X, 0.5 * X)
    m = fit_modes(fit_sk(WeightedKernelSum([LinearKernel([1.0])], [1.0]), ss, 0.0), 0.0)
    pred = np.real(m.C_m @ (m.eigenvalues[:, None] * eigenfunctions_at(m, X)))
    assert np.max(np.abs(pred - 0.5 * X.T)) <= 1e-8


def test_spectral_powers_stay_real():
    rng = np.random.default_rng(18)
    ss = SnapshotSet(separated(rng, 10, 2), separated(rng, 10, 2))
    m = fit_modes(fit_sk(pd_kernel(rng), ss, 1e-10), 0.0)
    phi = eigenfunctions_at(m, ss.X[:1])[:, 0]
    lam = m.eigenvalues.copy()
    acc = phi.copy()
    for t in range(100):
        acc = lam * acc
        xt = m.C_m @ acc
        scale = max(np.linalg.norm(xt), 1e-300)
        assert np.max(np.abs(xt.imag)) <= 1e-8 * scale


def test_predict_zero_steps_and_identity():
    ss = identity_snapshots()
    m = fit_modes(fit_projection(fit_sk(pd_kernel(), ss, 0.0), 0.0), 0.0)
    assert predict(m, ss.X[0], 0).shape == (0, 2)
    for method in ("spectral", "recursive"):
        traj = predict(m, ss.X[0], 5, method=method)
        assert np.max(np.abs(traj - ss.X[0])) <= 1e-6


def test_predict_divergence_carries_prefix():
    rng = np.random.default_rng(20)
    X = rng.uniform(1.0, 2.0, size=(4, 1))
    ss = SnapshotSet(X, 3.0 * X)  # expanding map, lambda = 3
    m = fit_modes(fit_projection(fit_sk(WeightedKernelSum([LinearKernel([1.0])], [1.0]), ss, 0.0), 0.0), 0.0)
    with pytest.raises(DivergedError) as exc:
        predict(m, X[0], 2000, method="spectral")
    assert 0 < exc.value.steps_completed < 2000
    assert exc.value.trajectory.shape[0] == exc.value.steps_completed


def test_residuals_vanish_for_exactly_represented_system():
    rng = np.random.default_rng(22)
    A = np.array([[0.9, -0.2], [0.1, 0.7]])
    X = separated(rng, 12, 2)
    ss = SnapshotSet(X, X @ A.T)
    m = fit_sk(WeightedKernelSum([LinearKernel([1.0])], [1.0]), ss, 0.0)
    keep = np.abs(m.eigenvalues) > 1e-6
    res = residuals(m)[keep]
    assert np.max(res) <= 1e-6


def test_residual_scale_invariance():
    rng = np.random.default_rng(24)
    ss = SnapshotSet(separated(rng, 10, 2), separated(rng, 10, 2))
    m = fit_sk(pd_kernel(rng), ss, 1e-8)
    # evaluate off the fitting centers so the residuals are O(1)
    ev = SnapshotSet(separated(rng, 40, 2), separated(rng, 40, 2))
    base = residuals(m, ev)
    scaled = dataclasses.replace(m, left_vectors=(2.3 - 1.1j) * m.left_vectors)
    res2 = residuals(scaled, ev)
    assert np.max(np.abs(res2 - base) / np.maximum(base, 1e-300)) <= 1e-10


def test_residuals_nonnegative_finite_and_indexed():
    rng = np.random.default_rng(26)
    ss = SnapshotSet(separated(rng, 10, 2), separated(rng, 10, 2))
    m = fit_sk(pd_kernel(rng), ss, 1e-8)
    res = residuals(m)
    assert np.all(res >= 0) and np.all(np.isfinite(res))
    assert residual(m, 0) == res[0]
    with pytest.raises(ConfigError):
        residual(m, m.n_eig)


def test_regularization_limit_monotone():
    rng = np.random.default_rng(28)
    ss = SnapshotSet(separated(rng, 10, 2), separated(rng, 10, 2))
    k = pd_kernel(rng)
    K0 = fit_sk(k, ss, 0.0).K
    gaps = [np.linalg.norm(fit_sk(k, ss, b).K - K0) for b in (1e-2, 1e-4, 1e-6, 1e-8)]
    assert all(a >= b - 1e-12 for a, b in zip(gaps, gaps[1:]))


def test_conjugate_pair_closure():
    rng = np.random.default_rng(30)
    for _ in range(10):
        ss = SnapshotSet(separated(rng, 11, 2), separated(rng, 11, 2))
        lam = fit_sk(pd_kernel(rng), ss, 1e-10).eigenvalues
        conj = np.conj(lam)
        cost = np.abs(lam[:, None] - conj[None, :])
        r, c = linear_sum_assignment(cost)
        assert cost[r, c].max() <= 1e-8 * max(1.0, np.max(np.abs(lam)))


def test_equivalence_check_oracle():
    rep = equivalence_check(instances=30, max_points=12, seed=5)
    assert rep.passed(1e-8), rep


def test_empty_centers_rejected():
    with pytest.raises(Exception):
        fit_sk(pd_kernel(), SnapshotSet(np.zeros((0, 2)), np.zeros((0, 2))), 0.0)
