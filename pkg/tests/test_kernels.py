"""Kernel primitives, the weighted sum, gradients, and pruning."""

import numpy as np
import pytest

from kedmd.errors import ConfigError, DegenerateKernelError, NumericError
from kedmd.kernels import (
    CosineKernel,
    EmbeddedRBFKernel,
    KernelPsdWarning,
    LinearKernel,
    NNGPKernel,
    PrimitiveKernel,
    RBFKernel,
    WeightedKernelSum,
    make_primitive,
)

TWO_PI = 2.0 * np.pi


def all_kinds_kernel(weights=(0.5, -0.8, 0.3, 1.1, 0.6)):
    prims = [
        RBFKernel([1.3]),
        LinearKernel([0.7]),
        CosineKernel([0.4]),
        NNGPKernel([1.1, 0.5]),
        EmbeddedRBFKernel([0.9]),
    ]
    with pytest.warns(KernelPsdWarning):
        return WeightedKernelSum(prims, weights)


def test_rbf_at_equal_inputs_is_exactly_one():
    k = WeightedKernelSum([RBFKernel([1000.0])], [1.0])
    assert k.eval(np.zeros(2), np.zeros(2)) == 1.0
    x = np.array([0.3, -1.7, 2.2])
    assert k.eval(x, x) == 1.0


def test_linear_inner_product():
    k = WeightedKernelSum([LinearKernel([1.0])], [1.0])
    assert k.eval([1.0, 2.0], [3.0, 4.0]) == 11.0


def test_equal_weights_average_primitives():
    # wbar = 1, so each primitive enters with weight 0.25^2 = 0.0625
    k = all_kinds_kernel(weights=(0.25, 0.25, 0.25, 0.25, 0.25))
    # wbar = 1.25 here (5 weights); use 4 primitives for the quoted case
    prims = [RBFKernel([1.0]), LinearKernel([1.0]), NNGPKernel([1.0, 0.5]), EmbeddedRBFKernel([1.0])]
    k4 = WeightedKernelSum(prims, [0.25] * 4)
    x, y = np.array([0.4, -0.2]), np.array([-1.0, 0.9])
    expected = 0.0625 * sum(p.gram(x[None], y[None])[0, 0] for p in prims)
    assert k4.eval(x, y) == pytest.approx(expected, rel=1e-14)


def test_nngp_closed_form_values():
    d = 5
    ones = np.ones((1, d))
    g = NNGPKernel([1.0, 0.0]).gram(ones, ones)[0, 0]
    assert g == pytest.approx(0.5, abs=1e-14)

    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(1, 3)) + 2.0, rng.normal(size=(1, 3)) + 2.0
    assert NNGPKernel([0.0, 1.0]).gram(x, y)[0, 0] == pytest.approx(1.0, abs=1e-14)

    xo = np.array([[1.0, 0.0, 0.0]])
    yo = np.array([[0.0, 1.0, 0.0]])
    # orthogonal inputs with equal norms: omega = pi/2, F = 1
    expected = (1.0 / TWO_PI) * (1.0 / 3.0)
    assert NNGPKernel([1.0, 0.0]).gram(xo, yo)[0, 0] == pytest.approx(expected, rel=1e-12)


def test_nngp_zero_diagonal_guard():
    z = np.zeros((1, 3))
    with pytest.raises(NumericError):
        NNGPKernel([1.0, 0.0]).gram(z, z)


def test_gram_single_point():
    k = all_kinds_kernel()
    p = np.array([[0.5, -0.5]])
    G = k.gram(p, p)
    assert G.shape == (1, 1)
    assert G[0, 0] == pytest.approx(k.eval(p[0], p[0]))


def test_gram_rbf_hand_values():
    k = WeightedKernelSum([RBFKernel([1.0])], [1.0])
    A = np.array([[0.0], [1.0]])
    G = k.gram(A, A)
    e = np.exp(-0.5)
    assert np.allclose(G, [[1.0, e], [e, 1.0]], atol=1e-15)


def test_gram_symmetry_property():
    rng = np.random.default_rng(3)
    k = all_kinds_kernel()
    for _ in range(20):
        d = rng.integers(1, 5)
        A = rng.normal(size=(rng.integers(1, 8), d)) + 0.5
        B = rng.normal(size=(rng.integers(1, 8), d)) + 0.5
        assert np.max(np.abs(k.gram(A, B) - k.gram(B, A).T)) <= 1e-15


def test_eval_symmetry_bitwise():
    rng = np.random.default_rng(5)
    k = all_kinds_kernel()
    for _ in range(50):
        d = int(rng.integers(1, 5))
        x = rng.normal(size=d) + 0.3
        y = rng.normal(size=d) + 0.3
        assert k.eval(x, y) == k.eval(y, x)


def test_normalization_scale_invariance():
    rng = np.random.default_rng(11)
    k = all_kinds_kernel()
    x, y = rng.normal(size=3) + 0.5, rng.normal(size=3) + 0.5
    base = k.eval(x, y)
    for c in (2.0, -3.5, 0.01, -1.0):
        scaled = WeightedKernelSum(k.primitives, c * k.weights, _validated=True)
        assert scaled.eval(x, y) == pytest.approx(base, rel=1e-12)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(30):
        k = all_kinds_kernel(weights=rng.uniform(-2, 2, size=5))
        if k.w_bar < 0.3:
            continue
        d = int(rng.integers(1, 5))
        x = rng.normal(size=d) + 0.4
        y = rng.normal(size=d) + 0.4
        g = k.grad_params(x, y)
        flat_grad = np.concatenate([g.outer] + list(g.inner))
        flat = k.flat_params
        for i in range(len(flat)):
            h = 1e-6 * max(1.0, abs(flat[i]))
            p1, p2 = flat.copy(), flat.copy()
            p1[i] += h
            p2[i] -= h
            fd = (k.with_flat_params(p1).eval(x, y) - k.with_flat_params(p2).eval(x, y)) / (2 * h)
            rel = abs(flat_grad[i] - fd) / max(abs(flat_grad[i]), abs(fd), 1e-10)
            assert rel <= 1e-5, f"param {i}: analytic {flat_grad[i]} vs fd {fd}"


def test_rbf_sigma_gradient_zero_at_equal_inputs():
    k = WeightedKernelSum([RBFKernel([2.0])], [1.0])
    g = k.grad_params(np.ones(2), np.ones(2))
    assert g.inner[0][0] == 0.0


def test_single_primitive_outer_gradient_is_zero():
    # wtilde = w/|w| is constant in w, so the squared weight has no slope
    k = WeightedKernelSum([RBFKernel([2.0])], [1.0])
    g = k.grad_params(np.ones(3), np.zeros(3))
    assert g.outer[0] == pytest.approx(0.0, abs=1e-15)


def test_psd_spot_check_without_cosine():
    rng = np.random.default_rng(13)
    k = WeightedKernelSum(
        [RBFKernel([0.8]), LinearKernel([0.6]), NNGPKernel([1.0, 0.4]), EmbeddedRBFKernel([1.2])],
        [0.5, 0.7, 0.9, 0.4],
    )
    for _ in range(10):
        A = rng.normal(size=(int(rng.integers(2, 21)), 3)) + 0.2
        G = k.gram(A, A)
        w = np.linalg.eigvalsh(G)
        assert w.min() >= -1e-8 * np.linalg.norm(G)


def test_embedded_rbf_periodicity():
    k = WeightedKernelSum([EmbeddedRBFKernel([0.7])], [1.0])
    rng = np.random.default_rng(17)
    for _ in range(20):
        x, y = rng.uniform(0, TWO_PI, size=2)
        a = k.eval(np.array([x]), np.array([y]))
        b = k.eval(np.array([x + TWO_PI]), np.array([y]))
        assert a == pytest.approx(b, abs=1e-12)


class _AsymmetricKernel(PrimitiveKernel):
    kind = "asymmetric"
    param_names = ("c",)

    def gram(self, A, B):
        return A @ B.T * 2.0 + np.sum(A, axis=1)[:, None]


def test_asymmetric_primitive_rejected_at_construction():
    with pytest.raises(ConfigError, match="not symmetric"):
        WeightedKernelSum([_AsymmetricKernel([1.0])], [1.0])


def test_cosine_construction_warns():
    with pytest.warns(KernelPsdWarning):
        WeightedKernelSum([CosineKernel([1.0])], [1.0])


def test_zero_weight_mass_rejected_at_eval():
    k = WeightedKernelSum([RBFKernel([1.0]), LinearKernel([1.0])], [0.0, 0.0], _validated=True)
    with pytest.raises(DegenerateKernelError):
        k.eval(np.ones(2), np.ones(2))


class _NaNKernel(PrimitiveKernel):
    kind = "nan"
    param_names = ("c",)

    def gram(self, A, B):
        out = A @ B.T
        out[0, 0] = np.nan
        return out


def test_non_finite_primitive_reports_index():
    k = WeightedKernelSum(
        [RBFKernel([1.0]), _NaNKernel([1.0])], [1.0, 1.0], _validated=True,
    )
    with pytest.raises(NumericError, match="primitive 1"):
        k.gram(np.ones((2, 2)), np.ones((3, 2)))


def test_prune_keeps_largest_trained_weight():
    # learned outer weights from the circle-shift experiment
    k = all_kinds_kernel(weights=(-6.040, -0.925, -0.023, 0.876, 0.1))
    k4 = WeightedKernelSum(list(k.primitives[:4]), [-6.040, -0.925, -0.023, 0.876], _validated=True)
    pruned = k4.prune(keep_largest=1)
    assert pruned.n_primitives == 1
    assert pruned.primitives[0].kind == "rbf"
    assert pruned.weights[0] == -6.040


def test_prune_threshold_zero_is_identity():
    k = all_kinds_kernel()
    pruned = k.prune(threshold=0.0)
    assert pruned.n_primitives == k.n_primitives
    assert np.array_equal(pruned.weights, k.weights)


def test_prune_kse_weights_keep_top_two():
    weights = [0.267, 1.149, 0.356, -0.0273, 0.210, 1.691]
    prims = [RBFKernel([s]) for s in (1.0, 10.0, 50.0)] + [
        CosineKernel([1.0]), LinearKernel([1.0]), NNGPKernel([1.0, 0.0])]
    with pytest.warns(KernelPsdWarning):
        k = WeightedKernelSum(prims, weights)
    pruned = k.prune(keep_largest=2)
    assert [p.kind for p in pruned.primitives] == ["rbf", "nngp"]
    assert list(pruned.weights) == [1.149, 1.691]


def test_prune_all_is_error():
    k = WeightedKernelSum([RBFKernel([1.0])], [0.5])
    with pytest.raises(DegenerateKernelError):
        k.prune(threshold=10.0)
    with pytest.raises(ConfigError):
        k.prune()
    with pytest.raises(ConfigError):
        k.prune(keep=[0], threshold=0.1)


def test_prune_tie_break_removes_lowest_index():
    k = WeightedKernelSum(
        [RBFKernel([1.0]), RBFKernel([2.0]), RBFKernel([3.0])], [0.5, 0.5, 1.0],
    )
    pruned = k.prune(keep_largest=2)
    # indices 0 and 1 tie at |w| = 0.5; the lowest index is removed
    assert [p.params[0] for p in pruned.primitives] == [2.0, 3.0]


def test_prune_then_reset_recovers_initial_subset():
    k = all_kinds_kernel()
    moved = k.with_flat_params(k.flat_params * 1.7 + 0.1)
    pruned = moved.prune(keep=[0, 3]).reset_to_initial()
    assert np.allclose(pruned.weights, k.weights[[0, 3]])
    assert np.allclose(pruned.primitives[0].params, k.primitives[0].params)
    assert np.allclose(pruned.primitives[1].params, k.primitives[3].params)


def test_make_primitive_ignores_c2_and_rejects_unknown():
    p = make_primitive("linear", {"c1": 1.0, "c2": 0.0})
    assert p.params[0] == 1.0
    with pytest.raises(ConfigError, match="unknown parameter"):
        make_primitive("rbf", {"sigma": 1.0, "bogus": 2.0})
    with pytest.raises(ConfigError, match="unknown kind"):
        make_primitive("matern", {"nu": 1.5})
    with pytest.raises(ConfigError, match="missing"):
        make_primitive("nngp", {"b1": 1.0})


def test_spec_round_trip_preserves_state():
    k = all_kinds_kernel()
    moved = k.with_flat_params(k.flat_params * 2.0)
    with pytest.warns(KernelPsdWarning):
        back = WeightedKernelSum.from_spec(moved.spec())
    assert np.allclose(back.weights, moved.weights)
    assert np.allclose(back.flat_params, moved.flat_params)
    assert np.allclose(back.initial_flat_params, k.flat_params)
    # embedded kernel keeps its embedding through the round trip
    assert back.primitives[4].embedding == "circle"
