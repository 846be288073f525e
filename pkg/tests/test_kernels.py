import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from afvsgp.kernels import (
    BaseKernel,
    CompositeKernel,
    augment,
    central_difference,
    cross_vector,
    eval_adp,
    eval_base,
    gram,
    hyperparameter_gradient,
    kernel_from_dict,
    kernel_to_dict,
)
from afvsgp.sparse_gp import forgetting_bound

from conftest import random_data, random_kernel


def const_kernel(control_dim, values, input_dim=1):
    # huge lengthscales make every base kernel effectively constant
    return CompositeKernel(tuple(BaseKernel(v, (1e12,) * input_dim) for v in values))


# ---------------------------------------------------------------- eval_base


def test_base_at_same_point_is_signal_variance():
    k = BaseKernel(2.0, (0.7, 1.3))
    x = np.array([0.4, -2.0])
    assert eval_base(k, x, x) == 2.0


def test_base_decays_with_distance():
    k = BaseKernel(1.0, (1.0,))
    assert eval_base(k, [0.0], [60.0]) < 1e-12


def test_base_unit_gap():
    k = BaseKernel(1.0, (1.0,))
    assert eval_base(k, [0.0], [1.0]) == pytest.approx(np.exp(-0.5), abs=1e-15)
    assert eval_base(k, [0.0], [1.0]) == pytest.approx(0.60653, abs=1e-5)


def test_base_dimension_mismatch():
    k = BaseKernel(1.0, (1.0, 1.0))
    with pytest.raises(ValueError):
        eval_base(k, [0.0], [1.0])
    with pytest.raises(ValueError):
        k(np.zeros((2, 3)), np.zeros((2, 3)))


def test_base_rejects_bad_hyperparameters():
    with pytest.raises(ValueError):
        BaseKernel(0.0, (1.0,))
    with pytest.raises(ValueError):
        BaseKernel(1.0, (1.0, -2.0))


# ---------------------------------------------------------------- eval_adp


def test_adp_constant_kernels_give_affine_dot_product():
    k = const_kernel(2, [1.0, 1.0, 1.0])
    u, v = np.array([0.3, -1.2]), np.array([2.0, 0.5])
    assert eval_adp(k, [0.0], augment(u), [5.0], augment(v)) == pytest.approx(1 + u @ v, rel=1e-12)


def test_adp_drift_slot_only():
    rng = np.random.default_rng(0)
    k = random_kernel(rng, 2, 3)
    a, b = rng.normal(size=3), rng.normal(size=3)
    e = np.array([1.0, 0.0, 0.0])
    assert eval_adp(k, a, e, b, e) == pytest.approx(eval_base(k.base_kernels[0], a, b), rel=1e-14)


def test_adp_hand_expansion():
    k = const_kernel(1, [0.5, 2.0])
    assert eval_adp(k, [0.0], [1, 3], [0.0], [1, -1]) == pytest.approx(-5.5, rel=1e-12)


def test_adp_length_mismatch():
    k = const_kernel(1, [1.0, 1.0])
    with pytest.raises(ValueError):
        eval_adp(k, [0.0], [1, 2, 3], [0.0], [1, 2])


def test_adp_requires_leading_one():
    k = const_kernel(1, [1.0, 1.0])
    with pytest.raises(ValueError):
        k(np.zeros((1, 1)), np.array([[2.0, 1.0]]), np.zeros((1, 1)), np.array([[1.0, 1.0]]))


def test_adp_identical_base_kernels_factorize():
    rng = np.random.default_rng(1)
    base = BaseKernel(1.3, (0.8, 1.7))
    k = CompositeKernel((base, base, base))
    a, b = rng.normal(size=2), rng.normal(size=2)
    ua, ub = augment(rng.normal(size=2)), augment(rng.normal(size=2))
    assert eval_adp(k, a, ua, b, ub) == pytest.approx(eval_base(base, a, b) * (ua @ ub), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    u=arrays(float, 2, elements=st.floats(-5, 5)),
    v=arrays(float, 2, elements=st.floats(-5, 5)),
    w=arrays(float, 2, elements=st.floats(-5, 5)),
    c=st.floats(-3, 3),
)
def test_adp_bilinear_in_controls(u, v, w, c):
    # bilinearity in the full augmented vectors (leading slot included)
    rng = np.random.default_rng(2)
    k = random_kernel(rng, 1, 2)
    xa, xb = rng.normal(size=2), rng.normal(size=2)
    G = k.base_grams(xa[None], xb[None])[:, 0, 0]

    def f(p, q):
        return p @ (G * q)

    ua, ub = np.r_[1.0, u[:1]], np.r_[1.0, v[:1]]
    assert eval_adp(k, xa, ua, xb, ub) == pytest.approx(f(ua, ub), rel=1e-12, abs=1e-12)
    assert f(u + c * w, v) == pytest.approx(f(u, v) + c * f(w, v), rel=1e-9, abs=1e-9)


# ---------------------------------------------------------------- gram


def test_gram_single_point():
    rng = np.random.default_rng(3)
    k = random_kernel(rng)
    xi, ubar, _ = random_data(rng, 1)
    K = gram(k, xi, ubar)
    assert K.shape == (1, 1)
    assert K[0, 0] == pytest.approx(eval_adp(k, xi[0], ubar[0], xi[0], ubar[0]))
    assert K[0, 0] >= 0


def test_gram_symmetric():
    rng = np.random.default_rng(4)
    k = random_kernel(rng, 2, 3)
    xi, ubar, _ = random_data(rng, 3, 2, 3)
    K = gram(k, xi, ubar)
    assert np.abs(K - K.T).max() <= 1e-12


def test_gram_psd_and_deterministic():
    rng = np.random.default_rng(5)
    k = random_kernel(rng, 2, 3)
    xi, ubar, _ = random_data(rng, 8, 2, 3)
    K = gram(k, xi, ubar)
    assert np.linalg.eigvalsh(K).min() >= -1e-9
    assert np.array_equal(K, gram(k, xi, ubar))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 25), m=st.integers(1, 3), d=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_gram_psd_property(n, m, d, seed):
    rng = np.random.default_rng(seed)
    k = random_kernel(rng, m, d)
    xi, ubar, _ = random_data(rng, n, m, d)
    K = gram(k, xi, ubar)
    scale = max(1.0, np.abs(K).max())
    assert np.linalg.eigvalsh(K).min() >= -1e-9 * scale


def test_gram_matches_pairwise_eval():
    rng = np.random.default_rng(6)
    k = random_kernel(rng, 2, 2)
    xa, ua, _ = random_data(rng, 4, 2, 2)
    xb, ub, _ = random_data(rng, 3, 2, 2)
    K = gram(k, xa, ua, xb, ub)
    ref = np.array([[eval_adp(k, xa[i], ua[i], xb[j], ub[j]) for j in range(3)] for i in range(4)])
    np.testing.assert_allclose(K, ref, rtol=1e-13)


# ---------------------------------------------------------------- cross_vector


def test_cross_vector_ones():
    k = const_kernel(2, [1.0, 1.0, 1.0])
    xo = np.zeros((4, 1))
    uo = np.ones((4, 3))
    np.testing.assert_allclose(cross_vector(k, np.zeros(1), xo, uo), np.ones((3, 4)), atol=1e-12)


def test_cross_vector_contracts_to_adp():
    rng = np.random.default_rng(7)
    k = random_kernel(rng, 2, 3)
    xs = rng.normal(size=3)
    xo, uo, _ = random_data(rng, 1, 2, 3)
    us = augment(rng.normal(size=2))
    C = cross_vector(k, xs, xo, uo)
    assert C.shape == (3, 1)
    assert us @ C[:, 0] == pytest.approx(eval_adp(k, xs, us, xo[0], uo[0]), rel=1e-12)


def test_cross_vector_decays():
    k = CompositeKernel((BaseKernel(1.0, (1e-3,)), BaseKernel(1.0, (1e-3,))))
    C = cross_vector(k, np.array([0.0]), np.array([[1.0], [2.0]]), np.ones((2, 2)))
    assert np.abs(C).max() < 1e-12


def test_cross_vector_batch_matches_single():
    rng = np.random.default_rng(8)
    k = random_kernel(rng, 1, 2)
    xo, uo, _ = random_data(rng, 5)
    xs = rng.normal(size=(3, 2))
    batch = cross_vector(k, xs, xo, uo)
    for i in range(3):
        np.testing.assert_allclose(batch[i], cross_vector(k, xs[i], xo, uo), rtol=1e-14)


# ---------------------------------------------------------------- gradients


def _bound_fn(xi, ubar, z, w, io, noise=0.1):
    def fn(k):
        return forgetting_bound(k, noise, xi, ubar, z, w, xi[io], ubar[io])

    def fg(k):
        v, g = forgetting_bound(k, noise, xi, ubar, z, w, xi[io], ubar[io], with_grad=True)
        return v, g[:-1]

    return fn, fg


def test_gradient_matches_central_difference():
    rng = np.random.default_rng(9)
    k = random_kernel(rng, 1, 2)
    xi, ubar, z = random_data(rng, 25)
    w = 0.97 ** np.arange(24, -1, -1)
    fn, fg = _bound_fn(xi, ubar, z, w, np.arange(17, 25))
    analytic = hyperparameter_gradient(k, fg)
    numeric = hyperparameter_gradient(k, fn, step=1e-5)
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-3)
    assert rel.max() < 1e-4


def test_gradient_vanishes_at_optimum():
    # 1-D toy: maximize over the drift signal variance only
    rng = np.random.default_rng(10)
    xi = rng.uniform(-1, 1, (20, 1))
    ubar = augment(np.zeros((20, 1)))
    z = 0.8 * rng.standard_normal(20)
    w = np.ones(20)
    io = np.arange(20)

    def bound_of(log_s):
        k = CompositeKernel((BaseKernel(np.exp(log_s), (1e-3,)), BaseKernel(1.0, (1.0,))))
        return forgetting_bound(k, 0.1, xi, ubar, z, w, xi[io], ubar[io])

    from scipy.optimize import minimize_scalar

    best = minimize_scalar(lambda s: -bound_of(s), bounds=(-5, 5), method="bounded",
                           options={"xatol": 1e-10})
    g = central_difference(lambda th: bound_of(th[0]), [best.x], step=1e-5)
    assert np.linalg.norm(g) < 1e-4


def test_gradient_sign_on_pure_noise():
    rng = np.random.default_rng(11)
    xi = rng.uniform(-1, 1, (30, 1))
    ubar = augment(np.zeros((30, 1)))
    z = 0.1 * rng.standard_normal(30)
    w = np.ones(30)
    io = np.arange(0, 30, 3)
    fn, fg = _bound_fn(xi, ubar, z, w, io, noise=0.01)
    k = CompositeKernel((BaseKernel(1.0, (0.3,)), BaseKernel(1.0, (0.3,))))
    k2 = CompositeKernel((BaseKernel(2.0, (0.3,)), BaseKernel(1.0, (0.3,))))
    assert fn(k2) < fn(k)
    assert hyperparameter_gradient(k, fg)[0] < 0


def test_gradient_rejects_non_finite():
    k = const_kernel(1, [1.0, 1.0])
    with pytest.raises(FloatingPointError):
        hyperparameter_gradient(k, lambda kk: float("nan"))


# ---------------------------------------------------------------- misc


def test_theta_round_trip_and_dict():
    rng = np.random.default_rng(12)
    k = random_kernel(rng, 2, 3)
    assert k.n_params == 12
    k2 = k.with_theta(k.theta)
    for a, b in zip(k.base_kernels, k2.base_kernels):
        assert a.signal_variance == pytest.approx(b.signal_variance, rel=1e-14)
        np.testing.assert_allclose(a.lengthscales, b.lengthscales, rtol=1e-14)
    assert kernel_from_dict(kernel_to_dict(k)) == k


def test_composite_validation():
    with pytest.raises(ValueError):
        CompositeKernel((BaseKernel(1.0, (1.0,)),))
    with pytest.raises(ValueError):
        CompositeKernel((BaseKernel(1.0, (1.0,)), BaseKernel(1.0, (1.0, 1.0))))


def test_augment():
    np.testing.assert_array_equal(augment(2.0), [1.0, 2.0])
    np.testing.assert_array_equal(augment([[1, 2], [3, 4]]), [[1, 1, 2], [1, 3, 4]])
