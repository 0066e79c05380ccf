import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from momentsde import unscented as ut
from momentsde.unscented import UtParams


def spd(rng, n, scale=1.0):
    M = rng.normal(size=(n, n))
    return scale * (M @ M.T + 0.1 * np.eye(n))


def test_reference_one_dimensional_set():
    s = ut.sigma_points([0.0], [[1.0]], UtParams(alpha=1.0, beta=0.0, kappa=2.0))
    assert UtParams(1.0, 0.0, 2.0).lam(1) == pytest.approx(2.0)
    np.testing.assert_allclose(s.points[0], [0.0, np.sqrt(3), -np.sqrt(3)], atol=1e-15)
    np.testing.assert_allclose(s.mean_weights, [2 / 3, 1 / 6, 1 / 6], rtol=1e-14)
    # reconstruction through the explicit matrix W
    Z = s.points
    np.testing.assert_allclose(Z @ s.mean_weights, [0.0], atol=1e-15)
    np.testing.assert_allclose(Z @ s.cov_weight_matrix @ Z.T, [[1.0]], rtol=1e-14)


def test_square_with_reference_set_gives_exact_mean():
    s = ut.sigma_points([0.0], [[1.0]], UtParams(alpha=1.0, beta=0.0, kappa=2.0))
    m, _ = ut.ut_transform(s, lambda z: z ** 2)
    assert m[0] == pytest.approx(1.0, rel=1e-14)


def test_identity_and_simple_affine():
    s = ut.sigma_points([1.0], [[4.0]])
    m, P = ut.ut_transform(s, lambda z: z)
    np.testing.assert_allclose(m, [1.0], rtol=1e-10)
    np.testing.assert_allclose(P, [[4.0]], rtol=1e-10)
    m, P = ut.ut_transform(s, lambda z: 2 * z + 1)
    np.testing.assert_allclose(m, [3.0], rtol=1e-10)
    np.testing.assert_allclose(P, [[16.0]], rtol=1e-10)


@given(st.integers(1, 6), st.integers(0, 2 ** 32 - 1),
       st.sampled_from([1e-3, 0.1, 1.0]))
def test_affine_exactness(n, seed, alpha):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(rng.integers(1, 5), n))
    b = rng.normal(size=A.shape[0])
    m = rng.normal(size=n)
    P = spd(rng, n)
    s = ut.sigma_points(m, P, UtParams(alpha=alpha))
    mean, cov = ut.ut_transform(s, lambda z: A @ z + b)
    ref = A @ P @ A.T
    np.testing.assert_allclose(mean, A @ m + b, rtol=1e-9, atol=1e-9 * np.abs(b).max())
    assert np.max(np.abs(cov - ref)) <= 1e-9 * np.max(np.abs(ref))


@given(st.integers(1, 6), st.floats(1e-3, 2.0), st.floats(0.0, 3.0))
def test_mean_weights_sum_to_one(n, alpha, kappa):
    assume(n + UtParams(alpha, 2.0, kappa).lam(n) > 0)
    w_m, w_c = ut.ut_weights(n, UtParams(alpha, 2.0, kappa))
    assert abs(w_m.sum() - 1.0) < 1e-9 * np.abs(w_m).max()


@given(st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_factored_moments_agree_with_matrix_form(n, seed):
    # the matrix form Y W Y^T is well conditioned for alpha = 1
    rng = np.random.default_rng(seed)
    s = ut.sigma_points(rng.normal(size=n), spd(rng, n), UtParams(alpha=1.0, kappa=1.0))
    Y = np.tanh(s.points) + 0.3 * s.points ** 2
    m, P = ut.ut_moments(Y, s.mean_weights, s.cov_weights)
    np.testing.assert_allclose(m, Y @ s.mean_weights, rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(P, Y @ s.cov_weight_matrix @ Y.T, rtol=1e-10, atol=1e-12)


def test_weight_matrix_is_batched():
    w_m = np.array([[0.5, 0.25, 0.25], [0.2, 0.4, 0.4]])
    w_c = w_m + 0.1
    W = ut.weight_matrix(w_m, w_c)
    for i in range(2):
        np.testing.assert_allclose(W[i], ut.weight_matrix(w_m[i], w_c[i]), rtol=1e-15)


def test_zero_covariance_collapses_points():
    s = ut.sigma_points([1.0, 2.0], np.zeros((2, 2)))
    assert np.max(np.abs(s.points - np.array([[1.0], [2.0]]))) < 1e-5


def test_asymmetric_covariance_rejected():
    with pytest.raises(ValueError):
        ut.sigma_points([0.0, 0.0], [[1.0, 0.5], [0.1, 1.0]])


def test_indefinite_covariance_raises():
    with pytest.raises(ut.SingularCovarianceError):
        ut.sigma_points([0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]])


def test_nonfinite_transform_identifies_point():
    s = ut.sigma_points([0.0], [[1.0]], UtParams(alpha=1.0, kappa=2.0))
    with pytest.raises(ut.PropagationError, match="sigma point 2"), np.errstate(divide="ignore"):
        ut.ut_transform(s, lambda z: np.log(z + np.sqrt(3)) if z[0] < 0 else z)


moment_pairs = st.tuples(st.floats(-2.0, 2.0), st.floats(1.0, 12.0)).filter(
    lambda sk: sk[1] >= 1 + sk[0] ** 2 + 1e-3)


@given(st.lists(moment_pairs, min_size=1, max_size=4), st.integers(0, 2 ** 32 - 1))
def test_four_moment_points_reproduce_moments(pairs, seed):
    rng = np.random.default_rng(seed)
    skew = np.array([p[0] for p in pairs])
    kurt = np.array([p[1] for p in pairs])
    n = skew.size
    t = ut.four_moment_template(skew, kurt)
    w = t.mean_weights
    assert abs(w.sum() - 1.0) < 1e-12
    Z = t.xi
    np.testing.assert_allclose(Z @ w, 0.0, atol=1e-10)
    np.testing.assert_allclose((Z * w) @ Z.T, np.eye(n), atol=1e-8)
    np.testing.assert_allclose((Z ** 3) @ w, skew, atol=1e-8)
    np.testing.assert_allclose((Z ** 4) @ w, kurt, atol=1e-8 * kurt.max())
    # mapped through a diagonal covariance, marginal moments are preserved
    sd = rng.uniform(0.5, 2.0, n)
    m = rng.normal(size=n)
    s = ut.sigma_points_4m(m, np.diag(sd ** 2), skew, kurt)
    D = (s.points - m[:, None]) / sd[:, None]
    np.testing.assert_allclose(s.mean(), m, atol=1e-9)
    np.testing.assert_allclose(s.cov(), np.diag(sd ** 2), rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose((D ** 3) @ s.mean_weights, skew, atol=1e-8)


def test_gaussian_moments_give_symmetric_placement():
    t = ut.four_moment_template(np.zeros(2), np.full(2, 3.0))
    Z, w = t.xi, t.mean_weights
    np.testing.assert_allclose((Z ** 3) @ w, 0.0, atol=1e-10)
    np.testing.assert_allclose((Z ** 4) @ w, 3.0, atol=1e-10)
    np.testing.assert_allclose(np.sort(Z[0][Z[0] != 0]), [-np.sqrt(3), np.sqrt(3)], rtol=1e-12)


def test_unrealizable_moments_fall_back(caplog):
    s = ut.sigma_points_4m([0.0], [[1.0]], [2.0], [2.0])
    assert "unrealizable" in caplog.text
    D = s.points[0]
    assert abs(np.sum(s.mean_weights * D ** 3)) < 1e-10
    assert abs(np.sum(s.mean_weights * D ** 4) - 3.0) < 1e-10


def test_block_template_noise_axes():
    x = ut.four_moment_template(np.array([0.5]), np.array([4.0]))
    t = ut.block_template(x, 2)
    w, Z = t.mean_weights, t.xi
    assert Z.shape[0] == 3
    np.testing.assert_allclose((Z * w) @ Z.T, np.eye(3), atol=1e-10)
    np.testing.assert_allclose((Z[1:] ** 4) @ w, 3.0, atol=1e-10)
    np.testing.assert_allclose((Z[:1] ** 3) @ w, [0.5], atol=1e-10)


@given(st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_cholesky_backward_matches_finite_differences(n, seed):
    rng = np.random.default_rng(seed)
    P = spd(rng, n)
    Lbar = np.tril(rng.normal(size=(n, n)))
    L, _ = ut.chol_jitter(P)
    Pbar = ut.chol_backward(L, Lbar)
    E = rng.normal(size=(n, n))
    E = E + E.T
    eps = 1e-6
    fd = (np.sum(Lbar * np.linalg.cholesky(P + eps * E))
          - np.sum(Lbar * np.linalg.cholesky(P - eps * E))) / (2 * eps)
    assert abs(np.sum(Pbar * E) - fd) < 1e-5 * max(1.0, abs(fd))


def test_jitter_handles_singular_psd():
    P = np.array([[1.0, 1.0], [1.0, 1.0]])
    L, jitter = ut.chol_jitter(P)
    assert jitter > 0
    np.testing.assert_allclose(L @ L.T, P, atol=1e-5)


def test_realizability_boundary():
    assert ut.realizable(0.0, 1.0)
    assert not ut.realizable(1.0, 1.5)
