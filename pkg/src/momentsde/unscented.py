"""Sigma points and the unscented transform in matrix form.

A sigma set is stored as points ``Z`` (n x S), mean weights ``w_m`` (S,) and
a covariance weight matrix ``W`` (S x S) with

    mean = Z @ w_m,      cov = Z @ W @ Z.T.

Internally the propagators work with *templates*: unit points ``Xi`` in
whitened coordinates, so that the sigma points of ``(m, P)`` are
``m + L @ Xi`` with ``L = chol(P)``.  Templates for the symmetric (two-moment)
scheme and the asymmetric four-moment scheme share this form.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_MAX = 1e-6


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


class PropagationError(RuntimeError):
    pass


@dataclass(frozen=True)
class UtParams:
    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0

    def lam(self, n: int) -> float:
        return self.alpha ** 2 * (n + self.kappa) - n

    def check(self, n: int) -> None:
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if n + self.lam(n) <= 0:
            raise ValueError(f"n + lambda must be positive (n={n})")


@dataclass(frozen=True)
class SigmaSet:
    """Points with their weights.

    ``cov_weight_matrix`` is the matrix W of the compact form; products with it
    are evaluated through its factors (``mean_weights``, ``cov_weights``),
    which is exact and stays accurate for small alpha.
    """
    points: np.ndarray  # n x S
    mean_weights: np.ndarray  # S
    cov_weight_matrix: np.ndarray  # S x S
    cov_weights: np.ndarray = None  # S

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def mean(self):
        return ut_moments(self.points, self.mean_weights, self.cov_weights)[0]

    def cov(self):
        return ut_moments(self.points, self.mean_weights, self.cov_weights)[1]


@dataclass(frozen=True)
class Template:
    """Unit sigma points in whitened coordinates plus their weights."""
    xi: np.ndarray  # n x S
    mean_weights: np.ndarray
    cov_weight_matrix: np.ndarray
    cov_weights: np.ndarray

    @property
    def n_points(self) -> int:
        return self.xi.shape[1]


def weight_matrix(w_m, w_c) -> np.ndarray:
    """(I - w_m 1^T) diag(w_c) (I - w_m 1^T)^T, batched over leading axes."""
    w_m = np.asarray(w_m, float)
    w_c = np.asarray(w_c, float)
    S = w_m.shape[-1]
    A = np.eye(S) - w_m[..., :, None]
    return (A * w_c[..., None, :]) @ np.swapaxes(A, -1, -2)


def ut_moments(Y, w_m, w_c):
    """``(Y w_m, Y W Y^T)`` for columns Y (..., n, S) with W = weight_matrix(w_m, w_c).

    Evaluated as ``sum_i w_c,i (Y_i - mean)(Y_i - mean)^T`` with the mean taken
    about column 0.  Equal to the matrix form, but free of the cancellation
    between the very large entries W has when alpha is small.
    """
    D = Y - Y[..., :1]
    dev = np.einsum("...ns,...s->...n", D, w_m)
    C = D - dev[..., None]
    cov = (C * w_c[..., None, :]) @ np.swapaxes(C, -1, -2)
    return Y[..., 0] + dev, 0.5 * (cov + np.swapaxes(cov, -1, -2))


def ut_weights(n: int, p: UtParams = UtParams()):
    p.check(n)
    lam = p.lam(n)
    w_m = np.full(2 * n + 1, 1.0 / (2.0 * (n + lam)))
    w_c = w_m.copy()
    w_m[0] = lam / (n + lam)
    w_c[0] = lam / (n + lam) + (1.0 - p.alpha ** 2 + p.beta)
    return w_m, w_c


def ut_template(n: int, p: UtParams = UtParams()) -> Template:
    w_m, w_c = ut_weights(n, p)
    c = np.sqrt(n + p.lam(n))
    xi = np.hstack([np.zeros((n, 1)), c * np.eye(n), -c * np.eye(n)])
    return Template(xi, w_m, weight_matrix(w_m, w_c), w_c)


def realizable(skew, kurt) -> np.ndarray:
    skew, kurt = np.asarray(skew, float), np.asarray(kurt, float)
    return kurt >= 1.0 + skew ** 2


def four_moment_template(skew, kurt) -> Template:
    """Per-axis asymmetric pairs plus a shared centre point.

    On axis j the points ``+a_j`` and ``-b_j`` carry weights ``p_j, q_j`` chosen
    so that the weighted first four moments are (0, 1, skew_j, kurt_j):

        a - b = s,   a b = k - s^2,   p = 1 / (a (a + b)),   q = 1 / (b (a + b)).

    Leading axes of skew/kurt (..., n) are batch axes.
    """
    skew = np.atleast_1d(np.asarray(skew, float))
    kurt = np.atleast_1d(np.asarray(kurt, float))
    n = skew.shape[-1]
    root = np.sqrt(4.0 * kurt - 3.0 * skew ** 2)
    a = 0.5 * (skew + root)
    b = 0.5 * (root - skew)
    p = 1.0 / (a * root)
    q = 1.0 / (b * root)
    centre = 1.0 - np.sum(p + q, axis=-1, keepdims=True)
    w = np.concatenate([centre, p, q], axis=-1)
    eye = np.eye(n)
    xi = np.concatenate([np.zeros(skew.shape[:-1] + (n, 1)),
                         a[..., None, :] * eye, -b[..., None, :] * eye], axis=-1)
    return Template(xi, w, weight_matrix(w, w), w)


def block_template(x_part: Template, noise_dim: int) -> Template:
    """Augment a state template with ``noise_dim`` symmetric Gaussian axes.

    Used by the four-moment scheme: noise axes get +-sqrt(3) with weight 1/6
    (the Gaussian solution of the per-axis conditions), the centre weight
    absorbs the rest.  Column order: centre, state +, noise +, state -, noise -.
    """
    xi_x = x_part.xi
    batch = xi_x.shape[:-2]
    n = xi_x.shape[-2]
    half = (xi_x.shape[-1] - 1) // 2
    q = noise_dim
    xi = np.zeros(batch + (n + q, 1 + 2 * (n + q)))
    xi[..., :n, 1:1 + n] = xi_x[..., :, 1:1 + half]
    xi[..., n:, 1 + n:1 + n + q] = np.sqrt(3.0) * np.eye(q)
    xi[..., :n, 1 + n + q:1 + 2 * n + q] = xi_x[..., :, 1 + half:]
    xi[..., n:, 1 + 2 * n + q:] = -np.sqrt(3.0) * np.eye(q)
    w_x = x_part.mean_weights
    sixth = np.full(batch + (q,), 1 / 6)
    w = np.concatenate([w_x[..., :1] - q / 3.0, w_x[..., 1:1 + half], sixth,
                        w_x[..., 1 + half:], sixth], axis=-1)
    return Template(xi, w, weight_matrix(w, w), w)


# --------------------------------------------------------------------------
# Cholesky with jitter, batched


def chol_jitter(P):
    """Lower Cholesky factor of each matrix in ``P`` (..., n, n).

    Matrices that are not numerically positive definite get
    ``eps * max(trace/n, tiny) * I`` added, with eps doubling from 1e-10 up to
    1e-6.  Returns ``(L, jitter)`` where jitter holds the eps actually used
    (0 where none was needed).
    """
    P = np.asarray(P, float)
    batch = P.shape[:-2]
    n = P.shape[-1]
    flatP = P.reshape(-1, n, n)
    eps_used = np.zeros(flatP.shape[0])
    try:
        L = np.linalg.cholesky(flatP)
        if np.all(np.isfinite(L)):
            return L.reshape(P.shape), eps_used.reshape(batch)
    except np.linalg.LinAlgError:
        pass
    L = np.empty_like(flatP)
    eye = np.eye(n)
    for i, A in enumerate(flatP):
        try:
            L[i] = np.linalg.cholesky(A)
            continue
        except np.linalg.LinAlgError:
            pass
        scale = max(np.trace(A) / n, np.finfo(float).tiny)
        eps = JITTER_START
        while True:
            try:
                L[i] = np.linalg.cholesky(A + eps * scale * eye)
                eps_used[i] = eps
                break
            except np.linalg.LinAlgError:
                eps *= 2.0
                if eps > JITTER_MAX:
                    raise SingularCovarianceError(
                        f"covariance #{i} is not positive definite even with jitter "
                        f"{JITTER_MAX:g}*trace/n") from None
    return L.reshape(P.shape), eps_used.reshape(batch)


def chol_backward(L, Lbar):
    """Symmetric cotangent of P given the cotangent of L = chol(P)."""
    n = L.shape[-1]
    phi = np.tril(np.swapaxes(L, -1, -2) @ np.tril(Lbar))
    phi = 0.5 * (phi + np.swapaxes(np.tril(phi, -1), -1, -2))
    Linv = np.linalg.inv(L)
    G = np.swapaxes(Linv, -1, -2) @ phi @ Linv
    return 0.5 * (G + np.swapaxes(G, -1, -2)) if n > 1 else G


# --------------------------------------------------------------------------
# public operations


def sigma_points(mean, cov, p: UtParams = UtParams()) -> SigmaSet:
    mean = np.atleast_1d(np.asarray(mean, float))
    cov = np.atleast_2d(np.asarray(cov, float))
    n = mean.size
    if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-14):
        raise ValueError("covariance is not symmetric")
    try:
        L, _ = chol_jitter(cov)
    except SingularCovarianceError as exc:
        raise SingularCovarianceError(f"sigma_points: {exc}") from None
    t = ut_template(n, p)
    return SigmaSet(mean[:, None] + L @ t.xi, t.mean_weights, t.cov_weight_matrix, t.cov_weights)


def sigma_points_4m(mean, cov, skew, kurt) -> SigmaSet:
    """Sigma points matching mean, covariance and per-axis skew and kurtosis.

    The higher moments are imposed in the whitened coordinates ``L^-1 (x - m)``;
    for a diagonal covariance these coincide with the marginal moments.
    Unrealizable moments (kurt < 1 + skew^2) fall back to the symmetric
    Gaussian placement on that axis.
    """
    mean = np.atleast_1d(np.asarray(mean, float))
    cov = np.atleast_2d(np.asarray(cov, float))
    skew, kurt = safe_higher_moments(skew, kurt)
    L, _ = chol_jitter(cov)
    t = four_moment_template(skew, kurt)
    return SigmaSet(mean[:, None] + L @ t.xi, t.mean_weights, t.cov_weight_matrix, t.cov_weights)


def safe_higher_moments(skew, kurt):
    skew = np.array(np.atleast_1d(skew), dtype=float)
    kurt = np.array(np.atleast_1d(kurt), dtype=float)
    ok = realizable(skew, kurt) & np.isfinite(skew) & np.isfinite(kurt)
    if not np.all(ok):
        log.warning("unrealizable skew/kurtosis on %d axes; using Gaussian placement",
                    int(np.sum(~ok)))
        skew[~ok] = 0.0
        kurt[~ok] = 3.0
    return skew, kurt


def ut_transform(s: SigmaSet, F):
    """Push sigma points through ``F`` (column-wise) and return (mean, cov)."""
    Y = np.column_stack([np.atleast_1d(F(z)) for z in s.points.T])
    bad = ~np.all(np.isfinite(Y), axis=0)
    if np.any(bad):
        raise PropagationError(f"non-finite transform output at sigma point {np.flatnonzero(bad)[0]}")
    return ut_moments(Y, s.mean_weights, s.cov_weights)
