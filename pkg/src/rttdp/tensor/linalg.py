"""Cholesky-based kernels: triangular solves, log-determinants, Gaussian KL."""
from __future__ import annotations

import numpy as np

from ..errors import ShapeError, SingularCovarianceError
from .autograd import DTYPE, Tensor, _check_finite, _make, _state, as_tensor

JITTER = 1e-5


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a (batched) symmetric positive-definite array."""
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError(f"Cholesky factorization failed: {exc}") from None
    if not np.all(np.isfinite(chol)):
        raise SingularCovarianceError("Cholesky factor is not finite")
    return chol


def solve_lower(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Forward substitution ``L x = b``, batched over leading axes.

    ``b`` has shape (..., D, M).
    """
    d = chol.shape[-1]
    x = np.empty(np.broadcast_shapes(chol.shape[:-2], b.shape[:-2]) + b.shape[-2:], dtype=DTYPE)
    for i in range(d):
        acc = b[..., i, :]
        if i:
            acc = acc - np.einsum("...j,...jm->...m", chol[..., i, :i], x[..., :i, :])
        x[..., i, :] = acc / chol[..., i, i][..., None]
    return x


def solve_upper(chol_t: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Back substitution ``U x = b`` for upper-triangular ``U``."""
    d = chol_t.shape[-1]
    x = np.empty(np.broadcast_shapes(chol_t.shape[:-2], b.shape[:-2]) + b.shape[-2:], dtype=DTYPE)
    for i in range(d - 1, -1, -1):
        acc = b[..., i, :]
        if i < d - 1:
            acc = acc - np.einsum("...j,...jm->...m", chol_t[..., i, i + 1:], x[..., i + 1:, :])
        x[..., i, :] = acc / chol_t[..., i, i][..., None]
    return x


def cho_solve(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``(L Lᵀ) x = b`` given the lower factor ``L``."""
    return solve_upper(np.swapaxes(chol, -1, -2), solve_lower(chol, b))


def logdet_from_cholesky(chol: np.ndarray) -> np.ndarray:
    return 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)


def gaussian_kld(mu0, cov0, mu1, cov1, jitter: float = JITTER) -> Tensor:
    """KL(N(mu0, cov0) || N(mu1, cov1)), batched over leading axes.

    Covariances are symmetrized and regularized with ``jitter * I`` before
    factorization. The result has the leading batch shape (a scalar tensor
    for unbatched inputs) and is differentiable in all four arguments.
    """
    mu0, cov0, mu1, cov1 = (as_tensor(t) for t in (mu0, cov0, mu1, cov1))
    d = mu0.shape[-1]
    if mu1.shape != mu0.shape or cov0.shape[-2:] != (d, d) or cov1.shape != cov0.shape or cov0.shape[:-2] != mu0.shape[:-1]:
        raise ShapeError(
            f"gaussian_kld: shapes mu0 {mu0.shape}, cov0 {cov0.shape}, mu1 {mu1.shape}, cov1 {cov1.shape}"
        )
    if _state.strict:
        _check_finite((mu0.data, cov0.data, mu1.data, cov1.data), "gaussian_kld")

    eye = np.eye(d, dtype=DTYPE)
    s0 = 0.5 * (cov0.data + np.swapaxes(cov0.data, -1, -2)) + jitter * eye
    s1 = 0.5 * (cov1.data + np.swapaxes(cov1.data, -1, -2)) + jitter * eye
    l0 = cholesky(s0)
    l1 = cholesky(s1)
    diff = (mu1.data - mu0.data)[..., None]

    # tr(S1^-1 S0) = ||L1^-1 L0||_F^2 ; mahalanobis = ||L1^-1 d||^2
    m = solve_lower(l1, l0)
    v = solve_lower(l1, diff)
    trace = (m ** 2).sum(axis=(-2, -1))
    maha = (v ** 2).sum(axis=(-2, -1))
    out = 0.5 * (trace + maha - d + logdet_from_cholesky(l1) - logdet_from_cholesky(l0))

    def backward(g):
        batch_eye = np.broadcast_to(eye, s0.shape)
        s1_inv = cho_solve(l1, batch_eye)
        s0_inv = cho_solve(l0, batch_eye)
        w = s1_inv @ diff  # S1^-1 d
        gg = np.asarray(g)[..., None, None]
        g_cov0 = 0.5 * (s1_inv - s0_inv) * gg
        g_cov1 = 0.5 * (s1_inv - s1_inv @ s0 @ s1_inv - w @ np.swapaxes(w, -1, -2)) * gg
        g_mu1 = w[..., 0] * np.asarray(g)[..., None]
        return -g_mu1, g_cov0, g_mu1, g_cov1

    return _make(np.asarray(out, dtype=DTYPE), "gaussian_kld", (mu0, cov0, mu1, cov1), backward)
