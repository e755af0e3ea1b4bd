"""Squared-exponential kernels and jitter-guarded SPD linear algebra.

The kernel is ``exp(-||x - y||^2 / ell)`` -- plain division by the length
scale, so fitted ``ell`` values are not interchangeable with the usual
``2 * ell**2`` convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import NumericalError

ENCODINGS = ("gradient", "endpoints")

# Relative jitter ladder for Cholesky rescue: start at 1e-12 * mean diagonal,
# escalate x10 up to 1e-6 * mean diagonal, then give up.
_JITTER_START = 1e-12
_JITTER_LIMIT = 1e-6


@dataclass
class EdgeModel:
    """Per-edge GP state: length scale, input encoding, cached training data."""

    log_lengthscale: float
    encoding: str
    training_inputs: np.ndarray | None = None
    training_targets: np.ndarray | None = None

    @property
    def lengthscale(self) -> float:
        return float(np.exp(self.log_lengthscale))


@dataclass
class NoiseModel:
    """Globally shared observation-noise variance, log-parameterized."""

    log_noise_variance: float

    @property
    def noise_variance(self) -> float:
        return float(np.exp(self.log_noise_variance))


def rbf(x, y, lengthscale: float) -> float:
    """Kernel value ``exp(-||x - y||^2 / lengthscale)`` for d-vectors x, y."""
    if lengthscale <= 0:
        raise ValueError(f"lengthscale must be positive, got {lengthscale}")
    d = np.atleast_1d(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))
    return float(np.exp(-float(d @ d) / lengthscale))


def pairwise_sq_dists(inputs: np.ndarray) -> np.ndarray:
    """Exactly symmetric N x N matrix of squared Euclidean distances."""
    x = _as_2d(inputs)
    diff = x[:, None, :] - x[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def kernel_gram(inputs: np.ndarray, lengthscale: float) -> np.ndarray:
    """N x N kernel Gram matrix (unit diagonal, exactly symmetric)."""
    if lengthscale <= 0:
        raise ValueError(f"lengthscale must be positive, got {lengthscale}")
    return np.exp(-pairwise_sq_dists(inputs) / lengthscale)


def kernel_matrix(inputs: np.ndarray, lengthscale: float, noise_variance: float) -> np.ndarray:
    """Regularized kernel matrix ``K(X, X) + noise_variance * I``.

    Diagonal entries equal ``1 + noise_variance``; duplicate inputs are
    allowed (the nugget keeps the matrix positive definite).
    """
    if noise_variance < 0:
        raise ValueError(f"noise_variance must be nonnegative, got {noise_variance}")
    gram = kernel_gram(inputs, lengthscale)
    return gram + noise_variance * np.eye(gram.shape[0])


def cross_kernel(x: np.ndarray, inputs: np.ndarray, lengthscale: float) -> np.ndarray:
    """Row vector ``k(x, X_i)`` against cached training inputs (N,)."""
    if lengthscale <= 0:
        raise ValueError(f"lengthscale must be positive, got {lengthscale}")
    pts = _as_2d(inputs)
    q = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, -1)
    if q.shape[1] != pts.shape[1]:
        raise ValueError(f"query has dimension {q.shape[1]}, inputs have {pts.shape[1]}")
    diff = pts - q
    return np.exp(-np.einsum("ij,ij->i", diff, diff) / lengthscale)


def _as_2d(inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"inputs must be an N x d matrix, got shape {x.shape}")
    return x


@dataclass
class SpdFactor:
    """Cholesky factorization of an SPD matrix plus the jitter it needed."""

    factor: tuple
    logdet: float
    jitter: float

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        # check_finite off: non-finite data must surface as a non-finite loss
        # (caught upstream with context), not a bare ValueError here.
        return cho_solve(self.factor, rhs, check_finite=False)


def factor_spd(matrix: np.ndarray, context: dict | None = None) -> SpdFactor:
    """Cholesky-factor a symmetric matrix, escalating diagonal jitter on failure.

    Raises :class:`NumericalError` (with ``context`` attached) once the jitter
    ladder is exhausted.  ``logdet`` is twice the sum of the log factor
    diagonal, evaluated on the jittered matrix actually factored.
    """
    m = np.asarray(matrix, dtype=float)
    n = m.shape[0]
    if n == 0:
        return SpdFactor(factor=(np.zeros((0, 0)), True), logdet=0.0, jitter=0.0)
    scale = float(np.trace(m)) / n
    if scale <= 0:
        scale = 1.0
    jitter = 0.0
    while True:
        try:
            shifted = m if jitter == 0.0 else m + jitter * np.eye(n)
            c, lower = cho_factor(shifted, lower=True, check_finite=False)
            logdet = 2.0 * float(np.sum(np.log(np.diagonal(c))))
            return SpdFactor(factor=(c, lower), logdet=logdet, jitter=jitter)
        except np.linalg.LinAlgError:
            if jitter == 0.0:
                jitter = _JITTER_START * scale
            else:
                jitter *= 10.0
            if jitter > _JITTER_LIMIT * scale * (1 + 1e-12):
                raise NumericalError(
                    f"Cholesky failed after jitter escalation to {jitter:.3e}",
                    context=context,
                ) from None


def chol_solve_logdet(matrix: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, float]:
    """Solve ``matrix @ x = rhs`` and return ``(x, logdet(matrix))``.

    ``matrix`` must be symmetric positive definite up to the jitter policy.
    """
    f = factor_spd(matrix)
    return f.solve(np.asarray(rhs, dtype=float)), f.logdet
