"""Gaussian process linear algebra used by every inference backend.

All factorizations go through one jittered Cholesky helper so that numerical
rescue behaves identically everywhere, and solves are always done against the
factor (no matrix is ever explicitly inverted).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .exceptions import SingularMatrixError
from .kernels import Kernel

# Escalating diagonal inflation tried in order before declaring singularity.
JITTER_LADDER = (0.0, 1e-8, 1e-6, 1e-4)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower factor of (matrix + jitter * I), remembering the jitter used."""

    lower: np.ndarray
    jitter: float

    @property
    def log_det(self) -> float:
        """Log determinant of the jittered matrix."""
        return 2.0 * float(np.sum(np.log(np.diagonal(self.lower))))


def chol_jitter(matrix: np.ndarray, name: str = "matrix") -> CholeskyFactor:
    """Lower-Cholesky factor, inflating the diagonal along the jitter ladder.

    Raises
    ------
    SingularMatrixError
        If the matrix is still not positive definite at the largest jitter.
        The error message names the offending matrix.
    ValueError
        If the matrix contains non-finite entries or is not square.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"{name} must be square, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise ValueError(f"{name} contains non-finite entries")
    eye = np.eye(matrix.shape[0])
    for jitter in JITTER_LADDER:
        try:
            lower = np.linalg.cholesky(matrix + jitter * eye if jitter else matrix)
            return CholeskyFactor(lower=lower, jitter=jitter)
        except np.linalg.LinAlgError:
            continue
    raise SingularMatrixError(name, JITTER_LADDER[-1])


def sample_gp_prior(
    kernel: Kernel, xs, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw ``count`` independent zero-mean GP paths over ``xs``; shape (count, n)."""
    xs = np.asarray(xs, dtype=float)
    factor = chol_jitter(kernel.gram(xs), name="prior gram matrix")
    z = rng.standard_normal((count, xs.shape[0]))
    return z @ factor.lower.T


@dataclass(frozen=True)
class GPConditional:
    """Gaussian conditional over test points: N(mean, cov)."""

    mean: np.ndarray
    cov: np.ndarray

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Joint draws; shape (count, n) for 1-D mean, (count, blocks, n) for 2-D."""
        factor = chol_jitter(self.cov, name="conditional covariance")
        shape = (count,) + self.mean.shape
        z = rng.standard_normal(shape)
        return self.mean + z @ factor.lower.T


def gp_predict(
    kernel: Kernel,
    xs_train,
    f_train,
    xs_test,
    chol_train: CholeskyFactor | None = None,
) -> GPConditional:
    """Noise-free GP conditional given latent values at the training inputs.

    mean = K(test, train) K(train, train)^-1 f
    cov  = K(test, test) - K(test, train) K(train, train)^-1 K(train, test)

    ``f_train`` may be a single path of shape (n,) or a stack (blocks, n); the
    stacked form shares one factorization and returns mean (blocks, n_test).
    ``chol_train`` lets callers reuse a factor of the training gram matrix; the
    supplied factor is then used as-is. When the factor is computed here and
    the training gram is so ill-conditioned that cancellation drives the
    conditional covariance below PSD, the training jitter is escalated along
    the ladder until the covariance passes a factorization check.
    """
    xs_train = np.asarray(xs_train, dtype=float)
    xs_test = np.asarray(xs_test, dtype=float)
    f_train = np.asarray(f_train, dtype=float)
    if f_train.shape[-1] != xs_train.shape[0]:
        raise ValueError("f_train length does not match xs_train")
    k_cross = kernel.gram(xs_test, xs_train)  # (n_test, n_train)
    k_test = kernel.gram(xs_test)

    def conditional(factor: CholeskyFactor) -> tuple[np.ndarray, np.ndarray]:
        alpha = cho_solve((factor.lower, True), f_train.T)  # (n_train, ...)
        mean = (k_cross @ alpha).T if f_train.ndim > 1 else k_cross @ alpha
        half = solve_triangular(factor.lower, k_cross.T, lower=True)
        cov = k_test - half.T @ half
        return mean, 0.5 * (cov + cov.T)

    def looks_psd(cov: np.ndarray) -> bool:
        try:
            np.linalg.cholesky(cov + 1e-8 * np.eye(cov.shape[0]))
            return True
        except np.linalg.LinAlgError:
            return False

    if chol_train is not None:
        mean, cov = conditional(chol_train)
        return GPConditional(mean=mean, cov=cov)
    gram_train = kernel.gram(xs_train)
    chol_train = chol_jitter(gram_train, name="training gram matrix")
    mean, cov = conditional(chol_train)
    eye = np.eye(gram_train.shape[0])
    for rung in JITTER_LADDER:
        if looks_psd(cov):
            break
        if rung <= chol_train.jitter:
            continue
        try:
            lower = np.linalg.cholesky(gram_train + rung * eye)
        except np.linalg.LinAlgError:
            continue
        chol_train = CholeskyFactor(lower=lower, jitter=rung)
        mean, cov = conditional(chol_train)
    return GPConditional(mean=mean, cov=cov)


def mvn_logpdf(y, mean, cov) -> float:
    """Multivariate normal log density via Cholesky (no explicit inverse).

    Raises ``SingularMatrixError`` if the covariance is beyond jitter rescue.
    """
    y = np.asarray(y, dtype=float)
    mean = np.asarray(mean, dtype=float)
    factor = chol_jitter(np.asarray(cov, dtype=float), name="covariance")
    return mvn_logpdf_chol(y, mean, factor)


def mvn_logpdf_chol(y, mean, factor: CholeskyFactor) -> float:
    """Log density against a precomputed Cholesky factor of the covariance."""
    y = np.asarray(y, dtype=float)
    resid = y - np.asarray(mean, dtype=float)
    d = resid.shape[-1]
    if d == 0:
        return 0.0
    white = solve_triangular(factor.lower, resid, lower=True)
    return float(-0.5 * d * _LOG_2PI - 0.5 * np.dot(white, white)) - 0.5 * factor.log_det


def _small_dim_logpdf(resid: np.ndarray, covs: np.ndarray, jitter: float):
    """Cholesky + forward substitution unrolled into length-n vector ops.

    Returns None if any matrix in the stack fails to factorize at this jitter.
    """
    n, d = resid.shape
    lower = [[None] * d for _ in range(d)]
    log_det = np.zeros(n)
    with np.errstate(invalid="ignore", divide="ignore"):
        for j in range(d):
            acc = covs[:, j, j] + jitter
            for k in range(j):
                acc = acc - lower[j][k] ** 2
            if np.any(acc <= 0.0) or not np.all(np.isfinite(acc)):
                return None
            diag = np.sqrt(acc)
            lower[j][j] = diag
            log_det += np.log(diag)
            for i in range(j + 1, d):
                acc = covs[:, i, j]
                for k in range(j):
                    acc = acc - lower[i][k] * lower[j][k]
                lower[i][j] = acc / diag
        quad = np.zeros(n)
        white: list[np.ndarray] = []
        for j in range(d):
            acc = resid[:, j]
            for k in range(j):
                acc = acc - lower[j][k] * white[k]
            white.append(acc / lower[j][j])
            quad += white[j] ** 2
    if not (np.all(np.isfinite(quad)) and np.all(np.isfinite(log_det))):
        return None
    return -0.5 * (d * _LOG_2PI + quad) - log_det


def batched_mvn_logpdf(resid: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """Per-row N(resid_i; 0, covs_i) log densities for stacks of small matrices.

    resid has shape (n, d), covs (n, d, d). The jitter ladder is applied to the
    whole stack at once: the smallest rung that makes every matrix factorizable
    is used for all of them.
    """
    resid = np.asarray(resid, dtype=float)
    covs = np.asarray(covs, dtype=float)
    n, d = resid.shape
    if n == 0:
        return np.zeros(0)
    if d <= 6:
        for jitter in JITTER_LADDER:
            out = _small_dim_logpdf(resid, covs, jitter)
            if out is not None:
                return out
        raise SingularMatrixError("per-point covariance stack", JITTER_LADDER[-1])
    lower = None
    for jitter in JITTER_LADDER:
        shifted = covs + jitter * np.eye(d) if jitter else covs
        try:
            lower = np.linalg.cholesky(shifted)
            break
        except np.linalg.LinAlgError:
            continue
    if lower is None:
        raise SingularMatrixError("per-point covariance stack", JITTER_LADDER[-1])
    white = np.linalg.solve(lower, resid[:, :, None])[:, :, 0]
    log_dets = 2.0 * np.sum(np.log(np.diagonal(lower, axis1=1, axis2=2)), axis=1)
    return -0.5 * (d * _LOG_2PI + log_dets + np.sum(white**2, axis=1))
