"""Posterior diagnostics: convergence, accuracy metrics, and dynamics tests."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .exceptions import DegeneratePsrfError
from .gp import batched_mvn_logpdf, chol_jitter

# ---------------------------------------------------------------------------
# convergence
# ---------------------------------------------------------------------------


def psrf(traces) -> float:
    """Gelman-Rubin potential scale reduction factor for one scalar quantity.

    ``traces`` is a sequence of equal-length 1-D arrays, one per chain.
    Values near 1 indicate the chains are sampling the same distribution;
    the conventional threshold is 1.1.
    """
    arrays = [np.asarray(t, dtype=float).ravel() for t in traces]
    m = len(arrays)
    if m < 2:
        raise ValueError("psrf needs at least two chains")
    n = arrays[0].shape[0]
    if any(a.shape[0] != n for a in arrays):
        raise ValueError("all chains must have the same length")
    if n < 2:
        raise ValueError("psrf needs at least two draws per chain")
    stacked = np.stack(arrays)  # (m, n)
    within = float(np.mean(np.var(stacked, axis=1, ddof=1)))
    if within == 0.0:
        raise DegeneratePsrfError(
            "zero within-chain variance: psrf is undefined on constant chains"
        )
    between = n * float(np.var(np.mean(stacked, axis=1), ddof=1))
    pooled = (n - 1) / n * within + between / n
    return math.sqrt(pooled / within)


# ---------------------------------------------------------------------------
# accuracy against a known covariance path
# ---------------------------------------------------------------------------


def _unique_entry_errors(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared differences over upper-triangle entries (with diagonal)."""
    d = a.shape[-1]
    iu = np.triu_indices(d)
    return (a[..., iu[0], iu[1]] - b[..., iu[0], iu[1]]) ** 2


def mse_mean_path(draws: np.ndarray, truth: np.ndarray) -> float:
    """Mean squared error of the posterior-mean covariance path.

    draws: (n_draws, n, d, d); truth: (n, d, d). Errors are averaged over the
    d(d+1)/2 unique entries and over the n inputs.
    """
    draws = np.asarray(draws, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if draws.ndim != 4 or draws.shape[1:] != truth.shape:
        raise ValueError(f"shape mismatch: draws {draws.shape} vs truth {truth.shape}")
    return float(np.mean(_unique_entry_errors(draws.mean(axis=0), truth)))


def mse_samples(draws: np.ndarray, truth: np.ndarray) -> float:
    """Average per-draw squared error (no averaging of draws before the error)."""
    draws = np.asarray(draws, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if draws.ndim != 4 or draws.shape[1:] != truth.shape:
        raise ValueError(f"shape mismatch: draws {draws.shape} vs truth {truth.shape}")
    return float(np.mean(_unique_entry_errors(draws, truth[None])))


def avg_loglik(y: np.ndarray, means: np.ndarray, sigmas: np.ndarray) -> float:
    """Average Gaussian log density of rows of y under a single covariance path.

    Typically called with the posterior-mean path; sigmas has shape (n, d, d).
    """
    y = np.asarray(y, dtype=float)
    means = np.asarray(means, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    if y.shape[0] == 0:
        raise ValueError("no rows to score")
    return float(np.mean(batched_mvn_logpdf(y - means, sigmas)))


def kl_mvn(mean0, cov0, mean1, cov1) -> float:
    """KL( N(mean0, cov0) || N(mean1, cov1) ) in closed form."""
    mean0 = np.atleast_1d(np.asarray(mean0, dtype=float))
    mean1 = np.atleast_1d(np.asarray(mean1, dtype=float))
    cov0 = np.atleast_2d(np.asarray(cov0, dtype=float))
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=float))
    d = mean0.shape[0]
    f0 = chol_jitter(cov0, name="first covariance")
    f1 = chol_jitter(cov1, name="second covariance")
    half = solve_triangular(f1.lower, f0.lower, lower=True)
    trace = float(np.sum(half**2))
    white = solve_triangular(f1.lower, mean1 - mean0, lower=True)
    quad = float(white @ white)
    return 0.5 * (trace + quad - d + f1.log_det - f0.log_det)


# ---------------------------------------------------------------------------
# highest-density intervals and the dynamics decision
# ---------------------------------------------------------------------------


def hdi(samples, level: float = 0.95) -> tuple[float, float]:
    """Shortest interval containing ``level`` of the samples."""
    samples = np.sort(np.asarray(samples, dtype=float).ravel())
    n = samples.shape[0]
    if n < 2:
        raise ValueError("hdi needs at least two samples")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    m = max(2, int(math.ceil(level * n)))
    widths = samples[m - 1:] - samples[: n - m + 1]
    k = int(np.argmin(widths))
    return float(samples[k]), float(samples[k + m - 1])


@dataclass(frozen=True)
class DynamicsVerdict:
    """Outcome of the covariance-dynamics decision for one entry (i, j).

    label : "uncorrelated" | "static" | "dynamic"
    intervals : (n, 2) per-input credible intervals already widened by the rope
    """

    label: str
    intervals: np.ndarray
    level: float
    rope: float


def dynamics_test(
    draws: np.ndarray,
    i: int,
    j: int,
    level: float = 0.95,
    rope: float = 0.005,
) -> DynamicsVerdict:
    """Classify entry (i, j) of a covariance-path posterior.

    Per input, the highest-density interval of the draws is widened by
    ``rope`` on both sides. The entry is labeled

    - "uncorrelated" if zero lies in every widened interval,
    - "static" if some value lies in all widened intervals
      (max of lower bounds <= min of upper bounds),
    - "dynamic" otherwise.
    """
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 4:
        raise ValueError("draws must have shape (n_draws, n, d, d)")
    n_draws = draws.shape[0]
    if n_draws < 2:
        raise ValueError("dynamics_test needs at least two posterior draws")
    if n_draws < 100:
        warnings.warn(
            f"only {n_draws} posterior draws: interval estimates will be coarse",
            stacklevel=2,
        )
    series = draws[:, :, i, j]  # (n_draws, n)
    n = series.shape[1]
    intervals = np.empty((n, 2))
    for t in range(n):
        lo, hi = hdi(series[:, t], level=level)
        intervals[t] = (lo - rope, hi + rope)
    if np.all((intervals[:, 0] <= 0.0) & (0.0 <= intervals[:, 1])):
        label = "uncorrelated"
    elif float(np.max(intervals[:, 0])) <= float(np.min(intervals[:, 1])):
        label = "static"
    else:
        label = "dynamic"
    return DynamicsVerdict(label=label, intervals=intervals, level=level, rope=rope)


def effect_size_distribution(draws: np.ndarray, i: int, j: int) -> np.ndarray:
    """Per-draw range (max minus min over inputs) of covariance entry (i, j).

    The spread of this distribution quantifies how strongly the entry moves;
    a posterior concentrated near zero range indicates a static entry.
    """
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 4:
        raise ValueError("draws must have shape (n_draws, n, d, d)")
    series = draws[:, :, i, j]
    return series.max(axis=1) - series.min(axis=1)
