"""Wishart process model for time-varying covariance.

A d x d covariance path over inputs x is built from d*v independent latent GP
paths: stacking the values at x_i into a d x v matrix F_i,

    Sigma(x_i) = L F_i F_i' L' (+ diag(noise))

with L a lower-triangular scale factor. Rows of the data matrix are modeled as
y_i ~ N(mean_i, Sigma(x_i)). With unit kernel variance this makes Sigma(x_i)
marginally Wishart with v degrees of freedom and scale L L'.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from . import kernels as _kernels
from .gp import CholeskyFactor, batched_mvn_logpdf, chol_jitter, gp_predict
from .kernels import Kernel, LogNormalPrior

_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# mean functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ZeroMean:
    """Rows are modeled with zero mean."""

    def values(self, y: np.ndarray) -> np.ndarray:
        return np.zeros_like(np.asarray(y, dtype=float))

    def extend(self, y: np.ndarray, count: int) -> np.ndarray:
        return np.zeros((count, np.asarray(y).shape[1]))

    def to_json(self):
        return {"type": "zero"}


@dataclass(frozen=True)
class EmaMean:
    """Causal exponential moving average mean, weight 2 / (window + 1).

    Row i gets the average of rows strictly before i, so the mean never looks
    ahead; the first row has mean zero. With window = 1 the mean of row i + 1
    is exactly row i. In steady state a constant series reproduces itself.
    """

    window: int = 10

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")

    @property
    def weight(self) -> float:
        return 2.0 / (self.window + 1.0)

    def values(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        out = np.zeros_like(y)
        a = self.weight
        for i in range(1, y.shape[0]):
            out[i] = a * y[i - 1] + (1.0 - a) * out[i - 1]
        return out

    def extend(self, y: np.ndarray, count: int) -> np.ndarray:
        """Mean frozen at its post-sample value for rows beyond the data."""
        y = np.asarray(y, dtype=float)
        if y.shape[0] == 0:
            return np.zeros((count, y.shape[1]))
        a = self.weight
        last = self.values(y)[-1]
        nxt = a * y[-1] + (1.0 - a) * last
        return np.tile(nxt, (count, 1))

    def to_json(self):
        return {"type": "ema", "window": self.window}


def mean_from_json(obj: dict):
    kind = obj.get("type")
    if kind == "zero":
        return ZeroMean()
    if kind == "ema":
        return EmaMean(window=int(obj.get("window", 10)))
    raise ValueError(f"unknown mean function {kind!r}")


# ---------------------------------------------------------------------------
# model and state containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WishartModel:
    """Model dimensions, kernel, hyperpriors, and noise/mean configuration.

    Parameters
    ----------
    dimension : int
        Number of observed series d.
    dof : int
        Latent GP count per series v (Wishart degrees of freedom).
    kernel : Kernel
        Covariance function shared by all latent GPs.
    priors : tuple of LogNormalPrior, optional
        One per kernel hyperparameter; defaults to standard log-normals.
    noise : bool
        Whether a diagonal observation-noise term is added to Sigma.
    noise_init : float
        Diagonal noise value used when initializing states with noise on.
    mean : ZeroMean or EmaMean
    """

    dimension: int
    dof: int
    kernel: Kernel
    priors: tuple[LogNormalPrior, ...] = ()
    noise: bool = False
    noise_init: float = 1e-3
    mean: ZeroMean | EmaMean = field(default_factory=ZeroMean)

    def __post_init__(self):
        if self.dimension < 1 or self.dof < 1:
            raise ValueError("dimension and dof must be >= 1")
        if not self.priors:
            object.__setattr__(self, "priors", _kernels.default_priors(self.kernel))
        if len(self.priors) != len(self.kernel.param_names()):
            raise ValueError("one hyperprior required per kernel hyperparameter")
        if self.dof < self.dimension:
            warnings.warn(
                "dof < dimension gives rank-deficient covariance; "
                "enable noise or raise dof",
                stacklevel=2,
            )


@dataclass(frozen=True)
class LatentState:
    """One configuration of all latent variables.

    f : (d, v, n) latent GP values, f[j, l] the l-th path for series j
    theta : (p,) positive kernel hyperparameters
    scale_chol : (d, d) lower-triangular scale factor L
    noise_diag : (d,) nonnegative observation-noise diagonal
    """

    f: np.ndarray
    theta: np.ndarray
    scale_chol: np.ndarray
    noise_diag: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.f, dtype=float)
        theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        scale = np.asarray(self.scale_chol, dtype=float)
        noise = np.asarray(self.noise_diag, dtype=float)
        if f.ndim != 3:
            raise ValueError(f"f must have shape (d, v, n), got {f.shape}")
        d = f.shape[0]
        if scale.shape != (d, d):
            raise ValueError(f"scale_chol must be ({d}, {d}), got {scale.shape}")
        if not np.allclose(scale, np.tril(scale)):
            raise ValueError("scale_chol must be lower triangular")
        if noise.shape != (d,):
            raise ValueError(f"noise_diag must be ({d},), got {noise.shape}")
        if np.any(noise < 0):
            raise ValueError("noise_diag must be nonnegative")
        for name, arr in (("f", f), ("theta", theta), ("scale_chol", scale),
                          ("noise_diag", noise)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "scale_chol", np.tril(scale))
        object.__setattr__(self, "noise_diag", noise)

    @property
    def n_inputs(self) -> int:
        return self.f.shape[2]

    def to_dict(self) -> dict:
        return {
            "f": self.f.tolist(),
            "theta": self.theta.tolist(),
            "scale_chol": self.scale_chol.tolist(),
            "noise_diag": self.noise_diag.tolist(),
        }

    @staticmethod
    def from_dict(obj: dict) -> "LatentState":
        return LatentState(
            f=np.asarray(obj["f"], dtype=float),
            theta=np.asarray(obj["theta"], dtype=float),
            scale_chol=np.asarray(obj["scale_chol"], dtype=float),
            noise_diag=np.asarray(obj["noise_diag"], dtype=float),
        )


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------


def sigma_path(state: LatentState) -> np.ndarray:
    """Covariance matrix at every input; shape (n, d, d)."""
    lf = np.einsum("jk,kli->jli", state.scale_chol, state.f)
    sig = np.einsum("jli,kli->ijk", lf, lf)
    if np.any(state.noise_diag):
        d = state.noise_diag.shape[0]
        sig[:, np.arange(d), np.arange(d)] += state.noise_diag
    return sig


def construct_sigma(state: LatentState, i: int) -> np.ndarray:
    """Covariance matrix at input index i."""
    fi = state.scale_chol @ state.f[:, :, i]
    return fi @ fi.T + np.diag(state.noise_diag)


def log_likelihood(model: WishartModel, state: LatentState, xs, y) -> float:
    """Sum of per-row Gaussian log densities under the state's covariance path."""
    y = np.asarray(y, dtype=float)
    if y.shape != (state.n_inputs, model.dimension):
        raise ValueError(
            f"y must be (n, d) = ({state.n_inputs}, {model.dimension}), got {y.shape}"
        )
    resid = y - model.mean.values(y)
    return float(np.sum(batched_mvn_logpdf(resid, sigma_path(state))))


def log_prior(
    model: WishartModel,
    state: LatentState,
    xs,
    chol_k: CholeskyFactor | None = None,
) -> float:
    """Joint log prior of (theta, L, f) for a state over inputs ``xs``.

    Hyperparameters get their log-normal priors, every free entry of L a
    standard normal, and each latent path a zero-mean GP prior with gram
    matrix K(xs; theta). A precomputed factor of that gram matrix can be
    passed to avoid refactorizing.
    """
    lp = _kernels.log_prior(model.priors, state.theta)
    if not np.isfinite(lp):
        return -np.inf
    d = model.dimension
    low = np.tril_indices(d)
    entries = state.scale_chol[low]
    lp += float(np.sum(-0.5 * (_LOG_2PI + entries**2)))
    n = state.n_inputs
    if n == 0:
        return lp
    if chol_k is None:
        gram = model.kernel.with_theta(state.theta).gram(np.asarray(xs, dtype=float))
        chol_k = chol_jitter(gram, name="latent gram matrix")
    flat = state.f.reshape(d * model.dof, n)  # rows are independent GP paths
    white = solve_triangular(chol_k.lower, flat.T, lower=True)
    blocks = d * model.dof
    lp += float(
        -0.5 * blocks * n * _LOG_2PI
        - 0.5 * blocks * chol_k.log_det
        - 0.5 * np.sum(white**2)
    )
    return lp


def sample_prior_state(
    model: WishartModel, xs, rng: np.random.Generator
) -> LatentState:
    """Draw (theta, L, f) from the prior over inputs ``xs``."""
    xs = np.asarray(xs, dtype=float)
    theta = np.array([p.sample(rng) for p in model.priors])
    d, v, n = model.dimension, model.dof, xs.shape[0]
    scale = np.tril(rng.standard_normal((d, d)))
    if n:
        gram = model.kernel.with_theta(theta).gram(xs)
        factor = chol_jitter(gram, name="latent gram matrix")
        f = (rng.standard_normal((d * v, n)) @ factor.lower.T).reshape(d, v, n)
    else:
        f = np.zeros((d, v, 0))
    noise = np.full(d, model.noise_init) if model.noise else np.zeros(d)
    return LatentState(f=f, theta=theta, scale_chol=scale, noise_diag=noise)


# ---------------------------------------------------------------------------
# posterior prediction
# ---------------------------------------------------------------------------


def predict(
    model: WishartModel,
    states,
    xs_train,
    xs_test,
    rng: np.random.Generator,
    train_y: np.ndarray | None = None,
    sample_obs: bool = False,
):
    """Draw covariance paths at test inputs, one per posterior state.

    For each state the latent paths are extended to ``xs_test`` through the GP
    conditional at that state's hyperparameters, then assembled into
    covariance draws. Returns (sigmas, ys) where sigmas has shape
    (n_states, n_test, d, d) and ys is None unless ``sample_obs``; sampled
    observations use the model mean extended past the training rows (requires
    ``train_y`` for a non-zero mean function).
    """
    xs_train = np.asarray(xs_train, dtype=float)
    xs_test = np.asarray(xs_test, dtype=float)
    states = list(states)
    if not states:
        raise ValueError("need at least one posterior state")
    d, v = model.dimension, model.dof
    n_test = xs_test.shape[0]
    sigmas = np.empty((len(states), n_test, d, d))
    ys = np.empty((len(states), n_test, d)) if sample_obs else None
    if sample_obs:
        if isinstance(model.mean, ZeroMean):
            mean_star = np.zeros((n_test, d))
        else:
            if train_y is None:
                raise ValueError("train_y is required to extend a non-zero mean")
            mean_star = model.mean.extend(np.asarray(train_y, dtype=float), n_test)
    for s_idx, state in enumerate(states):
        kern = model.kernel.with_theta(state.theta)
        cond = gp_predict(kern, xs_train, state.f.reshape(d * v, -1), xs_test)
        factor = chol_jitter(cond.cov, name="predictive covariance")
        eps = rng.standard_normal((d * v, n_test))
        f_star = (cond.mean + eps @ factor.lower.T).reshape(d, v, n_test)
        star = LatentState(
            f=f_star,
            theta=state.theta,
            scale_chol=state.scale_chol,
            noise_diag=state.noise_diag,
        )
        sigmas[s_idx] = sigma_path(star)
        if sample_obs:
            chols = np.linalg.cholesky(
                sigmas[s_idx] + 1e-12 * np.eye(d)[None, :, :]
            )
            zs = rng.standard_normal((n_test, d))
            ys[s_idx] = mean_star + np.einsum("ijk,ik->ij", chols, zs)
    return sigmas, ys


def scale_free_entries(scale_chol: np.ndarray) -> np.ndarray:
    """Free entries of L (lower triangle, row-major) as a flat vector."""
    d = scale_chol.shape[0]
    return scale_chol[np.tril_indices(d)].copy()


def scale_from_entries(values: np.ndarray, d: int) -> np.ndarray:
    """Inverse of :func:`scale_free_entries`."""
    out = np.zeros((d, d))
    out[np.tril_indices(d)] = values
    return out


def states_to_jsonl(path, states) -> None:
    """Write latent states as JSON lines, one state per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for state in states:
            fh.write(json.dumps(state.to_dict()) + "\n")


def states_from_jsonl(path) -> list[LatentState]:
    """Read latent states written by :func:`states_to_jsonl`."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(LatentState.from_dict(json.loads(line)))
    return out
