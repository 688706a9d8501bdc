"""Two-stage dynamic conditional correlation baseline.

Stage 1 fits a univariate Gaussian GARCH(1, 1) to each return series by
maximum likelihood:

    h_t = omega + a * r_{t-1}^2 + b * h_{t-1},    r_t ~ N(0, h_t)

with h_1 set to the sample variance. Stage 2 standardizes the returns by the
fitted volatilities and fits correlation dynamics (alpha, beta) by maximizing
the correlation part of the Gaussian quasi-likelihood of

    Q_t = (1 - alpha - beta) * Q_bar + alpha * u_{t-1} u_{t-1}' + beta * Q_{t-1}
    R_t = diag(Q_t)^{-1/2} Q_t diag(Q_t)^{-1/2}

where Q_bar is the sample second moment of the standardized returns and
Q_1 = Q_bar. The fitted covariance path is Sigma_t = D_t R_t D_t with
D_t = diag(sqrt(h_t)).

Positivity and stationarity are enforced structurally: omega = exp(raw), and
each (persistence pair) is parameterized by total s = sigmoid(p) in (0, 1)
split as a = s * frac, b = s * (1 - frac) with frac = sigmoid(q), so
a, b >= 0 and a + b < 1 always hold.

The fitted free quantities are three per series (omega, a, b), two
correlation-dynamics parameters, and the d(d-1)/2 off-diagonal entries of the
standardization target Q_bar — its diagonal is 1 up to sampling error because
the inputs are standardized.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit

from .exceptions import FitError
from .streams import worker_count

_MIN_OBS = 5
_COMFORTABLE_OBS = 20
_STARTS = ((0.05, 0.90), (0.10, 0.80), (0.20, 0.50), (0.02, 0.95), (0.30, 0.30))


@dataclass(frozen=True)
class GarchFit:
    """Univariate GARCH(1, 1) estimate with its in-sample volatility path."""

    omega: float
    alpha: float
    beta: float
    h: np.ndarray
    loglik: float
    mean: float = 0.0


@dataclass(frozen=True)
class DccFit:
    """Joint two-stage fit: per-series volatilities plus correlation dynamics."""

    series: tuple[GarchFit, ...]
    alpha: float
    beta: float
    q_bar: np.ndarray
    correlations: np.ndarray  # (n, d, d)
    sigmas: np.ndarray  # (n, d, d)
    loglik: float
    residual_means: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def dimension(self) -> int:
        return self.q_bar.shape[0]

    @property
    def free_quantity_count(self) -> int:
        """Number of fitted free quantities: 3d + 2 + d(d+1)/2.

        Three numbers per series, two correlation-dynamics scalars, and the
        upper triangle (with diagonal) of the standardization target. The
        conventional count for this model family, (d+1)(d+4)/2, is smaller by
        exactly d because it treats the target's diagonal as fixed at 1; here
        those entries are estimated (they land near 1 up to sampling error).
        """
        d = self.dimension
        return 3 * d + 2 + d * (d + 1) // 2


def _unpack_persistence(p: float, q: float) -> tuple[float, float]:
    total = expit(p)
    frac = expit(q)
    return total * frac, total * (1.0 - frac)


def _pack_persistence(a: float, b: float) -> tuple[float, float]:
    total = a + b
    return float(logit(total)), float(logit(a / total))


def volatility_path(returns: np.ndarray, omega: float, alpha: float,
                    beta: float, h1: float) -> np.ndarray:
    """Conditional variance recursion h_t = omega + alpha r_{t-1}^2 + beta h_{t-1}."""
    r2 = np.square(returns)
    h = np.empty_like(r2)
    h[0] = h1
    for t in range(1, h.shape[0]):
        h[t] = omega + alpha * r2[t - 1] + beta * h[t - 1]
    return h


def _garch_loglik(returns: np.ndarray, h: np.ndarray) -> float:
    if np.any(h <= 0) or not np.all(np.isfinite(h)):
        return -np.inf
    return float(-0.5 * np.sum(np.log(2.0 * np.pi * h) + np.square(returns) / h))


def fit_garch(returns, demean: bool = True) -> GarchFit:
    """Maximum-likelihood GARCH(1, 1) via simplex search from a grid of starts."""
    returns = np.asarray(returns, dtype=float).ravel()
    n = returns.shape[0]
    if n < _MIN_OBS:
        raise FitError(f"need at least {_MIN_OBS} observations, got {n}")
    if n < _COMFORTABLE_OBS:
        warnings.warn(
            f"fitting a volatility model to only {n} observations; "
            "estimates will be unstable",
            stacklevel=2,
        )
    if not np.all(np.isfinite(returns)):
        raise FitError("returns contain non-finite values")
    mean = float(returns.mean()) if demean else 0.0
    resid = returns - mean
    var = float(resid.var())
    if var <= 0:
        raise FitError("return series has zero variance")

    def objective(raw):
        omega = np.exp(raw[0])
        a, b = _unpack_persistence(raw[1], raw[2])
        h = volatility_path(resid, omega, a, b, var)
        return -_garch_loglik(resid, h)

    best = None
    for a0, b0 in _STARTS:
        p0, q0 = _pack_persistence(a0, b0)
        raw0 = np.array([np.log(var * (1.0 - a0 - b0)), p0, q0])
        res = minimize(objective, raw0, method="Nelder-Mead",
                       options={"xatol": 1e-6, "fatol": 1e-8, "maxiter": 2000})
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise FitError("volatility likelihood was degenerate at every start")
    omega = float(np.exp(best.x[0]))
    a, b = _unpack_persistence(best.x[1], best.x[2])
    h = volatility_path(resid, omega, a, b, var)
    return GarchFit(omega=omega, alpha=float(a), beta=float(b), h=h,
                    loglik=float(-best.fun), mean=mean)


def dcc_recursion(u, alpha: float, beta: float, q_bar=None):
    """Correlation recursion over standardized returns u of shape (n, d).

    Returns (q_path, r_path), each (n, d, d); q_bar defaults to the sample
    second moment of u and seeds the recursion.
    """
    u = np.asarray(u, dtype=float)
    n, d = u.shape
    if q_bar is None:
        q_bar = u.T @ u / n
    outers = np.einsum("ti,tj->tij", u, u)
    q_path = np.empty((n, d, d))
    q_path[0] = q_bar
    keep = 1.0 - alpha - beta
    base = keep * q_bar
    for t in range(1, n):
        q_path[t] = base + alpha * outers[t - 1] + beta * q_path[t - 1]
    return q_path, _normalize_correlation(q_path)


def _normalize_correlation(q_path: np.ndarray) -> np.ndarray:
    d = q_path.shape[-1]
    idx = np.arange(d)
    scale = np.sqrt(q_path[..., idx, idx])
    return q_path / (scale[..., :, None] * scale[..., None, :])


def _correlation_loglik(u: np.ndarray, r_path: np.ndarray) -> float:
    try:
        chols = np.linalg.cholesky(r_path)
    except np.linalg.LinAlgError:
        return -np.inf
    log_dets = 2.0 * np.sum(
        np.log(np.diagonal(chols, axis1=-2, axis2=-1)), axis=-1)
    white = np.linalg.solve(chols, u[..., None])[..., 0]
    quad = np.sum(np.square(white), axis=-1)
    return float(-0.5 * np.sum(log_dets + quad - np.sum(np.square(u), axis=-1)))


def fit_dcc(returns, series: tuple[GarchFit, ...] | None = None,
            demean: bool = True) -> DccFit:
    """Two-stage estimate of a time-varying covariance path for (n, d) returns.

    Pre-fitted per-column volatility models can be passed in; otherwise they
    are fitted here (in parallel when DYNCOV_THREADS allows). The reported
    loglik is the joint Gaussian log likelihood of the returns under the
    fitted covariance path.
    """
    returns = np.asarray(returns, dtype=float)
    if returns.ndim != 2:
        raise FitError(f"returns must be (n, d), got shape {returns.shape}")
    n, d = returns.shape
    if series is None:
        if worker_count() > 1:
            with ThreadPoolExecutor(max_workers=worker_count()) as pool:
                series = tuple(pool.map(
                    lambda j: fit_garch(returns[:, j], demean=demean), range(d)))
        else:
            series = tuple(fit_garch(returns[:, j], demean=demean)
                           for j in range(d))
    if len(series) != d:
        raise FitError(f"got {len(series)} volatility fits for {d} columns")
    vols = np.stack([fit.h for fit in series], axis=1)  # (n, d)
    resid = returns - np.array([fit.mean for fit in series])
    u = resid / np.sqrt(vols)
    q_bar = u.T @ u / n
    if np.linalg.matrix_rank(q_bar) < d:
        raise FitError("standardized returns have a singular second moment")
    outers = np.einsum("ti,tj->tij", u, u)

    def objective(raw):
        alpha, beta = _unpack_persistence(raw[0], raw[1])
        q_path = np.empty((n, d, d))
        q_path[0] = q_bar
        base = (1.0 - alpha - beta) * q_bar
        for t in range(1, n):
            q_path[t] = base + alpha * outers[t - 1] + beta * q_path[t - 1]
        return -_correlation_loglik(u, _normalize_correlation(q_path))

    best = None
    for a0, b0 in _STARTS:
        raw0 = np.array(_pack_persistence(a0, b0))
        res = minimize(objective, raw0, method="Nelder-Mead",
                       options={"xatol": 1e-6, "fatol": 1e-8, "maxiter": 1000})
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise FitError("correlation likelihood was degenerate at every start")
    alpha, beta = _unpack_persistence(best.x[0], best.x[1])
    _, r_path = dcc_recursion(u, alpha, beta, q_bar=q_bar)
    half = np.sqrt(vols)
    sigmas = r_path * (half[:, :, None] * half[:, None, :])
    total = sum(fit.loglik for fit in series) + float(-best.fun)
    return DccFit(
        series=series,
        alpha=float(alpha),
        beta=float(beta),
        q_bar=q_bar,
        correlations=r_path,
        sigmas=sigmas,
        loglik=total,
        residual_means=np.array([fit.mean for fit in series]),
    )


def forecast_dcc(fit: DccFit, returns, horizon: int) -> np.ndarray:
    """Covariance forecasts for the next `horizon` steps after the sample.

    Volatilities follow h_{n+k} = omega + (a + b) h_{n+k-1} beyond the first
    step (squared future returns are replaced by their expectation); the
    correlation driver is advanced with future standardized outer products
    replaced by their expectation R.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    returns = np.asarray(returns, dtype=float)
    n, d = returns.shape
    if d != fit.dimension:
        raise ValueError("returns dimension does not match the fit")
    resid = returns - fit.residual_means
    u = resid / np.sqrt(np.stack([s.h for s in fit.series], axis=1))

    h_prev = np.array([s.h[-1] for s in fit.series])
    r2_last = np.square(resid[-1])
    omegas = np.array([s.omega for s in fit.series])
    a_vol = np.array([s.alpha for s in fit.series])
    b_vol = np.array([s.beta for s in fit.series])

    q_path, r_path = dcc_recursion(u, fit.alpha, fit.beta, q_bar=fit.q_bar)
    q_prev = q_path[-1]
    last_outer = np.outer(u[-1], u[-1])
    base = (1.0 - fit.alpha - fit.beta) * fit.q_bar

    out = np.empty((horizon, d, d))
    h = omegas + a_vol * r2_last + b_vol * h_prev
    q = base + fit.alpha * last_outer + fit.beta * q_prev
    for k in range(horizon):
        r = _normalize_correlation(q[None])[0]
        half = np.sqrt(h)
        out[k] = r * np.outer(half, half)
        h = omegas + (a_vol + b_vol) * h
        q = base + fit.alpha * r + fit.beta * q
    return out


def simulate_garch(n: int, omega: float, alpha: float, beta: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Draw a return series from the stationary GARCH(1, 1) data process."""
    if not (omega > 0 and alpha >= 0 and beta >= 0 and alpha + beta < 1):
        raise ValueError("need omega > 0, alpha, beta >= 0, alpha + beta < 1")
    h = omega / (1.0 - alpha - beta)
    out = np.empty(n)
    for t in range(n):
        out[t] = np.sqrt(h) * rng.standard_normal()
        h = omega + alpha * out[t] ** 2 + beta * h
    return out


def simulate_dcc(
    n: int,
    vol_params: np.ndarray,
    alpha: float,
    beta: float,
    target: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw (n, d) returns with GARCH volatilities and correlation dynamics.

    vol_params is (d, 3) rows of (omega, a, b); target is the long-run
    correlation the driver reverts to.
    """
    vol_params = np.asarray(vol_params, dtype=float)
    target = np.asarray(target, dtype=float)
    d = vol_params.shape[0]
    if not (alpha >= 0 and beta >= 0 and alpha + beta < 1):
        raise ValueError("need alpha, beta >= 0 with alpha + beta < 1")
    omegas, a_vol, b_vol = vol_params.T
    if np.any(omegas <= 0) or np.any(a_vol + b_vol >= 1):
        raise ValueError("each volatility row needs omega > 0 and a + b < 1")
    h = omegas / (1.0 - a_vol - b_vol)
    q = target.copy()
    base = (1.0 - alpha - beta) * target
    out = np.empty((n, d))
    for t in range(n):
        r_t = _normalize_correlation(q[None])[0]
        eps = np.linalg.cholesky(r_t) @ rng.standard_normal(d)
        out[t] = np.sqrt(h) * eps
        h = omegas + a_vol * out[t] ** 2 + b_vol * h
        q = base + alpha * np.outer(eps, eps) + beta * q
    return out
