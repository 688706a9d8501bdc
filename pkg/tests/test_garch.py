"""Two-stage conditional-correlation baseline: recursions, fits, forecasts."""

import numpy as np
import pytest

from dyncov.exceptions import FitError
from dyncov.garch import (
    DccFit,
    GarchFit,
    dcc_recursion,
    fit_dcc,
    fit_garch,
    forecast_dcc,
    simulate_dcc,
    simulate_garch,
    volatility_path,
)

TARGET = np.array([[1.0, 0.6], [0.6, 1.0]])


# ---------------------------------------------------------------------------
# recursions
# ---------------------------------------------------------------------------


def test_volatility_path_matches_hand_loop():
    got = volatility_path(np.array([0.1, -0.2, 0.3]), 0.05, 0.1, 0.8, 0.2)
    # h1 = 0.2
    # h2 = 0.05 + 0.1 * 0.01 + 0.8 * 0.2   = 0.211
    # h3 = 0.05 + 0.1 * 0.04 + 0.8 * 0.211 = 0.2228
    assert np.allclose(got, [0.2, 0.211, 0.2228], atol=1e-15)


def test_correlation_recursion_matches_hand_loop():
    u = np.array([[0.5, -0.2], [0.1, 0.4], [-0.3, 0.2]])
    q_bar = np.array([[1.0, 0.3], [0.3, 1.0]])
    alpha, beta = 0.1, 0.5
    q_path, r_path = dcc_recursion(u, alpha, beta, q_bar=q_bar)
    q = q_bar.copy()
    for t in range(3):
        assert np.allclose(q_path[t], q, atol=1e-12)
        scale = np.sqrt(np.diag(q))
        assert np.allclose(r_path[t], q / np.outer(scale, scale), atol=1e-12)
        q = (1 - alpha - beta) * q_bar + alpha * np.outer(u[t], u[t]) + beta * q
    # correlations have a unit diagonal and entries in [-1, 1]
    assert np.allclose(r_path[:, [0, 1], [0, 1]], 1.0, atol=1e-12)
    assert np.all(np.abs(r_path) <= 1.0 + 1e-12)


def test_correlation_recursion_static_when_dynamics_off():
    u = np.random.default_rng(0).standard_normal((20, 3))
    q_path, r_path = dcc_recursion(u, 0.0, 0.0)
    q_bar = u.T @ u / 20  # the default seed and target
    assert np.allclose(q_path, q_bar[None], atol=1e-12)
    assert np.allclose(r_path[0], r_path[-1], atol=1e-12)


# ---------------------------------------------------------------------------
# univariate stage
# ---------------------------------------------------------------------------


def test_fit_garch_input_validation():
    with pytest.raises(FitError):
        fit_garch(np.ones(4) + np.random.default_rng(0).standard_normal(4))
    with pytest.warns(UserWarning), pytest.raises(FitError):
        fit_garch(np.array([1.0, np.nan, 0.5, -0.2, 0.3]))
    with pytest.raises(FitError):
        fit_garch(np.full(30, 2.5))  # zero variance
    with pytest.warns(UserWarning):
        fit_garch(np.random.default_rng(1).standard_normal(10))


def test_fit_garch_recovers_simulated_parameters():
    r = simulate_garch(4000, 0.1, 0.1, 0.8, np.random.default_rng(1))
    fit = fit_garch(r)
    assert abs(fit.omega - 0.1) < 0.1
    assert abs(fit.alpha - 0.1) < 0.1
    assert abs(fit.beta - 0.8) < 0.1
    # structural constraints hold exactly by construction
    assert fit.omega > 0 and fit.alpha >= 0 and fit.beta >= 0
    assert fit.alpha + fit.beta < 1
    # the fitted likelihood dominates the true-parameter likelihood
    resid = r - r.mean()
    h_true = volatility_path(resid, 0.1, 0.1, 0.8, resid.var())
    ll_true = float(-0.5 * np.sum(np.log(2 * np.pi * h_true)
                                  + resid**2 / h_true))
    assert fit.loglik >= ll_true - 1e-6
    # the stored path is the recursion at the fitted parameters
    want_h = volatility_path(resid, fit.omega, fit.alpha, fit.beta,
                             resid.var())
    assert np.allclose(fit.h, want_h, atol=1e-12)
    assert fit.mean == pytest.approx(r.mean(), abs=1e-12)


def test_fit_garch_without_demeaning():
    r = simulate_garch(500, 0.1, 0.1, 0.5, np.random.default_rng(3)) + 5.0
    fit = fit_garch(r, demean=False)
    assert fit.mean == 0.0


# ---------------------------------------------------------------------------
# joint fit
# ---------------------------------------------------------------------------


def test_fit_dcc_validates_input():
    with pytest.raises(FitError):
        fit_dcc(np.random.default_rng(0).standard_normal(30))
    ys = np.random.default_rng(0).standard_normal((60, 2))
    one = fit_garch(ys[:, 0])
    with pytest.raises(FitError):
        fit_dcc(ys, series=(one,))  # one fit for two columns


def test_free_quantity_count():
    fit = DccFit(series=(), alpha=0.0, beta=0.0, q_bar=np.eye(3),
                 correlations=np.zeros((1, 3, 3)), sigmas=np.zeros((1, 3, 3)),
                 loglik=0.0)
    assert fit.dimension == 3
    assert fit.free_quantity_count == 3 * 3 + 2 + 6


def test_fit_dcc_recovers_dynamics_and_reconstructs_covariances():
    vol = np.array([[0.1, 0.08, 0.85], [0.15, 0.1, 0.8]])
    ys = simulate_dcc(3000, vol, 0.05, 0.9, TARGET, np.random.default_rng(4))
    fit = fit_dcc(ys)
    assert abs(fit.alpha - 0.05) < 0.1
    assert abs(fit.beta - 0.9) < 0.1
    assert fit.alpha + fit.beta < 1
    for j, s in enumerate(fit.series):
        assert abs(s.alpha - vol[j, 1]) < 0.1
        assert abs(s.beta - vol[j, 2]) < 0.1
    # covariance path = correlations scaled by the fitted volatilities
    vols = np.stack([s.h for s in fit.series], axis=1)
    half = np.sqrt(vols)
    want = fit.correlations * (half[:, :, None] * half[:, None, :])
    assert np.allclose(fit.sigmas, want, atol=1e-12)
    for j in range(2):
        assert np.allclose(fit.sigmas[:, j, j], vols[:, j], atol=1e-12)
    # the optimized correlation part dominates the static-correlation value
    resid = ys - fit.residual_means
    u = resid / half
    _, r_static = dcc_recursion(u, 0.0, 0.0, q_bar=fit.q_bar)
    chols = np.linalg.cholesky(r_static)
    log_dets = 2 * np.sum(np.log(np.diagonal(chols, axis1=-2, axis2=-1)),
                          axis=-1)
    white = np.linalg.solve(chols, u[..., None])[..., 0]
    static_ll = float(-0.5 * np.sum(log_dets + np.sum(white**2, axis=-1)
                                    - np.sum(u**2, axis=-1)))
    fitted_corr_ll = fit.loglik - sum(s.loglik for s in fit.series)
    assert fitted_corr_ll >= static_ll - 1e-6


# ---------------------------------------------------------------------------
# forecasting
# ---------------------------------------------------------------------------


def _toy_fit():
    h_path = np.array([[0.3, 0.4], [0.35, 0.3], [0.3, 0.5]])
    series = tuple(
        GarchFit(omega=0.2, alpha=0.1, beta=0.3, h=h_path[:, j], loglik=0.0)
        for j in range(2)
    )
    q_bar = np.array([[1.0, 0.5], [0.5, 1.0]])
    fit = DccFit(series=series, alpha=0.1, beta=0.2, q_bar=q_bar,
                 correlations=np.zeros((3, 2, 2)), sigmas=np.zeros((3, 2, 2)),
                 loglik=0.0, residual_means=np.zeros(2))
    returns = np.array([[0.1, -0.2], [0.2, 0.1], [-0.3, 0.2]])
    return fit, h_path, returns


def test_forecast_validation():
    fit, _, returns = _toy_fit()
    with pytest.raises(ValueError):
        forecast_dcc(fit, returns, 0)
    with pytest.raises(ValueError):
        forecast_dcc(fit, np.zeros((3, 3)), 2)


def test_forecast_first_step_matches_hand_mirror():
    fit, h_path, returns = _toy_fit()
    got = forecast_dcc(fit, returns, 1)
    u = returns / np.sqrt(h_path)
    q_path, _ = dcc_recursion(u, 0.1, 0.2, q_bar=fit.q_bar)
    h1 = 0.2 + 0.1 * returns[-1] ** 2 + 0.3 * h_path[-1]
    q1 = (0.7 * fit.q_bar + 0.1 * np.outer(u[-1], u[-1]) + 0.2 * q_path[-1])
    s = np.sqrt(np.diag(q1))
    want = (q1 / np.outer(s, s)) * np.outer(np.sqrt(h1), np.sqrt(h1))
    assert np.allclose(got[0], want, atol=1e-12)


def test_forecast_converges_to_long_run_covariance():
    # variances decay to omega / (1 - a - b) = 1/3 and the correlation
    # reverts to the long-run value 0.5, so the far-horizon forecast is known
    fit, _, returns = _toy_fit()
    got = forecast_dcc(fit, returns, 100)
    limit = np.array([[1 / 3, 0.5 / 3], [0.5 / 3, 1 / 3]])
    assert np.allclose(got[-1], limit, atol=1e-10)
    assert np.allclose(got, got.swapaxes(-1, -2), atol=1e-12)
    # monotone approach at long horizons
    assert abs(got[50, 0, 0] - 1 / 3) >= abs(got[80, 0, 0] - 1 / 3) - 1e-12


# ---------------------------------------------------------------------------
# simulators
# ---------------------------------------------------------------------------


def test_simulate_garch_validation_and_moments():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        simulate_garch(10, 0.0, 0.1, 0.5, rng)
    with pytest.raises(ValueError):
        simulate_garch(10, 0.1, 0.5, 0.5, rng)
    r = simulate_garch(100_000, 0.2, 0.1, 0.3, np.random.default_rng(2))
    assert r.shape == (100_000,)
    # stationary variance omega / (1 - a - b)
    assert r.var() == pytest.approx(0.2 / 0.6, abs=0.02)
    again = simulate_garch(100, 0.2, 0.1, 0.3, np.random.default_rng(5))
    assert np.array_equal(
        again, simulate_garch(100, 0.2, 0.1, 0.3, np.random.default_rng(5))
    )


def test_simulate_dcc_validation_and_static_moments():
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError):
        simulate_dcc(10, np.array([[0.1, 0.0, 0.0]]), 0.6, 0.5, np.eye(1), rng)
    with pytest.raises(ValueError):
        simulate_dcc(10, np.array([[0.0, 0.0, 0.0]]), 0.0, 0.0, np.eye(1), rng)
    vol = np.array([[0.25, 0.0, 0.0], [0.25, 0.0, 0.0]])
    ys = simulate_dcc(100_000, vol, 0.0, 0.0, TARGET, np.random.default_rng(3))
    assert ys.shape == (100_000, 2)
    assert np.corrcoef(ys.T)[0, 1] == pytest.approx(0.6, abs=0.02)
    assert np.allclose(ys.var(axis=0), 0.25, atol=0.01)
