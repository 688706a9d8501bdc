"""Sparse variational inference for the Wishart process model.

Each latent path f[j, l] gets an independent Gaussian variational posterior
over its values u at w shared inducing inputs z, with mean m[j, l] and
covariance S[j, l] kept as a lower Cholesky factor (positive semidefinite by
construction). The evidence lower bound

    sum_i E_q[ log N(y_i | mean_i, Sigma(x_i)) ] - sum_{j,l} KL(q(u) || p(u))

is estimated with a small number of reparameterized draws: u = m + S_chol eps,
then f(x_i) | u from the per-point sparse GP conditional. Kernel
hyperparameters, the scale factor L, and the noise diagonal are point
parameters optimized jointly with the variational ones (log / softplus maps
keep them in their domains); gradients come from automatic differentiation of
the same estimator, so they match finite differences of `elbo_estimate` at
matched draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

import jax
import jax.numpy as jnp
from jax.scipy.linalg import solve_triangular as jax_solve_triangular

from scipy.linalg import solve_triangular as scipy_solve_triangular

from .exceptions import FitError, SingularMatrixError
from .gp import chol_jitter, gp_predict
from .kernels import (
    Kernel,
    LocallyPeriodic,
    Matern12,
    Periodic,
    Product,
    Rbf,
    Sum,
)
from .streams import substream
from .wishart import WishartModel

jax.config.update("jax_enable_x64", True)

_ELBO_JITTER = 1e-8  # fixed inflation of K_zz inside the objective
_SIGMA_FLOOR = 1e-10  # keeps per-point covariances factorizable without noise


@dataclass(frozen=True)
class ViConfig:
    """Optimizer settings (Adam with restarts and early stopping).

    inducing : number of inducing inputs; default min(n, 50)
    mc_samples : reparameterized draws per objective evaluation
    patience : stop a restart after this many steps without a new best
    restarts : independent initializations; the best final bound wins
    retry_cap : fresh reinitializations allowed when a restart diverges
    """

    inducing: int | None = None
    mc_samples: int = 3
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 10000
    max_iters: int = 100000
    restarts: int = 4
    retry_cap: int = 3
    optimize_inducing: bool = True

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("moment decay rates must lie in [0, 1)")
        if self.patience < 1 or self.max_iters < 0:
            raise ValueError("patience must be >= 1 and max_iters >= 0")
        if self.restarts < 1 or self.retry_cap < 0:
            raise ValueError("restarts must be >= 1 and retry_cap >= 0")


@dataclass
class VariationalState:
    """Fitted variational posterior and point parameters.

    z : (w,) inducing inputs
    m : (d, v, w) variational means
    s_chol : (d, v, w, w) lower Cholesky factors of the variational covariances
    theta : (p,) kernel hyperparameters (positive axis)
    scale_chol : (d, d) lower-triangular scale factor
    noise_diag : (d,) observation noise diagonal (zeros when the model has none)
    """

    z: np.ndarray
    m: np.ndarray
    s_chol: np.ndarray
    theta: np.ndarray
    scale_chol: np.ndarray
    noise_diag: np.ndarray

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in
                ("z", "m", "s_chol", "theta", "scale_chol", "noise_diag")}

    @staticmethod
    def from_dict(obj: dict) -> "VariationalState":
        return VariationalState(
            **{k: np.asarray(obj[k], dtype=float) for k in
               ("z", "m", "s_chol", "theta", "scale_chol", "noise_diag")}
        )


@dataclass
class FitTrace:
    """Optimization record: per-restart bound traces and the winning restart."""

    elbo_traces: list[np.ndarray]
    best_restart: int
    best_elbo: float
    diverged_restarts: int = 0


# ---------------------------------------------------------------------------
# kernel evaluation under jax
# ---------------------------------------------------------------------------


def _kernel_value_jax(kernel: Kernel, theta, r):
    """Evaluate the kernel at lag array ``r`` consuming ``theta`` in tree order."""

    def visit(node, offset):
        if isinstance(node, Rbf):
            ell = theta[offset]
            return jnp.exp(-(r**2) / (2.0 * ell**2)), offset + 1
        if isinstance(node, Matern12):
            ell = theta[offset]
            return jnp.exp(-jnp.abs(r) / (2.0 * ell**2)), offset + 1
        if isinstance(node, Periodic):
            p, ell = theta[offset], theta[offset + 1]
            s = jnp.sin(jnp.pi * jnp.abs(r) / p)
            return jnp.exp(-2.0 * s**2 / ell**2), offset + 2
        if isinstance(node, LocallyPeriodic):
            p, ell, dec = theta[offset], theta[offset + 1], theta[offset + 2]
            s = jnp.sin(jnp.pi * jnp.abs(r) / p)
            per = jnp.exp(-2.0 * s**2 / ell**2)
            env = jnp.exp(-(r**2) / (2.0 * dec**2))
            return per * env, offset + 3
        if isinstance(node, (Sum, Product)):
            values = []
            for child in node.children:
                val, offset = visit(child, offset)
                values.append(val)
            out = values[0]
            for val in values[1:]:
                out = out + val if isinstance(node, Sum) else out * val
            return out, offset
        raise TypeError(f"unsupported kernel node {type(node).__name__}")

    out, consumed = visit(kernel, 0)
    assert consumed == len(kernel.param_names())
    return out


def _gram_jax(kernel, theta, xa, xb):
    return _kernel_value_jax(kernel, theta, xa[:, None] - xb[None, :])


def _gram_diag_jax(kernel, theta, xs):
    return _kernel_value_jax(kernel, theta, jnp.zeros_like(xs))


# ---------------------------------------------------------------------------
# the objective
# ---------------------------------------------------------------------------


def _softplus(x):
    return jnp.logaddexp(x, 0.0)


def _softplus_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


def _build_elbo(kernel: Kernel, dims: tuple, noise: bool):
    """Compiled ELBO as a function of (params, eps_u, eps_f, xs, resid)."""
    d, v, _n, w = dims

    def elbo(params, eps_u, eps_f, xs, resid):
        theta = jnp.exp(params["log_theta"])
        z = params["z"]
        m = params["m"]
        s_chol = jnp.tril(params["s_chol"])
        scale = jnp.tril(params["scale"])

        k_zz = _gram_jax(kernel, theta, z, z) + _ELBO_JITTER * jnp.eye(w)
        l_z = jnp.linalg.cholesky(k_zz)
        k_xz = _gram_jax(kernel, theta, xs, z)  # (n, w)
        half = jax_solve_triangular(l_z, k_xz.T, lower=True)  # (w, n)
        proj = jax_solve_triangular(l_z.T, half, lower=False)  # K_zz^-1 K_zx
        cond_var = _gram_diag_jax(kernel, theta, xs) - jnp.sum(k_xz.T * proj, axis=0)
        cond_var = jnp.maximum(cond_var, _SIGMA_FLOOR)

        u = m[None] + jnp.einsum("dvab,mdvb->mdva", s_chol, eps_u)  # (mc, d, v, w)
        f_mean = jnp.einsum("wn,mdvw->mdvn", proj, u)
        f = f_mean + jnp.sqrt(cond_var)[None, None, None, :] * eps_f

        lf = jnp.einsum("jk,mkvn->mjvn", scale, f)
        sig = jnp.einsum("mjvn,mkvn->mnjk", lf, lf)
        if noise:
            diag_add = _SIGMA_FLOOR + _softplus(params["noise_raw"])
        else:
            diag_add = jnp.full((d,), _SIGMA_FLOOR)
        sig = sig + diag_add * jnp.eye(d)[None, None]
        chols = jnp.linalg.cholesky(sig)
        rhs = jnp.broadcast_to(resid[None, :, :, None], chols.shape[:2] + (d, 1))
        white = jax_solve_triangular(chols, rhs, lower=True)[..., 0]
        log_dets = 2.0 * jnp.sum(
            jnp.log(jnp.diagonal(chols, axis1=-2, axis2=-1)), axis=-1
        )
        point_ll = -0.5 * (d * math.log(2.0 * math.pi) + log_dets
                           + jnp.sum(white**2, axis=-1))
        data_term = jnp.mean(jnp.sum(point_ll, axis=1))

        l_z_b = jnp.broadcast_to(l_z, (d, v, w, w))
        w_mat = jax_solve_triangular(l_z_b, s_chol, lower=True)  # (d, v, w, w)
        trace_term = jnp.sum(w_mat**2, axis=(-2, -1))
        alpha = jax_solve_triangular(l_z_b, m[..., None], lower=True)[..., 0]
        quad_term = jnp.sum(alpha**2, axis=-1)
        logdet_k = 2.0 * jnp.sum(jnp.log(jnp.diagonal(l_z)))
        diag_s = jnp.abs(jnp.diagonal(s_chol, axis1=-2, axis2=-1))
        logdet_s = 2.0 * jnp.sum(jnp.log(diag_s), axis=-1)
        kl = 0.5 * jnp.sum(trace_term + quad_term - w + logdet_k - logdet_s)
        return data_term - kl

    return elbo


_COMPILED: dict = {}


def _compiled(kernel: Kernel, dims: tuple, noise: bool, what: str):
    key = (repr(kernel.to_json()), dims, noise, what)
    if key not in _COMPILED:
        elbo = _build_elbo(kernel, dims, noise)
        if what == "value":
            _COMPILED[key] = jax.jit(elbo)
        else:
            _COMPILED[key] = jax.jit(jax.value_and_grad(elbo))
    return _COMPILED[key]


def _params_from_state(state: VariationalState, noise: bool) -> dict:
    params = {
        "z": jnp.asarray(state.z),
        "m": jnp.asarray(state.m),
        "s_chol": jnp.asarray(state.s_chol),
        "log_theta": jnp.log(jnp.asarray(state.theta)),
        "scale": jnp.asarray(state.scale_chol),
    }
    if noise:
        params["noise_raw"] = jnp.asarray(
            [_softplus_inv(max(x, 1e-12)) for x in state.noise_diag]
        )
    return params


def _state_from_params(params: dict, noise: bool) -> VariationalState:
    noise_diag = (
        np.asarray(_softplus(params["noise_raw"]))
        if noise
        else np.zeros(np.asarray(params["scale"]).shape[0])
    )
    return VariationalState(
        z=np.asarray(params["z"]),
        m=np.asarray(params["m"]),
        s_chol=np.tril(np.asarray(params["s_chol"])),
        theta=np.exp(np.asarray(params["log_theta"])),
        scale_chol=np.tril(np.asarray(params["scale"])),
        noise_diag=noise_diag,
    )


def kl_gaussian(m, s_chol, k_zz) -> float:
    """KL( MVN(m, S) || MVN(0, K) ) with S given by its lower Cholesky factor.

    This is the penalty each GP block pays in the bound for moving its
    inducing-value posterior away from the prior. Scalars are accepted for the
    one-point case. A K that fails to factorize raises
    :class:`SingularMatrixError`.
    """
    m = np.atleast_1d(np.asarray(m, dtype=float))
    s_chol = np.atleast_2d(np.asarray(s_chol, dtype=float))
    k_zz = np.atleast_2d(np.asarray(k_zz, dtype=float))
    w = m.shape[0]
    if s_chol.shape != (w, w) or k_zz.shape != (w, w):
        raise ValueError("dimension mismatch between m, S factor, and K")
    try:
        l_k = np.linalg.cholesky(k_zz)
    except np.linalg.LinAlgError as e:
        raise SingularMatrixError("inducing-point prior covariance", 0.0) from e
    # whiten both the factor and the mean by L_K
    half = scipy_solve_triangular(l_k, s_chol, lower=True)
    alpha = scipy_solve_triangular(l_k, m, lower=True)
    trace_term = float(np.sum(half * half))
    quad_term = float(alpha @ alpha)
    logdet_k = 2.0 * float(np.sum(np.log(np.diag(l_k))))
    logdet_s = 2.0 * float(np.sum(np.log(np.abs(np.diag(s_chol)))))
    return 0.5 * (trace_term + quad_term - w + logdet_k - logdet_s)


def _draw_eps(model: WishartModel, n: int, w: int, mc_count: int,
              rng: np.random.Generator):
    d, v = model.dimension, model.dof
    eps_u = rng.standard_normal((mc_count, d, v, w))
    eps_f = rng.standard_normal((mc_count, d, v, n))
    return jnp.asarray(eps_u), jnp.asarray(eps_f)


def elbo_estimate(
    model: WishartModel, xs, y, state: VariationalState, mc_count: int,
    rng: np.random.Generator,
) -> float:
    """Monte Carlo ELBO at a state; the rng fixes the reparameterized draws."""
    xs = np.asarray(xs, dtype=float)
    y = np.asarray(y, dtype=float)
    resid = y - model.mean.values(y)
    dims = (model.dimension, model.dof, xs.shape[0], state.z.shape[0])
    fn = _compiled(model.kernel, dims, model.noise, "value")
    eps_u, eps_f = _draw_eps(model, xs.shape[0], state.z.shape[0], mc_count, rng)
    params = _params_from_state(state, model.noise)
    return float(fn(params, eps_u, eps_f, jnp.asarray(xs), jnp.asarray(resid)))


def elbo_gradient(
    model: WishartModel, xs, y, state: VariationalState, mc_count: int,
    rng: np.random.Generator,
) -> tuple[float, dict]:
    """(value, gradient) of the ELBO with respect to every free parameter.

    Gradient keys: m, s_chol, z, log_theta, scale, and noise_raw when the
    model has observation noise. Reusing the rng seed of `elbo_estimate`
    evaluates the same Monte Carlo objective, so central finite differences of
    that function converge to this gradient coordinate by coordinate.
    """
    xs = np.asarray(xs, dtype=float)
    y = np.asarray(y, dtype=float)
    resid = y - model.mean.values(y)
    dims = (model.dimension, model.dof, xs.shape[0], state.z.shape[0])
    fn = _compiled(model.kernel, dims, model.noise, "grad")
    eps_u, eps_f = _draw_eps(model, xs.shape[0], state.z.shape[0], mc_count, rng)
    params = _params_from_state(state, model.noise)
    value, grads = fn(params, eps_u, eps_f, jnp.asarray(xs), jnp.asarray(resid))
    grads = {k: np.asarray(g) for k, g in grads.items()}
    grads["s_chol"] = np.tril(grads["s_chol"])
    grads["scale"] = np.tril(grads["scale"])
    return float(value), grads


def flatten_params(params: dict) -> tuple[np.ndarray, list]:
    """Concatenate free coordinates; returns (vector, [(key, shape, mask)] spec).

    Lower-triangular blocks contribute only their free entries.
    """
    spec, chunks = [], []
    for key in sorted(params):
        arr = np.asarray(params[key], dtype=float)
        if key in ("s_chol", "scale"):
            mask = np.tril(np.ones(arr.shape[-2:], dtype=bool))
            mask = np.broadcast_to(mask, arr.shape)
        else:
            mask = np.ones(arr.shape, dtype=bool)
        spec.append((key, arr.shape, mask))
        chunks.append(arr[mask])
    return np.concatenate(chunks), spec


def unflatten_params(vector: np.ndarray, spec: list) -> dict:
    out, at = {}, 0
    for key, shape, mask in spec:
        count = int(mask.sum())
        arr = np.zeros(shape)
        arr[mask] = vector[at:at + count]
        out[key] = arr
        at += count
    return out


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def _initial_state(
    model: WishartModel, xs, resid, w: int, rng: np.random.Generator
) -> VariationalState:
    d, v = model.dimension, model.dof
    xs = np.asarray(xs, dtype=float)
    lo, hi = (float(xs.min()), float(xs.max())) if xs.size else (0.0, 1.0)
    z = np.linspace(lo, hi, w)
    theta = np.array([p.sample(rng) for p in model.priors])
    k_zz = model.kernel.with_theta(theta).gram(z)
    l_z = chol_jitter(k_zz, name="inducing gram matrix").lower
    s_chol = np.broadcast_to(l_z, (d, v, w, w)).copy()
    m = 0.01 * rng.standard_normal((d, v, w))
    cov = np.cov(resid.T) if resid.shape[0] > 1 else np.eye(d)
    cov = np.atleast_2d(cov) + 1e-6 * np.eye(d)
    base = chol_jitter(cov / v, name="empirical covariance").lower
    wiggle = np.tril(np.exp(0.1 * rng.standard_normal((d, d))))
    scale = base * wiggle
    noise = np.full(d, model.noise_init) if model.noise else np.zeros(d)
    return VariationalState(z=z, m=m, s_chol=s_chol, theta=theta,
                            scale_chol=scale, noise_diag=noise)


def fit_vi(
    model: WishartModel,
    xs,
    y,
    config: ViConfig,
    seed: int,
) -> tuple[VariationalState, FitTrace]:
    """Adam ascent on the ELBO over independent restarts; best bound wins.

    Each restart draws a fresh initialization on its own stream, runs up to
    ``max_iters`` steps stopping early after ``patience`` steps without
    improvement, and a diverged restart (non-finite bound) is reinitialized up
    to ``retry_cap`` times. With max_iters = 0 the initialization is returned
    unchanged (restart 0 wins by construction).
    """
    xs = np.asarray(xs, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.shape[0] != xs.shape[0]:
        raise ValueError("xs and y disagree on the number of rows")
    resid = y - model.mean.values(y)
    n = xs.shape[0]
    w = config.inducing if config.inducing is not None else min(n, 50)
    if w < 1:
        raise ValueError("need at least one inducing input")
    dims = (model.dimension, model.dof, n, w)
    fn = _compiled(model.kernel, dims, model.noise, "grad")
    xs_j, resid_j = jnp.asarray(xs), jnp.asarray(resid)

    best_params, best_value, best_restart = None, -np.inf, -1
    traces: list[np.ndarray] = []
    diverged_total = 0

    for restart in range(config.restarts):
        attempt, finished = 0, False
        while not finished and attempt <= config.retry_cap:
            rng = substream(seed, "vi-restart", restart, attempt)
            state0 = _initial_state(model, xs, resid, w, rng)
            params = _params_from_state(state0, model.noise)
            if not config.optimize_inducing:
                frozen_z = params.pop("z")
            adam_m = jax.tree_util.tree_map(jnp.zeros_like, params)
            adam_v = jax.tree_util.tree_map(jnp.zeros_like, params)
            trace = []
            cur_best, cur_best_iter, cur_best_params = -np.inf, 0, params
            diverged = False
            for it in range(1, config.max_iters + 1):
                eps_u, eps_f = _draw_eps(model, n, w, config.mc_samples, rng)
                full = dict(params) if config.optimize_inducing else {**params, "z": frozen_z}
                value, grads = fn(full, eps_u, eps_f, xs_j, resid_j)
                value = float(value)
                trace.append(value)
                if not np.isfinite(value):
                    diverged = True
                    break
                if not config.optimize_inducing:
                    grads = {k: g for k, g in grads.items() if k != "z"}
                t = it
                lr = config.learning_rate
                b1, b2, eps = config.beta1, config.beta2, config.adam_eps
                adam_m = jax.tree_util.tree_map(
                    lambda mo, g: b1 * mo + (1 - b1) * g, adam_m, grads)
                adam_v = jax.tree_util.tree_map(
                    lambda vo, g: b2 * vo + (1 - b2) * g * g, adam_v, grads)
                scale1 = 1.0 / (1.0 - b1**t)
                scale2 = 1.0 / (1.0 - b2**t)
                params = jax.tree_util.tree_map(
                    lambda p, mo, vo: p + lr * (mo * scale1)
                    / (jnp.sqrt(vo * scale2) + eps),
                    params, adam_m, adam_v)
                if value > cur_best:
                    cur_best, cur_best_iter, cur_best_params = value, it, params
                elif it - cur_best_iter >= config.patience:
                    break
            if diverged:
                diverged_total += 1
                attempt += 1
                continue
            finished = True
            if config.max_iters == 0:
                cur_best_params = params
                rng_eval = substream(seed, "vi-eval", restart, attempt)
                eps_u, eps_f = _draw_eps(model, n, w, config.mc_samples, rng_eval)
                full = dict(cur_best_params) if config.optimize_inducing else {
                    **cur_best_params, "z": frozen_z}
                cur_best = float(fn(full, eps_u, eps_f, xs_j, resid_j)[0])
            traces.append(np.asarray(trace))
            if cur_best > best_value:
                best_value = cur_best
                best_restart = restart
                best_params = (dict(cur_best_params) if config.optimize_inducing
                               else {**cur_best_params, "z": frozen_z})
        if not finished:
            traces.append(np.asarray([]))
    if best_params is None:
        raise FitError(
            f"every restart diverged ({diverged_total} attempts); "
            "check scaling or lower the learning rate"
        )
    state = _state_from_params(best_params, model.noise)
    return state, FitTrace(
        elbo_traces=traces,
        best_restart=best_restart,
        best_elbo=float(best_value),
        diverged_restarts=diverged_total,
    )


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def sparse_conditional(
    kernel: Kernel, theta, z, u, xs_test
):
    """Mean and covariance of f at test inputs given inducing values u.

    Identical formulas to the dense GP conditional with (z, u) as training
    data; stacking u as (blocks, w) shares the factorization.
    """
    return gp_predict(kernel.with_theta(np.asarray(theta, dtype=float)),
                      z, u, xs_test)


def sparse_predictive_moments(kernel: Kernel, theta, z, xs):
    """Per-point projection and conditional variance as used in the bound.

    Returns (proj, cond_var) with proj of shape (w, n) mapping inducing values
    to conditional means (proj.T @ u) and cond_var the per-point marginal
    variance of f given u. With z equal to the training inputs the sparse
    conditional coincides with the dense one.
    """
    from scipy.linalg import cho_solve

    theta = np.asarray(theta, dtype=float)
    z = np.asarray(z, dtype=float)
    xs = np.asarray(xs, dtype=float)
    bound = kernel.with_theta(theta)
    k_zz = bound.gram(z) + _ELBO_JITTER * np.eye(z.shape[0])
    l_z = np.linalg.cholesky(k_zz)
    k_xz = bound.gram(xs, z)
    proj = cho_solve((l_z, True), k_xz.T)
    diag = bound(xs, xs)
    cond_var = np.maximum(diag - np.sum(k_xz.T * proj, axis=0), _SIGMA_FLOOR)
    return proj, cond_var


def predict_vi(
    model: WishartModel,
    state: VariationalState,
    xs_test,
    draw_count: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Covariance-path draws at test inputs; shape (draw_count, n_test, d, d).

    Each draw samples u from the variational posterior, extends it through
    the sparse conditional, and assembles the covariance (plus the fitted
    noise diagonal).
    """
    xs_test = np.asarray(xs_test, dtype=float)
    d, v = model.dimension, model.dof
    w = state.z.shape[0]
    n_test = xs_test.shape[0]
    s_chol = np.tril(state.s_chol)
    out = np.empty((draw_count, n_test, d, d))
    for s_idx in range(draw_count):
        eps_u = rng.standard_normal((d, v, w))
        u = state.m + np.einsum("dvab,dvb->dva", s_chol, eps_u)
        cond = sparse_conditional(model.kernel, state.theta, state.z,
                                  u.reshape(d * v, w), xs_test)
        factor = chol_jitter(cond.cov, name="sparse conditional covariance")
        eps_f = rng.standard_normal((d * v, n_test))
        f_star = (cond.mean + eps_f @ factor.lower.T).reshape(d, v, n_test)
        lf = np.einsum("jk,kvn->jvn", state.scale_chol, f_star)
        sig = np.einsum("jvn,kvn->njk", lf, lf)
        sig[:, np.arange(d), np.arange(d)] += state.noise_diag
        out[s_idx] = sig
    return out
