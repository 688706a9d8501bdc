"""Blocked Gibbs sampling for the Wishart process model.

One cycle updates, in order:

1. each latent path f[j, l] by elliptical slice sampling (Murray et al. 2010)
   under its GP prior and the (optionally tempered) data likelihood,
2. the kernel hyperparameters jointly by random-walk Metropolis on the log
   axis, targeting the GP prior of the current paths times the hyperprior
   (the data enter only through the paths, so no likelihood term appears),
3. the free entries of the scale factor L jointly by random-walk Metropolis
   against the tempered likelihood and their standard normal priors.

The cycle takes an inverse temperature ``beta`` multiplying the data
log-likelihood so the same kernel serves both plain MCMC (beta = 1) and the
mutation step of the tempered SMC backend.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import wishart
from .exceptions import InvalidStateError, PartialResultsError
from .gp import CholeskyFactor, batched_mvn_logpdf, chol_jitter
from .kernels import log_prior_log_axis
from .streams import substream, worker_count
from .wishart import LatentState, WishartModel

_MAX_SLICE_SHRINKS = 200


@dataclass(frozen=True)
class GibbsConfig:
    """Sampler settings.

    ``burn_in`` has no default on purpose: it must be chosen by the caller
    (use :func:`convergence_report` on pilot runs to pick one).
    """

    burn_in: int | None = None
    step_size: float = 0.01
    theta_step: float | None = None
    thinning: int = 1000
    chains: int = 4
    keep: int = 250
    update_theta: bool = True
    update_scale: bool = True

    def __post_init__(self):
        if self.step_size <= 0 or (self.theta_step is not None and self.theta_step <= 0):
            raise ValueError("step sizes must be positive")
        if self.thinning < 1 or self.chains < 1 or self.keep < 1:
            raise ValueError("thinning, chains and keep must be >= 1")
        if self.burn_in is not None and self.burn_in < 0:
            raise ValueError("burn_in must be nonnegative")


@dataclass
class CycleStats:
    """Counters accumulated over cycles."""

    theta_proposals: int = 0
    theta_accepts: int = 0
    scale_proposals: int = 0
    scale_accepts: int = 0
    slice_shrinks: int = 0
    slice_updates: int = 0

    def merged(self, other: "CycleStats") -> "CycleStats":
        return CycleStats(
            self.theta_proposals + other.theta_proposals,
            self.theta_accepts + other.theta_accepts,
            self.scale_proposals + other.scale_proposals,
            self.scale_accepts + other.scale_accepts,
            self.slice_shrinks + other.slice_shrinks,
            self.slice_updates + other.slice_updates,
        )

    @property
    def theta_rate(self) -> float:
        return self.theta_accepts / self.theta_proposals if self.theta_proposals else float("nan")

    @property
    def scale_rate(self) -> float:
        return self.scale_accepts / self.scale_proposals if self.scale_proposals else float("nan")


@dataclass
class Chain:
    """Retained draws and bookkeeping for one chain."""

    draws: list[LatentState]
    logliks: np.ndarray
    stats: CycleStats
    seed_path: tuple = ()

    def theta_log_trace(self) -> np.ndarray:
        return np.log(np.stack([d.theta for d in self.draws]))

    def scale_trace(self) -> np.ndarray:
        return np.stack([wishart.scale_free_entries(d.scale_chol) for d in self.draws])


# ---------------------------------------------------------------------------
# elementary updates
# ---------------------------------------------------------------------------


def ess_update_block(
    f_block: np.ndarray,
    chol_k: CholeskyFactor,
    loglik_fn,
    rng: np.random.Generator,
    cur_loglik: float | None = None,
):
    """One elliptical slice move for a single latent path.

    ``loglik_fn`` is the (already tempered) data log-likelihood as a function
    of this block alone; the GP prior N(0, K) is handled exactly by the
    elliptical proposal. Returns (new_block, new_loglik, shrink_count). The
    move never rejects; it shrinks the angle bracket until acceptance.
    """
    if cur_loglik is None:
        cur_loglik = loglik_fn(f_block)
    if not np.isfinite(cur_loglik):
        raise InvalidStateError("elliptical slice started from a state with "
                                f"non-finite log-likelihood ({cur_loglik})")
    n = f_block.shape[0]
    nu = chol_k.lower @ rng.standard_normal(n)
    log_y = cur_loglik + math.log(rng.uniform())
    phi = rng.uniform(0.0, 2.0 * math.pi)
    lo, hi = phi - 2.0 * math.pi, phi
    shrinks = 0
    for _ in range(_MAX_SLICE_SHRINKS):
        prop = f_block * math.cos(phi) + nu * math.sin(phi)
        ll = loglik_fn(prop)
        if ll > log_y:
            return prop, ll, shrinks
        shrinks += 1
        if phi < 0:
            lo = phi
        else:
            hi = phi
        phi = rng.uniform(lo, hi)
    # Bracket collapsed onto the current point: keep it.
    return f_block, cur_loglik, shrinks


def rwmh_update(
    value: np.ndarray,
    logdensity_fn,
    step: float,
    rng: np.random.Generator,
    cur_logdensity: float | None = None,
):
    """Symmetric Gaussian random-walk Metropolis step on an unconstrained vector.

    Returns (value, logdensity, accepted). A proposal with -inf density is
    rejected outright; a non-finite density at the current point is an error.
    """
    value = np.asarray(value, dtype=float)
    if cur_logdensity is None:
        cur_logdensity = logdensity_fn(value)
    if not np.isfinite(cur_logdensity):
        raise InvalidStateError(
            f"random-walk update started from density {cur_logdensity}"
        )
    prop = value + step * rng.standard_normal(value.shape)
    prop_logdensity = logdensity_fn(prop)
    if prop_logdensity == -np.inf:
        return value, cur_logdensity, False
    if math.log(rng.uniform()) < prop_logdensity - cur_logdensity:
        return prop, prop_logdensity, True
    return value, cur_logdensity, False


# ---------------------------------------------------------------------------
# one full cycle
# ---------------------------------------------------------------------------


class _Workspace:
    """Mutable per-chain scratch: current factor of K, current log-likelihood."""

    def __init__(self, model: WishartModel, xs, resid, state: LatentState):
        self.model = model
        self.xs = np.asarray(xs, dtype=float)
        self.resid = np.asarray(resid, dtype=float)
        self.refresh_kernel(state.theta)
        self.loglik = self.data_loglik(state.f, state.scale_chol, state.noise_diag)

    def refresh_kernel(self, theta):
        n = self.xs.shape[0]
        if n:
            gram = self.model.kernel.with_theta(theta).gram(self.xs)
            self.chol_k = chol_jitter(gram, name="latent gram matrix")
        else:
            self.chol_k = CholeskyFactor(lower=np.zeros((0, 0)), jitter=0.0)

    def data_loglik(self, f, scale, noise) -> float:
        if self.resid.shape[0] == 0:
            return 0.0
        lf = np.einsum("jk,kli->jli", scale, f)
        sig = np.einsum("jli,kli->ijk", lf, lf)
        if np.any(noise):
            d = noise.shape[0]
            sig[:, np.arange(d), np.arange(d)] += noise
        return float(np.sum(batched_mvn_logpdf(self.resid, sig)))

    def gp_prior_term(self, f_flat: np.ndarray, chol_k: CholeskyFactor) -> float:
        blocks, n = f_flat.shape
        if n == 0:
            return 0.0
        white = solve_triangular(chol_k.lower, f_flat.T, lower=True)
        return float(
            -0.5 * blocks * n * math.log(2.0 * math.pi)
            - 0.5 * blocks * chol_k.log_det
            - 0.5 * np.sum(white**2)
        )


def gibbs_cycle(
    model: WishartModel,
    state: LatentState,
    config: GibbsConfig,
    rng: np.random.Generator,
    workspace: _Workspace,
    beta: float = 1.0,
) -> tuple[LatentState, CycleStats]:
    """One full update of (f blocks, hyperparameters, scale factor)."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    stats = CycleStats()
    d, v = model.dimension, model.dof
    f = state.f.copy()
    scale = state.scale_chol
    noise = state.noise_diag

    # 1. latent paths, one elliptical slice move per (series, dof) block
    for j in range(d):
        for l in range(v):
            def block_loglik(candidate):
                if beta == 0.0:
                    return 0.0
                f[j, l] = candidate
                return beta * workspace.data_loglik(f, scale, noise)

            cur = beta * workspace.loglik
            new_block, new_ll, shrinks = ess_update_block(
                f[j, l].copy(), workspace.chol_k, block_loglik, rng, cur_loglik=cur
            )
            f[j, l] = new_block
            if beta > 0.0:
                workspace.loglik = new_ll / beta
            else:
                workspace.loglik = workspace.data_loglik(f, scale, noise)
            stats.slice_shrinks += shrinks
            stats.slice_updates += 1

    # 2. hyperparameters on the log axis (no data term: paths are conditioned on)
    theta = state.theta
    if config.update_theta and theta.shape[0]:
        f_flat = f.reshape(d * v, -1)
        proposal_factor: dict = {}

        def theta_logdensity(log_theta):
            lp = log_prior_log_axis(model.priors, log_theta)
            n = workspace.xs.shape[0]
            if n:
                try:
                    gram = model.kernel.with_theta(np.exp(log_theta)).gram(workspace.xs)
                    factor = chol_jitter(gram, name="proposed gram matrix")
                except (ValueError, np.linalg.LinAlgError):
                    return -np.inf  # overflowed or irreparably singular proposal
                proposal_factor["value"] = factor
                lp += workspace.gp_prior_term(f_flat, factor)
            return lp

        step = config.theta_step if config.theta_step is not None else config.step_size
        cur_logdens = log_prior_log_axis(model.priors, np.log(theta))
        if workspace.xs.shape[0]:
            cur_logdens += workspace.gp_prior_term(f_flat, workspace.chol_k)
        new_log_theta, _, accepted = rwmh_update(
            np.log(theta), theta_logdensity, step, rng, cur_logdensity=cur_logdens
        )
        stats.theta_proposals += 1
        if accepted:
            stats.theta_accepts += 1
            theta = np.exp(new_log_theta)
            if "value" in proposal_factor:
                workspace.chol_k = proposal_factor["value"]

    # 3. scale factor entries, jointly
    if config.update_scale:
        entries = wishart.scale_free_entries(scale)

        def scale_logdensity(vec):
            cand = wishart.scale_from_entries(vec, d)
            try:
                ll = workspace.data_loglik(f, cand, noise)
            except np.linalg.LinAlgError:
                return -np.inf
            prior = -0.5 * np.sum(vec**2) - 0.5 * vec.shape[0] * math.log(2 * math.pi)
            return beta * ll + prior

        cur = beta * workspace.loglik - 0.5 * np.sum(entries**2) \
            - 0.5 * entries.shape[0] * math.log(2 * math.pi)
        new_entries, new_logdens, accepted = rwmh_update(
            entries, scale_logdensity, config.step_size, rng, cur_logdensity=cur
        )
        stats.scale_proposals += 1
        if accepted:
            stats.scale_accepts += 1
            scale = wishart.scale_from_entries(new_entries, d)
            prior = -0.5 * np.sum(new_entries**2) \
                - 0.5 * new_entries.shape[0] * math.log(2 * math.pi)
            if beta > 0.0:
                workspace.loglik = (new_logdens - prior) / beta
            else:
                workspace.loglik = workspace.data_loglik(f, scale, noise)

    new_state = LatentState(f=f, theta=theta, scale_chol=scale, noise_diag=noise)
    return new_state, stats


# ---------------------------------------------------------------------------
# chains
# ---------------------------------------------------------------------------


def run_chain(
    model: WishartModel,
    xs,
    y,
    config: GibbsConfig,
    rng: np.random.Generator,
    initial: LatentState | None = None,
    total_steps: int | None = None,
) -> Chain:
    """Run one chain: burn-in, then thinned retention of at most ``config.keep`` draws.

    Total cycles default to burn_in + keep * thinning, so exactly ``keep``
    draws are retained; with an explicit ``total_steps`` every thinning-th
    post-burn-in state is retained and subsampled without replacement down to
    ``keep`` if more are available.
    """
    if config.burn_in is None:
        raise ValueError("burn_in must be set explicitly (see convergence_report)")
    xs = np.asarray(xs, dtype=float)
    y = np.asarray(y, dtype=float)
    if initial is None:
        initial = wishart.sample_prior_state(model, xs, rng)
    resid = y - model.mean.values(y)
    workspace = _Workspace(model, xs, resid, initial)
    if not np.isfinite(workspace.loglik):
        raise InvalidStateError("initial state has non-finite log-likelihood")
    if total_steps is None:
        total_steps = config.burn_in + config.keep * config.thinning
    state = initial
    stats = CycleStats()
    draws: list[LatentState] = []
    logliks: list[float] = []
    for step in range(1, total_steps + 1):
        state, cycle_stats = gibbs_cycle(model, state, config, rng, workspace, beta=1.0)
        stats = stats.merged(cycle_stats)
        if step > config.burn_in and (step - config.burn_in) % config.thinning == 0:
            draws.append(state)
            logliks.append(workspace.loglik)
    if len(draws) > config.keep:
        idx = np.sort(rng.choice(len(draws), size=config.keep, replace=False))
        draws = [draws[i] for i in idx]
        logliks = [logliks[i] for i in idx]
    return Chain(draws=draws, logliks=np.asarray(logliks), stats=stats)


def run_chains(
    model: WishartModel,
    xs,
    y,
    config: GibbsConfig,
    seed: int,
    initial: LatentState | None = None,
) -> list[Chain]:
    """Run ``config.chains`` chains on independent streams derived from ``seed``.

    Chains are embarrassingly parallel; DYNCOV_THREADS bounds the worker pool.
    If some chains fail, the completed ones are attached to a
    :class:`PartialResultsError`.
    """

    def one(index: int) -> Chain:
        rng = substream(seed, "mcmc-chain", index)
        chain = run_chain(model, xs, y, config, rng, initial=initial)
        chain.seed_path = (seed, "mcmc-chain", index)
        return chain

    results: list[Chain | None] = [None] * config.chains
    failures: list[tuple[int, Exception]] = []
    workers = min(worker_count(), config.chains)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(one, c): c for c in range(config.chains)}
            for fut, c in futures.items():
                try:
                    results[c] = fut.result()
                except Exception as e:  # noqa: BLE001 - collected for the caller
                    failures.append((c, e))
    else:
        for c in range(config.chains):
            try:
                results[c] = one(c)
            except Exception as e:  # noqa: BLE001
                failures.append((c, e))
    if failures:
        raise PartialResultsError([r for r in results if r is not None],
                                  sorted(failures))
    return [r for r in results if r is not None]


def convergence_report(chains: list[Chain], threshold: float = 1.1) -> dict:
    """Split-free Gelman-Rubin diagnostics over the retained draws.

    Monitors each log hyperparameter, each free scale entry, and the data
    log-likelihood. Returns {"psrf": {...}, "converged": bool, "threshold": x}.
    """
    from .diagnostics import psrf

    if len(chains) < 2:
        raise ValueError("need at least two chains to assess convergence")
    traces: dict[str, list[np.ndarray]] = {}
    p = chains[0].draws[0].theta.shape[0]
    for k in range(p):
        traces[f"log_theta[{k}]"] = [c.theta_log_trace()[:, k] for c in chains]
    n_scale = chains[0].scale_trace().shape[1]
    for k in range(n_scale):
        traces[f"scale[{k}]"] = [c.scale_trace()[:, k] for c in chains]
    traces["loglik"] = [c.logliks for c in chains]
    values = {name: psrf(parts) for name, parts in traces.items()}
    return {
        "psrf": values,
        "converged": all(v < threshold for v in values.values()),
        "threshold": threshold,
    }


def _rate_or_none(rate: float):
    return None if math.isnan(rate) else rate


def save_chains(directory, chains: list[Chain], config: GibbsConfig | None = None) -> None:
    """Dump chains to ``directory``: one JSON-lines file of retained states per
    chain plus a manifest with sizes, acceptance rates, and seed paths."""
    import json
    import os

    os.makedirs(directory, exist_ok=True)
    manifest = {"chains": []}
    if config is not None:
        manifest["config"] = dataclasses.asdict(config)
    for idx, chain in enumerate(chains):
        name = f"chain_{idx}.jsonl"
        wishart.states_to_jsonl(os.path.join(directory, name), chain.draws)
        manifest["chains"].append(
            {
                "file": name,
                "draws": len(chain.draws),
                "seed_path": list(chain.seed_path),
                "theta_rate": _rate_or_none(chain.stats.theta_rate),
                "scale_rate": _rate_or_none(chain.stats.scale_rate),
                "logliks": [float(v) for v in chain.logliks],
                "stats": dataclasses.asdict(chain.stats),
            }
        )
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)


def load_chains(directory) -> list[Chain]:
    """Rebuild :class:`Chain` objects from a :func:`save_chains` dump."""
    import json
    import os

    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    out = []
    for entry in manifest["chains"]:
        draws = wishart.states_from_jsonl(os.path.join(directory, entry["file"]))
        stats = CycleStats(**entry["stats"])
        out.append(
            Chain(
                draws=draws,
                logliks=np.asarray(entry["logliks"], dtype=float),
                stats=stats,
                seed_path=tuple(entry["seed_path"]),
            )
        )
    return out
