"""Sequential Monte Carlo with adaptive likelihood tempering.

Particles start as prior draws at inverse temperature beta = 0. Each cycle

1. finds the largest temperature increment whose reweighted effective sample
   size still reaches a fixed fraction of the swarm size (bisection, with a
   direct jump to beta = 1 when affordable),
2. reweights by likelihood^increment and accumulates the evidence increment,
3. resamples systematically in a canonical order, and
4. mutates every particle with tempered Gibbs cycles.

The canonical resampling order (particles sorted by cached log-likelihood)
makes the swarm's output an order-free function of the particle multiset, so
permuting particles together with their streams changes nothing.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import wishart
from .exceptions import DegenerateSwarmError, TemperingStallError
from .mcmc import GibbsConfig, _Workspace, gibbs_cycle
from .streams import substream, worker_count
from .wishart import LatentState, WishartModel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SmcConfig:
    """Tempered-SMC settings.

    particles : swarm size (production presets use 1000; desk scale 200)
    ess_fraction : reweighting targets ESS = ess_fraction * particles
    mutation_steps : tempered Gibbs cycles per particle per cycle
    max_cycles : abort with the partial ladder beyond this many temperatures
    bisection_tol : absolute tolerance on the temperature increment
    """

    particles: int = 1000
    ess_fraction: float = 0.5
    mutation_steps: int = 5
    max_cycles: int = 100
    bisection_tol: float = 1e-6
    step_size: float = 0.01
    theta_step: float | None = None
    update_theta: bool = True
    update_scale: bool = True

    def __post_init__(self):
        if self.particles < 2:
            raise ValueError("need at least two particles")
        if not 0.0 < self.ess_fraction < 1.0:
            raise ValueError("ess_fraction must lie in (0, 1)")
        if self.mutation_steps < 0 or self.max_cycles < 1:
            raise ValueError("mutation_steps must be >= 0 and max_cycles >= 1")
        if self.bisection_tol <= 0:
            raise ValueError("bisection_tol must be positive")

    def gibbs(self) -> GibbsConfig:
        return GibbsConfig(
            burn_in=0,
            step_size=self.step_size,
            theta_step=self.theta_step,
            thinning=1,
            chains=1,
            keep=1,
            update_theta=self.update_theta,
            update_scale=self.update_scale,
        )


@dataclass
class LadderRecord:
    """One temperature step of the run."""

    beta: float
    increment: float
    ess: float
    log_evidence_increment: float
    unique_ancestors: int
    mutation_seconds: float = 0.0


@dataclass
class SmcResult:
    states: list[LatentState]
    logliks: np.ndarray
    ladder: list[LadderRecord]
    log_evidence: float
    replaced_particles: int = 0


# ---------------------------------------------------------------------------
# weighting primitives
# ---------------------------------------------------------------------------


def effective_sample_size(weights) -> float:
    """1 / sum of squared normalized weights; in [1, len(weights)]."""
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if total <= 0:
        raise DegenerateSwarmError("all particle weights are zero")
    w = w / total
    return float(1.0 / np.sum(w**2))


def incremental_weights(logliks, increment: float):
    """Normalized weights proportional to likelihood^increment, log-sum-exp guarded.

    Returns (weights, log_evidence_increment) where the evidence increment is
    the log mean of the unnormalized weights (uniform incoming weights).
    """
    logliks = np.asarray(logliks, dtype=float)
    if increment < 0:
        raise ValueError("temperature increment must be nonnegative")
    scaled = increment * logliks
    top = np.max(scaled)
    if not np.isfinite(top):
        raise DegenerateSwarmError(
            "reweighting produced no finite weight (all log-likelihoods -inf?)"
        )
    log_norm = float(logsumexp(scaled))
    weights = np.exp(scaled - log_norm)
    return weights, log_norm - math.log(logliks.shape[0])


def find_next_beta(
    logliks,
    beta: float,
    target_ess: float,
    tol: float = 1e-6,
) -> float:
    """Largest temperature increment keeping ESS at (or just above) the target.

    Jumps straight to 1 - beta when even the full remaining increment keeps
    ESS >= target. Otherwise bisects the increment (ESS is nonincreasing in
    it) and returns the feasible lower endpoint, floored at ``tol`` so the
    ladder always advances.
    """
    logliks = np.asarray(logliks, dtype=float)
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    remaining = 1.0 - beta

    def ess_at(increment: float) -> float:
        w, _ = incremental_weights(logliks, increment)
        return effective_sample_size(w)

    if ess_at(remaining) >= target_ess:
        return remaining
    lo, hi = 0.0, remaining
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if ess_at(mid) >= target_ess:
            lo = mid
        else:
            hi = mid
    return max(lo, tol)


def resample_systematic(weights, rng: np.random.Generator) -> np.ndarray:
    """Systematic (low-variance) resampling; returns ancestor indices.

    A single uniform offset is stratified across the cumulative weights, so a
    particle with normalized weight w receives floor(s*w) or ceil(s*w) copies.
    """
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if total <= 0 or not np.isfinite(total):
        raise DegenerateSwarmError("cannot resample: weights sum to zero")
    w = w / total
    s = w.shape[0]
    positions = (rng.uniform() + np.arange(s)) / s
    return np.searchsorted(np.cumsum(w), positions).clip(max=s - 1)


# ---------------------------------------------------------------------------
# the run
# ---------------------------------------------------------------------------


def _mutate(
    model: WishartModel,
    xs,
    resid,
    states: list[LatentState],
    logliks: np.ndarray,
    beta: float,
    config: SmcConfig,
    seed: int,
    cycle_index: int,
):
    """Tempered Gibbs moves for every particle on independent derived streams.

    A particle whose mutation fails is replaced by a fresh copy of another
    (uniformly chosen) particle, and the event is logged.
    """
    gibbs_config = config.gibbs()
    out_states = list(states)
    out_logliks = logliks.copy()
    replaced = 0

    def one(slot: int):
        rng = substream(seed, "smc-mutate", cycle_index, slot)
        workspace = _Workspace(model, xs, resid, states[slot])
        workspace.loglik = float(logliks[slot])
        state = states[slot]
        for _ in range(config.mutation_steps):
            state, _stats = gibbs_cycle(
                model, state, gibbs_config, rng, workspace, beta=beta
            )
        return state, workspace.loglik

    workers = min(worker_count(), len(states))
    results: dict[int, tuple] = {}
    failures: list[int] = []
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futs = {pool.submit(one, i): i for i in range(len(states))}
            for fut, i in futs.items():
                try:
                    results[i] = fut.result()
                except Exception as e:  # noqa: BLE001 - particle-level rescue
                    logger.warning("mutation failed for particle %d: %s", i, e)
                    failures.append(i)
    else:
        for i in range(len(states)):
            try:
                results[i] = one(i)
            except Exception as e:  # noqa: BLE001
                logger.warning("mutation failed for particle %d: %s", i, e)
                failures.append(i)
    for i, res in results.items():
        out_states[i], out_logliks[i] = res
    for i in failures:
        donor_rng = substream(seed, "smc-replace", cycle_index, i)
        donor = int(donor_rng.integers(len(states)))
        while donor in failures and len(failures) < len(states):
            donor = int(donor_rng.integers(len(states)))
        out_states[i] = results[donor][0] if donor in results else states[donor]
        out_logliks[i] = results[donor][1] if donor in results else logliks[i]
        replaced += 1
    return out_states, out_logliks, replaced


def run_smc(
    model: WishartModel,
    xs,
    y,
    config: SmcConfig,
    seed: int,
    checkpoint_dir: str | None = None,
    resume_from: str | None = None,
    init_fn=None,
) -> SmcResult:
    """Adaptive-tempering SMC from the prior to the posterior.

    An empty dataset degenerates gracefully: every log-likelihood is zero, the
    temperature jumps straight to 1, and the accumulated log evidence is 0.
    Passing ``checkpoint_dir`` writes a resumable snapshot after every cycle;
    ``resume_from`` continues bit-identically from such a snapshot (the run
    seed must match). ``init_fn(rng) -> LatentState`` overrides the default
    prior initialization (pinning parameters the config excludes from
    updates, or warm-starting from an earlier posterior).

    Raises
    ------
    TemperingStallError
        If beta has not reached 1 within ``config.max_cycles`` cycles; the
        partial ladder is attached to the error.
    """
    xs = np.asarray(xs, dtype=float)
    y = np.asarray(y, dtype=float)
    resid = y - model.mean.values(y)
    s = config.particles
    target_ess = config.ess_fraction * s
    swarm_rng = substream(seed, "smc-resample")

    if resume_from is not None:
        states, logliks, manifest = load_swarm(resume_from)
        if manifest["seed"] != seed:
            raise ValueError(
                f"checkpoint was written by seed {manifest['seed']}, not {seed}"
            )
        beta = manifest["beta"]
        log_evidence = manifest["log_evidence"]
        ladder = [LadderRecord(**r) for r in manifest["ladder"]]
        cycle = len(ladder) - 1
        for _ in range(cycle):  # fast-forward the resampling stream
            swarm_rng.uniform()
        replaced_total = 0
    else:
        draw = init_fn if init_fn is not None else (
            lambda rng: wishart.sample_prior_state(model, xs, rng)
        )
        states = [draw(substream(seed, "smc-init", i)) for i in range(s)]
        logliks = np.array(
            [_data_loglik(model, xs, resid, st) for st in states], dtype=float
        )
        beta = 0.0
        log_evidence = 0.0
        ladder = [
            LadderRecord(beta=0.0, increment=0.0, ess=float(s),
                         log_evidence_increment=0.0, unique_ancestors=s)
        ]
        replaced_total = 0
        cycle = 0

    while beta < 1.0:
        cycle += 1
        if cycle > config.max_cycles:
            raise TemperingStallError(
                f"beta = {beta:.6f} after {config.max_cycles} cycles", ladder
            )
        increment = find_next_beta(
            logliks, beta, target_ess, tol=config.bisection_tol
        )
        weights, log_z_inc = incremental_weights(logliks, increment)
        beta = 1.0 if remaining_is_cap(beta, increment) else beta + increment
        log_evidence += log_z_inc
        ess = effective_sample_size(weights)

        # canonical order: sort by cached log-likelihood so the resampling
        # outcome does not depend on how the caller happened to order particles
        order = np.argsort(logliks, kind="stable")
        ancestors_sorted = resample_systematic(weights[order], swarm_rng)
        ancestors = order[ancestors_sorted]
        states = [states[a] for a in ancestors]
        logliks = logliks[ancestors]

        t0 = time.perf_counter()
        states, logliks, replaced = _mutate(
            model, xs, resid, states, logliks, beta, config, seed, cycle
        )
        mutation_seconds = time.perf_counter() - t0
        replaced_total += replaced
        ladder.append(
            LadderRecord(
                beta=beta,
                increment=increment,
                ess=ess,
                log_evidence_increment=log_z_inc,
                unique_ancestors=int(np.unique(ancestors).shape[0]),
                mutation_seconds=mutation_seconds,
            )
        )
        if checkpoint_dir is not None:
            save_swarm(checkpoint_dir, states, logliks, beta, ladder,
                       log_evidence, seed, config)

    return SmcResult(
        states=states,
        logliks=logliks,
        ladder=ladder,
        log_evidence=log_evidence,
        replaced_particles=replaced_total,
    )


def remaining_is_cap(beta: float, increment: float) -> bool:
    """Whether the increment takes beta exactly to the endpoint."""
    return beta + increment >= 1.0 - 1e-15


def _data_loglik(model, xs, resid, state) -> float:
    workspace = _Workspace(model, xs, resid, state)
    return workspace.loglik


def _swarm_traces(result: SmcResult) -> dict[str, np.ndarray]:
    """Scalar summaries of a final swarm, one value per particle."""
    traces: dict[str, np.ndarray] = {}
    thetas = np.log(np.stack([st.theta for st in result.states]))
    for k in range(thetas.shape[1]):
        traces[f"log_theta[{k}]"] = thetas[:, k]
    scales = np.stack(
        [wishart.scale_free_entries(st.scale_chol) for st in result.states]
    )
    for k in range(scales.shape[1]):
        traces[f"scale[{k}]"] = scales[:, k]
    traces["loglik"] = np.asarray(result.logliks, dtype=float)
    return traces


def calibrate_mutation_steps(
    model: WishartModel,
    xs,
    y,
    config: SmcConfig,
    seed: int,
    candidates=(2, 5, 10, 20),
    runs: int = 4,
    threshold: float = 1.1,
) -> dict:
    """Pick a mutation step count by agreement across independent re-runs.

    For each candidate count (ascending) the sampler is re-run ``runs`` times
    on separate seed streams, the final swarms are compared with
    :func:`dyncov.diagnostics.psrf` (each run's particles acting as one
    chain over the monitored scalars), and the first candidate whose worst
    value drops below ``threshold`` wins. The full per-candidate report is
    returned so callers can inspect the trade-off; ``chosen`` is None when
    no candidate converged. This lives outside :func:`run_smc` on purpose:
    one run never adapts its own step count.
    """
    from .diagnostics import psrf

    if runs < 2:
        raise ValueError("needs at least two re-runs to compare")
    candidates = sorted(set(int(c) for c in candidates))
    if not candidates or candidates[0] < 1:
        raise ValueError("candidate step counts must be positive")
    report: dict[int, dict] = {}
    chosen = None
    for steps in candidates:
        trial = dataclasses.replace(config, mutation_steps=steps)
        per_run = []
        for r in range(runs):
            run_seed = int(substream(seed, "smc-calibrate", steps, r).integers(2**31 - 1))
            per_run.append(_swarm_traces(run_smc(model, xs, y, trial, run_seed)))
        values: dict[str, float] = {}
        for name in per_run[0]:
            parts = [tr[name] for tr in per_run]
            if max(float(np.var(p)) for p in parts) < 1e-14:
                continue  # pinned parameter; nothing to compare
            values[name] = psrf(parts)
        if not values:
            raise DegenerateSwarmError(
                "no monitored quantity varies across particles"
            )
        worst = max(values.values())
        report[steps] = {"psrf": values, "max": worst}
        if worst < threshold:
            chosen = steps
            break
    return {"chosen": chosen, "threshold": threshold, "runs": runs,
            "report": report}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_swarm(directory, states, logliks, beta, ladder, log_evidence, seed,
               config: SmcConfig) -> None:
    """Write a resumable JSON-lines checkpoint of the swarm."""
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "beta": beta,
        "log_evidence": log_evidence,
        "seed": seed,
        "particles": len(states),
        "config": {
            "particles": config.particles,
            "ess_fraction": config.ess_fraction,
            "mutation_steps": config.mutation_steps,
            "max_cycles": config.max_cycles,
            "bisection_tol": config.bisection_tol,
            "step_size": config.step_size,
            "theta_step": config.theta_step,
            "update_theta": config.update_theta,
            "update_scale": config.update_scale,
        },
        "ladder": [
            {
                "beta": r.beta,
                "increment": r.increment,
                "ess": r.ess,
                "log_evidence_increment": r.log_evidence_increment,
                "unique_ancestors": r.unique_ancestors,
                "mutation_seconds": r.mutation_seconds,
            }
            for r in ladder
        ],
    }
    with open(os.path.join(directory, "swarm_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    with open(os.path.join(directory, "particles.jsonl"), "w") as fh:
        for state, ll in zip(states, logliks):
            record = state.to_dict()
            record["loglik"] = float(ll)
            fh.write(json.dumps(record) + "\n")


def load_swarm(directory):
    """Read back a checkpoint; returns (states, logliks, manifest)."""
    with open(os.path.join(directory, "swarm_manifest.json")) as fh:
        manifest = json.load(fh)
    states, logliks = [], []
    with open(os.path.join(directory, "particles.jsonl")) as fh:
        for line in fh:
            record = json.loads(line)
            ll = record.pop("loglik")
            states.append(LatentState.from_dict(record))
            logliks.append(ll)
    return states, np.array(logliks), manifest
