"""Command-line surface: simulate, fit, predict, diagnose, test-dynamics, compare.

Every command resolves its settings from built-in defaults, then an optional
JSON config file (--config), then explicit flags (flags win). Unknown config
keys are rejected before any compute. Each run writes a manifest recording the
resolved config, its sha256 hash, the package version, the seed, wall time,
and the produced files, so a run can be replayed bit-identically (wall time
aside) from the manifest alone. Array outputs are written as .npy files (their
encoding carries no timestamps), scalar outputs as JSON, and covariance paths
additionally as long-form CSV (columns x, row, col, value) shared by every
backend. Exit status is 0 only when all outputs were written and re-validated.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import Dataset, expanding_cv, generate_sim1, generate_sim2
from .diagnostics import avg_loglik, dynamics_test, mse_mean_path
from .exceptions import (
    ConfigError,
    DegenerateSwarmError,
    FitError,
    SingularMatrixError,
    TemperingStallError,
)
from .garch import fit_dcc, forecast_dcc
from .kernels import Rbf, kernel_from_json
from .mcmc import GibbsConfig, convergence_report, run_chains
from .smc import SmcConfig, run_smc
from .streams import substream
from .vi import ViConfig, VariationalState, fit_vi, predict_vi
from .wishart import (
    EmaMean,
    LatentState,
    WishartModel,
    ZeroMean,
    mean_from_json,
    predict,
)

SCHEMA_VERSION = 1

_MODEL_KEYS = {"dof", "kernel", "mean", "noise", "noise_init"}
_BACKEND_KEYS = {
    "mcmc": {"burn_in", "step_size", "theta_step", "thinning", "chains", "keep",
             "update_theta", "update_scale"},
    "smc": {"particles", "ess_fraction", "mutation_steps", "max_cycles",
            "step_size", "theta_step", "update_theta", "update_scale",
            "checkpoint"},
    "vi": {"inducing", "mc_samples", "learning_rate", "patience", "max_iters",
           "restarts", "optimize_inducing"},
    "garch": {"demean"},
}


def _reject_unknown(config: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(config) - allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {unknown}; allowed: {sorted(allowed)}")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return obj


def _merge(defaults: dict, file_config: dict, flags: dict) -> dict:
    out = dict(defaults)
    out.update(file_config)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True).encode()
    ).hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, seed,
                    outputs: list[str], wall: float, extra: dict | None = None):
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "config_sha256": _config_hash(config),
        "outputs": outputs,
        "wall_seconds": wall,
    }
    if extra:
        manifest["extra"] = extra
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def _validate_outputs(out_dir: Path, outputs: list[str]) -> None:
    for name in outputs + ["manifest.json"]:
        path = out_dir / name
        if not path.exists():
            raise FitError(f"expected output {path} was not written")
        if path.suffix == ".json":
            json.loads(path.read_text())
        elif path.suffix == ".npy":
            np.load(path)


def _sigma_csv(path: Path, xs: np.ndarray, sigmas: np.ndarray) -> None:
    """Long-form covariance path: one row per (input, matrix entry)."""
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["x", "row", "col", "value"])
        d = sigmas.shape[-1]
        for i, x in enumerate(xs):
            for j in range(d):
                for k in range(d):
                    writer.writerow([repr(float(x)), j, k,
                                     repr(float(sigmas[i, j, k]))])


def _sigma_draws_csv(path: Path, xs: np.ndarray, sigma_draws: np.ndarray) -> None:
    """Long-form covariance draws: one row per (input, entry, draw)."""
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["x", "row", "col", "value", "draw_id"])
        d = sigma_draws.shape[-1]
        for s in range(sigma_draws.shape[0]):
            for i, x in enumerate(xs):
                for j in range(d):
                    for k in range(d):
                        writer.writerow([repr(float(x)), j, k,
                                         repr(float(sigma_draws[s, i, j, k])),
                                         s])


def _build_model(dimension: int, config: dict) -> WishartModel:
    kernel_spec = config.get("kernel")
    kernel = (kernel_from_json(kernel_spec) if kernel_spec is not None
              else Rbf(1.0))
    mean_spec = config.get("mean", "zero")
    if mean_spec == "zero":
        mean = ZeroMean()
    elif isinstance(mean_spec, dict):
        mean = mean_from_json(mean_spec)
    else:
        raise ConfigError(f"mean must be 'zero' or a JSON object, got {mean_spec!r}")
    dof = config.get("dof")
    noise = config.get("noise")
    noise_init = config.get("noise_init")
    return WishartModel(
        dimension=dimension,
        dof=int(dof) if dof is not None else dimension + 1,
        kernel=kernel,
        noise=bool(noise) if noise is not None else False,
        noise_init=float(noise_init) if noise_init is not None else 1e-3,
        mean=mean,
    )


def _states_to_arrays(states: list[LatentState]) -> dict:
    return {
        "f": np.stack([s.f for s in states]),
        "theta": np.stack([s.theta for s in states]),
        "scale": np.stack([s.scale_chol for s in states]),
        "noise": np.stack([s.noise_diag for s in states]),
    }


def _states_from_arrays(arrays: dict) -> list[LatentState]:
    count = arrays["f"].shape[0]
    return [
        LatentState(
            f=arrays["f"][i],
            theta=arrays["theta"][i],
            scale_chol=arrays["scale"][i],
            noise_diag=arrays["noise"][i],
        )
        for i in range(count)
    ]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    defaults = {"study": 1, "seed": 0, "out": "sim-out", "n": None, "d": None,
                "period": None, "high": None, "lengthscale": None, "dof": None,
                "span": None, "spacing": None}
    config = _merge(defaults, _load_config_file(args.config),
                    {"study": args.study, "seed": args.seed, "out": args.out})
    _reject_unknown(config, set(defaults), "simulate config")
    started = time.time()
    study = int(config["study"])
    seed = int(config["seed"])
    if study == 1:
        kwargs = {name: config[key] for key, name in
                  (("n", "n"), ("d", "d"), ("dof", "v"),
                   ("lengthscale", "lengthscale"), ("span", "span"))
                  if config[key] is not None}
        dataset = generate_sim1(seed, **kwargs)
    elif study == 2:
        kwargs = {name: config[key] for key, name in
                  (("n", "n"), ("d", "d"), ("period", "period"),
                   ("high", "high"), ("spacing", "spacing"))
                  if config[key] is not None}
        dataset = generate_sim2(seed, **kwargs)
    else:
        raise ConfigError(f"study must be 1 or 2, got {study}")
    out_dir = Path(config["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset.save(out_dir / "dataset.json")
    outputs = ["dataset.json"]
    _write_manifest(out_dir, "simulate", config, seed, outputs,
                    time.time() - started)
    _validate_outputs(out_dir, outputs)
    print(f"wrote {out_dir / 'dataset.json'} (n={dataset.n}, d={dataset.dimension})")
    return 0


def _fit_defaults(backend: str) -> dict:
    common = {"seed": 0, "out": "fit-out", "data": None, "backend": backend,
              "split": "all", "dof": None, "kernel": None, "mean": "zero",
              "noise": None, "noise_init": None}
    per_backend = {
        "mcmc": {"burn_in": None, "step_size": None, "theta_step": None,
                 "thinning": None, "chains": None, "keep": None,
                 "update_theta": None, "update_scale": None},
        "smc": {"particles": None, "ess_fraction": None, "mutation_steps": None,
                "max_cycles": None, "step_size": None, "theta_step": None,
                "update_theta": None, "update_scale": None, "checkpoint": None},
        "vi": {"inducing": None, "mc_samples": None, "learning_rate": None,
               "patience": None, "max_iters": None, "restarts": None,
               "optimize_inducing": None},
        "garch": {"demean": None},
    }
    return {**common, **per_backend[backend]}


def _dataclass_config(cls, config: dict, fields: set):
    kwargs = {k: config[k] for k in fields
              if k in config and config[k] is not None}
    return cls(**kwargs)


def cmd_fit(args) -> int:
    file_config = _load_config_file(args.config)
    backend = args.backend or file_config.get("backend") or "mcmc"
    if backend not in _BACKEND_KEYS:
        raise ConfigError(f"backend must be one of {sorted(_BACKEND_KEYS)}, "
                          f"got {backend!r}")
    defaults = _fit_defaults(backend)
    flags = {"seed": args.seed, "out": args.out, "data": args.data,
             "backend": backend, "split": args.split}
    for key in _BACKEND_KEYS[backend] | _MODEL_KEYS:
        if hasattr(args, key.replace("-", "_")):
            flags[key] = getattr(args, key.replace("-", "_"))
    config = _merge(defaults, file_config, flags)
    _reject_unknown(config, set(defaults), f"fit[{backend}] config")
    if config["data"] is None:
        raise ConfigError("fit needs --data (or a 'data' config entry)")
    if backend == "mcmc" and config["burn_in"] is None:
        raise ConfigError("fit --backend mcmc needs an explicit burn-in "
                          "(--burn-in or config key 'burn_in')")

    started = time.time()
    seed = int(config["seed"])
    full = Dataset.load(config["data"])
    idx = _split_indices(full, config["split"])
    dataset = Dataset(x=full.x[idx], y=full.y[idx],
                      truth=None if full.truth is None else full.truth[idx],
                      meta=full.meta)
    out_dir = Path(config["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs: list[str] = []
    extra: dict = {"data": str(config["data"]), "split": config["split"],
                   "n": dataset.n, "d": dataset.dimension}

    if backend == "garch":
        demean = config["demean"] if config["demean"] is not None else True
        fit = fit_dcc(dataset.y, demean=bool(demean))
        params = {
            "schema_version": SCHEMA_VERSION,
            "backend": "garch",
            "series": [
                {"omega": s.omega, "alpha": s.alpha, "beta": s.beta,
                 "mean": s.mean} for s in fit.series
            ],
            "alpha": fit.alpha,
            "beta": fit.beta,
            "q_bar": fit.q_bar.tolist(),
            "loglik": fit.loglik,
            "free_quantities": fit.free_quantity_count,
        }
        (out_dir / "params.json").write_text(json.dumps(params, indent=2))
        np.save(out_dir / "sigmas.npy", fit.sigmas)
        np.save(out_dir / "h_paths.npy",
                np.stack([s.h for s in fit.series], axis=1))
        _sigma_csv(out_dir / "sigmas.csv", dataset.x, fit.sigmas)
        outputs = ["params.json", "sigmas.npy", "h_paths.npy", "sigmas.csv"]
        extra["loglik"] = fit.loglik
    else:
        model = _build_model(dataset.dimension, config)
        extra["model"] = {"dof": model.dof, "kernel": model.kernel.to_json(),
                          "noise": model.noise, "mean": model.mean.to_json()}
        if backend == "mcmc":
            gibbs = _dataclass_config(GibbsConfig, config,
                                      _BACKEND_KEYS["mcmc"])
            chains = run_chains(model, dataset.x, dataset.y, gibbs, seed)
            arrays = _states_to_arrays([s for c in chains for s in c.draws])
            for name, arr in arrays.items():
                np.save(out_dir / f"{name}.npy", arr)
            np.save(out_dir / "logliks.npy",
                    np.stack([c.logliks for c in chains]))
            np.save(out_dir / "chain_sizes.npy",
                    np.array([len(c.draws) for c in chains]))
            try:
                convergence = _jsonable(convergence_report(chains))
            except ValueError as exc:
                convergence = {"error": str(exc)}
            summary = {
                "schema_version": SCHEMA_VERSION,
                "backend": "mcmc",
                "chains": len(chains),
                "draws_per_chain": [len(c.draws) for c in chains],
                "acceptance": {
                    "theta": [c.stats.theta_rate for c in chains],
                    "scale": [c.stats.scale_rate for c in chains],
                },
                "convergence": convergence,
            }
            (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
            outputs = [f"{n}.npy" for n in arrays] + [
                "logliks.npy", "chain_sizes.npy", "summary.json"]
            extra["acceptance"] = summary["acceptance"]
        elif backend == "smc":
            smc_config = _dataclass_config(SmcConfig, config,
                                           _BACKEND_KEYS["smc"] - {"checkpoint"})
            checkpoint_dir = (out_dir / "checkpoints"
                              if config.get("checkpoint") else None)
            result = run_smc(model, dataset.x, dataset.y, smc_config, seed,
                             checkpoint_dir=checkpoint_dir)
            arrays = _states_to_arrays(result.states)
            for name, arr in arrays.items():
                np.save(out_dir / f"{name}.npy", arr)
            np.save(out_dir / "logliks.npy", result.logliks)
            summary = {
                "schema_version": SCHEMA_VERSION,
                "backend": "smc",
                "particles": len(result.states),
                "log_evidence": result.log_evidence,
                "replaced_particles": result.replaced_particles,
                "ladder": [
                    {"beta": r.beta, "increment": r.increment, "ess": r.ess,
                     "log_evidence_increment": r.log_evidence_increment,
                     "unique_ancestors": r.unique_ancestors}
                    for r in result.ladder
                ],
            }
            (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
            outputs = [f"{n}.npy" for n in arrays] + ["logliks.npy",
                                                      "summary.json"]
            extra["beta_ladder"] = [r.beta for r in result.ladder]
        else:  # vi
            vi_config = _dataclass_config(ViConfig, config, _BACKEND_KEYS["vi"])
            state, trace = fit_vi(model, dataset.x, dataset.y, vi_config, seed)
            (out_dir / "state.json").write_text(
                json.dumps({"schema_version": SCHEMA_VERSION,
                            "backend": "vi", **state.to_dict()}))
            summary = {
                "schema_version": SCHEMA_VERSION,
                "backend": "vi",
                "best_restart": trace.best_restart,
                "best_elbo": trace.best_elbo,
                "iterations": int(trace.elbo_traces[trace.best_restart].shape[0]),
                "diverged_restarts": trace.diverged_restarts,
                "elbo_trace_tail": [
                    t[-min(t.shape[0], 50):].tolist() for t in trace.elbo_traces
                ],
            }
            (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
            outputs = ["state.json", "summary.json"]
            extra["best_restart"] = trace.best_restart
            extra["best_elbo"] = trace.best_elbo

    _write_manifest(out_dir, "fit", _jsonable(config), seed, outputs,
                    time.time() - started, extra=_jsonable(extra))
    _validate_outputs(out_dir, outputs)
    print(f"fit[{backend}] wrote {len(outputs)} files to {out_dir}")
    return 0


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _split_indices(dataset: Dataset, split: str) -> np.ndarray:
    n = dataset.n
    if split == "all":
        return np.arange(n)
    n_train = int(dataset.meta.get("n_train", n // 2))
    if split == "train":
        return np.arange(n_train)
    if split == "test":
        return np.arange(n_train, n)
    raise ConfigError(f"split must be train, test, or all, got {split!r}")


def _load_fit_bundle(fit_dir: Path) -> dict:
    manifest = json.loads((fit_dir / "manifest.json").read_text())
    backend = manifest["config"]["backend"]
    bundle = {"backend": backend, "manifest": manifest}
    if backend in ("mcmc", "smc"):
        arrays = {name: np.load(fit_dir / f"{name}.npy")
                  for name in ("f", "theta", "scale", "noise")}
        bundle["states"] = _states_from_arrays(arrays)
    elif backend == "vi":
        state = json.loads((fit_dir / "state.json").read_text())
        bundle["state"] = VariationalState.from_dict(state)
    else:
        bundle["params"] = json.loads((fit_dir / "params.json").read_text())
        bundle["h_paths"] = np.load(fit_dir / "h_paths.npy")
        bundle["sigmas"] = np.load(fit_dir / "sigmas.npy")
    return bundle


def cmd_predict(args) -> int:
    defaults = {"seed": 0, "out": "predict-out", "fit": None, "data": None,
                "split": "all", "draws": 200, "csv_draws": False}
    config = _merge(defaults, _load_config_file(args.config),
                    {"seed": args.seed, "out": args.out, "fit": args.fit,
                     "data": args.data, "split": args.split,
                     "draws": args.draws, "csv_draws": args.csv_draws})
    _reject_unknown(config, set(defaults), "predict config")
    if config["fit"] is None:
        raise ConfigError("predict needs --fit (a fit output directory)")
    started = time.time()
    fit_dir = Path(config["fit"])
    bundle = _load_fit_bundle(fit_dir)
    data_path = config["data"] or bundle["manifest"]["extra"].get("data")
    if data_path is None:
        raise ConfigError("predict needs --data (no data path in the fit manifest)")
    dataset = Dataset.load(data_path)
    idx = _split_indices(dataset, config["split"])
    xs_test = dataset.x[idx]
    seed = int(config["seed"])
    rng = substream(seed, "predict")
    draw_count = int(config["draws"])

    backend = bundle["backend"]
    if backend in ("mcmc", "smc"):
        fit_config = bundle["manifest"]["config"]
        model = _build_model(dataset.dimension, fit_config)
        states = bundle["states"]
        if len(states) > draw_count:
            pick = np.sort(rng.choice(len(states), size=draw_count,
                                      replace=False))
            states = [states[i] for i in pick]
        n_fit = states[0].n_inputs
        sigma_draws, _ = predict(model, states, dataset.x[:n_fit], xs_test,
                                 rng, train_y=dataset.y[:n_fit])
    elif backend == "vi":
        fit_config = bundle["manifest"]["config"]
        model = _build_model(dataset.dimension, fit_config)
        sigma_draws = predict_vi(model, bundle["state"], xs_test, draw_count,
                                 rng)
    else:
        train_rows = bundle["sigmas"].shape[0]
        in_sample = idx[idx < train_rows]
        ahead = idx[idx >= train_rows]
        pieces = []
        if in_sample.size:
            pieces.append(bundle["sigmas"][in_sample])
        if ahead.size:
            fit = _garch_fit_from_bundle(bundle, dataset)
            horizon = int(ahead.max() - train_rows + 1)
            forecast = forecast_dcc(fit, dataset.y[:train_rows], horizon)
            pieces.append(forecast[ahead - train_rows])
        sigma_draws = np.concatenate(pieces)[None]  # single point path

    mean_path = sigma_draws.mean(axis=0)
    out_dir = Path(config["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "sigma_draws.npy", sigma_draws)
    np.save(out_dir / "xs.npy", xs_test)
    np.save(out_dir / "indices.npy", idx)
    _sigma_csv(out_dir / "sigma_mean.csv", xs_test, mean_path)
    outputs = ["sigma_draws.npy", "xs.npy", "indices.npy", "sigma_mean.csv"]
    if config["csv_draws"]:
        _sigma_draws_csv(out_dir / "sigma_draws.csv", xs_test, sigma_draws)
        outputs.append("sigma_draws.csv")
    _write_manifest(out_dir, "predict", _jsonable(config), seed, outputs,
                    time.time() - started,
                    extra={"draws": int(sigma_draws.shape[0]),
                           "points": int(xs_test.shape[0])})
    _validate_outputs(out_dir, outputs)
    print(f"predict wrote {sigma_draws.shape[0]} draws x "
          f"{xs_test.shape[0]} points to {out_dir}")
    return 0


def _garch_fit_from_bundle(bundle, dataset):
    from .garch import DccFit, GarchFit

    params = bundle["params"]
    series = tuple(
        GarchFit(omega=s["omega"], alpha=s["alpha"], beta=s["beta"],
                 h=bundle["h_paths"][:, j], loglik=np.nan, mean=s["mean"])
        for j, s in enumerate(params["series"])
    )
    return DccFit(
        series=series,
        alpha=params["alpha"],
        beta=params["beta"],
        q_bar=np.asarray(params["q_bar"]),
        correlations=np.empty((0,)),
        sigmas=bundle["sigmas"],
        loglik=params["loglik"],
        residual_means=np.array([s["mean"] for s in params["series"]]),
    )


def cmd_diagnose(args) -> int:
    defaults = {"out": "diagnose-out", "fit": None, "data": None,
                "threshold": 1.1}
    config = _merge(defaults, _load_config_file(args.config),
                    {"out": args.out, "fit": args.fit, "data": args.data,
                     "threshold": args.threshold})
    _reject_unknown(config, set(defaults), "diagnose config")
    if config["fit"] is None:
        raise ConfigError("diagnose needs --fit (a fit output directory)")
    started = time.time()
    fit_dir = Path(config["fit"])
    bundle = _load_fit_bundle(fit_dir)
    if bundle["backend"] != "mcmc":
        raise ConfigError("diagnose reads multi-chain fits (backend mcmc)")
    sizes = np.load(fit_dir / "chain_sizes.npy")
    states = bundle["states"]
    report: dict = {"schema_version": SCHEMA_VERSION}

    from .mcmc import Chain, CycleStats

    chains = []
    offset = 0
    logliks = np.load(fit_dir / "logliks.npy")
    for c, size in enumerate(sizes):
        chains.append(Chain(draws=states[offset:offset + size],
                            logliks=logliks[c],
                            stats=CycleStats(), seed_path=()))
        offset += size
    report["convergence"] = _jsonable(
        convergence_report(chains, threshold=float(config["threshold"])))

    if config["data"] is not None:
        dataset = Dataset.load(config["data"])
        if dataset.truth is not None:
            from .wishart import sigma_path

            n_fit = states[0].n_inputs
            paths = np.stack([sigma_path(s) for s in states])
            report["mse_mean_path"] = float(
                mse_mean_path(paths, dataset.truth[:n_fit]))
    out_dir = Path(config["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "diagnostics.json").write_text(json.dumps(report, indent=2))
    outputs = ["diagnostics.json"]
    _write_manifest(out_dir, "diagnose", _jsonable(config), None, outputs,
                    time.time() - started)
    _validate_outputs(out_dir, outputs)
    psrf = report["convergence"]["psrf"]
    worst = max(psrf.values())
    print(f"diagnose: worst PSRF {worst:.4f} "
          f"({'converged' if report['convergence']['converged'] else 'NOT converged'})")
    return 0


def cmd_test_dynamics(args) -> int:
    defaults = {"out": "dynamics-out", "predictions": None, "level": 0.95,
                "rope": 0.005}
    config = _merge(defaults, _load_config_file(args.config),
                    {"out": args.out, "predictions": args.predictions,
                     "level": args.level, "rope": args.rope})
    _reject_unknown(config, set(defaults), "test-dynamics config")
    if config["predictions"] is None:
        raise ConfigError("test-dynamics needs --predictions "
                          "(a predict output directory)")
    started = time.time()
    pred_dir = Path(config["predictions"])
    draws = np.load(pred_dir / "sigma_draws.npy")
    d = draws.shape[-1]
    verdicts = []
    for j in range(d):
        for k in range(j + 1, d):
            verdict = dynamics_test(draws, j, k, level=float(config["level"]),
                                    rope=float(config["rope"]))
            verdicts.append({"row": j, "col": k, "label": verdict.label})
    out_dir = Path(config["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "verdicts.json").write_text(json.dumps(
        {"schema_version": SCHEMA_VERSION, "level": config["level"],
         "rope": config["rope"], "verdicts": verdicts}, indent=2))
    with (out_dir / "verdicts.csv").open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["row", "col", "label"])
        for v in verdicts:
            writer.writerow([v["row"], v["col"], v["label"]])
    outputs = ["verdicts.json", "verdicts.csv"]
    _write_manifest(out_dir, "test-dynamics", _jsonable(config), None, outputs,
                    time.time() - started)
    _validate_outputs(out_dir, outputs)
    for v in verdicts:
        print(f"pair ({v['row']}, {v['col']}): {v['label']}")
    return 0


def cmd_compare(args) -> int:
    defaults = {"seed": 0, "out": "compare-out", "data": None,
                "backends": "mcmc,vi,smc,garch", "fold_count": 10,
                "test_len": 10, "dof": None, "kernel": None, "mean": "zero",
                "noise": None, "noise_init": None,
                "mcmc": {}, "smc": {}, "vi": {}, "garch": {}}
    config = _merge(defaults, _load_config_file(args.config),
                    {"seed": args.seed, "out": args.out, "data": args.data,
                     "backends": args.backends, "fold_count": args.fold_count,
                     "test_len": args.test_len})
    _reject_unknown(config, set(defaults), "compare config")
    for backend in ("mcmc", "smc", "vi", "garch"):
        if not isinstance(config[backend], dict):
            raise ConfigError(f"compare config key {backend!r} must be an object")
        _reject_unknown(config[backend], _BACKEND_KEYS[backend],
                        f"compare {backend}")
    if config["data"] is None:
        raise ConfigError("compare needs --data")
    backends = [b.strip() for b in str(config["backends"]).split(",") if b.strip()]
    bad = [b for b in backends if b not in _BACKEND_KEYS]
    if bad:
        raise ConfigError(f"unknown backends {bad}")

    started = time.time()
    seed = int(config["seed"])
    dataset = Dataset.load(config["data"])
    plan = expanding_cv(dataset.n, fold_count=int(config["fold_count"]),
                        test_len=int(config["test_len"]))
    table: dict[str, list[float]] = {}
    for backend in backends:
        fold_lls = []
        for fold_idx, fold in enumerate(plan.folds):
            tr = fold.train_indices
            te = fold.test_indices
            fold_seed_rng = substream(seed, "compare", backend, fold_idx)
            fold_seed = int(fold_seed_rng.integers(2**31 - 1))
            ll = _score_fold(backend, config, dataset, tr, te, fold_seed)
            fold_lls.append(ll)
        table[backend] = fold_lls
    out_dir = Path(config["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    result = {
        "schema_version": SCHEMA_VERSION,
        "fold_count": len(plan.folds),
        "per_fold_avg_loglik": table,
        "mean_avg_loglik": {b: float(np.mean(v)) for b, v in table.items()},
    }
    (out_dir / "compare.json").write_text(json.dumps(result, indent=2))
    with (out_dir / "compare.csv").open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["backend"]
                        + [f"fold_{i}" for i in range(len(plan.folds))]
                        + ["mean"])
        for b, v in table.items():
            writer.writerow([b] + [repr(x) for x in v]
                            + [repr(float(np.mean(v)))])
    outputs = ["compare.json", "compare.csv"]
    _write_manifest(out_dir, "compare", _jsonable(config), seed, outputs,
                    time.time() - started)
    _validate_outputs(out_dir, outputs)
    for b, v in result["mean_avg_loglik"].items():
        print(f"{b}: mean test avg-loglik {v:.4f}")
    return 0


def _score_fold(backend, config, dataset, train_idx, test_idx, seed) -> float:
    """Average per-row test log density under the fold's fitted mean path."""
    xs_tr, y_tr = dataset.x[train_idx], dataset.y[train_idx]
    xs_te, y_te = dataset.x[test_idx], dataset.y[test_idx]
    if backend == "garch":
        demean = config["garch"].get("demean", True)
        fit = fit_dcc(y_tr, demean=bool(demean))
        sigmas = forecast_dcc(fit, y_tr, horizon=len(test_idx))
        means = np.broadcast_to(fit.residual_means, y_te.shape)
        return avg_loglik(y_te, means, sigmas)
    model = _build_model(dataset.dimension, config)
    rng = substream(seed, "score")
    if backend == "vi":
        vi_config = _dataclass_config(ViConfig, config["vi"],
                                      _BACKEND_KEYS["vi"])
        state, _ = fit_vi(model, xs_tr, y_tr, vi_config, seed)
        sigma_draws = predict_vi(model, state, xs_te, 100, rng)
    elif backend == "mcmc":
        if config["mcmc"].get("burn_in") is None:
            raise ConfigError("compare with mcmc needs config {'mcmc': "
                              "{'burn_in': ...}}")
        gibbs = _dataclass_config(GibbsConfig, config["mcmc"],
                                  _BACKEND_KEYS["mcmc"])
        chains = run_chains(model, xs_tr, y_tr, gibbs, seed)
        states = [s for c in chains for s in c.draws]
        sigma_draws, _ = predict(model, states, xs_tr, xs_te, rng, train_y=y_tr)
    else:
        smc_config = _dataclass_config(SmcConfig, config["smc"],
                                       _BACKEND_KEYS["smc"])
        result = run_smc(model, xs_tr, y_tr, smc_config, seed)
        sigma_draws, _ = predict(model, result.states, xs_tr, xs_te, rng,
                                 train_y=y_tr)
    mean_sigma = sigma_draws.mean(axis=0)
    extended = model.mean.extend(y_tr, len(test_idx))
    return avg_loglik(y_te, extended, mean_sigma)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dyncov",
        description="Dynamic covariance estimation: simulate, fit, predict, "
                    "diagnose, test dynamics, and compare backends.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset bundle")
    p.add_argument("--config")
    p.add_argument("--study", type=int, choices=(1, 2))
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a backend to a dataset")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--backend", choices=sorted(_BACKEND_KEYS))
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--split", choices=("train", "test", "all"))
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--thinning", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--keep", type=int)
    p.add_argument("--step-size", dest="step_size", type=float)
    p.add_argument("--theta-step", dest="theta_step", type=float)
    p.add_argument("--particles", type=int)
    p.add_argument("--ess-fraction", dest="ess_fraction", type=float)
    p.add_argument("--mutation-steps", dest="mutation_steps", type=int)
    p.add_argument("--max-cycles", dest="max_cycles", type=int)
    p.add_argument("--checkpoint", action="store_const", const=True)
    p.add_argument("--inducing", type=int)
    p.add_argument("--mc-samples", dest="mc_samples", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--dof", type=int)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="draw covariance paths at chosen inputs")
    p.add_argument("--config")
    p.add_argument("--fit")
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "test", "all"))
    p.add_argument("--draws", type=int)
    p.add_argument("--csv-draws", action="store_true", default=None,
                   dest="csv_draws",
                   help="also write every covariance draw to a long-form CSV")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("diagnose", help="convergence and fit-quality tables")
    p.add_argument("--config")
    p.add_argument("--fit")
    p.add_argument("--data")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("test-dynamics",
                       help="interval-based dynamics verdict per variable pair")
    p.add_argument("--config")
    p.add_argument("--predictions")
    p.add_argument("--level", type=float)
    p.add_argument("--rope", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_test_dynamics)

    p = sub.add_parser("compare",
                       help="expanding-window out-of-sample backend comparison")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--backends")
    p.add_argument("--fold-count", dest="fold_count", type=int)
    p.add_argument("--test-len", dest="test_len", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FitError, DegenerateSwarmError, TemperingStallError,
            SingularMatrixError) as exc:
        # covers config, degenerate-diagnostic, and backend failures
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
