"""End-to-end command-line flows: every subcommand, manifests, error exits."""

import csv
import json
import warnings
from pathlib import Path

import numpy as np
import pytest

from dyncov.cli import main

pytestmark = pytest.mark.filterwarnings(
    "ignore:only .* posterior draws:UserWarning",
    "ignore:fitting a volatility model:UserWarning",
)


def _run(*argv):
    return main([str(a) for a in argv])


def _manifest(out_dir):
    return json.loads((Path(out_dir) / "manifest.json").read_text())


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def sim1_dir(work):
    cfg = work / "sim1.json"
    cfg.write_text(json.dumps({"n": 24, "d": 2, "dof": 2}))
    out = work / "sim1"
    assert _run("simulate", "--study", 1, "--seed", 3, "--out", out,
                "--config", cfg) == 0
    return out


@pytest.fixture(scope="module")
def sim2_dir(work):
    cfg = work / "sim2.json"
    cfg.write_text(json.dumps({"n": 40, "d": 2, "period": 10}))
    out = work / "sim2"
    assert _run("simulate", "--study", 2, "--seed", 1, "--out", out,
                "--config", cfg) == 0
    return out


@pytest.fixture(scope="module")
def mcmc_fit_dir(work, sim1_dir):
    out = work / "fit-mcmc"
    assert _run("fit", "--backend", "mcmc", "--data", sim1_dir / "dataset.json",
                "--seed", 7, "--out", out, "--burn-in", 4, "--thinning", 2,
                "--keep", 5, "--chains", 2, "--step-size", 0.15) == 0
    return out


@pytest.fixture(scope="module")
def smc_fit_dir(work, sim1_dir):
    out = work / "fit-smc"
    assert _run("fit", "--backend", "smc", "--data", sim1_dir / "dataset.json",
                "--seed", 7, "--out", out, "--particles", 12,
                "--mutation-steps", 1) == 0
    return out


@pytest.fixture(scope="module")
def vi_fit_dir(work, sim1_dir):
    out = work / "fit-vi"
    assert _run("fit", "--backend", "vi", "--data", sim1_dir / "dataset.json",
                "--seed", 7, "--out", out, "--inducing", 4, "--mc-samples", 2,
                "--max-iters", 25, "--restarts", 1,
                "--learning-rate", 0.01) == 0
    return out


@pytest.fixture(scope="module")
def garch_fit_dir(work, sim2_dir):
    out = work / "fit-garch"
    assert _run("fit", "--backend", "garch",
                "--data", sim2_dir / "dataset.json", "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def predict_dir(work, mcmc_fit_dir):
    out = work / "pred-mcmc"
    assert _run("predict", "--fit", mcmc_fit_dir, "--draws", 6, "--seed", 2,
                "--out", out, "--csv-draws") == 0
    return out


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def test_simulate_outputs_and_manifest(sim1_dir):
    from dyncov.data import Dataset

    ds = Dataset.load(sim1_dir / "dataset.json")
    assert ds.n == 24
    assert ds.dimension == 2
    assert ds.truth.shape == (24, 2, 2)
    manifest = _manifest(sim1_dir)
    assert manifest["schema_version"] == 1
    assert manifest["command"] == "simulate"
    assert manifest["seed"] == 3
    assert manifest["config"]["study"] == 1
    assert manifest["config"]["n"] == 24
    assert set(manifest["outputs"]) == {"dataset.json"}
    assert manifest["wall_seconds"] >= 0
    import hashlib

    want = hashlib.sha256(
        json.dumps(manifest["config"], sort_keys=True).encode()
    ).hexdigest()
    assert manifest["config_sha256"] == want


def test_simulate_replay_is_bit_identical(work, sim1_dir):
    cfg = work / "sim1.json"
    again = work / "sim1-replay"
    assert _run("simulate", "--study", 1, "--seed", 3, "--out", again,
                "--config", cfg) == 0
    assert ((again / "dataset.json").read_text()
            == (sim1_dir / "dataset.json").read_text())


def test_simulate_study2_records_split(sim2_dir):
    from dyncov.data import Dataset

    ds = Dataset.load(sim2_dir / "dataset.json")
    assert ds.meta["n_train"] == 20
    assert ds.meta["n_test"] == 20


def test_simulate_rejects_bad_study(tmp_path, capsys):
    # no --study flag: the config file's value must be validated
    assert _run("simulate", "--seed", 0, "--out", tmp_path / "x",
                "--config", _json(tmp_path, {"study": 3})) == 1
    assert "study" in capsys.readouterr().err


def _json(tmp_path, obj, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return path


def test_unknown_config_key_rejected(tmp_path, capsys):
    assert _run("simulate", "--out", tmp_path / "x",
                "--config", _json(tmp_path, {"bogus": 1})) == 1
    assert "bogus" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def test_fit_mcmc_outputs(mcmc_fit_dir):
    summary = json.loads((mcmc_fit_dir / "summary.json").read_text())
    assert summary["backend"] == "mcmc"
    assert summary["chains"] == 2
    assert summary["draws_per_chain"] == [5, 5]
    assert "psrf" in summary["convergence"]
    assert len(summary["acceptance"]["theta"]) == 2
    f = np.load(mcmc_fit_dir / "f.npy")
    assert f.shape == (10, 2, 3, 24)  # 2 chains x 5 draws; (d, dof=d+1, n)
    assert np.load(mcmc_fit_dir / "logliks.npy").shape == (2, 5)
    assert np.array_equal(np.load(mcmc_fit_dir / "chain_sizes.npy"), [5, 5])
    manifest = _manifest(mcmc_fit_dir)
    assert manifest["config"]["burn_in"] == 4
    assert manifest["extra"]["model"]["dof"] == 3  # default d + 1


def test_fit_mcmc_requires_burn_in(tmp_path, sim1_dir, capsys):
    assert _run("fit", "--backend", "mcmc",
                "--data", sim1_dir / "dataset.json",
                "--out", tmp_path / "x") == 1
    assert "burn-in" in capsys.readouterr().err


def test_fit_replay_is_bit_identical(work, sim1_dir, mcmc_fit_dir):
    again = work / "fit-mcmc-replay"
    assert _run("fit", "--backend", "mcmc",
                "--data", sim1_dir / "dataset.json",
                "--seed", 7, "--out", again, "--burn-in", 4, "--thinning", 2,
                "--keep", 5, "--chains", 2, "--step-size", 0.15) == 0
    for name in ("f.npy", "theta.npy", "scale.npy", "logliks.npy"):
        assert np.array_equal(np.load(again / name),
                              np.load(mcmc_fit_dir / name))
    a, b = _manifest(again)["config"], _manifest(mcmc_fit_dir)["config"]
    assert {k: v for k, v in a.items() if k != "out"} \
        == {k: v for k, v in b.items() if k != "out"}


def test_fit_smc_outputs(smc_fit_dir):
    summary = json.loads((smc_fit_dir / "summary.json").read_text())
    assert summary["backend"] == "smc"
    assert summary["particles"] == 12
    assert summary["ladder"][0]["beta"] == 0.0
    assert summary["ladder"][-1]["beta"] == 1.0
    assert np.isfinite(summary["log_evidence"])
    assert np.load(smc_fit_dir / "f.npy").shape == (12, 2, 3, 24)
    assert _manifest(smc_fit_dir)["extra"]["beta_ladder"][-1] == 1.0


def test_fit_vi_outputs(vi_fit_dir):
    summary = json.loads((vi_fit_dir / "summary.json").read_text())
    assert summary["backend"] == "vi"
    assert summary["best_restart"] == 0
    assert summary["iterations"] == 25
    assert np.isfinite(summary["best_elbo"])
    state = json.loads((vi_fit_dir / "state.json").read_text())
    assert state["backend"] == "vi"
    assert len(state["z"]) == 4
    assert np.asarray(state["m"]).shape == (2, 3, 4)


def test_fit_garch_outputs(garch_fit_dir):
    params = json.loads((garch_fit_dir / "params.json").read_text())
    assert params["backend"] == "garch"
    assert len(params["series"]) == 2
    assert params["free_quantities"] == 3 * 2 + 2 + 3
    sigmas = np.load(garch_fit_dir / "sigmas.npy")
    assert sigmas.shape == (40, 2, 2)
    with (garch_fit_dir / "sigmas.csv").open() as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ["x", "row", "col", "value"]
    assert len(rows) == 1 + 40 * 4
    assert float(rows[1][3]) == sigmas[0, 0, 0]


def test_fit_missing_data_exits_nonzero(tmp_path, capsys):
    assert _run("fit", "--backend", "garch", "--data",
                tmp_path / "nope.json", "--out", tmp_path / "x") == 1
    assert "missing input" in capsys.readouterr().err


def test_fit_unknown_backend_in_config(tmp_path, sim1_dir, capsys):
    cfg = _json(tmp_path, {"backend": "bogus"})
    assert _run("fit", "--data", sim1_dir / "dataset.json", "--config", cfg,
                "--out", tmp_path / "x") == 1
    assert "backend" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def test_predict_outputs_and_draw_csv(predict_dir):
    draws = np.load(predict_dir / "sigma_draws.npy")
    assert draws.shape == (6, 24, 2, 2)
    assert np.load(predict_dir / "xs.npy").shape == (24,)
    assert np.array_equal(np.load(predict_dir / "indices.npy"), np.arange(24))
    with (predict_dir / "sigma_mean.csv").open() as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ["x", "row", "col", "value"]
    assert len(rows) == 1 + 24 * 4
    mean = draws.mean(axis=0)
    assert float(rows[1][3]) == mean[0, 0, 0]
    with (predict_dir / "sigma_draws.csv").open() as handle:
        drows = list(csv.reader(handle))
    assert drows[0] == ["x", "row", "col", "value", "draw_id"]
    assert len(drows) == 1 + 6 * 24 * 4
    assert drows[1][4] == "0"
    assert drows[-1][4] == "5"
    assert float(drows[1][3]) == draws[0, 0, 0, 0]
    manifest = _manifest(predict_dir)
    assert manifest["extra"] == {"draws": 6, "points": 24}
    assert "sigma_draws.csv" in manifest["outputs"]


def test_predict_without_draw_csv_by_default(work, mcmc_fit_dir):
    out = work / "pred-plain"
    assert _run("predict", "--fit", mcmc_fit_dir, "--draws", 4, "--seed", 2,
                "--out", out) == 0
    assert not (out / "sigma_draws.csv").exists()
    assert np.load(out / "sigma_draws.npy").shape == (4, 24, 2, 2)


def test_predict_vi_backend(work, vi_fit_dir):
    out = work / "pred-vi"
    assert _run("predict", "--fit", vi_fit_dir, "--draws", 8, "--seed", 4,
                "--out", out) == 0
    draws = np.load(out / "sigma_draws.npy")
    assert draws.shape == (8, 24, 2, 2)
    assert np.array_equal(draws, draws.swapaxes(-1, -2))


def test_predict_garch_backend_is_plug_in(work, garch_fit_dir):
    out = work / "pred-garch"
    assert _run("predict", "--fit", garch_fit_dir, "--out", out) == 0
    draws = np.load(out / "sigma_draws.npy")
    assert draws.shape == (1, 40, 2, 2)
    assert np.array_equal(draws[0], np.load(garch_fit_dir / "sigmas.npy"))


def test_predict_requires_fit(tmp_path, capsys):
    assert _run("predict", "--out", tmp_path / "x") == 1
    assert "--fit" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------------


def test_diagnose_mcmc_fit(work, mcmc_fit_dir, sim1_dir):
    out = work / "diag"
    assert _run("diagnose", "--fit", mcmc_fit_dir,
                "--data", sim1_dir / "dataset.json", "--out", out) == 0
    report = json.loads((out / "diagnostics.json").read_text())
    conv = report["convergence"]
    assert set(conv) == {"psrf", "converged", "threshold"}
    assert conv["threshold"] == 1.1
    assert "loglik" in conv["psrf"]
    assert report["mse_mean_path"] >= 0.0


def test_diagnose_rejects_single_path_fits(work, smc_fit_dir, capsys):
    assert _run("diagnose", "--fit", smc_fit_dir, "--out", work / "d2") == 1
    assert "mcmc" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# test-dynamics
# ---------------------------------------------------------------------------


def test_dynamics_command(work, predict_dir):
    out = work / "dyn"
    assert _run("test-dynamics", "--predictions", predict_dir, "--out", out,
                "--level", 0.9, "--rope", 0.01) == 0
    verdicts = json.loads((out / "verdicts.json").read_text())
    assert verdicts["level"] == 0.9
    assert verdicts["rope"] == 0.01
    assert len(verdicts["verdicts"]) == 1  # d = 2 has one off-diagonal pair
    entry = verdicts["verdicts"][0]
    assert entry["row"] == 0 and entry["col"] == 1
    assert entry["label"] in ("uncorrelated", "static", "dynamic")
    with (out / "verdicts.csv").open() as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ["row", "col", "label"]
    assert rows[1][2] == entry["label"]


def test_dynamics_requires_predictions(tmp_path, capsys):
    assert _run("test-dynamics", "--out", tmp_path / "x") == 1
    assert "--predictions" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def test_compare_backends(work, sim2_dir, tmp_path):
    cfg = _json(tmp_path, {
        "vi": {"max_iters": 5, "restarts": 1, "inducing": 3, "mc_samples": 1},
    })
    out = work / "cmp"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        code = _run("compare", "--data", sim2_dir / "dataset.json",
                    "--backends", "vi,garch", "--fold-count", 3,
                    "--test-len", 5, "--seed", 11, "--out", out,
                    "--config", cfg)
    assert code == 0
    result = json.loads((out / "compare.json").read_text())
    assert result["fold_count"] == 3
    assert set(result["per_fold_avg_loglik"]) == {"vi", "garch"}
    assert all(len(v) == 3 for v in result["per_fold_avg_loglik"].values())
    for backend, mean in result["mean_avg_loglik"].items():
        assert mean == pytest.approx(
            np.mean(result["per_fold_avg_loglik"][backend]), abs=1e-12
        )
    with (out / "compare.csv").open() as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ["backend", "fold_0", "fold_1", "fold_2", "mean"]
    assert {r[0] for r in rows[1:]} == {"vi", "garch"}


def test_compare_mcmc_requires_burn_in(work, sim2_dir, capsys):
    assert _run("compare", "--data", sim2_dir / "dataset.json",
                "--backends", "mcmc", "--fold-count", 3, "--test-len", 5,
                "--out", work / "cmp2") == 1
    assert "burn_in" in capsys.readouterr().err


def test_compare_rejects_unknown_backend(work, sim2_dir, capsys):
    assert _run("compare", "--data", sim2_dir / "dataset.json",
                "--backends", "nope", "--out", work / "cmp3") == 1
    assert "nope" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# entry point details
# ---------------------------------------------------------------------------


def test_version_flag_exits_cleanly():
    with pytest.raises(SystemExit) as err:
        _run("--version")
    assert err.value.code == 0


def test_unknown_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit) as err:
        _run("frobnicate")
    assert err.value.code == 2
