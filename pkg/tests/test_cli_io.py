import json

import numpy as np
import pytest

import gsadmm
from gsadmm.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, main
from gsadmm.experiments import (PRESETS, ConfigError, ExperimentConfig, ExperimentFailed,
                                run_experiment)
from gsadmm.io import (RunManifest, emit_csv, load_manifest, read_csv, sha256_file,
                       trajectory_columns, write_manifest)
from gsadmm.problem import build_problem
from gsadmm.solver import SolverConfig, run_trajectory

SMALL = {"ensemble": {"M": 40}, "solver": {"m_grid": [4, 5, 6]}}


# -------------------------------------------------------------------- csv

def test_csv_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    vals = np.concatenate([rng.normal(size=50) * 10.0 ** rng.integers(-300, 300, 50),
                           [0.1, 1 / 3, np.pi, 5e-324, 1.7976931348623157e308, -0.0]])
    path = emit_csv({"v": vals, "i": np.arange(len(vals))}, tmp_path / "a.csv")
    back = read_csv(path)
    assert back["v"].tobytes() == vals.tobytes()
    np.testing.assert_array_equal(back["i"], np.arange(len(vals)))


def test_csv_nonfinite_round_trip(tmp_path):
    vals = np.array([np.inf, -np.inf, 1.0])
    back = read_csv(emit_csv({"v": vals}, tmp_path / "b.csv"))["v"]
    np.testing.assert_array_equal(back, vals)


def test_csv_trajectory_rows(tmp_path):
    toy = build_problem("toy")
    cfg = SolverConfig(rho=6.0, T=0.5, x0=[1.0])
    assert cfg.steps == 3
    traj = run_trajectory(toy, cfg, 1)
    path = emit_csv(trajectory_columns(traj), tmp_path / "t.csv")
    lines = path.read_text().splitlines()
    assert len(lines) == 5
    assert lines[0].split(",")[:3] == ["step", "t", "x_0"]
    assert "r_norm" in lines[0] and "ralpha_norm" in lines[0]


def test_csv_errors(tmp_path):
    with pytest.raises(ValueError):
        emit_csv({}, tmp_path / "e.csv")
    with pytest.raises(ValueError):
        emit_csv({"a": [1.0, 2.0], "b": [1.0]}, tmp_path / "e.csv")
    with pytest.raises(ValueError):
        emit_csv({"a": []}, tmp_path / "e.csv")


# --------------------------------------------------------------- manifest

def test_manifest_round_trip(tmp_path):
    m = RunManifest({"a": 1}, 7, gsadmm.__version__, [{"label": "x", "seeds": [1, 2]}],
                    {"f.csv": "00"}, {"v": float("nan")}, 1.5, "now")
    path = write_manifest(m, tmp_path / "m.json")
    back = load_manifest(path)
    assert back.base_seed == 7 and back.ensembles == m.ensembles
    assert back.summary == {"v": "nan"}


# ------------------------------------------------------------ experiments

def _cfg(**over):
    base = {"experiment": "toy", "pipeline": "weak_error", **SMALL}
    for k, v in over.items():
        base[k] = v if not isinstance(v, dict) else {**base.get(k, {}), **v}
    return ExperimentConfig.from_dict(base)


def test_weak_error_columns(tmp_path):
    man = run_experiment(_cfg(), tmp_path)
    data = read_csv(tmp_path / "weak_error_quadratic_a1p5.csv")
    assert list(data) == ["m", "err", "stderr"]
    np.testing.assert_array_equal(data["m"], [4, 5, 6])
    assert np.all(data["err"] >= 0)
    assert man.version == gsadmm.__version__
    assert "weak_error_quadratic_a1p5.csv" in man.outputs


def test_manifest_records_seeds(tmp_path):
    man = run_experiment(_cfg(), tmp_path)
    assert man.base_seed == 20240422
    assert len(man.ensembles) == 6
    for rec in man.ensembles:
        assert len(rec["seeds"]) == rec["M"] == 40
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk["outputs"] == man.outputs


def test_rerun_reproduces(tmp_path):
    a = run_experiment(_cfg(), tmp_path / "a")
    b = run_experiment(_cfg(), tmp_path / "b")
    assert a.comparable() == b.comparable()
    # from the stored manifest
    cfg = ExperimentConfig.from_dict(load_manifest(tmp_path / "a" / "manifest.json").config)
    c = run_experiment(cfg, tmp_path / "c")
    assert c.outputs == a.outputs
    for name, digest in a.outputs.items():
        assert sha256_file(tmp_path / "c" / name) == digest


def test_seed_changes_outputs(tmp_path):
    a = run_experiment(_cfg(), tmp_path / "a")
    b = run_experiment(_cfg(ensemble={"base_seed": 1}), tmp_path / "b")
    assert a.outputs != b.outputs


def test_workers_do_not_change_outputs(tmp_path):
    cfg = _cfg(pipeline="overlay", ensemble={"M": 1200})
    a = run_experiment(cfg, tmp_path / "a", workers=1)
    b = run_experiment(cfg, tmp_path / "b", workers=3)
    assert a.outputs == b.outputs


def test_config_validation():
    with pytest.raises(ConfigError):
        _cfg(solver={"m_grid": []})
    with pytest.raises(ConfigError):
        _cfg(solver={"m_grid": [4, 4, 5]})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"experiment": "custom"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"experiment": "nope"})
    with pytest.raises(ConfigError):
        _cfg(ensemble={"M": 0})
    with pytest.raises(ConfigError):
        ExperimentConfig.preset("fig9_9")


def test_documented_defaults():
    toy = ExperimentConfig.preset("toy")
    assert toy.solver["T"] == 0.5 and toy.solver["m_grid"] == list(range(4, 12))
    assert toy.phi == "x_plus_x2" and toy.solver["x0"] == [1.0]
    ridge = ExperimentConfig.preset("ridge")
    s = ridge.solver
    assert (s["T"], s["c"], s["omega"], s["omega1"], s["alpha"]) == (40.0, 1.0, 1.0, 1.0, 1.5)
    assert ridge.problem == {"d": 3, "beta": 0.2, "sigma_zeta_sq": 0.1, "v_spec": [1.0, 2.0]}
    assert ridge.ensemble["M"] == 400 and ridge.phi == "sum_exp_neg"


def test_custom_factory(tmp_path):
    cfg = ExperimentConfig.from_dict({
        "experiment": "custom", "pipeline": "admm",
        "problem": {"factory": "gsadmm.problem:quadratic_1d", "a": 2.0},
        "solver": {"m": 4, "T": 1.0, "alpha": 1.0, "omega1": 1.0}, "ensemble": {"M": 8},
        "phi": "x"})
    man = run_experiment(cfg, tmp_path)
    assert man.outputs
    bad = ExperimentConfig.from_dict({"experiment": "custom", "problem": {"factory": "no:where"}})
    with pytest.raises(ConfigError):
        bad.build_problem()


def test_all_diverged_is_experiment_failure(tmp_path):
    cfg = ExperimentConfig.from_dict({
        "experiment": "toy", "pipeline": "admm",
        "solver": {"m": 4, "T": 2.0, "alpha": 1.0, "c": 0.0, "omega": 0.0, "omega1": 1.0,
                   "x0": [1e9]},
        "ensemble": {"M": 4}})
    with pytest.raises(ExperimentFailed) as err:
        run_experiment(cfg, tmp_path)
    assert err.value.diagnostics["diverged"] == 4


# --------------------------------------------------------------------- cli

def test_cli_exit_codes(tmp_path, capsys):
    out = str(tmp_path / "o")
    rc = main(["weak-error", "--out", out, "--set", "ensemble.M=20",
               "--set", "solver.m_grid=[4,5,6]"])
    assert rc == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert "quadratic_a1.5" in summary
    assert main(["weak-error", "--out", out, "--set", "solver.m_grid=[]"]) == EXIT_CONFIG
    assert main(["run-admm", "--out", out, "--set", "ensemble.M=4",
                 "--set", "solver.x0=[1e9]", "--set", "solver.c=0",
                 "--set", "solver.alpha=1.0", "--set", "solver.omega=0"]) == EXIT_DIVERGED
    assert main(["run-admm", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG


def test_cli_config_file_and_seed(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"ensemble": {"M": 10}, "solver": {"m": 4}}))
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["run-sme", "--config", str(cfg), "--seed", "5", "--out", a]) == EXIT_OK
    assert main(["run-sme", "--config", str(cfg), "--seed", "5", "--out", b,
                 "--workers", "2"]) == EXIT_OK
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["base_seed"] == 5 and ma["outputs"] == mb["outputs"]


def test_cli_bad_set(tmp_path):
    assert main(["run-admm", "--out", str(tmp_path), "--set", "noequals"]) == EXIT_CONFIG


def test_cli_version(capsys):
    with pytest.raises(SystemExit):
        main(["--version"])
    assert gsadmm.__version__ in capsys.readouterr().out


_FAST = {
    "fig5_9": {"solver": {"m_grid": [4, 5, 6]}},
    "fig5_10": {"solver": {"m": 5}},
    "fig5_11": {"sweep": {"m_values": [6]}},
}


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_every_preset_runs(name, tmp_path):
    over = {"ensemble": {"M": 6}, "solver": {"m_grid": [4, 5, 6]}}
    for k, v in _FAST.get(name, {}).items():
        over[k] = {**over.get(k, {}), **v}
    cfg = ExperimentConfig.preset(name, over)
    man = run_experiment(cfg, tmp_path)
    assert any(n.endswith(".csv") for n in man.outputs)
    assert man.config["meta"]["preset"] == name
