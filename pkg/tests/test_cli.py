import json
from pathlib import Path

import numpy as np
import pytest

from attikit import cli
from attikit import filters as flt
from attikit.errors import NoConvergence
from attikit.sim import CSV_COLUMNS

CONFIGS = Path(__file__).resolve().parents[1] / "demos" / "configs"


def load(name):
    return json.loads((CONFIGS / name).read_text())


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def parse_kv(text):
    out = {}
    for line in text.strip().splitlines():
        k, v = line.split("=", 1)
        out[k] = v
    return out


def short_generalized(duration=2.0):
    cfg = load("generalized.json")
    cfg["duration_s"] = duration
    return cfg


# --------------------------------------------------------------------------
# simulate


def test_simulate_writes_csv_and_meta(tmp_path, capsys):
    out = tmp_path / "run"
    code = cli.main(["simulate", "--config", write(tmp_path, short_generalized()), "--out", str(out)])
    assert code == cli.EXIT_OK
    lines = (out / "run.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) - 1 == 2.0 / 0.01 + 1
    meta = json.loads((out / "meta.json").read_text())
    assert meta["seed"] == 1
    assert meta["noise_algorithm"]
    assert set(meta["versions"]) >= {"attikit", "numpy", "python"}
    assert meta["config"]["filter"]["kind"] == "generalized"
    stdout = parse_kv(capsys.readouterr().out)
    assert int(stdout["rows"]) == 201


def test_simulate_byte_identical(tmp_path):
    cfg = load("noisy_mekf.json")
    cfg["duration_s"] = 2.0
    path = write(tmp_path, cfg)
    for name in ("a", "b"):
        assert cli.main(["simulate", "--config", path, "--out", str(tmp_path / name), "--seed", "123"]) == 0
    assert (tmp_path / "a" / "run.csv").read_bytes() == (tmp_path / "b" / "run.csv").read_bytes()
    assert cli.main(["simulate", "--config", path, "--out", str(tmp_path / "c"), "--seed", "124"]) == 0
    assert (tmp_path / "a" / "run.csv").read_bytes() != (tmp_path / "c" / "run.csv").read_bytes()
    assert json.loads((tmp_path / "a" / "meta.json").read_text())["seed"] == 123


def test_simulate_full_mekf_suffix_columns(tmp_path):
    cfg = load("noisy_mekf.json")
    cfg["duration_s"] = 0.5
    assert cli.main(["simulate", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 0
    head = (tmp_path / "o" / "run.csv").read_text().splitlines()[0]
    assert head == ",".join(CSV_COLUMNS) + ",pa_trace,pb_trace"


def test_negative_weight_names_key(tmp_path, capsys):
    cfg = short_generalized()
    cfg["observations"][1]["weight"] = -1
    assert cli.main(["simulate", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "observations.1.weight" in err


@pytest.mark.parametrize(
    "mutate, needle",
    [
        (lambda c: c.update(bogus=1), "unknown key 'bogus'"),
        (lambda c: c["filter"].update(kp=1), "unknown key 'filter.kp'"),
        (lambda c: c["omega_profile"].update(freq=1), "unknown key 'omega_profile.freq'"),
        (lambda c: c.update(dt_s=0), "dt_s"),
        (lambda c: c.update(duration_s=1.005), "duration_s"),
        (lambda c: c["filter"].update(k_p=[1, -1, 1]), "filter.k_p"),
        (lambda c: c["filter"].update(kind="kalman"), "filter.kind"),
        (lambda c: c.pop("observations"), "observations"),
        (lambda c: c.update(observations=[{"vector": [1, 0, 0]}]), "observations"),
    ],
)
def test_config_errors_exit_2(tmp_path, capsys, mutate, needle):
    cfg = short_generalized()
    mutate(cfg)
    assert cli.main(["simulate", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert needle in capsys.readouterr().err


def test_missing_and_malformed_files(tmp_path, capsys):
    assert cli.main(["simulate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "not valid JSON" in capsys.readouterr().err


def test_simulate_needs_out_dir(tmp_path, capsys):
    assert cli.main(["simulate", "--config", write(tmp_path, short_generalized())]) == cli.EXIT_CONFIG
    assert "--out" in capsys.readouterr().err


def test_divergence_exit_3(tmp_path, capsys):
    cfg = load("noisy_mekf.json")
    cfg["duration_s"] = 1.0
    p0 = np.diag([-0.1, 0.1, 0.1, 1e-3, 1e-3, 1e-3])
    cfg["filter"]["p0"] = p0.tolist()
    assert cli.main(["simulate", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_DIVERGENCE
    assert "diverged" in capsys.readouterr().err


# --------------------------------------------------------------------------
# riccati


def test_riccati_isotropic_closed_form(capsys):
    assert cli.main(["riccati", "--config", str(CONFIGS / "riccati_isotropic.json")]) == 0
    kv = parse_kv(capsys.readouterr().out)
    p_a = np.array(kv["p_a"].split(","), float).reshape(3, 3)
    p_c = np.array(kv["p_c"].split(","), float).reshape(3, 3)
    p_b = np.array(kv["p_b"].split(","), float).reshape(3, 3)
    np.testing.assert_allclose(p_a, 0.138355 * np.eye(3), atol=1e-6)
    np.testing.assert_allclose(p_c, -0.0141421 * np.eye(3), atol=1e-6)
    np.testing.assert_allclose(p_b, 0.0039133 * np.eye(3), atol=1e-6)
    assert kv["p_c_negative_definite"] == "true"


def test_riccati_two_vector_residuals(capsys):
    assert cli.main(["riccati", "--config", str(CONFIGS / "riccati_two_vector.json")]) == 0
    kv = parse_kv(capsys.readouterr().out)
    for key in ("residual_pa", "residual_pb", "residual_pc", "residual_pc_relation"):
        assert float(kv[key]) < 1e-8
    assert float(kv["p_a_eig_min"]) > 0
    assert float(kv["p_c_eig_max"]) < 0


def test_riccati_single_vector_exit_2(tmp_path, capsys):
    cfg = load("riccati_two_vector.json")
    cfg["observations"] = cfg["observations"][:1]
    assert cli.main(["riccati", "--config", write(tmp_path, cfg)]) == cli.EXIT_CONFIG
    assert "observations" in capsys.readouterr().err


def test_riccati_needs_noise(tmp_path):
    cfg = load("riccati_two_vector.json")
    cfg["filter"]["noise"]["sigma_b_rad_s_sqrt_hz"] = 0.0
    assert cli.main(["riccati", "--config", write(tmp_path, cfg)]) == cli.EXIT_CONFIG


def test_riccati_no_convergence_exit_4(monkeypatch, capsys):
    def stall(*a, **k):
        raise NoConvergence("derivative stalled")

    monkeypatch.setattr(flt, "riccati_steady_state", stall)
    assert cli.main(["riccati", "--config", str(CONFIGS / "riccati_two_vector.json")]) == cli.EXIT_NO_CONVERGENCE
    assert "no convergence" in capsys.readouterr().err


# --------------------------------------------------------------------------
# verify


@pytest.mark.parametrize(
    "suite, n",
    [("identities", 200), ("equilibria", 5), ("linearization", 10), ("lyapunov", 3), ("equivalence", 2)],
)
def test_verify_suites_pass(capsys, suite, n):
    assert cli.main(["verify", "--suite", suite, "--n", str(n), "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "failed=0" in out and "result=PASS" in out
    assert "elapsed_s=" in out


def test_verify_property_failure_exit_1(monkeypatch, capsys):
    from attikit import checks

    def broken(n=10, seed=0):
        res = checks.SuiteResult("identities", n)
        res.tally(False)
        return res

    monkeypatch.setitem(checks.SUITES, "identities", broken)
    assert cli.main(["verify", "--suite", "identities", "--n", "1"]) == cli.EXIT_PROPERTY


def test_verify_unknown_suite():
    with pytest.raises(SystemExit) as exc:
        cli.main(["verify", "--suite", "nope"])
    assert exc.value.code == 2


# --------------------------------------------------------------------------
# montecarlo


def small_mc(duration=60.0):
    cfg = load("montecarlo.json")
    cfg["duration_s"] = duration
    cfg["montecarlo"]["max_angle_rad"] = 0.1
    cfg["montecarlo"]["max_bias_rad_s"] = 0.001
    return cfg


def test_montecarlo_writes_summary(tmp_path, capsys):
    out = tmp_path / "mc"
    assert cli.main(["montecarlo", "--config", write(tmp_path, small_mc()), "--runs", "4", "--out", str(out)]) == 0
    rows = (out / "mc_summary.csv").read_text().splitlines()
    assert rows[0].split(",")[:6] == ["run", "seed", "initial_angle", "initial_bias_error", "settling_time", "converged"]
    assert len(rows) == 5
    kv = parse_kv(capsys.readouterr().out)
    assert kv["runs"] == "4"
    assert kv["convergence_fraction"] == "1.000"


def test_montecarlo_zero_runs_exit_2(tmp_path, capsys):
    assert cli.main(["montecarlo", "--config", write(tmp_path, small_mc()), "--runs", "0", "--out", str(tmp_path)]) == 2
    assert "--runs" in capsys.readouterr().err


def test_montecarlo_noisy_reports_steady_angle(tmp_path, capsys):
    cfg = small_mc(10.0)
    cfg["simulate_noise"] = True
    cfg["gyro"] = {"sigma_omega_rad_s": 0.01}
    for o, s in zip(cfg["observations"], (0.02, 0.05)):
        o["sigma"] = s
    assert cli.main(["montecarlo", "--config", write(tmp_path, cfg), "--runs", "3", "--out", str(tmp_path / "o")]) == 0
    angle = float(parse_kv(capsys.readouterr().out)["median_steady_angle_rad"])
    assert np.isfinite(angle) and angle > 0


def test_montecarlo_thread_env_does_not_change_output(tmp_path, monkeypatch):
    path = write(tmp_path, small_mc(5.0))
    assert cli.main(["montecarlo", "--config", path, "--runs", "5", "--out", str(tmp_path / "a")]) == 0
    monkeypatch.setenv("ATTIKIT_THREADS", "2")
    assert cli.main(["montecarlo", "--config", path, "--runs", "5", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "mc_summary.csv").read_bytes() == (tmp_path / "b" / "mc_summary.csv").read_bytes()


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert "attikit" in capsys.readouterr().out
