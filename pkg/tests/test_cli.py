import json

import pytest

from plsgd import checks, envelopes
from plsgd.cli import dispatch, main
from plsgd.config import parse_config, serialize_config, validate_config
from plsgd.errors import ConfigError

MINIMAL_ENSEMBLE = """\
kind = "ensemble"
seed = 7
T = 50
trials = 100

[problem]
kind = "quadratic"
spectrum = [1.0, 1.0]

[oracle]
mode = "additive_gaussian"
sigma = 0.0
batch = 1

[schedule]
kind = "theta"
"""


def write_cfg(tmp_path, text, name="exp.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestParseConfig:
    def test_defaults_filled(self, tmp_path):
        cfg = parse_config(write_cfg(tmp_path, MINIMAL_ENSEMBLE))
        assert cfg.C1 == 2.0 and cfg.C2 == 2.0
        assert cfg.deltas == (0.1, 0.05, 0.01)
        assert cfg.save_trajectories is False

    def test_unknown_key_rejected(self, tmp_path):
        bad = MINIMAL_ENSEMBLE + "\nbogus_key = 1\n"
        with pytest.raises(ConfigError, match="bogus_key"):
            parse_config(write_cfg(tmp_path, bad))

    def test_unknown_nested_key_rejected(self, tmp_path):
        bad = MINIMAL_ENSEMBLE.replace('kind = "theta"', 'kind = "theta"\nwarmup = 3')
        with pytest.raises(ConfigError, match="schedule.warmup"):
            parse_config(write_cfg(tmp_path, bad))

    def test_slow_schedule_constant_bound(self, tmp_path):
        bad = MINIMAL_ENSEMBLE.replace(
            '[schedule]\nkind = "theta"', '[schedule]\nkind = "slow"\nc = 1.0')
        with pytest.raises(ConfigError, match="schedule.c"):
            parse_config(write_cfg(tmp_path, bad))

    def test_ensemble_delta_domain(self, tmp_path):
        bad = MINIMAL_ENSEMBLE + "\ndeltas = [0.5]\n"
        with pytest.raises(ConfigError, match="deltas"):
            parse_config(write_cfg(tmp_path, bad))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "nope.toml")

    def test_round_trip(self, tmp_path):
        cfg = parse_config(write_cfg(tmp_path, MINIMAL_ENSEMBLE))
        text = serialize_config(cfg)
        cfg2 = parse_config(write_cfg(tmp_path, text, "round.toml"))
        assert cfg.normalized() == cfg2.normalized()

    def test_counterexample_defaults(self):
        cfg = validate_config({"kind": "counterexample", "seed": 1,
                               "problem": {"kind": "counterexample"}})
        spec = cfg.build_counterexample()
        assert spec.a == 1.0 and spec.epsilon == 0.25
        assert spec.radius == pytest.approx(1.94908, abs=1e-4)

    def test_counterexample_step_guard(self):
        with pytest.raises(ConfigError, match="problem.eta"):
            validate_config({"kind": "counterexample", "seed": 1,
                             "problem": {"kind": "counterexample", "eta": 0.9}})

    def test_tables_foreign_to_the_kind_rejected(self):
        with pytest.raises(ConfigError, match="oracle"):
            validate_config({"kind": "landscape", "seed": 1,
                             "problem": {"kind": "quadratic", "spectrum": [1.0]},
                             "oracle": {"mode": "additive_gaussian"}})
        with pytest.raises(ConfigError, match="problem"):
            validate_config({"kind": "risk", "seed": 1,
                             "problem": {"kind": "quadratic", "spectrum": [1.0]}})
        with pytest.raises(ConfigError, match="coupling"):
            validate_config({"kind": "ensemble", "seed": 1,
                             "problem": {"kind": "quadratic", "spectrum": [1.0]},
                             "oracle": {"mode": "additive_gaussian", "sigma": 0.0},
                             "schedule": {"kind": "theta"},
                             "coupling": {"i_star": 0}})


class TestDispatch:
    def test_noiseless_ensemble_exit_zero(self, tmp_path):
        cfg = parse_config(write_cfg(tmp_path, MINIMAL_ENSEMBLE))
        out = tmp_path / "run"
        assert dispatch(cfg, out) == 0
        summary = (out / "summary.csv").read_text().splitlines()
        header = summary[0].split(",")
        for line in summary[1:]:
            row = dict(zip(header, line.split(",")))
            assert row["exceed_d10"] == "0"
            assert row["exceed_d05"] == "0"
            assert row["exceed_d01"] == "0"
        assert (out / "manifest.json").exists()
        assert not (out / "failures.json").exists()

    def test_byte_identical_reruns(self, tmp_path):
        text = MINIMAL_ENSEMBLE.replace("sigma = 0.0", "sigma = 1.0")
        cfg = parse_config(write_cfg(tmp_path, text))
        a, b = tmp_path / "a", tmp_path / "b"
        assert dispatch(cfg, a) == 0
        assert dispatch(cfg, b) == 0
        for name in ("summary.csv", "bounds.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_corrupt_config_leaves_no_artifacts(self, tmp_path):
        bad = write_cfg(tmp_path, "kind = \"ensemble\"\nseed = ???\n")
        out = tmp_path / "nothing"
        rc = main(["run", str(bad), "--out", str(out)])
        assert rc == 2
        assert not out.exists()

    def test_counterexample_report_facts(self, tmp_path):
        cfg = validate_config({
            "kind": "counterexample", "seed": 3,
            "problem": {"kind": "counterexample", "T": 20_000}})
        out = tmp_path / "cx"
        assert dispatch(cfg, out) == 0
        rep = json.loads((out / "report.json").read_text())
        assert rep["free_run_minimized"] and rep["projected_run_stuck"]
        assert rep["stall_located"]
        assert (out / "trace_projected.csv").exists()

    def test_slow_schedule_bounds_csv_has_no_closed_form(self, tmp_path):
        text = MINIMAL_ENSEMBLE.replace(
            '[schedule]\nkind = "theta"', '[schedule]\nkind = "slow"\nc = 0.5')
        cfg = parse_config(write_cfg(tmp_path, text))
        out = tmp_path / "slow"
        assert dispatch(cfg, out) == 0
        lines = (out / "bounds.csv").read_text().splitlines()
        assert lines[0].endswith("closedform_K_t")
        assert all(line.endswith(",") for line in lines[1:])

    def test_landscape_kind(self, tmp_path):
        cfg = validate_config({
            "kind": "landscape", "seed": 2, "trials": 2000,
            "problem": {"kind": "quadratic", "spectrum": [0.5, 2.0]}})
        out = tmp_path / "ls"
        assert dispatch(cfg, out) == 0
        body = (out / "landscape.csv").read_text()
        assert "pl_ratio_min" in body and "qg_ratio_max" in body

    def test_failure_writes_machine_readable_list(self, tmp_path, monkeypatch):
        # force an invariant breach: pretend the mgf certificate threshold is tiny
        cfg = parse_config(write_cfg(tmp_path, MINIMAL_ENSEMBLE.replace(
            "sigma = 0.0", "sigma = 1.0")))
        import plsgd.cli as cli_mod
        real = cli_mod.math.e
        monkeypatch.setattr(cli_mod.math, "e", 1e-9)
        try:
            out = tmp_path / "fail"
            assert dispatch(cfg, out) == 1
            failures = json.loads((out / "failures.json").read_text())
            assert any(f["check"] == "mgf" for f in failures)
        finally:
            monkeypatch.setattr(cli_mod.math, "e", real)

    def test_cli_run_and_report(self, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path, MINIMAL_ENSEMBLE)
        out = tmp_path / "cli_run"
        assert main(["run", str(cfg_path), "--out", str(out)]) == 0
        assert main(["report", str(out)]) == 0
        captured = capsys.readouterr().out
        assert "ensemble" in captured
        assert "exceed_d10" in captured

    def test_trajectory_csv_ordered_by_trial_then_step(self, tmp_path):
        text = MINIMAL_ENSEMBLE.replace("sigma = 0.0", "sigma = 1.0")
        text = "save_trajectories = true\n" + text
        cfg = parse_config(write_cfg(tmp_path, text))
        out = tmp_path / "traj"
        assert dispatch(cfg, out) == 0
        lines = (out / "trajectories.csv").read_text().splitlines()
        assert lines[0] == "trial_id,t,gap,grad_norm_sq,eta,radius,inner,err_norm_sq"
        keys = [tuple(int(v) for v in ln.split(",")[:2]) for ln in lines[1:]]
        assert keys == sorted(keys)
        # terminal rows leave the step fields blank
        last = lines[1 + cfg.T].split(",")
        assert last[4] == "" and last[6] == "" and last[7] == ""


def test_default_output_root_env(tmp_path, monkeypatch):
    from plsgd.cli import _default_out
    cfg = validate_config({"kind": "landscape", "seed": 1,
                           "problem": {"kind": "quadratic", "spectrum": [1.0]}})
    monkeypatch.setenv("PLSGD_OUT_ROOT", str(tmp_path / "root"))
    assert _default_out(tmp_path / "my_exp.toml", cfg) == tmp_path / "root" / "my_exp"
    monkeypatch.delenv("PLSGD_OUT_ROOT")
    assert _default_out(tmp_path / "my_exp.toml", cfg).parts[0] == "runs"


class TestCheckCommand:
    def test_fresh_checkout_passes(self, capsys):
        assert main(["check"]) == 0
        assert "harvey-constraint" in capsys.readouterr().out

    def test_fault_injection_names_the_property(self, monkeypatch):
        def broken(K, alpha, beta_sq, gamma):
            return 0.0  # violates the recursion constraint
        monkeypatch.setattr(envelopes, "envelope_next", broken)
        failures = checks.run_all(emit=lambda *_: None)
        assert any(name == "harvey-constraint" for name, _ in failures)
