import csv
import json
import math
import subprocess
import sys
from decimal import Decimal

import numpy as np
import pytest

from weakmeas import cli, harness
from weakmeas.errors import ConfigError
from weakmeas.harness import (
    PRESETS,
    PURITY_THRESHOLD,
    load_config,
    run_preset,
    validate_config,
    with_overrides,
)


def write(tmp_path, text, name="cfg.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestValidate:
    def test_defaults_only_scatter(self):
        cfg = validate_config('preset = "fig2_scatter"\n')
        assert cfg.n_trajectories == 200
        assert cfg.coupling_values() == [0.01, 0.2, 5.0]
        assert np.allclose(cfg.beta_values(), np.pi * np.array([0, 0.125, 0.25, 0.375, 0.5]))
        assert cfg.n_bins == 100 and cfg.sigma_bins == 10.0 and cfg.delta_t_factor == 0.1

    def test_missing_beta_named(self):
        with pytest.raises(ConfigError, match="'beta'"):
            validate_config('preset = "fig3_fidelity"\ncoupling = 5\n')

    @pytest.mark.parametrize("line, field", [
        ("coupling = -1", "coupling"), ("beta = 2.0", "beta"), ("n_trajectories = 0",
                                                                "n_trajectories"),
        ("seed = -3", "seed"), ("initial_r = 1.5", "initial_r"), ("n_max = 3", "n_max")])
    def test_range_errors_name_the_field(self, line, field):
        with pytest.raises(ConfigError, match=f"'{field}'"):
            base = "" if field == "beta" else "beta = 0.3\n"
            validate_config(f'preset = "fig4_spectra"\n{base}{line}\n')

    def test_parse_error_has_position(self):
        with pytest.raises(ConfigError, match=r"line 2, column \d+"):
            validate_config('preset = "fig4_spectra"\nbeta = = 3\n')

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key.*colour"):
            validate_config('preset = "fig4_spectra"\nbeta = 0.3\ncolour = 1\n')

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="unknown preset"):
            validate_config('preset = "fig9"\n')

    def test_type_errors(self):
        with pytest.raises(ConfigError, match="integer"):
            validate_config('preset = "fig4_spectra"\nbeta = 0.3\nn_trajectories = 1.5\n')
        with pytest.raises(ConfigError, match="number"):
            validate_config('preset = "fig4_spectra"\nbeta = "x"\n')

    def test_beta_over_pi_is_exact(self):
        cfg = validate_config('preset = "fig4_spectra"\nbeta_over_pi = 0.25\n')
        assert cfg.beta_over_pi == Decimal("0.25")
        assert cfg.beta_radians() == math.pi / 4
        with pytest.raises(ConfigError, match="either"):
            validate_config('preset = "fig4_spectra"\nbeta_over_pi = 0.25\nbeta = 0.1\n')

    def test_explicit_beta_overrides_sweep(self):
        cfg = validate_config('preset = "fig2_scatter"\nbeta = 0.2\ncoupling = 1.0\n')
        assert cfg.beta_values() == [0.2] and cfg.coupling_values() == [1.0]

    def test_decoherence_preset_needs_beta_zero(self):
        with pytest.raises(ConfigError, match="beta = 0"):
            validate_config('preset = "fig8_decoherence"\nbeta = 0.1\n')

    def test_steps_rule(self):
        cfg = validate_config('preset = "fig4_spectra"\nbeta = 0.3\n')
        model = cfg.qpc(5.0)
        assert cfg.steps_for(model) == 4000
        assert cfg.steps_for(model, 6.0) == 600

    def test_echo_round_trips_to_json(self):
        cfg = validate_config('preset = "qst_demo"\n')
        echo = json.loads(json.dumps(cfg.echo()))
        assert echo["preset"] == "qst_demo" and echo["initial_r"] == 1.0

    def test_overrides_rechecked(self):
        cfg = validate_config('preset = "fig4_spectra"\nbeta = 0.3\n')
        assert with_overrides(cfg, seed=None) is cfg
        assert with_overrides(cfg, seed=9).seed == 9
        with pytest.raises(ConfigError):
            with_overrides(cfg, workers=0)

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "nope.toml")


SMALL = {
    "fig2_scatter": "n_trajectories = 20\ncouplings = [0.2, 5]\nbetas_over_pi = [0, 0.25]\n"
                    "t_final_over_tau_m = 10\n",
    "fig3_fidelity": "beta_over_pi = 0.25\nn_trajectories = 50\nt_curve_over_tau_m = 1\n"
                     "curve_step_over_tau_m = 0.5\nt_final_over_tau_m = 10\n",
    "fig4_spectra": "beta = 0.3\nn_trajectories = 30\nt_final_over_tau_m = 10\n",
    "fig5_avg_fidelity": "beta = 0.3\nn_trajectories = 30\nt_final_over_tau_m = 10\n",
    "fig6_coupling_sweep": "beta = 0.3\nn_trajectories = 20\ncouplings = [0.5, 5]\n"
                           "t_final_over_tau_m = 10\n",
    "fig7_slope": "n_trajectories = 20\nbetas_over_pi = [0, 0.5]\nt_final_over_tau_m = 10\n",
    "fig8_decoherence": "n_trajectories = 20\ntau_d_over_tau_m = [0.5, 2]\n"
                        "delta_t_factor = 0.1\n",
    "qst_demo": "n_trajectories = 40\nt_final_over_tau_m = 10\n",
    "toy_enumeration": "n_trajectories = 20000\n",
}

EXPECTED_FILES = {
    "fig2_scatter": {"axes_coupling-0.2_beta-0.csv", "axes_coupling-0.2_beta-0.25.csv",
                     "axes_coupling-5_beta-0.csv", "axes_coupling-5_beta-0.25.csv"},
    "fig3_fidelity": {"fidelity_curve.csv"},
    "fig4_spectra": {"spectra.csv", "axes.csv"},
    "fig5_avg_fidelity": {"avg_fidelity.csv"},
    "fig6_coupling_sweep": {"coupling_sweep.csv"},
    "fig7_slope": {"slope.csv"},
    "fig8_decoherence": {"fmax.csv"},
    "qst_demo": {"samples.csv", "estimate.csv"},
    "toy_enumeration": {"toy_records.csv"},
}


def small_config(preset):
    return validate_config(f'preset = "{preset}"\n' + SMALL[preset])


class TestRunPreset:
    def test_every_preset_is_covered(self):
        assert set(SMALL) == set(PRESETS) == set(EXPECTED_FILES)

    @pytest.mark.parametrize("preset", sorted(PRESETS))
    def test_runs_and_writes_manifest(self, tmp_path, preset):
        out = tmp_path / "out"
        manifest = run_preset(small_config(preset), out)
        files = {p.name for p in out.iterdir()}
        assert files == EXPECTED_FILES[preset] | {"manifest.json"}
        on_disk = json.loads((out / "manifest.json").read_text())
        assert on_disk == json.loads(json.dumps(manifest))
        assert on_disk["preset"] == preset and on_disk["seed"] == 20070101
        assert on_disk["config"]["preset"] == preset
        assert isinstance(on_disk["version"], str) and on_disk["wall_time_s"] >= 0
        for name in EXPECTED_FILES[preset]:
            assert len(on_disk["files"][name]) == 64
            rows = read_csv(out / name)
            assert len(rows) >= 2
            assert all(len(r) == len(rows[0]) for r in rows)
        if preset != "fig8_decoherence":
            check = on_disk["purity_check"]
            assert check["threshold"] == PURITY_THRESHOLD
        else:
            assert "purity_check" not in on_disk
        assert not list(tmp_path.glob(".weakmeas-*"))

    def test_headers(self, tmp_path):
        expected = {
            "fig3_fidelity": ("fidelity_curve.csv", ["t_over_tau_m", "mean_F", "stderr"]),
            "fig4_spectra": ("spectra.csv", ["n", "c_n", "stderr"]),
            "fig5_avg_fidelity": ("avg_fidelity.csv", ["beta", "theta_meas", "F_bar", "stderr"]),
            "fig8_decoherence": ("fmax.csv", ["tau_d_over_tau_m", "F_max_formula",
                                              "F_max_montecarlo", "stderr"]),
            "qst_demo": ("estimate.csv", ["r", "theta", "phi", "objective", "degenerate_flag"]),
        }
        for preset, (name, header) in expected.items():
            out = tmp_path / preset
            run_preset(small_config(preset), out)
            assert read_csv(out / name)[0] == header

    def test_toy_facts(self, tmp_path):
        manifest = run_preset(small_config("toy_enumeration"), tmp_path / "toy")
        assert manifest["pair_sum_max_difference"] <= 1e-12
        rows = read_csv(tmp_path / "toy" / "toy_records.csv")
        assert len(rows) == 126
        assert sum(int(r[1]) for r in rows[1:]) == 20000
        assert sum(float(r[3]) for r in rows[1:]) == pytest.approx(1.0, abs=1e-12)

    def test_byte_identical_across_workers(self, tmp_path):
        cfg = small_config("fig4_spectra")
        cfg = with_overrides(cfg, n_trajectories=2500)
        a = run_preset(cfg, tmp_path / "a")
        b = run_preset(with_overrides(cfg, workers=2), tmp_path / "b")
        assert a["files"] == b["files"]
        for name in a["files"]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_changes_output(self, tmp_path):
        cfg = small_config("fig4_spectra")
        a = run_preset(cfg, tmp_path / "a")
        b = run_preset(with_overrides(cfg, seed=7), tmp_path / "b")
        assert a["files"]["axes.csv"] != b["files"]["axes.csv"]

    def test_failure_leaves_no_partial_output(self, tmp_path, monkeypatch):
        def broken(self):
            (self.out / "half.csv").write_text("x\n")
            raise FloatingPointError("overflow")

        monkeypatch.setattr(harness._Runner, "fig4_spectra", broken)
        out = tmp_path / "out"
        with pytest.raises(FloatingPointError):
            run_preset(small_config("fig4_spectra"), out)
        assert not out.exists()
        assert list(tmp_path.iterdir()) == []


class TestCli:
    def test_presets_listing(self, capsys):
        assert cli.main(["presets"]) == 0
        text = capsys.readouterr().out
        for name in PRESETS:
            assert name in text
        assert "required: beta" in text

    def test_validate(self, tmp_path, capsys):
        path = write(tmp_path, 'preset = "fig4_spectra"\nbeta_over_pi = 0.125\n')
        assert cli.main(["validate", str(path)]) == 0
        echo = json.loads(capsys.readouterr().out)
        assert echo["beta_over_pi"] == "0.125" and echo["n_bins"] == 100

    def test_config_error_exit_code(self, tmp_path, capsys):
        path = write(tmp_path, 'preset = "fig3_fidelity"\n')
        assert cli.main(["run", str(path), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
        assert "config error" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()
        bad = write(tmp_path, "preset = \n", "bad.toml")
        assert cli.main(["validate", str(bad)]) == cli.EXIT_CONFIG
        assert "line 1" in capsys.readouterr().err

    def test_numeric_failure_exit_code(self, tmp_path, monkeypatch, capsys):
        def broken(self):
            raise FloatingPointError("overflow encountered")

        monkeypatch.setattr(harness._Runner, "fig4_spectra", broken)
        path = write(tmp_path, 'preset = "fig4_spectra"\nbeta = 0.3\n')
        assert cli.main(["run", str(path), "--out", str(tmp_path / "o")]) == cli.EXIT_NUMERIC
        assert "numeric failure" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_run_with_overrides_and_env(self, tmp_path, monkeypatch):
        path = write(tmp_path, 'preset = "fig4_spectra"\n' + SMALL["fig4_spectra"])
        monkeypatch.setenv(cli.ENV_OUT_DIR, str(tmp_path / "env_out"))
        monkeypatch.setenv(cli.ENV_WORKERS, "2")
        assert cli.main(["run", str(path), "--seed", "11"]) == 0
        manifest = json.loads((tmp_path / "env_out" / "manifest.json").read_text())
        assert manifest["seed"] == 11 and manifest["config"]["workers"] == 2
        assert cli.main(["run", str(path), "--out", str(tmp_path / "flag_out"),
                         "--seed", "11", "--workers", "1"]) == 0
        flag = json.loads((tmp_path / "flag_out" / "manifest.json").read_text())
        assert flag["files"] == manifest["files"]

    def test_bad_worker_env(self, tmp_path, monkeypatch, capsys):
        path = write(tmp_path, 'preset = "fig4_spectra"\nbeta = 0.3\n')
        monkeypatch.setenv(cli.ENV_WORKERS, "many")
        assert cli.main(["run", str(path), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
        assert cli.ENV_WORKERS in capsys.readouterr().err

    def test_console_module_entry(self, tmp_path):
        path = write(tmp_path, 'preset = "fig4_spectra"\nbeta = 0.3\n')
        proc = subprocess.run([sys.executable, "-m", "weakmeas.cli", "validate", str(path)],
                              capture_output=True, text=True)
        assert proc.returncode == 0 and '"preset": "fig4_spectra"' in proc.stdout
