import json

import pytest

from diffusmooth.cli import main
from diffusmooth.config import ExperimentConfig
from diffusmooth.csvio import read_csv, write_csv
from diffusmooth.exceptions import ConfigError

BASE = {
    "model": {"kind": "ou", "gamma": 1.0, "sigma_c": 0.3},
    "initial_law": {"kind": "normal", "mu": 0.5, "sigma": 0.2},
    "horizon": 0.4,
    "measurements": {"count": 3, "noise_std": 0.1},
    "grid": {"nx": 400},
    "solver": {"steps": 600},
    "seed": 11,
    "output_times": 9,
}


def _write(tmp_path, cfg, name="config.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


class TestConfigValidation:
    def test_valid_roundtrip(self):
        cfg = ExperimentConfig.from_dict(BASE)
        assert cfg.seed == 11
        assert cfg.horizon == 0.4
        assert cfg.measurement_times() == pytest.approx(
            [0.4 / 3, 0.8 / 3, 0.4])

    def test_unknown_top_level_key(self):
        bad = dict(BASE, extra=1)
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(bad)

    def test_unknown_nested_key(self):
        bad = json.loads(json.dumps(BASE))
        bad["model"]["vol_of_vol"] = 2.0
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(bad)

    def test_wrong_model_parameters(self):
        bad = json.loads(json.dumps(BASE))
        bad["model"] = {"kind": "gbm", "kappa": 1.0}
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(bad)

    def test_values_need_times(self):
        bad = json.loads(json.dumps(BASE))
        bad["measurements"] = {"count": 3, "noise_std": 0.1, "values": [1, 2, 3]}
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(bad)

    def test_values_times_length_mismatch(self):
        bad = json.loads(json.dumps(BASE))
        bad["measurements"] = {"times": [0.1, 0.2], "noise_std": 0.1,
                               "values": [1.0]}
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(bad)


class TestCliCommands:
    def test_simulate_outputs(self, tmp_path):
        cfg_path = _write(tmp_path, BASE)
        out = tmp_path / "out"
        assert main(["simulate", "--config", cfg_path, "--out", str(out)]) == 0
        hdr, rows = read_csv(out / "path.csv")
        assert hdr == ["t", "x"]
        assert len(rows) == 2001
        hdr, rows = read_csv(out / "measurements.csv")
        assert hdr == ["t", "y"]
        assert len(rows) == 3

    def test_simulate_honors_fixed_values(self, tmp_path):
        cfg = json.loads(json.dumps(BASE))
        cfg["measurements"] = {"times": [0.1, 0.3], "noise_std": 0.1,
                               "values": [0.42, 0.17]}
        cfg_path = _write(tmp_path, cfg)
        out = tmp_path / "out"
        assert main(["simulate", "--config", cfg_path, "--out", str(out)]) == 0
        _, rows = read_csv(out / "measurements.csv")
        assert [r[1] for r in rows] == [0.42, 0.17]

    def test_smooth_requires_measurements(self, tmp_path):
        cfg_path = _write(tmp_path, BASE)
        out = tmp_path / "empty"
        code = main(["smooth", "--method", "pde", "--config", cfg_path,
                     "--out", str(out)])
        assert code == 2

    def test_smooth_both_methods_and_compare(self, tmp_path):
        cfg_path = _write(tmp_path, BASE)
        out = tmp_path / "out"
        assert main(["simulate", "--config", cfg_path, "--out", str(out)]) == 0
        assert main(["smooth", "--method", "pde", "--config", cfg_path,
                     "--out", str(out)]) == 0
        assert (out / "moments_pde.csv").exists()
        assert (out / "densities" / "density_000.csv").exists()
        hdr, _ = read_csv(out / "densities" / "density_000.csv")
        assert hdr == ["x", "p", "w", "ps"]
        assert main(["smooth", "--method", "variational", "--config", cfg_path,
                     "--out", str(out)]) == 0
        hdr, _ = read_csv(out / "trajectory.csv")
        assert hdr == ["t", "m", "S", "C", "D", "A", "B",
                       "rho_m", "rho_S", "rho_C", "rho_D"]
        diag = json.loads((out / "solver_diagnostics.json").read_text())
        assert diag["converged"] is True
        assert main(["compare", "--config", cfg_path, "--out", str(out)]) == 0
        hdr, rows = read_csv(out / "kl.csv")
        assert hdr == ["t", "kl_pde_gauss", "kl_gauss_pde"]
        # linear-Gaussian case: both smoothers agree almost exactly
        assert max(r[1] for r in rows) < 1e-4
        rt = json.loads((out / "runtime.json").read_text())
        for key in ("forward_pde_s", "backward_pde_s", "bvp_s",
                    "pde_approach_s", "variational_approach_s"):
            assert key in rt

    def test_moment_files_agree_for_linear_model(self, tmp_path):
        cfg_path = _write(tmp_path, BASE)
        out = tmp_path / "out"
        main(["simulate", "--config", cfg_path, "--out", str(out)])
        main(["compare", "--config", cfg_path, "--out", str(out)])
        _, rp = read_csv(out / "moments_pde.csv")
        _, rv = read_csv(out / "moments_var.csv")
        for a, b in zip(rp, rv):
            assert abs(a[1] - b[1]) < 1e-3
            assert abs(a[2] - b[2]) < 1e-3

    def test_infer_writes_em_csv(self, tmp_path):
        cfg = json.loads(json.dumps(BASE))
        cfg["em"] = {"kappa0": 2.0, "max_iters": 3, "tol": 1e-4}
        cfg_path = _write(tmp_path, cfg)
        out = tmp_path / "out"
        main(["simulate", "--config", cfg_path, "--out", str(out)])
        assert main(["infer", "--config", cfg_path, "--out", str(out)]) == 0
        hdr, rows = read_csv(out / "em.csv")
        assert hdr == ["iter", "kappa", "F", "converged"]
        assert rows[0][1] == 2.0
        assert (out / "em_breakdown.csv").exists()

    def test_plot_generates_svgs(self, tmp_path):
        cfg_path = _write(tmp_path, BASE)
        out = tmp_path / "out"
        main(["simulate", "--config", cfg_path, "--out", str(out)])
        main(["compare", "--config", cfg_path, "--out", str(out)])
        main(["smooth", "--method", "pde", "--config", cfg_path,
              "--out", str(out)])
        assert main(["plot", "--out", str(out)]) == 0
        for name in ("moments.svg", "variance.svg", "kl.svg",
                     "smoothing_density.svg"):
            text = (out / name).read_text()
            assert text.startswith("<svg") and text.rstrip().endswith("</svg>")

    def test_plot_without_files_is_usage_error(self, tmp_path):
        assert main(["plot", "--out", str(tmp_path / "nothing")]) == 2

    def test_nonconvergence_exit_code(self, tmp_path):
        cfg = json.loads(json.dumps(BASE))
        cfg["solver"] = {"steps": 390, "max_iters": 1, "tol": 1e-15}
        cfg_path = _write(tmp_path, cfg)
        out = tmp_path / "out"
        main(["simulate", "--config", cfg_path, "--out", str(out)])
        code = main(["smooth", "--method", "variational", "--config", cfg_path,
                     "--out", str(out)])
        assert code == 3
        assert (out / "trajectory.csv").exists()  # partial outputs written

    def test_seed_override(self, tmp_path):
        cfg_path = _write(tmp_path, BASE)
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        main(["simulate", "--config", cfg_path, "--out", str(out_a),
              "--seed", "99"])
        main(["simulate", "--config", cfg_path, "--out", str(out_b),
              "--seed", "99"])
        assert (out_a / "path.csv").read_bytes() == (out_b / "path.csv").read_bytes()


class TestBundledConfigs:
    @pytest.mark.parametrize("name", ["gbm_small_noise.json", "cir_rates.json"])
    def test_compare_runs_with_expected_runtime_ordering(self, tmp_path, name):
        from importlib.resources import files
        cfg_path = files("diffusmooth") / "configs" / name
        out = tmp_path / "out"
        assert main(["simulate", "--config", str(cfg_path), "--out", str(out)]) == 0
        assert main(["compare", "--config", str(cfg_path), "--out", str(out)]) == 0
        rt = json.loads((out / "runtime.json").read_text())
        assert rt["variational_approach_s"] < rt["pde_approach_s"]
        _, rows = read_csv(out / "kl.csv")
        assert max(r[1] for r in rows) < 0.1


class TestCsvFormat:
    def test_roundtrip_floats(self, tmp_path):
        rows = [(0.1, 1 / 3), (2e-300, 123456.789012345)]
        f = tmp_path / "x.csv"
        write_csv(f, ["a", "b"], rows)
        _, back = read_csv(f)
        for (a, b), (a2, b2) in zip(rows, back):
            assert a == a2 and b == b2

    def test_lf_endings_and_header(self, tmp_path):
        f = tmp_path / "x.csv"
        write_csv(f, ["a"], [(1.5,)])
        raw = f.read_bytes()
        assert b"\r" not in raw
        assert raw.startswith(b"a\n")
