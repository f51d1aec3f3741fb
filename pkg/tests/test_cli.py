"""End-to-end tests of the batch driver: config handling, artifact chains,
exit codes and bitwise reproducibility."""

import json

import numpy as np
import pytest

from slabwave.cli import (DEFAULT_CONFIG, ConfigError, config_hash,
                          load_config, main, validate_config)

BASE = {
    "scenario": "cli-test",
    "ensemble": {"seed_base": 1, "count": 2, "beta_values": [0.08],
                 "min_samples": 2},
}


@pytest.fixture
def workdir(tmp_path):
    cfg = dict(BASE)
    cfg["output_dir"] = str(tmp_path / "out")
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return tmp_path, path


def _run(*argv):
    return main([str(a) for a in argv])


# ---------------------------------------------------------------------------
# configuration surface
# ---------------------------------------------------------------------------

class TestConfig:
    def test_defaults_validate(self):
        validate_config(DEFAULT_CONFIG)

    def test_unknown_key_pointer(self):
        with pytest.raises(ConfigError, match="solver.ppw"):
            validate_config({"solver": {"ppw": 12}})

    def test_type_mismatch_pointer(self):
        with pytest.raises(ConfigError, match="ensemble.count"):
            validate_config({"ensemble": {"count": "four"}})

    def test_unknown_key_exit_code(self, workdir, capsys):
        _, cfg = workdir
        assert _run("solve", cfg, "--set", "solver.bogus=1") == 2
        assert "unknown key 'solver.bogus'" in capsys.readouterr().err

    def test_malformed_override_exit_code(self, workdir, capsys):
        _, cfg = workdir
        assert _run("solve", cfg, "--set", "nonsense") == 2

    def test_missing_config_file(self, tmp_path, capsys):
        assert _run("solve", tmp_path / "nope.json") == 2
        assert "not found" in capsys.readouterr().err

    def test_override_changes_hash(self, workdir):
        _, cfg = workdir
        a = load_config(cfg)
        b = load_config(cfg, ["scales.sigma=0.3"])
        assert b["scales"]["sigma"] == 0.3
        assert config_hash(a) != config_hash(b)
        assert config_hash(a) == config_hash(load_config(cfg))


# ---------------------------------------------------------------------------
# command chains
# ---------------------------------------------------------------------------

class TestCommands:
    def test_generate_medium(self, workdir):
        root, cfg = workdir
        assert _run("generate-medium", cfg) == 0
        out = root / "out"
        stats = (out / "medium-stats.csv").read_text().splitlines()
        assert stats[0] == "seed,n_inclusions,beta"
        assert len(stats) == 3  # two seeds
        manifest = json.loads(
            (out / "generate-medium-manifest.json").read_text())
        assert manifest["seeds"] == [1, 2]
        assert manifest["config_hash"]
        assert manifest["version"]
        assert "wall_time_s" in manifest

    def test_solve_sigma_zero_matches_homogenized(self, workdir):
        root, cfg = workdir
        assert _run("solve", cfg, "--set", "scales.sigma=0.0") == 0
        out = root / "out"
        assert (out / "u.bin").read_bytes() == (out / "u_beta.bin").read_bytes()

    def test_clt_requires_ensemble(self, workdir, capsys):
        _, cfg = workdir
        assert _run("clt-test", cfg) == 3
        assert "missing ensemble" in capsys.readouterr().err

    def test_corrector_stats_then_clt(self, workdir):
        root, cfg = workdir
        assert _run("corrector-stats", cfg) == 0
        out = root / "out"
        assert (out / "ensemble.json").exists()
        rows = (out / "corrector-stats.csv").read_text().splitlines()
        assert len(rows) == 3
        assert _run("clt-test", cfg) == 0
        table = (out / "clt-test.csv").read_text().splitlines()
        assert table[0].startswith("phi_index,beta,n,")
        assert len(table) == 4  # three test functions

    def test_clt_rejects_mismatched_ensemble(self, workdir, capsys):
        root, cfg = workdir
        assert _run("corrector-stats", cfg) == 0
        assert _run("clt-test", cfg, "--set", "scales.sigma=0.3") == 2
        assert "different config" in capsys.readouterr().err

    def test_scaling_study_needs_beta_span(self, workdir, capsys):
        _, cfg = workdir
        assert _run("scaling-study", cfg) == 2
        assert "beta" in capsys.readouterr().err

    def test_transport_and_correlation(self, workdir):
        root, cfg = workdir
        out = root / "out"
        assert _run("correlation", cfg) == 3  # nothing upstream yet
        assert _run("transport", cfg) == 0
        report = json.loads((out / "flux-report.json").read_text())
        assert report["imbalance"] < 1e-8
        assert (out / "wigner.bin").exists()
        flux = (out / "detector-flux.csv").read_text().splitlines()
        assert flux[0] == "x,angle,flux"
        assert _run("correlation", cfg) == 0
        corr = (out / "correlation.csv").read_text().splitlines()
        assert len(corr) > 2
        residuals = [float(r.split(",")[-1]) for r in corr[1:]]
        assert max(residuals) < 1e-12

    def test_green_diagnostics(self, workdir):
        root, cfg = workdir
        assert _run("green-diagnostics", cfg, "--set",
                    "diagnostics.k_sweep=[6.0]", "--set",
                    "diagnostics.kappa_sweep=[0.1,0.3]") == 0
        rows = (root / "out" / "green-diagnostics.csv").read_text().splitlines()
        assert rows[0] == "k,kappa_e,norm_name,value,normalized_ratio"
        assert len(rows) == 5  # 1 k x 2 kappa x 2 norms
        for row in rows[1:]:
            assert np.isfinite(float(row.split(",")[-1]))


# ---------------------------------------------------------------------------
# reproducibility
# ---------------------------------------------------------------------------

class TestReproducibility:
    def test_corrector_stats_bitwise_across_jobs(self, workdir, tmp_path):
        _, cfg = workdir
        out1 = tmp_path / "r1"
        out2 = tmp_path / "r2"
        assert _run("corrector-stats", cfg, "--output", out1) == 0
        assert _run("corrector-stats", cfg, "--output", out2,
                    "--jobs", 2) == 0
        assert ((out1 / "ensemble.npz").read_bytes()
                == (out2 / "ensemble.npz").read_bytes())
        assert ((out1 / "corrector-stats.csv").read_text()
                == (out2 / "corrector-stats.csv").read_text())

    def test_transport_bitwise_across_jobs(self, workdir, tmp_path):
        _, cfg = workdir
        out1 = tmp_path / "t1"
        out2 = tmp_path / "t2"
        assert _run("transport", cfg, "--output", out1) == 0
        assert _run("transport", cfg, "--output", out2, "--jobs", 4) == 0
        assert ((out1 / "wigner.bin").read_bytes()
                == (out2 / "wigner.bin").read_bytes())
        assert ((out1 / "detector-flux.csv").read_text()
                == (out2 / "detector-flux.csv").read_text())

    def test_solve_rerun_bitwise(self, workdir, tmp_path):
        _, cfg = workdir
        out1 = tmp_path / "s1"
        out2 = tmp_path / "s2"
        assert _run("solve", cfg, "--output", out1) == 0
        assert _run("solve", cfg, "--output", out2) == 0
        assert ((out1 / "u_beta.bin").read_bytes()
                == (out2 / "u_beta.bin").read_bytes())
