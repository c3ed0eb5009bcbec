"""Config validation, experiment runs, the verify table, probes, reports."""

import copy
import io
import os
import subprocess
import sys

import numpy as np
import pytest

from cvxint import fieldio
from cvxint.cli import (
    CONFIGS,
    ConfigError,
    hull_probe,
    load_config,
    main,
    run_experiment,
    validate_config,
    verify_suite,
    write_report,
)


@pytest.fixture(scope="module")
def plateau_cfg():
    return load_config("pm1d_plateau")


@pytest.fixture(scope="module")
def plateau_run(plateau_cfg, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("plateau_run"))
    status, summary = run_experiment(plateau_cfg, out)
    return status, summary, out


# -- config validation -------------------------------------------------------------


def test_shipped_configs_validate():
    for name in CONFIGS:
        cfg = load_config(name)
        assert cfg["name"] == name
        assert cfg["tol_k"] == 1e-3  # defaults materialized
        assert cfg["grid"]["substeps"] == 0


def test_config_from_file_and_manifest_roundtrip(tmp_path, plateau_run):
    _, _, out = plateau_run
    cfg = load_config(os.path.join(out, "manifest.json"))
    assert cfg == load_config("pm1d_plateau")
    path = tmp_path / "cfg.json"
    fieldio.write_json(path, CONFIGS["pm1d_supercritical"])
    assert load_config(str(path))["name"] == "pm1d_supercritical"


def test_config_rejects_delta_outside_open_interval():
    cfg = copy.deepcopy(CONFIGS["pm1d_supercritical"])
    cfg["delta"] = 0.7
    with pytest.raises(ConfigError, match=r"delta must lie in \(0, 1/2\)"):
        validate_config(cfg)
    cfg["delta"] = 0.0
    with pytest.raises(ConfigError):
        validate_config(cfg)


@pytest.mark.parametrize("mutate, message", [
    (lambda c: c.update(dimension=3), "dimension"),
    (lambda c: c["datum"].update(name="vortex"), "unknown datum"),
    (lambda c: c.update(M=-1.0), "M must be"),
    (lambda c: c.update(schedule=[]), "at least one"),
    (lambda c: c.update(schedule=[[0.1, 0.5], [0.2, 0.5]]), "non-increasing"),
    (lambda c: c.update(schedule=[[0.1, -0.5]]), "positive"),
    (lambda c: c["grid"].update(shape=[2]), "at least 3 nodes"),
    (lambda c: c["grid"].pop("time"), "grid.time missing"),
    (lambda c: c.update(method="spectral"), "unknown method"),
])
def test_config_validation_messages(mutate, message):
    cfg = copy.deepcopy(CONFIGS["pm1d_supercritical"])
    mutate(cfg)
    with pytest.raises(ConfigError, match=message):
        validate_config(cfg)


def test_semi_implicit_is_one_dimensional():
    cfg = copy.deepcopy(CONFIGS["pm1d_plateau"])
    cfg["dimension"] = 2
    cfg["grid"]["bounds"] = [[0.0, 1.0], [0.0, 1.0]]
    cfg["grid"]["shape"] = [17, 17]
    with pytest.raises(ConfigError, match="one-dimensional"):
        validate_config(cfg)


# -- run ----------------------------------------------------------------------------


def test_supercritical_run_is_certified_no_op(tmp_path):
    status, summary = run_experiment(load_config("pm1d_supercritical"),
                                     str(tmp_path))
    assert status == 0
    assert summary["status"] == "ok"
    assert summary["residual_start"] > 0.0
    assert summary["residuals"][0] <= 0.5
    assert summary["residuals"][1] <= 0.25
    manifest = fieldio.read_json(tmp_path / "manifest.json")
    assert all(step["no_op"] for step in manifest["steps"])
    assert manifest["failures"] == []
    assert manifest["profile"]["delta"] == pytest.approx(2.5 / 7.25)


def test_plateau_run_patches_and_passes(plateau_run):
    status, summary, out = plateau_run
    assert status == 0
    assert summary["completed_steps"] == 2
    assert summary["residuals"][0] <= 0.04
    manifest = fieldio.read_json(os.path.join(out, "manifest.json"))
    assert manifest["steps"][0]["patched"] > 0
    assert manifest["steps"][1]["no_op"]
    assert manifest["iteration"]["finest_eps"] == 0.02
    names = sorted(os.listdir(out))
    assert "diagnostics.csv" in names
    for tag in ("step000", "step001", "step002"):
        for ch in ("u", "v", "du", "vt"):
            assert f"{tag}_{ch}.field" in names


def test_run_is_bit_for_bit_reproducible(plateau_cfg, plateau_run, tmp_path):
    _, _, out_a = plateau_run
    status, _ = run_experiment(plateau_cfg, str(tmp_path))
    assert status == 0
    man_a = fieldio.read_json(os.path.join(out_a, "manifest.json"))
    man_b = fieldio.read_json(tmp_path / "manifest.json")
    assert man_a == man_b  # includes every field checksum
    for rec in man_a["fields"]:
        assert fieldio.sha256_file(tmp_path / rec["file"]) == rec["sha256"]


def test_two_seeds_same_config_diverge(plateau_cfg, plateau_run, tmp_path):
    _, summary_a, out_a = plateau_run
    status, summary_b = run_experiment(plateau_cfg, str(tmp_path), seed=202)
    assert status == 0
    u_a, _ = fieldio.read_field(os.path.join(out_a, "step002_u.field"))
    u_b, _ = fieldio.read_field(tmp_path / "step002_u.field")
    assert float(np.max(np.abs(u_a - u_b))) > 0.0
    assert summary_a["status"] == summary_b["status"] == "ok"


def test_run_accepts_datum_from_field_file(tmp_path):
    cfg = copy.deepcopy(CONFIGS["pm1d_supercritical"])
    x = np.linspace(0.0, 1.0, cfg["grid"]["shape"][0])
    u0 = (2.0 / np.pi) * np.cos(np.pi * x)
    datum_path = tmp_path / "u0.field"
    fieldio.write_field(datum_path, u0, n_spatial=1)
    cfg["datum"] = {"file": str(datum_path)}
    status, summary = run_experiment(validate_config(cfg), str(tmp_path / "out"))
    assert status == 0
    assert summary["residual_start"] > 0.0


def test_infeasible_schedule_fails_with_named_certificate(tmp_path):
    cfg = copy.deepcopy(CONFIGS["pm1d_plateau"])
    cfg["schedule"] = [[0.04, 0.5], [0.005, 0.005]]
    status, summary = run_experiment(validate_config(cfg), str(tmp_path))
    assert status == 1
    assert summary["status"] == "certificate-failure"
    [failure] = summary["failures"]
    assert failure["certificate"] == "density-step"
    assert "budget infeasible" in failure["error"]
    # partial outputs still land on disk for inspection
    manifest = fieldio.read_json(tmp_path / "manifest.json")
    assert manifest["failures"] == summary["failures"]
    assert os.path.exists(tmp_path / "step001_u.field")


# -- verify -------------------------------------------------------------------------


def test_verify_quick_passes_and_is_deterministic():
    buf_a, buf_b = io.StringIO(), io.StringIO()
    assert verify_suite(level="quick", seed=0, stream=buf_a) == 0
    assert verify_suite(level="quick", seed=0, stream=buf_b) == 0
    assert buf_a.getvalue() == buf_b.getvalue()
    lines = buf_a.getvalue().strip().splitlines()
    assert len(lines) == 8
    assert all(line.startswith("[PASS]") for line in lines[:-1])
    assert lines[-1].endswith("7/7 checks passed")


# -- hull probe ---------------------------------------------------------------------


def test_hull_probe_worked_example_frame():
    # a lamination member below the delta radial floor: frame exists,
    # S_delta membership honestly reported as false
    out = hull_probe([1.0, 0.0], [0.3, 0.0], 0.3448275862068966)
    assert out["in_lamination_set"]
    assert not out["in_s_delta"]
    assert out["frame"]["t_plus"] == pytest.approx(2.0, abs=1e-10)
    assert out["frame"]["t_minus"] == pytest.approx(-2.0 / 3.0, abs=1e-10)
    assert out["graph_residual"] < 1e-12


def test_hull_probe_s_delta_member():
    out = hull_probe([2.0], [0.357129], 2.5 / 7.25)
    assert out["in_lamination_set"]
    assert out["in_s_delta"]
    assert out["s_delta_expression"] < 0.0
    assert out["graph_residual"] < 1e-10


def test_hull_probe_non_member():
    out = hull_probe([0.2, 0.0], [-0.05, 0.0], 0.3)
    assert not out["in_lamination_set"]
    assert out["frame"] is None
    assert out["graph_residual"] is None


def test_hull_probe_validates_input():
    with pytest.raises(ConfigError, match="matching lengths"):
        hull_probe([1.0, 0.0], [0.3], 0.3)
    with pytest.raises(ConfigError, match="delta"):
        hull_probe([1.0], [0.3], 0.6)


# -- report -------------------------------------------------------------------------


def test_report_renders_figures_and_table(plateau_run, tmp_path):
    _, _, out = plateau_run
    written = write_report(out, str(tmp_path))
    names = {os.path.basename(p) for p in written}
    assert names == {"fig_solution.png", "report.csv",
                     "fig_residual.png", "fig_states.png"}
    for p in written:
        assert os.path.getsize(p) > 0
    with open(tmp_path / "report.csv") as fh:
        lines = fh.read().strip().splitlines()
    assert len(lines) == 3  # header + one row per step
    assert lines[0].startswith("step,eps,eta,no_op,patched")


# -- entry point --------------------------------------------------------------------


def test_main_run_and_exit_codes(tmp_path, capsys):
    assert main(["run", "pm1d_supercritical",
                 "--out-dir", str(tmp_path)]) == 0
    summary = capsys.readouterr().out
    assert '"status": "ok"' in summary
    assert main(["run", "definitely_not_a_config"]) == 2
    err = capsys.readouterr().out
    assert "config-error" in err


def test_main_hull_probe(capsys):
    assert main(["hull-probe", "--p", "1.0", "0.0",
                 "--beta", "0.3", "0.0"]) == 0
    out = capsys.readouterr().out
    assert '"in_lamination_set": true' in out
    assert main(["hull-probe", "--p", "1.0", "--beta", "0.3",
                 "--delta", "0.9"]) == 2


def test_thread_cap_exported_before_numpy(tmp_path):
    env = dict(os.environ, CVXINT_THREADS="1")
    env.pop("OMP_NUM_THREADS", None)
    code = ("import os, cvxint; "
            "print(os.environ['OMP_NUM_THREADS'], "
            "os.environ['OPENBLAS_NUM_THREADS'])")
    proc = subprocess.run([sys.executable, "-c", code], env=env,
                          capture_output=True, text=True, check=True)
    assert proc.stdout.split() == ["1", "1"]
