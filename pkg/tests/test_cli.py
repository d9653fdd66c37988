from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from latentps.cli import EXIT_CONVERGENCE, EXIT_OK, EXIT_VALIDATION, RunManifest, main, sha256_file

CONFIG = """
[generator]
n_blocks = 2
teachers_per_school = 2
students_per_teacher = 6
n_sections = 6
mean_sections = 4.0
seed = 2

[sampler]
n_chains = 2
n_warmup = 100
n_draws = 60

[checks]
n_reps = 2
q3_reps = 10
families = ["rasch"]
"""


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "c.toml").write_text(CONFIG)
    assert run("simulate", "--config", root / "c.toml", "--out-dir", root / "sim") == EXIT_OK
    code = run("fit", "--config", root / "c.toml", "--out-dir", root / "fit",
               "--students", root / "sim/students.csv", "--mastery", root / "sim/mastery.csv",
               "--allow-nonconverged")
    assert code == EXIT_OK
    return root


def _kv(path):
    return dict(line.split("=", 1) for line in Path(path).read_text().splitlines())


def test_simulate_outputs_match_config(work):
    sim = work / "sim"
    for name in ("students.csv", "mastery.csv", "truth.csv", "truth_params.json", "data_report.txt",
                 "config.toml", "manifest.json"):
        assert (sim / name).exists(), name
    kv = _kv(sim / "data_report.kv")
    # 2 blocks x 2 schools x 2 teachers x 6 students
    assert kv["students"] == "48" and kv["blocks"] == "2" and kv["teachers"] == "8"
    assert kv["sections"] == "6"
    with open(sim / "mastery.csv") as fh:
        assert sum(1 for _ in fh) - 1 == int(kv["records"])


def test_simulate_is_byte_identical(work, tmp_path):
    assert run("simulate", "--config", work / "c.toml", "--out-dir", tmp_path) == EXIT_OK
    for name in ("students.csv", "mastery.csv", "truth.csv"):
        assert sha256_file(tmp_path / name) == sha256_file(work / "sim" / name)
    assert run("simulate", "--config", work / "c.toml", "--out-dir", tmp_path / "b", "--seed", 9) == 0
    assert sha256_file(tmp_path / "b/students.csv") != sha256_file(tmp_path / "students.csv")


def test_fit_outputs_and_manifest(work):
    fit = work / "fit"
    for name in ("draws.csv", "posterior.json", "summary.csv", "diagnostics.csv", "fit_info.json"):
        assert (fit / name).exists(), name
    man = RunManifest.read(fit / "manifest.json")
    assert man.command == "fit" and man.status == "ok"
    assert str(work / "sim/students.csv") in man.inputs
    assert man.verify() == []
    header = (fit / "draws.csv").read_text().splitlines()[0].split(",")
    assert header[:2] == ["chain", "iteration"] and "b1" in header and "eta[S00]" in header


def test_fit_rerun_from_manifest_is_identical(work, tmp_path):
    man = RunManifest.read(work / "fit" / "manifest.json")
    argv = list(man.argv)
    argv[argv.index("--out-dir") + 1] = str(tmp_path)
    assert main(argv) == EXIT_OK
    assert sha256_file(tmp_path / "draws.csv") == sha256_file(work / "fit/draws.csv")


def test_parallel_chains_identical(work, tmp_path):
    args = ["fit", "--config", work / "c.toml", "--students", work / "sim/students.csv",
            "--mastery", work / "sim/mastery.csv", "--allow-nonconverged"]
    assert run(*args, "--out-dir", tmp_path / "par", "--jobs", 2) == EXIT_OK
    assert sha256_file(tmp_path / "par/draws.csv") == sha256_file(work / "fit/draws.csv")


def test_mbar_model_runs(work, tmp_path):
    code = run("fit", "--config", work / "c.toml", "--out-dir", tmp_path, "--model", "mbar",
               "--students", work / "sim/students.csv", "--mastery", work / "sim/mastery.csv",
               "--allow-nonconverged", "--draws", 30, "--warmup", 50)
    assert code == EXIT_OK
    names = (tmp_path / "draws.csv").read_text().splitlines()[0].split(",")
    assert "alpha_M" in names and not any(n.startswith("delta") for n in names)


def test_diagnose_and_summarize(work, tmp_path):
    assert run("diagnose", "--fit-dir", work / "fit", "--out-dir", tmp_path, "--allow-nonconverged") == 0
    assert (tmp_path / "diagnostics.txt").exists()
    assert run("summarize", "--fit-dir", work / "fit", "--out-dir", tmp_path) == 0
    with open(tmp_path / "summary.csv") as fh:
        rows = {r["parameter"]: r for r in csv.DictReader(fh)}
    assert "b1" in rows and "slope_iqr" in rows
    draws = np.loadtxt(work / "fit/draws.csv", delimiter=",", skiprows=1)
    col = (work / "fit/draws.csv").read_text().splitlines()[0].split(",").index("b1")
    assert float(rows["b1"]["mean"]) == pytest.approx(draws[:, col].mean(), rel=1e-12)


def test_two_stage(work, tmp_path):
    assert run("two-stage", "--fit-dir", work / "fit", "--out-dir", tmp_path, "--n-eta", 8) == 0
    lines = (tmp_path / "stage2_fits.csv").read_text().splitlines()
    assert len(lines) == 9
    assert "interaction mean" in (tmp_path / "stage2_pooled.txt").read_text()


def test_ppc(work, tmp_path):
    assert run("ppc", "--fit-dir", work / "fit", "--out-dir", tmp_path, "--n-rep", 100) == 0
    assert (tmp_path / "q3.csv").exists() and (tmp_path / "q3_summary.txt").exists()


def test_figures_line_count_and_ols(work, tmp_path):
    code = run("figures", "--fit-dir", work / "fit", "--out-dir", tmp_path, "--n-lines", 5,
               "--grid", 7, "--draw", 3)
    assert code == EXIT_OK
    lines = (tmp_path / "tau_lines.csv").read_text().splitlines()
    assert len(lines) == 1 + 5 * 7
    with open(tmp_path / "scatter.csv") as fh:
        pts = list(csv.DictReader(fh))
    with open(tmp_path / "scatter_lines.csv") as fh:
        fitted = {int(r["z"]): r for r in csv.DictReader(fh)}
    for arm in (0, 1):
        x = np.array([float(p["eta"]) for p in pts if int(p["z"]) == arm])
        y = np.array([float(p["y"]) for p in pts if int(p["z"]) == arm])
        slope, intercept = np.polyfit(x, y, 1)
        assert float(fitted[arm]["slope"]) == pytest.approx(slope, abs=1e-9)
        assert float(fitted[arm]["intercept"]) == pytest.approx(intercept, abs=1e-9)


def test_placebo_and_panels(work, tmp_path):
    code = run("placebo", "--fit-dir", work / "fit", "--out-dir", tmp_path / "pl",
               "--warmup", 60, "--draws", 40, "--chains", 1)
    assert code == EXIT_OK
    with open(tmp_path / "pl/placebo.csv") as fh:
        cells = list(csv.DictReader(fh))
    assert [r["kind"] for r in cells] == ["zero", "random", "linear", "quadratic"]
    assert all(r["error"] == "" for r in cells)
    code = run("figures", "--fit-dir", work / "fit", "--out-dir", tmp_path / "fig",
               "--placebo-dir", tmp_path / "pl", "--n-lines", 2, "--grid", 3)
    assert code == EXIT_OK
    rows = (tmp_path / "fig/placebo_panels.csv").read_text().splitlines()
    assert len(rows) == 1 + 4 * 24  # one point per treated student per cell


def test_recovery_and_sensitivity(work, tmp_path):
    assert run("recovery", "--config", work / "c.toml", "--out-dir", tmp_path / "r",
               "--warmup", 50, "--draws", 30, "--chains", 1) == EXIT_OK
    # long format: one row per replication and parameter
    assert len((tmp_path / "r/recovery_reps.csv").read_text().splitlines()) == 1 + 2 * 9
    assert run("sensitivity", "--config", work / "c.toml", "--out-dir", tmp_path / "s",
               "--students", work / "sim/students.csv", "--mastery", work / "sim/mastery.csv",
               "--warmup", 50, "--draws", 30, "--chains", 1) == EXIT_OK
    assert len((tmp_path / "s/sensitivity.csv").read_text().splitlines()) == 2


def test_exit_codes(work, tmp_path):
    assert run("fit", "--config", work / "c.toml", "--out-dir", tmp_path / "a",
               "--students", work / "sim/students.csv", "--mastery", tmp_path / "nope.csv") == EXIT_VALIDATION
    bad = tmp_path / "bad.toml"
    bad.write_text("[sampler]\nn_chains = 'two'\n")
    assert run("simulate", "--config", bad, "--out-dir", tmp_path / "b") == EXIT_VALIDATION
    assert run("diagnose", "--fit-dir", tmp_path, "--out-dir", tmp_path / "c") == EXIT_VALIDATION
    # a few warmup iterations cannot converge
    code = run("fit", "--config", work / "c.toml", "--out-dir", tmp_path / "d", "--warmup", 3,
               "--draws", 8, "--students", work / "sim/students.csv",
               "--mastery", work / "sim/mastery.csv")
    assert code == EXIT_CONVERGENCE
    man = json.loads((tmp_path / "d/manifest.json").read_text())
    assert man["status"] == "nonconverged"
    assert (tmp_path / "d/draws.csv").exists()


def test_changed_input_is_rejected(work, tmp_path):
    import shutil
    shutil.copytree(work / "sim", tmp_path / "sim")
    args = ["fit", "--config", work / "c.toml", "--students", tmp_path / "sim/students.csv",
            "--mastery", tmp_path / "sim/mastery.csv", "--allow-nonconverged", "--draws", 10,
            "--warmup", 20, "--out-dir", tmp_path / "fit"]
    assert run(*args) == EXIT_OK
    with open(tmp_path / "sim/mastery.csv", "a") as fh:
        fh.write("S00,sec005,0\n")
    assert run("summarize", "--fit-dir", tmp_path / "fit", "--out-dir", tmp_path / "o") == EXIT_VALIDATION
