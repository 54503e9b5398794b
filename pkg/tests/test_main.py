import json

import pytest

import analysis_pipeline
from config import load_run_config
from data_model import load_dataset
from errors import DivergentChain
from main import dispatch

FAST = ["--iterations", "1200", "--burnin", "600", "--thin", "3", "--chains", "2", "--seed", "11"]


def test_validate_ok(fixture_csv, capsys):
    assert dispatch(["validate", "--input", str(fixture_csv)]) == 0
    assert "0 errores" in capsys.readouterr().out


def test_validate_reports_errors(tmp_path, fixture_csv, capsys):
    bad = tmp_path / "bad.csv"
    lines = fixture_csv.read_text(encoding="utf-8").splitlines()
    lines[1] = lines[1].replace(",0.03,SUVR", ",0,SUVR", 1)
    bad.write_text("\n".join(lines) + "\n", encoding="utf-8")

    assert dispatch(["validate", "--input", str(bad), "--json"]) == 1
    payload = json.loads(capsys.readouterr().out)
    assert payload["findings"][0]["code"] == "nonpositive_standard_error"


def test_usage_error_exit_code(capsys):
    assert dispatch(["fit", "--no-such-flag"]) == 1
    assert "Usage" in capsys.readouterr().err


def test_missing_input_is_data_error(tmp_path):
    assert dispatch(["fit", "--input", str(tmp_path / "nope.csv"), "--output-dir", str(tmp_path)]) == 1


def test_invalid_mcmc_protocol_is_config_error(fixture_csv, tmp_path):
    argv = ["fit", "--input", str(fixture_csv), "--output-dir", str(tmp_path),
            "--iterations", "1000", "--burnin", "500", "--thin", "10"]
    assert dispatch(argv) == 1


def test_sampler_failure_exit_code(fixture_csv, tmp_path, monkeypatch):
    def diverge(cfg):
        raise DivergentChain(0, 12, "psi")

    monkeypatch.setattr(analysis_pipeline, "run_fit", diverge)
    assert dispatch(["fit", "--input", str(fixture_csv), "--output-dir", str(tmp_path)]) == 2


def test_unexpected_failure_exit_code(fixture_csv, tmp_path, monkeypatch):
    def boom(cfg):
        raise KeyError("x")

    monkeypatch.setattr(analysis_pipeline, "run_fit", boom)
    assert dispatch(["fit", "--input", str(fixture_csv), "--output-dir", str(tmp_path)]) == 2


def test_convert(fixture_csv, tmp_path, capsys):
    out = tmp_path / "suvr.csv"

    assert dispatch(["convert", "--input", str(fixture_csv), "--output", str(out), "--target", "SUVR"]) == 0
    converted = load_dataset(out)
    assert sum(c.imputed_scale for c in converted.contrasts) == 6
    assert "6 con escala imputada" in capsys.readouterr().out


def test_simulate_uses_seed(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"

    assert dispatch(["simulate", "--output", str(a), "--seed", "4"]) == 0
    assert dispatch(["simulate", "--output", str(b), "--seed", "4"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert load_dataset(a).provenance == "csv:a.csv"


def test_fit_is_reproducible_across_workers(fixture_csv, tmp_path, capsys):
    one, two = tmp_path / "one", tmp_path / "two"

    assert dispatch(["fit", "--input", str(fixture_csv), "--output-dir", str(one), *FAST]) == 0
    assert "veredicto:" in capsys.readouterr().out
    assert dispatch(["fit", "--input", str(fixture_csv), "--output-dir", str(two), *FAST, "--workers", "2"]) == 0
    for name in ("summaries.csv", "band.csv", "forest.csv"):
        assert (one / name).read_bytes() == (two / name).read_bytes()
    reports = [json.loads((d / "report.json").read_text(encoding="utf-8")) for d in (one, two)]
    for r in reports:
        r["config"].pop("output_dir")
    assert reports[0] == reports[1]


def test_report_subcommand(fixture_csv, tmp_path, capsys):
    out = tmp_path / "fit"
    assert dispatch(["fit", "--input", str(fixture_csv), "--output-dir", str(out), *FAST,
                     "--psi-prior", "fixed", "--psi-fixed", "0.1"]) == 0
    capsys.readouterr()

    assert dispatch(["report", "--report", str(out / "report.json"), "--output-dir", str(tmp_path)]) == 0
    printed = capsys.readouterr().out
    assert "lambda1" in printed
    assert (tmp_path / "summaries.csv").is_file()
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert report["config"]["priors"]["psi_fixed"] == 0.1
    assert "psi" in report["diagnostics"]["degenerate"]


@pytest.mark.slow
def test_loo_subcommand(fixture_csv, tmp_path):
    argv = ["loo", "--input", str(fixture_csv), "--output-dir", str(tmp_path),
            "--iterations", "700", "--burnin", "200", "--thin", "5", "--chains", "1"]
    assert dispatch(argv) == 0
    report = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
    assert report["loo"]["metrics"]["n_records"] == 39
    assert (tmp_path / "loo_records.csv").is_file()
    forest = (tmp_path / "loo_forest.csv").read_text(encoding="utf-8").splitlines()
    assert forest[0].startswith("treatment,study_id,contrast_id,endpoint")
    assert len(forest) == 1 + 2 * 39


def test_matched_policy_drops_reach_validation_report(fixture_csv, tmp_path):
    lines = fixture_csv.read_text(encoding="utf-8").splitlines()
    lines[1] = lines[1].replace(",78,-0.22,", ",52,-0.22,", 1)
    shifted = tmp_path / "shifted.csv"
    shifted.write_text("\n".join(lines) + "\n", encoding="utf-8")
    cfg = load_run_config(overrides={"input": str(shifted), "timepoints": "matched"})

    dataset, report = analysis_pipeline.prepare_dataset(cfg)
    assert len(dataset) == 38
    dropped = [w for w in report.warnings if w.code == "timepoint_dropped"]
    assert [(w.study_id, w.contrast_id) for w in dropped] == [("FX01", "C1")]
    assert report.ok
