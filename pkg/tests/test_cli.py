import csv
import json

import numpy as np
import pytest

from lmmscore import cli
from lmmscore.instability import TestOptions, cumulative_process
from lmmscore.scores import InformationMatrix, ScoreMatrix
from lmmscore.simulation import Scenario, generate_dataset, replicate_seed

COLUMNS = ["--response", "rt", "--fixed", "1,days", "--random", "1,days", "--cluster", "subject"]


def write_csv(path, data, aux_name="ca"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "days", "rt", aux_name])
        for i in range(data.N):
            j = data.cluster[i]
            w.writerow([f"s{j:03d}", data.X[i, 1], repr(float(data.y[i])), data.aux[j]])
    return path


@pytest.fixture(scope="module")
def shift_csv(tmp_path_factory):
    data = generate_dataset(Scenario(n=480, changing=("sigma_r^2",), d=4), replicate_seed(0, 0))
    return write_csv(tmp_path_factory.mktemp("d") / "shift.csv", data)


@pytest.fixture(scope="module")
def null_csv(tmp_path_factory):
    data = generate_dataset(Scenario(n=480), replicate_seed(0, 1))
    return write_csv(tmp_path_factory.mktemp("d") / "null.csv", data)


def run(args, capsys):
    code = cli.main([str(a) for a in args])
    out = capsys.readouterr()
    return code, out.out, out.err


def records(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_fit_report_lists_six_parameters(null_csv, tmp_path, capsys):
    code, out, _ = run(["fit", "--data", null_csv, *COLUMNS, "--out", tmp_path], capsys)
    assert code == 0
    rec = records(tmp_path / "fit.jsonl")[0]
    assert list(rec["params"]) == ["beta0", "beta1", "sigma0^2", "sigma01", "sigma1^2", "sigma_r^2"]
    assert rec["converged"] and set(rec["se_beta"]) == {"beta0", "beta1"}
    assert "sigma_r^2" in out and "loglik=" in out


def test_fit_near_exact_data_reports_noise_floor(tmp_path, capsys):
    rng = np.random.default_rng(3)
    g = np.repeat(np.arange(15), 6)
    x = np.tile(np.arange(6.0), 15)
    y = 1.0 + 2.0 * x + rng.normal(0, 1.0, 15)[g] + rng.normal(0, 1e-3, len(x))
    path = tmp_path / "exact.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["g", "x", "y"])
        w.writerows(zip(g, x, (repr(float(v)) for v in y)))
    code, _, _ = run(["fit", "--data", path, "--response", "y", "--fixed", "1,x", "--random", "1",
                      "--cluster", "g", "--out", tmp_path], capsys)
    assert code == 0
    rec = records(tmp_path / "fit.jsonl")[0]
    assert rec["params"]["sigma_r^2"] == pytest.approx(1e-6, rel=0.5)


def test_test_flags_shifted_residual_variance(shift_csv, tmp_path, capsys):
    code, out, _ = run(["test", "--data", shift_csv, *COLUMNS, "--aux", "ca", "--stat", "maxlm_o,wdm_o",
                        "--mc-reps", 5000, "--out", tmp_path], capsys)
    assert code == 0
    per = [r for r in records(tmp_path / "test.jsonl") if r.get("scope") == "parameter"]
    flagged = {r["params"][0] for r in per if r["p_value"] < 0.05}
    assert flagged == {"sigma_r^2"}
    assert "boundary terms" in out


def test_null_data_mostly_stable(null_csv, tmp_path, capsys):
    code, _, _ = run(["test", "--data", null_csv, *COLUMNS, "--aux", "ca", "--mc-reps", 5000,
                      "--out", tmp_path], capsys)
    assert code == 0
    per = [r for r in records(tmp_path / "test.jsonl") if r.get("scope") == "parameter"]
    assert sum(r["p_value"] < 0.05 for r in per) <= 2


def test_five_level_aux_reports_four_boundaries(tmp_path, capsys):
    data = generate_dataset(Scenario(n=400, levels=5), replicate_seed(2, 0))
    assert data.J == 40
    path = write_csv(tmp_path / "five.csv", data)
    code, out, _ = run(["test", "--data", path, *COLUMNS, "--aux", "ca", "--stat", "maxlm_o",
                        "--mc-reps", 2000, "--out", tmp_path], capsys)
    assert code == 0
    for rec in records(tmp_path / "test.jsonl")[1:]:
        assert len(rec["contributions"]) == 4
    assert "levels 1..4" in out


def test_output_is_deterministic(shift_csv, tmp_path, capsys):
    args = ["test", "--data", shift_csv, *COLUMNS, "--aux", "ca", "--aux-scale", "nominal", "--seed", 5]
    run([*args, "--out", tmp_path / "a"], capsys)
    run([*args, "--out", tmp_path / "b"], capsys)
    assert (tmp_path / "a" / "test.jsonl").read_bytes() == (tmp_path / "b" / "test.jsonl").read_bytes()


def test_continuous_tie_warning(shift_csv, capsys):
    code, _, err = run(["test", "--data", shift_csv, *COLUMNS, "--aux", "ca", "--aux-scale", "continuous",
                        "--stat", "dm", "--mc-reps", 1000, "--params", "sigma_r^2"], capsys)
    assert code == 0
    assert "tied" in err


def test_plot_panels_and_files(shift_csv, tmp_path, capsys):
    code, _, _ = run(["plot", "--data", shift_csv, *COLUMNS, "--aux", "ca", "--mc-reps", 2000,
                      "--out", tmp_path], capsys)
    assert code == 0
    svg = (tmp_path / "fluctuation.svg").read_text()
    assert svg.count("<rect") == 6 * 2
    assert svg.count('stroke-dasharray="4,3"') == 12
    rows = list(csv.DictReader(open(tmp_path / "fluctuation.csv")))
    crossing = {r["parameter"] for r in rows if float(r["value"]) > float(r["critical_value"])}
    assert "sigma_r^2" in crossing and "sigma01" not in crossing


def test_zero_process_plot_is_flat_below_critical():
    scores = ScoreMatrix(np.zeros((8, 2)), ["a", "b"])
    info = InformationMatrix(np.eye(2), np.eye(2), np.ones(2))
    proc = cumulative_process(scores, info, [1, 1, 2, 2, 3, 3, 4, 4], scale="ordinal")
    panels, rows = cli.plot_panels(proc, [0, 1], TestOptions(mc_reps=1000))
    assert len(panels) == 4
    for p in panels:
        solid, dashed = p.series
        assert list(solid.y) == [0.0] * 4
        assert dashed.y[0] > 0
    assert all(float(r[3]) < float(r[4]) for r in rows)


def test_usage_errors(null_csv, capsys):
    assert run(["test", "--data", null_csv], capsys)[0] == cli.EXIT_USAGE
    assert run(["frobnicate"], capsys)[0] == cli.EXIT_USAGE
    assert run(["test", "--data", null_csv, *COLUMNS], capsys)[0] == cli.EXIT_USAGE
    assert run(["test", "--data", null_csv, *COLUMNS, "--aux", "ca", "--stat", "nope"], capsys)[0] == 1
    assert run(["simulate"], capsys)[0] == cli.EXIT_USAGE


def test_data_errors_quote_rows(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text("subject,days,rt,ca\na,0,1.0,1\na,1,x,1\nb,0,2.0,2\nb,1,3.0,2\n")
    code, _, err = run(["fit", "--data", path, *COLUMNS], capsys)
    assert code == cli.EXIT_DATA
    assert "row 2" in err


def test_boundary_refusal(tmp_path, capsys):
    rng = np.random.default_rng(0)
    g = np.repeat(np.arange(20), 6)
    days = np.tile(np.arange(6.0), 20)
    path = tmp_path / "noise.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "days", "rt", "ca"])
        w.writerows(zip(g, days, rng.normal(size=len(g)), g % 4))
    code, _, err = run(["test", "--data", path, *COLUMNS, "--aux", "ca"], capsys)
    assert code == cli.EXIT_BOUNDARY
    assert "refused" in err


def test_nonconvergence_exit(null_csv, monkeypatch, capsys):
    real = cli.fit_ml

    def stalled(data):
        fit = real(data)
        fit.converged = False
        return fit

    monkeypatch.setattr(cli, "fit_ml", stalled)
    assert run(["fit", "--data", null_csv, *COLUMNS], capsys)[0] == cli.EXIT_NOT_CONVERGED
    assert run(["test", "--data", null_csv, *COLUMNS, "--aux", "ca"], capsys)[0] == cli.EXIT_NOT_CONVERGED


def test_simulate_writes_artifacts(tmp_path, capsys):
    cfg = tmp_path / "study.ini"
    cfg.write_text("[study]\nn = 480\nd = 0, 1, 2, 3, 4\nchanging = sigma_r^2\nstatistics = maxlm_o\n"
                   "tested = sigma_r^2\nreps = 2\nseed = 1\nmc_reps = 500\n")
    code, _, _ = run(["simulate", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code == 0
    lines = (tmp_path / "o" / "power.csv").read_text().splitlines()
    assert lines[0] == "scenario,n,d,param_changed,param_tested,statistic,power,se,reps"
    assert [ln.split(",")[2] for ln in lines[1:]] == ["0", "1", "2", "3", "4"]
    svg = (tmp_path / "o" / "power_sigma_r_2.svg").read_text()
    assert ">0</text>" in svg and ">4</text>" in svg


def test_simulate_bad_config_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[study]\nmode = other\n")
    code, _, err = run(["simulate", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code == cli.EXIT_USAGE and "mode" in err
