import json
from pathlib import Path

import numpy as np
import pytest

from lmmscore.estimator import fit_ml
from lmmscore.likelihood import fixed_effect_covariance
from lmmscore.simulation import (
    CSV_HEADER,
    PowerRow,
    PowerTable,
    Scenario,
    ScenarioError,
    StudyConfig,
    asymptotic_scale,
    emit_power_artifacts,
    generate_dataset,
    group_params,
    load_study_config,
    replicate_seed,
    run_power_study,
)

FIXTURES = json.loads((Path(__file__).parent / "fixtures" / "regression.json").read_text())


def dense_information(sc: Scenario) -> np.ndarray:
    """Expected information from dense N x N matrices (independent of the batched code)."""
    X, Z, g, _ = sc.design()
    low, _ = group_params(sc)
    same = g[:, None] == g[None, :]
    V = (Z @ low.D @ Z.T) * same + low.sigma_r2 * np.eye(len(g))
    Vi = np.linalg.inv(V)
    dVs = []
    for a, b in ((0, 0), (1, 0), (1, 1)):
        dV = np.outer(Z[:, a], Z[:, b]) * same
        dVs.append(dV if a == b else dV + dV.T)
    dVs.append(np.eye(len(g)))
    p = X.shape[1]
    info = np.zeros((p + 4, p + 4))
    info[:p, :p] = X.T @ Vi @ X
    for i in range(4):
        for j in range(4):
            info[p + i, p + j] = 0.5 * np.trace(Vi @ dVs[i] @ Vi @ dVs[j])
    return info


def test_scale_shrinks_with_root_n():
    s120 = asymptotic_scale(Scenario(n=120, scale_kind="se"))
    s480 = asymptotic_scale(Scenario(n=480, scale_kind="se"))
    for name in s120:
        assert s120[name] / s480[name] == pytest.approx(2.0, rel=1e-10)


@pytest.mark.parametrize("mode", ["power", "demo"])
def test_scale_matches_dense_oracle(mode):
    sc = Scenario(n=120, mode=mode, scale_kind="se")
    oracle = np.sqrt(np.diag(np.linalg.inv(dense_information(sc))))
    got = np.array(list(asymptotic_scale(sc).values()))
    assert np.max(np.abs(got - oracle) / oracle) < 1e-8


def test_scale_kinds_are_consistent():
    base = asymptotic_scale(Scenario(n=480, scale_kind="se"))
    unit = asymptotic_scale(Scenario(n=480, scale_kind="unit_se"))
    var = asymptotic_scale(Scenario(n=480, scale_kind="variance"))
    for name in base:
        assert unit[name] == pytest.approx(base[name] * np.sqrt(48), rel=1e-12)
        assert var[name] == pytest.approx(base[name] ** 2, rel=1e-12)


def test_residual_unit_scale_closed_form():
    # balanced clusters: per-cluster inverse information of sigma_r^2 is 2 sigma_r^4 / (n_j - q)
    unit = asymptotic_scale(Scenario(n=480, scale_kind="unit_se"))
    assert unit["sigma_r^2"] == pytest.approx(654.9 * np.sqrt(2 / 8), rel=1e-10)


def test_residual_scale_regression_fixture():
    value = asymptotic_scale(Scenario(n=480, scale_kind="se"))["sigma_r^2"]
    assert np.isfinite(value) and value > 0
    assert value == pytest.approx(FIXTURES["sigma_r2_se_n480"], rel=1e-9)


def test_small_design_shape():
    sc = Scenario(n=120)
    data = generate_dataset(sc, 0)
    assert data.J == 12 and np.all(data.sizes == 10)
    assert data.aux.tolist() == [1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4]


def test_fixed_shift_is_exact():
    sc = Scenario(n=480, changing=("beta1",), d=4)
    low, high = group_params(sc)
    assert high.beta[1] - low.beta[1] == pytest.approx(4 * asymptotic_scale(sc)["beta1"], rel=1e-14)
    np.testing.assert_array_equal(low.D, high.D)


def test_null_refit_recovers_base():
    sc = Scenario(n=960)
    data = generate_dataset(sc, 12)
    fit = fit_ml(data)
    se = np.sqrt(np.diag(fixed_effect_covariance(fit, data)))
    assert np.all(np.abs(fit.params.beta - [251.4, 10.47]) < 4 * se)
    assert fit.params.sigma_r2 == pytest.approx(654.9, rel=0.15)


def test_slope_variance_shift_spreads_trajectories():
    sc = Scenario(n=480, changing=("sigma1^2",), d=4)
    ratios = []
    for rep in range(5):
        data = generate_dataset(sc, replicate_seed(5, rep))
        slopes = np.array([np.polyfit(data.X[data.cluster == j, 1], data.y[data.cluster == j], 1)[0]
                           for j in range(data.J)])
        ratios.append(slopes[data.aux >= 2].var() / slopes[data.aux < 2].var())
    assert np.mean(ratios) > 1


def test_generation_is_seed_deterministic():
    sc = Scenario(n=120, changing=("sigma_r^2",), d=2)
    a, b = generate_dataset(sc, replicate_seed(1, 3)), generate_dataset(sc, replicate_seed(1, 3))
    np.testing.assert_array_equal(a.y, b.y)
    assert not np.array_equal(a.y, generate_dataset(sc, replicate_seed(1, 4)).y)


@pytest.mark.parametrize("kwargs", [
    dict(n=125),
    dict(n=100),
    dict(changing=("gamma",)),
    dict(changing=("sigma01",), d=4, scale_kind="unit_se"),
    dict(mode="other"),
    dict(scale_kind="other"),
    dict(change_level=1),
])
def test_invalid_scenarios(kwargs):
    with pytest.raises(ScenarioError):
        Scenario(**kwargs)


def test_mode_default_scales():
    assert Scenario().scale_kind == "unit_se"
    assert Scenario(mode="demo").scale_kind == "variance"


def test_power_study_is_deterministic_and_bounded():
    cells = [Scenario(n=120, changing=("sigma_r^2",), d=d, reps=6, seed=4) for d in (0, 4)]
    a = run_power_study(cells, ("maxlm_o", "lm_uo"), tested=("sigma_r^2", "all"))
    b = run_power_study(cells, ("maxlm_o", "lm_uo"), tested=("sigma_r^2", "all"))
    assert a.to_csv() == b.to_csv()
    assert all(0 <= r.power <= 1 for r in a.rows)
    for sc in cells:
        dropped = a.failures[(sc.key, sc.n, sc.d)]
        used = a.get("maxlm_o", "sigma_r^2", d=sc.d).reps
        assert dropped + used == sc.reps


def test_power_study_independent_of_workers():
    cells = [Scenario(n=120, changing=("beta1",), d=d, reps=3, seed=9) for d in (0, 2)]
    serial = run_power_study(cells, ("wdm_o",), tested=("beta1",))
    parallel = run_power_study(cells, ("wdm_o",), tested=("beta1",), workers=2)
    assert serial.to_csv() == parallel.to_csv()


def test_demo_mode_records_wald_tests():
    table = run_power_study([Scenario(n=120, mode="demo", reps=3, seed=1)], ("wald",))
    assert {(r.statistic, r.param_tested) for r in table.rows} == {("wald", "beta1"), ("wald", "beta3")}


def test_csv_header_and_empty_table(tmp_path):
    paths = emit_power_artifacts(PowerTable(), tmp_path)
    assert paths == [tmp_path / "power.csv"]
    assert (tmp_path / "power.csv").read_text() == ",".join(CSV_HEADER) + "\n"


def synthetic_table() -> PowerTable:
    rows = []
    for label in ("beta1", "sigma0^2", "sigma_r^2", "beta1+sigma_r^2"):
        for n in (120, 480, 960):
            for d in range(5):
                for tested in ("beta0", "beta1", "sigma0^2", "sigma01", "sigma1^2", "sigma_r^2"):
                    for stat in ("maxlm_o", "wdm_o", "lm_uo"):
                        power = min(1.0, 0.05 + 0.2 * d * (tested in label))
                        rows.append(PowerRow(label, n, float(d), label, tested, stat, power, 0.01, 200))
    return PowerTable(rows)


def test_full_grid_gives_four_figures(tmp_path):
    table = synthetic_table()
    paths = emit_power_artifacts(table, tmp_path, seed=3)
    svgs = [p for p in paths if p.suffix == ".svg"]
    assert len(svgs) == 4
    text = svgs[0].read_text()
    assert text.count("<rect") == 18
    assert '<entry key="seed">3</entry>' in text
    # x axis spans the d grid
    assert ">0</text>" in text and ">4</text>" in text
    lines = (tmp_path / "power.csv").read_text().splitlines()
    assert len(lines) == 1 + len(table.rows)


def test_artifacts_are_byte_deterministic(tmp_path):
    emit_power_artifacts(synthetic_table(), tmp_path / "a", seed=1)
    emit_power_artifacts(synthetic_table(), tmp_path / "b", seed=1)
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_load_study_config(tmp_path):
    path = tmp_path / "study.ini"
    path.write_text(
        "[study]\nmode = power\nn = 120, 480\nd = 0, 2\n"
        "changing = beta1; beta1 + sigma_r^2\nstatistics = maxlm_o\nreps = 7\nseed = 5\n"
    )
    cfg = load_study_config(path)
    assert cfg.changing == (("beta1",), ("beta1", "sigma_r^2"))
    scenarios = cfg.scenarios()
    assert len(scenarios) == 8
    assert {s.reps for s in scenarios} == {7} and {s.seed for s in scenarios} == {5}


def test_demo_config_skips_inadmissible_cells(tmp_path):
    path = tmp_path / "demo.ini"
    path.write_text("[study]\nmode = demo\nn = 480\nd = 0, 4\n")
    valid, skipped = load_study_config(path).partition()
    assert len(skipped) == 1 and "sigma01" in skipped[0]
    assert {s.label for s in valid} == {"demo"}
    assert StudyConfig(mode="demo").scale_kind == ""


def test_missing_study_section(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[other]\nx = 1\n")
    with pytest.raises(ValueError):
        load_study_config(path)


def test_config_inline_comments(tmp_path):
    path = tmp_path / "study.ini"
    path.write_text("[study]\nmode = demo   # or power\nn = 480\nscale = variance  # se | unit_se\n")
    cfg = load_study_config(path)
    assert cfg.mode == "demo" and cfg.scale_kind == "variance"


@pytest.mark.parametrize("body", ["mode = other\n", "scale = other\n", "reps = many\n", "n = \n"])
def test_invalid_config_values(tmp_path, body):
    path = tmp_path / "bad.ini"
    path.write_text("[study]\n" + body)
    with pytest.raises(ScenarioError):
        load_study_config(path)
