import csv
import math

import numpy as np
import pytest

from rcp.baselines import do_predict
from rcp.cli import main
from rcp.core import PipelineParams, RetrospectivePredictor
from rcp.data import CsvSchema, Dataset, load_csv, write_csv
from rcp.forest import ForestParams
from rcp.harness import (
    RESULT_COLUMNS,
    ConfigError,
    ExperimentConfig,
    config_from_items,
    fmt,
    load_config,
    run_experiment,
)

TINY = dict(n=(200,), reps=2, n_trees=10, n_test=100)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_config_file_and_overrides(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("# grid\nexperiment=misspec-rho\nn=200,2000\nrho_est_grid=0,0.5,1\nmin_leaf=7\ntiming=true\n")
    cfg = load_config(f, {"reps": "3", "copulas": "gaussian,gumbel"})
    assert cfg.n == (200, 2000) and cfg.rho_est_grid == (0.0, 0.5, 1.0)
    assert cfg.reps == 3 and cfg.copulas == ("gaussian", "gumbel")
    assert cfg.min_leaf == 7 and cfg.timing is True
    assert cfg.alpha == 0.1 and cfg.bootstrap_B == 100 and ExperimentConfig().reps == 50
    again = config_from_items(cfg.as_items())
    assert again == cfg


@pytest.mark.parametrize(
    "items, pattern",
    [
        ({"experimentt": "mse-grid"}, "unknown config key"),
        ({"experiment": "bogus"}, "unknown experiment"),
        ({"rho_true_grid": "0,1.5"}, "outside"),
        ({"reps": "many"}, "bad value"),
        ({"interval_variant": "wide"}, "interval_variant"),
        ({"marginals": "cauchy"}, "marginal"),
    ],
)
def test_config_errors(items, pattern):
    with pytest.raises(ConfigError, match=pattern):
        config_from_items(items)


def test_format():
    assert fmt(1 / 3) == "0.333333333"
    assert fmt(12345678912.0) == "1.23456789e+10"
    assert fmt(None) == "" and fmt(7) == "7" and fmt(True) == "1"
    assert fmt("a, b") == '"a, b"'


def test_coverage_check_rho_zero_matches_do(tmp_path):
    cfg = ExperimentConfig(experiment="coverage-check", rho_true_grid=(0.0,), output_dir=str(tmp_path), **TINY)
    res = run_experiment(cfg)
    assert not res.failed
    for rep in range(2):
        by = {r["method"]: r for r in res.rows if r["rep"] == rep}
        assert by["rcp"]["coverage"] == by["do"]["coverage"]
        assert by["rcp"]["interval_score"] == by["do"]["interval_score"]
        assert by["rcp"]["mse"] == by["do"]["mse"]
        assert by["oracle"]["gap"] == 0.0


def test_mse_grid_rows_and_summary(tmp_path):
    cfg = ExperimentConfig(experiment="mse-grid", rho_true_grid=(0.5,), output_dir=str(tmp_path), **TINY)
    run_experiment(cfg)
    header = (tmp_path / "results.csv").read_text().splitlines()[0]
    assert header == ",".join(RESULT_COLUMNS)
    rows = read_rows(tmp_path / "results.csv")
    assert {r["method"] for r in rows} == {"rcp", "rcp_misspec", "do", "cate_adj", "matching", "oracle"}
    assert len(rows) == 2 * 6
    assert all(r["wall_time_ms"] == "" and r["error"] == "" for r in rows)
    for r in rows:
        if r["method"] == "rcp_misspec":
            assert abs(float(r["rho_est"]) - 0.5) <= 0.5 + 1e-12
    # summaries are recomputable from the row-level file
    summary = {r["method"]: r for r in read_rows(tmp_path / "summary.csv")}
    for method in ("rcp", "do", "matching"):
        vals = [float(r["mse"]) for r in rows if r["method"] == method]
        assert float(summary[method]["mse_mean"]) == pytest.approx(np.mean(vals), rel=1e-8)
        assert float(summary[method]["mse_sd"]) == pytest.approx(np.std(vals, ddof=1), rel=1e-7)
    assert "shared across rho_est" in (tmp_path / "run.txt").read_text()


def test_misspec_rows_share_models(tmp_path):
    cfg = ExperimentConfig(
        experiment="misspec-rho", rho_true_grid=(0.5,), rho_est_grid=(0.0, 0.5, 1.0), output_dir=str(tmp_path), **TINY
    )
    res = run_experiment(cfg)
    rcp = [r for r in res.rows if r["method"] == "rcp"]
    assert [r["rho_est"] for r in rcp] == [0.0, 0.5, 1.0] * 2
    assert len({r["seed"] for r in rcp}) == 2


def test_nonidentifiability_side_file(tmp_path):
    cfg = ExperimentConfig(experiment="nonidentifiability", output_dir=str(tmp_path), **TINY)
    res = run_experiment(cfg)
    side = read_rows(tmp_path / "nonidentifiability.csv")
    assert len(side) == 2
    assert float(side[0]["oracle_diff"]) == pytest.approx(2.4, abs=1e-6)
    assert {r["rho_true"] for r in res.rows} == {0.2, 0.8}


def test_deterministic_and_worker_independent(tmp_path):
    base = dict(experiment="interval-grid", rho_true_grid=(0.0, 0.9), bootstrap_B=3, **TINY)
    paths = []
    for i, workers in enumerate((1, 1, 2)):
        out = tmp_path / f"run{i}"
        run_experiment(ExperimentConfig(output_dir=str(out), workers=workers, **base))
        paths.append(out / "results.csv")
    first = paths[0].read_bytes()
    assert all(p.read_bytes() == first for p in paths[1:])


def test_cli_experiment_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "ok.cfg"
    cfg.write_text("experiment=coverage-check\nn=200\nreps=1\nrho_true_grid=0.5\nn_trees=5\nn_test=50\n")
    assert main(["experiment", "run", str(cfg), "--output-dir", str(tmp_path / "a")]) == 0
    assert (tmp_path / "a" / "results.csv").exists()
    bad = tmp_path / "bad.cfg"
    bad.write_text("experiment=non-gauss\nn=200\nreps=1\nrho_true_grid=-0.5,0.5\ncopulas=gumbel\nn_trees=5\nn_test=50\n")
    assert main(["experiment", "run", str(bad), "--output-dir", str(tmp_path / "b")]) == 3
    rows = read_rows(tmp_path / "b" / "results.csv")
    failed = [r for r in rows if r["error"]]
    assert len(failed) == 1 and "Gumbel" in failed[0]["error"] and failed[0]["rho_true"] == "-0.5"
    assert any(r["method"] == "rcp" for r in rows)
    assert main(["experiment", "run", str(tmp_path / "missing.cfg")]) == 1
    assert main(["experiment", "run", str(cfg), "--set", "reps"]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["experiment"])
    assert exc.value.code == 1


@pytest.fixture(scope="module")
def csv_pair(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--n", "300", "--rho", "0.6", "--seed", "1", "--out", str(d / "train.csv")]) == 0
    assert main(["generate", "--n", "12", "--rho", "0.6", "--seed", "2", "--out", str(d / "query.csv")]) == 0
    return d


PREDICT = ["--x-cols", "x1", "--t-col", "t", "--y-col", "y", "--n-trees", "10", "--seed", "4"]


def test_generate_writes_metadata(csv_pair):
    meta = (csv_pair / "train.csv.meta").read_text()
    assert "rho_true=0.6" in meta and "seed=1" in meta
    ds = load_csv(csv_pair / "train.csv", CsvSchema(["x1"], "t", "y", "y_cf"))
    assert ds.n == 300


def test_predict_rho_zero_is_do(csv_pair):
    out = csv_pair / "p0.csv"
    args = ["predict", "--train", str(csv_pair / "train.csv"), "--query", str(csv_pair / "query.csv")]
    assert main(args + ["--rho", "0", "--variant", "c_rho", "--out", str(out)] + PREDICT) == 0
    rows = read_rows(out)
    assert len(rows) == 12
    train = load_csv(csv_pair / "train.csv", CsvSchema(["x1"], "t", "y"))
    query = load_csv(csv_pair / "query.csv", CsvSchema(["x1"], "t", "y"))
    params = PipelineParams(forest=ForestParams(n_trees=10, min_leaf="auto", seed=4), seed=4)
    model = RetrospectivePredictor(params).fit(train)
    do = do_predict(model.arm0, model.arm1, query.covariates, query.treatment)
    np.testing.assert_allclose([float(r["point"]) for r in rows], do.point, rtol=1e-8)
    np.testing.assert_allclose([float(r["lower"]) for r in rows], do.interval[0], rtol=1e-8)
    assert all(r["lower_ci"] == "" and r["corrected"] == "0" for r in rows)


def test_predict_grid_and_auto(csv_pair):
    out = csv_pair / "grid.csv"
    args = ["predict", "--train", str(csv_pair / "train.csv"), "--query", str(csv_pair / "query.csv")]
    assert main(args + ["--rho-grid", "0,0.25,0.5,0.75,1", "--bootstrap-b", "3", "--cf-col", "y_cf", "--out", str(out)] + PREDICT) == 0
    rows = read_rows(out)
    assert [float(r["rho"]) for r in rows[::12]] == [0, 0.25, 0.5, 0.75, 1]
    assert len(rows) == 60 and "y_cf" in rows[0]
    corrected = {float(r["rho"]): r["corrected"] for r in rows}
    assert corrected == {0: "0", 0.25: "0", 0.5: "0", 0.75: "1", 1: "1"}
    assert main(args + ["--rho", "0.7", "--bootstrap-b", "3", "--out", str(out)] + PREDICT) == 0
    rows = read_rows(out)
    assert all(r["corrected"] == "1" and float(r["lower_ci"]) <= float(r["lower"]) for r in rows)


def test_predict_errors(csv_pair, tmp_path, capsys):
    base = ["predict", "--train", str(csv_pair / "train.csv"), "--query", str(csv_pair / "query.csv"), "--out", str(tmp_path / "o.csv")]
    assert main(base + ["--rho", "1.5"] + PREDICT) == 1
    assert main(base + PREDICT) == 1
    assert main(base + ["--rho", "0.2", "--x-cols", "nope", "--t-col", "t", "--y-col", "y"]) == 2
    assert "not in header" in capsys.readouterr().err
    bad = tmp_path / "bad.csv"
    bad.write_text("x1,t,y\n0.1,0,1\n0.2,3,1\n")
    assert main(["predict", "--train", str(bad), "--query", str(bad), "--rho", "0", "--out", str(tmp_path / "o.csv")] + PREDICT) == 2
    assert "row 2" in capsys.readouterr().err


def test_predict_degenerate_interval(tmp_path, capsys):
    x = np.linspace(0, 1, 60)[:, None]
    ds = Dataset(x, [0, 1] * 30, np.full(60, 4.0))
    write_csv(ds, tmp_path / "flat.csv")
    args = ["predict", "--train", str(tmp_path / "flat.csv"), "--query", str(tmp_path / "flat.csv"),
            "--rho", "0.3", "--out", str(tmp_path / "o.csv")] + PREDICT
    assert main(args) == 2
    assert "degenerate-interval" in capsys.readouterr().err
    assert main(args + ["--lambda-one"]) == 0
    rows = read_rows(tmp_path / "o.csv")
    assert all(float(r["lambda"]) == 1.0 and float(r["point"]) == 4.0 for r in rows)
