import csv
import json
import math

import numpy as np
import pytest

from dpconformal.experiments import (ExperimentConfig, RESULT_COLUMNS,
                                     SERIES_COLUMNS, load_config,
                                     run_experiment, s5_quantile_fixtures,
                                     train_plan)


def tiny_scaling_config(tmp_path=None, trials=2, **kw):
    base = dict(
        experiment="scaling", trials=trials, seed=500,
        epsilons=(1.0,), sample_sizes=(600,), allocations=(0.5,),
        methods=("dpscp_a", "split_cp"),
        generator={"dim": 6, "classes": 3, "class_sep": 1.0, "flip_y": 0.01,
                   "test_size": 300},
        train={"model": "softmax_linear", "epochs": 5, "batch_size": 32,
               "learning_rate": 0.05, "clip_norm": 1.0},
        quantile={"steps": 20, "beta": 0.05, "buffer": 10},
    )
    if tmp_path is not None:
        base["output"] = str(tmp_path / "results.csv")
    base.update(kw)
    return ExperimentConfig(**base)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_train_plan():
    rate, steps = train_plan(2000, 50, 32)
    assert rate == pytest.approx(32 / 2000)
    assert steps == 50 * math.ceil(2000 / 32)
    assert train_plan(10, 2, 32) == (1.0, 2)


def test_result_and_series_headers(tmp_path):
    cfg = tiny_scaling_config(tmp_path)
    run_experiment(cfg)
    with open(tmp_path / "results.csv") as fh:
        header = fh.readline().strip()
    assert header == ",".join(RESULT_COLUMNS)
    with open(tmp_path / "results_series.csv") as fh:
        header = fh.readline().strip()
    assert header == ",".join(SERIES_COLUMNS)


def test_rows_per_cell_and_aggregates(tmp_path):
    cfg = tiny_scaling_config(tmp_path, trials=3)
    rows = run_experiment(cfg)
    # 2 methods x (3 trials + mean + sd)
    assert len(rows) == 2 * 5
    trial_rows = [r for r in rows if r["status"] == "ok"]
    assert len(trial_rows) == 6
    assert {r["trial"] for r in rows if r["status"] == "aggregate"} == {
        "mean", "sd"}


def test_aggregates_recomputable_from_per_trial_rows(tmp_path):
    cfg = tiny_scaling_config(tmp_path, trials=4)
    run_experiment(cfg)
    rows = read_rows(tmp_path / "results.csv")
    for method in ("dpscp_a", "split_cp"):
        cell = [r for r in rows if r["method"] == method]
        trials = [r for r in cell if r["status"] == "ok"]
        mean_row = next(r for r in cell if r["trial"] == "mean")
        sd_row = next(r for r in cell if r["trial"] == "sd")
        for col in ("coverage", "efficiency", "q_hat"):
            vals = [float(r[col]) for r in trials]
            assert abs(float(mean_row[col]) - np.mean(vals)) < 1e-12
            assert abs(float(sd_row[col]) - np.std(vals, ddof=1)) < 1e-12


def test_seed_discipline_prefix(tmp_path):
    short = run_experiment(tiny_scaling_config(tmp_path, trials=2))
    longer = run_experiment(tiny_scaling_config(tmp_path, trials=3))
    short_trials = [r for r in short if r["status"] == "ok"]
    longer_trials = [r for r in longer if r["status"] == "ok"]
    by_key_long = {(r["method"], r["trial"]): r for r in longer_trials}
    for r in short_trials:
        assert r == by_key_long[(r["method"], r["trial"])]
    assert all(int(r["seed"]) == 500 + int(r["trial"]) for r in short_trials)


def test_byte_identical_reruns_and_parallel(tmp_path):
    cfg = tiny_scaling_config(tmp_path)
    run_experiment(cfg)
    first = (tmp_path / "results.csv").read_bytes()
    first_series = (tmp_path / "results_series.csv").read_bytes()
    run_experiment(cfg)
    assert (tmp_path / "results.csv").read_bytes() == first
    run_experiment(cfg, jobs=2)
    assert (tmp_path / "results.csv").read_bytes() == first
    assert (tmp_path / "results_series.csv").read_bytes() == first_series


def test_failed_trial_becomes_failed_row(tmp_path):
    cfg = ExperimentConfig(
        experiment="realdata", trials=1, seed=1, epsilons=(1.0,),
        allocations=(0.5,), methods=("split_cp",),
        csv_source={"path": str(tmp_path / "missing.csv")},
        output=str(tmp_path / "out.csv"),
    )
    rows = run_experiment(cfg)
    assert rows[0]["status"].startswith("failed:")
    assert rows[0]["coverage"] == ""
    # aggregates survive with empty metrics
    assert rows[1]["trial"] == "mean" and rows[1]["coverage"] == ""


def test_realdata_experiment_runs_from_csv(tmp_path):
    rng = np.random.default_rng(12)
    x = rng.standard_normal((400, 3))
    y = x @ np.array([2.0, -1.0, 0.5]) + 0.2 * rng.standard_normal(400)
    path = tmp_path / "housing.csv"
    with open(path, "w") as fh:
        fh.write("f0,f1,f2,target\n")
        for row, target in zip(x, y):
            fh.write(",".join(f"{v:.8f}" for v in row) + f",{target:.8f}\n")
    cfg = ExperimentConfig(
        experiment="realdata", trials=2, seed=9, epsilons=(2.0,),
        allocations=(0.5,), methods=("split_cp", "dpscp_a"),
        csv_source={"path": str(path), "label_column": 3, "task": "regression",
                    "test_fraction": 0.25},
        train={"model": "linear_regression", "epochs": 30, "batch_size": 32,
               "learning_rate": 0.05, "clip_norm": 1.0},
        quantile={"steps": 20, "beta": 0.05, "buffer": 10},
        output=str(tmp_path / "rd.csv"),
    )
    rows = run_experiment(cfg)
    ok = [r for r in rows if r["status"] == "ok"]
    assert len(ok) == 4
    assert all(r["informativeness"] == "" for r in ok)
    assert all(float(r["coverage"]) > 0.5 for r in ok)


def test_stability_series_layout(tmp_path):
    cfg = ExperimentConfig(
        experiment="stability", trials=2, seed=3, epsilons=(1.0, 2.0),
        sample_sizes=(200,), generator={"dim": 5},
        train={"rate": 0.05, "steps": 30, "learning_rate": 0.05,
               "clip_norm": 1.0},
        output=str(tmp_path / "stab.csv"),
    )
    rows = run_experiment(cfg)
    ok = [r for r in rows if r["status"] == "ok"]
    assert len(ok) == 4  # 2 eps x 2 trials
    series = read_rows(tmp_path / "stab_series.csv")
    metrics = {r["metric"] for r in series}
    assert metrics == {"gap/eps=1", "error/eps=1", "gap/eps=2", "error/eps=2"}
    per_metric = sum(1 for r in series if r["metric"] == "gap/eps=1")
    assert per_metric == 2 * 31  # trials x (steps + 1)
    # shared trial seeds pair the masks across epsilon cells, so the
    # divergence step pattern matches
    gap1 = [float(r["value"]) for r in series
            if r["metric"] == "gap/eps=1" and r["trial"] == "0"]
    gap2 = [float(r["value"]) for r in series
            if r["metric"] == "gap/eps=2" and r["trial"] == "0"]
    first1 = next((i for i, g in enumerate(gap1) if g > 0), None)
    first2 = next((i for i, g in enumerate(gap2) if g > 0), None)
    assert first1 == first2


def test_stability_forced_extra_off_zeroes_gap_column(tmp_path):
    cfg = ExperimentConfig(
        experiment="stability", trials=2, seed=3, epsilons=(1.0,),
        sample_sizes=(200,), generator={"dim": 5},
        train={"rate": 0.05, "steps": 30, "learning_rate": 0.05,
               "clip_norm": 1.0, "force_extra_off": True},
        output=str(tmp_path / "stab.csv"),
    )
    run_experiment(cfg)
    series = read_rows(tmp_path / "stab_series.csv")
    gaps = [float(r["value"]) for r in series if r["metric"].startswith("gap")]
    assert gaps and all(g == 0.0 for g in gaps)


def test_quantile_demo_outputs(tmp_path):
    cfg = ExperimentConfig(experiment="quantile_demo",
                           output=str(tmp_path / "demo.csv"))
    rows = run_experiment(cfg)
    ok = {(r["method"], r["p"]): r for r in rows if r["status"] == "ok"}
    assert float(ok[("midpoint", "tie_jump")]["q_hat"]) < 10.0
    assert float(ok[("buffered_right", "tie_jump")]["q_hat"]) >= 10.0
    assert float(ok[("midpoint", "no_ties")]["q_hat"]) < 9.0
    assert float(ok[("buffered_right", "no_ties")]["q_hat"]) >= 9.0
    fixtures = {f["name"] for f in s5_quantile_fixtures()}
    assert fixtures == {"tie_jump", "no_ties"}
    series = read_rows(tmp_path / "demo_series.csv")
    assert any(r["metric"] == "tie_jump/midpoint/noisy_count" for r in series)


def test_load_config_roundtrip(tmp_path):
    payload = {
        "experiment": "scaling", "trials": 4, "seed": 77, "alpha": 0.1,
        "delta": 1e-5, "epsilons": [0.5], "sample_sizes": [500],
        "allocations": [0.5], "methods": ["dpscp_a"],
        "generator": {"dim": 6, "classes": 3},
        "train": {"epochs": 2, "batch_size": 16},
        "quantile": {"steps": 10},
        "output": "out.csv",
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(payload))
    cfg = load_config(path)
    assert cfg.trials == 4 and cfg.epsilons == (0.5,)
    assert cfg.generator["classes"] == 3
    payload["bogus"] = 1
    path.write_text(json.dumps(payload))
    with pytest.raises(ValueError, match="unknown config keys"):
        load_config(path)


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(experiment="nope")
    with pytest.raises(ValueError):
        ExperimentConfig(experiment="scaling", methods=("bogus",))
    with pytest.raises(ValueError):
        ExperimentConfig(experiment="scaling", trials=0)
