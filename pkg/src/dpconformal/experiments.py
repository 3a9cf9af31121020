"""Experiment orchestration: seeded sweeps over (epsilon, n, allocation,
method) grids with deterministic CSV output.

Result rows use the fixed header
``experiment,method,epsilon,n,p,trial,coverage,efficiency,informativeness,
q_hat,sigma_q,eps_train,seed,status``; per-step series use
``experiment,trial,step,metric,value`` with grid-cell parameters encoded in
the metric name (e.g. ``gap/eps=0.5``). Aggregate mean/sd rows are computed
from the formatted per-trial values, so recomputing them from the written
file reproduces them exactly.

Trial t always runs with seed ``base_seed + t``: adding trials never
changes earlier rows, and grid cells sharing a trial index share their
random draws (the generators are prefix-stable in n), which pairs the
sweep's comparisons.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from .accounting import BudgetSpec, calibrate_sigma_sgd
from .conformal import METHODS, PipelineConfig, run_pipeline
from .data import (apply_standardizer, fit_standardizer, gen_logistic,
                   gen_multiclass, load_csv)
from .models import CLASSIFICATION, REGRESSION, Dataset, ModelSpec
from .quantile import QuantileConfig, buffered_right_search, midpoint_search
from .training import TrainConfig, coupled_train

__all__ = ["ExperimentConfig", "RESULT_COLUMNS", "SERIES_COLUMNS",
           "load_config", "run_experiment", "s5_quantile_fixtures",
           "train_plan"]

RESULT_COLUMNS = ("experiment", "method", "epsilon", "n", "p", "trial",
                  "coverage", "efficiency", "informativeness", "q_hat",
                  "sigma_q", "eps_train", "seed", "status")
SERIES_COLUMNS = ("experiment", "trial", "step", "metric", "value")
_METRIC_COLUMNS = ("coverage", "efficiency", "informativeness", "q_hat",
                   "sigma_q", "eps_train")

EXPERIMENTS = ("stability", "scaling", "quantile_demo", "realdata")


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    # Shortest round-trip form: parsing the written value recovers the exact
    # float, which keeps aggregate rows exactly recomputable from trial rows.
    return repr(float(value))


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    trials: int = 10
    seed: int = 2026
    alpha: float = 0.1
    delta: float = 1e-5
    epsilons: tuple[float, ...] = (0.5, 1.0)
    sample_sizes: tuple[int, ...] = (2500, 5000)
    allocations: tuple[float, ...] = (0.5,)
    methods: tuple[str, ...] = ("dpscp_f", "dpscp_a", "dp_split")
    generator: dict = field(default_factory=dict)
    csv_source: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    quantile: dict = field(default_factory=dict)
    output: str | None = None

    def __post_init__(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.experiment in ("scaling", "realdata"):
            bad = [m for m in self.methods if m not in METHODS]
            if bad:
                raise ValueError(f"unknown methods {bad}")
            if not self.methods or not self.epsilons or not self.allocations:
                raise ValueError("grid lists must be nonempty")
        if self.experiment in ("scaling", "stability") and not self.sample_sizes:
            raise ValueError(f"{self.experiment} needs a sample size")


_CONFIG_KEYS = {
    "experiment", "trials", "seed", "alpha", "delta", "epsilons",
    "sample_sizes", "allocations", "methods", "generator", "csv", "train",
    "quantile", "output",
}


def load_config(path) -> ExperimentConfig:
    """Parse a JSON experiment config (schema documented in the README)."""
    with open(path) as fh:
        raw = json.load(fh)
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key in ("experiment", "trials", "seed", "alpha", "delta", "output"):
        if key in raw:
            kwargs[key] = raw[key]
    for key in ("epsilons", "sample_sizes", "allocations", "methods"):
        if key in raw:
            kwargs[key] = tuple(raw[key])
    for src, dst in (("generator", "generator"), ("csv", "csv_source"),
                     ("train", "train"), ("quantile", "quantile")):
        if src in raw:
            kwargs[dst] = dict(raw[src])
    return ExperimentConfig(**kwargs)


def train_plan(n_train: int, epochs: int, batch_size: int) -> tuple[float, int]:
    """Sampling rate and step count for a batch-size/epoch prescription.

    Poisson subsampling has no fixed batch; the rate targets the requested
    mean batch size and the step count matches epochs * ceil(n / batch).
    """
    if n_train < 1 or epochs < 1 or batch_size < 1:
        raise ValueError("n_train, epochs, and batch_size must be >= 1")
    rate = min(1.0, batch_size / n_train)
    steps = epochs * math.ceil(n_train / batch_size)
    return rate, steps


# ---------------------------------------------------------------------------
# Per-trial workers (module-level for picklability)


def _mk_model(train: dict, task: str, dim: int, n_classes: int) -> ModelSpec:
    kind = train.get("model", "mlp")
    hidden = tuple(train.get("hidden", (16, 16)))
    if kind == "mlp":
        out = n_classes if task == CLASSIFICATION else 1
        return ModelSpec("mlp", dim, out, hidden)
    if kind == "softmax_linear":
        return ModelSpec("softmax_linear", dim, n_classes)
    if kind == "linear_regression":
        return ModelSpec("linear_regression", dim, 1)
    raise ValueError(f"unknown model kind {kind!r}")


def _quantile_template(config: ExperimentConfig, task: str) -> QuantileConfig:
    q = config.quantile
    if task == CLASSIFICATION:
        lo, hi = 0.0, 1.0
    else:
        # Conservative public score range on the standardized target scale.
        lo, hi = 0.0, float(q.get("range_hi", 10.0))
    return QuantileConfig(
        range_lo=lo,
        range_hi=hi,
        alpha=config.alpha,
        steps_n=int(q.get("steps", 20)),
        sigma_q=0.0,
        beta=float(q.get("beta", 0.05)),
        buffer_m=int(q.get("buffer", 10)),
        variant="buffered_right",
    )


def _pipeline_trial(config: ExperimentConfig, pool: Dataset, test: Dataset,
                    method: str, epsilon: float, allocation: float,
                    trial_seed: int, target_scale: float) -> dict:
    train = config.train
    epochs = int(train.get("epochs", 50))
    batch = int(train.get("batch_size", 32))
    split_fraction = float(train.get("split_fraction", 0.5))
    n_train = pool.n
    if method in ("dp_split", "split_cp"):
        n_train = int(math.floor(split_fraction * pool.n))
    rate, steps = train_plan(n_train, epochs, batch)
    train_template = TrainConfig(
        learning_rate=float(train.get("learning_rate", 1e-3)),
        steps=steps,
        sampling_rate=rate,
        clip_norm=float(train.get("clip_norm", 1.0)),
        noise_multiplier=0.0,
    )
    model = _mk_model(train, pool.task, pool.dim, pool.n_classes)
    pipe = PipelineConfig(
        method=method,
        budget=BudgetSpec(epsilon, config.delta, allocation),
        model=model,
        train_template=train_template,
        quantile_template=_quantile_template(config, pool.task),
        alpha=config.alpha,
        split_fraction=split_fraction,
        target_scale=target_scale,
    )
    report = run_pipeline(pool, test, pipe, trial_seed)
    return {
        "coverage": report.coverage,
        "efficiency": report.efficiency,
        "informativeness": report.informativeness,
        "q_hat": report.q_hat,
        "sigma_q": report.sigma_q,
        "eps_train": report.eps_train_spent,
    }


def _scaling_data(config: ExperimentConfig, n: int,
                  trial_seed: int) -> tuple[Dataset, Dataset]:
    """Pool and test for one trial.

    Both come from a single generator draw so that they share the same class
    centroids; the test block comes first, making it identical across the
    n-grid, while pools at growing n are nested prefixes.
    """
    gen = config.generator
    d = int(gen.get("dim", 10))
    k = int(gen.get("classes", 5))
    sep = float(gen.get("class_sep", 0.6))
    flip = float(gen.get("flip_y", 0.01))
    test_size = int(gen.get("test_size", 2000))
    data_seed = int(np.random.SeedSequence(trial_seed).spawn(1)[0]
                    .generate_state(1)[0])
    both = gen_multiclass(test_size + n, d, k, sep, flip, data_seed)
    test = both.subset(np.arange(test_size))
    pool = both.subset(np.arange(test_size, test_size + n))
    return pool, test


def _run_scaling_trial(config: ExperimentConfig, cell: tuple,
                       trial: int) -> tuple[dict, list]:
    epsilon, n, allocation, method = cell
    trial_seed = config.seed + trial
    pool, test = _scaling_data(config, n, trial_seed)
    stats = fit_standardizer(pool)
    pool = apply_standardizer(stats, pool)
    test = apply_standardizer(stats, test)
    metrics = _pipeline_trial(config, pool, test, method, epsilon, allocation,
                              trial_seed, stats.target_scale)
    row = {"experiment": config.experiment, "method": method,
           "epsilon": epsilon, "n": n, "p": allocation, "trial": trial,
           "seed": trial_seed, "status": "ok", **metrics}
    return row, []


def _run_realdata_trial(config: ExperimentConfig, cell: tuple,
                        trial: int) -> tuple[dict, list]:
    epsilon, allocation, method = cell
    trial_seed = config.seed + trial
    src = config.csv_source
    full = load_csv(src["path"], int(src.get("label_column", 0)),
                    src.get("task", REGRESSION),
                    bool(src.get("has_header", True)))
    test_fraction = float(src.get("test_fraction", 0.2))
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(trial_seed).spawn(1)[0]))
    perm = rng.permutation(full.n)
    n_test = max(1, int(math.floor(test_fraction * full.n)))
    test = full.subset(perm[:n_test])
    pool = full.subset(perm[n_test:])
    stats = fit_standardizer(pool)
    pool = apply_standardizer(stats, pool)
    test = apply_standardizer(stats, test)
    metrics = _pipeline_trial(config, pool, test, method, epsilon, allocation,
                              trial_seed, stats.target_scale)
    row = {"experiment": config.experiment, "method": method,
           "epsilon": epsilon, "n": pool.n, "p": allocation, "trial": trial,
           "seed": trial_seed, "status": "ok", **metrics}
    return row, []


def _run_stability_trial(config: ExperimentConfig, cell: tuple,
                         trial: int) -> tuple[dict, list]:
    (epsilon,) = cell
    trial_seed = config.seed + trial
    gen = config.generator
    d = int(gen.get("dim", 10))
    n = int(config.sample_sizes[0])
    train = config.train
    rate = float(train.get("rate", 0.02))
    steps = int(train.get("steps", 100))
    data_seed = int(np.random.SeedSequence(trial_seed).spawn(1)[0]
                    .generate_state(1)[0])
    data, theta = gen_logistic(n + 1, d, data_seed)
    base = data.subset(np.arange(n))
    extra = (data.features[n], int(data.labels[n]))
    sigma_sgd = calibrate_sigma_sgd(rate, steps, epsilon, config.delta)
    radius = train.get("projection_radius")
    cfg = TrainConfig(
        learning_rate=float(train.get("learning_rate", 1e-3)),
        steps=steps,
        sampling_rate=rate,
        clip_norm=float(train.get("clip_norm", 1.0)),
        noise_multiplier=sigma_sgd,
        projection_radius=None if radius is None else float(radius),
        seed=trial_seed,
    )
    spec = ModelSpec("softmax_linear", d, 2)
    # Embed the logistic signal symmetrically into the two-class softmax
    # parameterization (class margins +/- theta/2 reproduce the link).
    theta_flat = np.concatenate([-theta / 2.0, theta / 2.0])
    schedule = None
    if train.get("force_extra_off"):
        schedule = np.zeros(steps, dtype=bool)
    trace = coupled_train(base, extra, spec, cfg, theta_star=theta_flat,
                          extra_schedule=schedule)
    series = []
    for t, (gap, err) in enumerate(zip(trace.gap_series, trace.error_series)):
        series.append({"experiment": config.experiment, "trial": trial,
                       "step": t, "metric": f"gap/eps={epsilon:g}",
                       "value": gap})
        series.append({"experiment": config.experiment, "trial": trial,
                       "step": t, "metric": f"error/eps={epsilon:g}",
                       "value": err})
    row = {"experiment": config.experiment, "method": "dpsgd_coupled",
           "epsilon": epsilon, "n": n, "p": "", "trial": trial,
           "seed": trial_seed, "status": "ok", "coverage": "",
           "efficiency": "", "informativeness": "", "q_hat": "",
           "sigma_q": sigma_sgd,
           "eps_train": epsilon}
    return row, series


def s5_quantile_fixtures() -> list[dict]:
    """The two adversarial single-injection score sets: a large tie jump and
    a tie-free staircase. Search ranges start where the first midpoint is the
    vulnerable query."""
    return [
        {
            "name": "tie_jump",
            "scores": [0.0] * 5 + [10.0] * 8 + [11.0],
            "alpha": 0.2,
            "range": (8.0, 11.0),
            "injection": 8.0,
            "target_order_stat": 10.0,
        },
        {
            "name": "no_ties",
            "scores": [float(v) for v in range(1, 11)],
            "alpha": 0.2,
            "range": (7.0, 10.0),
            "injection": 1.0,
            "target_order_stat": 9.0,
        },
    ]


def _run_quantile_demo_trial(config: ExperimentConfig, cell: tuple,
                             trial: int) -> tuple[dict, list]:
    fixture_name, variant = cell
    fixture = next(f for f in s5_quantile_fixtures()
                   if f["name"] == fixture_name)
    steps = int(config.quantile.get("steps", 20))
    noise = [0.0] * steps
    noise[0] = fixture["injection"]
    common = dict(
        range_lo=fixture["range"][0],
        range_hi=fixture["range"][1],
        alpha=fixture["alpha"],
        steps_n=steps,
        sigma_q=float(config.quantile.get("sigma", 3.0)),
        beta=float(config.quantile.get("beta", 0.05)),
        noise_override=tuple(noise),
    )
    if variant == "midpoint":
        result = midpoint_search(fixture["scores"],
                                 QuantileConfig(variant="midpoint",
                                                precision_delta=1e-3, **common))
    else:
        result = buffered_right_search(fixture["scores"],
                                       QuantileConfig(variant="buffered_right",
                                                      buffer_m=0, **common))
    series = []
    for s in result.trace:
        prefix = f"{fixture_name}/{variant}"
        series.extend([
            {"experiment": config.experiment, "trial": trial, "step": s.step,
             "metric": f"{prefix}/mid", "value": s.mid},
            {"experiment": config.experiment, "trial": trial, "step": s.step,
             "metric": f"{prefix}/count", "value": s.true_count},
            {"experiment": config.experiment, "trial": trial, "step": s.step,
             "metric": f"{prefix}/noisy_count", "value": s.noisy_count},
            {"experiment": config.experiment, "trial": trial, "step": s.step,
             "metric": f"{prefix}/moved_right",
             "value": 1.0 if s.branch == "right" else 0.0},
        ])
    series.append({"experiment": config.experiment, "trial": trial, "step": 0,
                   "metric": f"{fixture_name}/target_order_stat",
                   "value": fixture["target_order_stat"]})
    row = {"experiment": config.experiment, "method": variant,
           "epsilon": "", "n": len(fixture["scores"]), "p": fixture_name,
           "trial": trial, "seed": config.seed, "status": "ok",
           "coverage": "", "efficiency": "", "informativeness": "",
           "q_hat": result.q_hat, "sigma_q": common["sigma_q"],
           "eps_train": ""}
    return row, series


def _grid(config: ExperimentConfig) -> list[tuple]:
    if config.experiment == "scaling":
        return list(product(config.epsilons, config.sample_sizes,
                            config.allocations, config.methods))
    if config.experiment == "realdata":
        return list(product(config.epsilons, config.allocations,
                            config.methods))
    if config.experiment == "stability":
        return [(eps,) for eps in config.epsilons]
    return list(product([f["name"] for f in s5_quantile_fixtures()],
                        ("midpoint", "buffered_right")))


_TRIAL_RUNNERS = {
    "scaling": _run_scaling_trial,
    "realdata": _run_realdata_trial,
    "stability": _run_stability_trial,
    "quantile_demo": _run_quantile_demo_trial,
}


def _safe_trial(config: ExperimentConfig, cell: tuple,
                trial: int) -> tuple[dict, list]:
    runner = _TRIAL_RUNNERS[config.experiment]
    try:
        return runner(config, cell, trial)
    except Exception as exc:  # a failed trial becomes a failed row
        row = {"experiment": config.experiment, "method": "", "epsilon": "",
               "n": "", "p": "", "trial": trial, "seed": config.seed + trial,
               "status": f"failed:{type(exc).__name__}"}
        if config.experiment == "scaling":
            row.update(method=cell[3], epsilon=cell[0], n=cell[1], p=cell[2])
        elif config.experiment == "realdata":
            row.update(method=cell[2], epsilon=cell[0], p=cell[1])
        elif config.experiment == "stability":
            row.update(method="dpsgd_coupled", epsilon=cell[0])
        for col in _METRIC_COLUMNS:
            row.setdefault(col, "")
        return row, []


def _format_row(row: dict) -> dict:
    return {col: _fmt(row.get(col, "")) for col in RESULT_COLUMNS}


def _aggregate_rows(config: ExperimentConfig, cell_rows: list[dict]) -> list[dict]:
    """Mean/sd rows recomputed from the formatted per-trial strings."""
    out = []
    for stat in ("mean", "sd"):
        agg = dict(cell_rows[0])
        agg.update(trial=stat, seed="", status="aggregate")
        for col in _METRIC_COLUMNS:
            vals = [float(r[col]) for r in cell_rows
                    if r["status"] == "ok" and r[col] != ""]
            if not vals or (stat == "sd" and len(vals) < 2):
                agg[col] = ""
            elif stat == "mean":
                agg[col] = float(np.mean(vals))
            else:
                agg[col] = float(np.std(vals, ddof=1))
        out.append(_format_row(agg))
    return out


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> list[dict]:
    """Run the configured sweep; returns the formatted result rows and, when
    ``config.output`` is set, writes ``<output>`` plus ``<stem>_series.csv``.

    Rows appear in deterministic (grid cell, trial) order with per-cell
    aggregate rows appended, regardless of worker count; completed trials
    are flushed to disk as soon as their turn in that order comes up.
    """
    cells = _grid(config)
    trials = 1 if config.experiment == "quantile_demo" else config.trials
    tasks = [(ci, t) for ci in range(len(cells)) for t in range(trials)]

    writer = _ResultWriter(config.output)
    all_rows: list[dict] = []
    cell_buffer: list[dict] = []

    def emit(task_idx: int, row: dict, series: list[dict]) -> None:
        nonlocal cell_buffer
        formatted = _format_row(row)
        cell_buffer.append(formatted)
        all_rows.append(formatted)
        writer.write_result(formatted)
        writer.write_series(series)
        if (task_idx + 1) % trials == 0:
            aggs = _aggregate_rows(config, cell_buffer)
            for agg in aggs:
                all_rows.append(agg)
                writer.write_result(agg)
            cell_buffer = []
        writer.flush()

    if jobs <= 1:
        for idx, (ci, t) in enumerate(tasks):
            row, series = _safe_trial(config, cells[ci], t)
            emit(idx, row, series)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                pool.submit(_safe_trial, config, cells[ci], t): idx
                for idx, (ci, t) in enumerate(tasks)
            }
            done_results: dict[int, tuple[dict, list]] = {}
            next_idx = 0
            pending = set(futures)
            while pending:
                finished, pending = wait(pending, return_when=FIRST_COMPLETED)
                for fut in finished:
                    done_results[futures[fut]] = fut.result()
                while next_idx in done_results:
                    row, series = done_results.pop(next_idx)
                    emit(next_idx, row, series)
                    next_idx += 1
            while next_idx in done_results:
                row, series = done_results.pop(next_idx)
                emit(next_idx, row, series)
                next_idx += 1

    writer.close()
    return all_rows


class _ResultWriter:
    def __init__(self, output: str | None):
        self._result_fh = None
        self._series_fh = None
        if output is None:
            return
        out = Path(output)
        out.parent.mkdir(parents=True, exist_ok=True)
        series = out.with_name(out.stem + "_series.csv")
        self._result_fh = open(out, "w", newline="")
        self._series_fh = open(series, "w", newline="")
        self._result_writer = csv.DictWriter(self._result_fh,
                                             fieldnames=RESULT_COLUMNS)
        self._result_writer.writeheader()
        self._series_writer = csv.DictWriter(self._series_fh,
                                             fieldnames=SERIES_COLUMNS)
        self._series_writer.writeheader()

    def write_result(self, row: dict) -> None:
        if self._result_fh is not None:
            self._result_writer.writerow(row)

    def write_series(self, rows: list[dict]) -> None:
        if self._series_fh is not None:
            for row in rows:
                self._series_writer.writerow(
                    {col: _fmt(row.get(col, "")) for col in SERIES_COLUMNS})

    def flush(self) -> None:
        if self._result_fh is not None:
            self._result_fh.flush()
            self._series_fh.flush()

    def close(self) -> None:
        if self._result_fh is not None:
            self._result_fh.close()
            self._series_fh.close()
