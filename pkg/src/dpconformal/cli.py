"""Command-line entry points.

Subcommands mirror the experiments (``stability``, ``scaling``,
``quantile-demo``, ``realdata``) plus ``calibrate``, which exposes the
quantile-noise calibration on its own. Desk-scale defaults run in minutes;
``--paper-scale`` restores the full protocol sizes.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .accounting import (BudgetSpec, SgdAccountingRecord, calibrate_sigma_q,
                         default_orders, gaussian_profile, rdp_compose,
                         rdp_to_eps, sgd_profile)
from .experiments import ExperimentConfig, load_config, run_experiment

_PAPER_SCALE = {
    "scaling": {
        "trials": 30,
        "epsilons": (0.5, 1.0, 2.0),
        "sample_sizes": (10000, 15000, 20000, 25000, 30000),
        # At full scale the step count grows with n, so the protocol's slower
        # schedule has room to train.
        "train": {"model": "mlp", "hidden": [16, 16], "epochs": 50,
                  "batch_size": 32, "learning_rate": 1e-3, "clip_norm": 1.0},
    },
    "stability": {"trials": 30, "epsilons": (0.5, 1.0, 2.0)},
    "realdata": {"trials": 30, "epsilons": (0.5, 1.0, 2.0)},
}

_DESK_DEFAULTS = {
    "scaling": dict(
        experiment="scaling",
        trials=10,
        epsilons=(0.5, 1.0),
        sample_sizes=(2500, 5000),
        methods=("dpscp_f", "dpscp_a", "dp_split", "split_cp", "naive_full"),
        generator={"dim": 10, "classes": 5, "class_sep": 0.6, "flip_y": 0.01,
                   "test_size": 2000},
        # Desk scale shortens the step budget with n, so the schedule is
        # faster than the full protocol's 1e-3.
        train={"model": "mlp", "hidden": [16, 16], "epochs": 50,
               "batch_size": 32, "learning_rate": 1e-2, "clip_norm": 1.0},
        quantile={"steps": 20, "beta": 0.05, "buffer": 10},
    ),
    "stability": dict(
        experiment="stability",
        trials=10,
        epsilons=(0.5, 1.0, 2.0),
        sample_sizes=(1000,),
        generator={"dim": 10},
        train={"rate": 0.02, "steps": 100, "learning_rate": 1e-3,
               "clip_norm": 1.0},
    ),
    "quantile_demo": dict(experiment="quantile_demo", trials=1),
    "realdata": dict(
        experiment="realdata",
        trials=10,
        epsilons=(0.5, 1.0),
        methods=("dpscp_f", "dpscp_a", "dp_split", "split_cp", "naive_full"),
        train={"model": "mlp", "hidden": [32, 16], "epochs": 50,
               "batch_size": 128, "learning_rate": 1e-3, "clip_norm": 1.0},
        quantile={"steps": 20, "beta": 0.05, "buffer": 10},
    ),
}


def _experiment_parser(sub, name: str, help_text: str) -> None:
    p = sub.add_parser(name, help=help_text)
    p.add_argument("--config", help="JSON config file (overrides defaults)")
    p.add_argument("--out", help="results CSV path")
    p.add_argument("--seed", type=int, help="base seed (trial t adds t)")
    p.add_argument("--trials", type=int, help="trials per grid cell")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--paper-scale", action="store_true",
                   help="restore the full protocol sizes")


def _build_config(args) -> ExperimentConfig:
    experiment = args.command.replace("-", "_")
    if args.config:
        config = load_config(args.config)
        if config.experiment != experiment:
            raise SystemExit(
                f"config is for {config.experiment!r}, not {experiment!r}")
    else:
        config = ExperimentConfig(**_DESK_DEFAULTS[experiment])
    overrides = {}
    if args.paper_scale and experiment in _PAPER_SCALE:
        overrides.update(_PAPER_SCALE[experiment])
    if args.trials is not None:
        overrides["trials"] = args.trials
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output"] = args.out
    if overrides:
        config = dataclasses.replace(config, **overrides)
    return config


def _cmd_experiment(args) -> int:
    config = _build_config(args)
    rows = run_experiment(config, jobs=args.jobs)
    ok = sum(1 for r in rows if r["status"] == "ok")
    failed = sum(1 for r in rows if r["status"].startswith("failed"))
    where = config.output or "(not written; use --out)"
    print(f"{config.experiment}: {ok} trial rows ok, {failed} failed -> {where}")
    return 1 if failed else 0


def _cmd_calibrate(args) -> int:
    budget = BudgetSpec(args.epsilon, args.delta, args.allocation)
    orders = default_orders()
    if args.sgd_steps:
        record = SgdAccountingRecord(args.sgd_sigma, args.sgd_rate,
                                     args.sgd_steps)
        train_profile = sgd_profile(record, orders)
    else:
        train_profile = sgd_profile((), orders)
    eps_train = rdp_to_eps(train_profile, args.delta)
    sigma_q = calibrate_sigma_q(train_profile, args.queries, budget)
    total = rdp_to_eps(
        rdp_compose([train_profile,
                     gaussian_profile(sigma_q, orders, queries=args.queries)]),
        args.delta)
    print(f"eps_train = {eps_train:.6g}")
    print(f"sigma_q   = {sigma_q:.6g}")
    print(f"eps_total = {total:.6g} (target {args.epsilon:g} "
          f"at delta {args.delta:g})")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dpconformal",
        description="Full-data differentially private conformal prediction "
                    "experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _experiment_parser(sub, "stability",
                       "coupled DP-SGD stability vs estimation error")
    _experiment_parser(sub, "scaling",
                       "prediction-set quality across sample sizes")
    _experiment_parser(sub, "quantile-demo",
                       "midpoint-search failure vs buffered search")
    _experiment_parser(sub, "realdata", "CSV-ingested benchmark sweep")

    cal = sub.add_parser("calibrate",
                         help="calibrate quantile noise against a budget")
    cal.add_argument("--epsilon", type=float, required=True)
    cal.add_argument("--delta", type=float, default=1e-5)
    cal.add_argument("--allocation", type=float, default=0.5)
    cal.add_argument("--queries", type=int, default=20)
    cal.add_argument("--sgd-sigma", type=float, default=1.0,
                     help="training noise multiplier")
    cal.add_argument("--sgd-rate", type=float, default=0.01,
                     help="training sampling rate")
    cal.add_argument("--sgd-steps", type=int, default=0,
                     help="training steps (0 = no training stage)")

    args = parser.parse_args(argv)
    if args.command == "calibrate":
        return _cmd_calibrate(args)
    return _cmd_experiment(args)


if __name__ == "__main__":
    sys.exit(main())
