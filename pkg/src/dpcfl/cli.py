"""Command line entry: ``run``, ``compare`` and ``bounds``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import analysis, data, experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _cmd_run(args) -> int:
    cfg = experiment.load_config(args.config)
    changes = {}
    if args.seeds is not None:
        changes["seeds"] = experiment.parse_seeds(args.seeds)
    if args.scheduler is not None:
        changes["scheduler"] = args.scheduler
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    cfg = cfg.replace(**changes)
    records = experiment.run_experiment(cfg, args.out)
    for r in records:
        s = r.summary
        print(f"seed {r.seed}: final reward {s['final_reward']:.4g}, epochs to 90% {s['epochs_to_90']}, "
              f"accuracy {s['final_accuracy']:.3f}, leakage {s['final_leakage']:.4g} ({r.wall_clock:.1f}s)")
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    records = []
    for d in args.runs:
        records.extend(experiment.load_run_dir(d))
    table = experiment.compare_runs(records, args.by)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    experiment.write_comparison(Path(args.out) / "comparison.csv", table)
    for row in table:
        print(f"{row['label']}: reward {row['final_reward_mean']:.4g} +/- {row['final_reward_std']:.3g} "
              f"(delta {row['final_reward_delta']:+.4g}), epochs to 90% {row['epochs_to_90_mean']:.1f}")
    return EXIT_OK


def _cmd_bounds(args) -> int:
    cfg = experiment.load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seeds[0])
    bed = analysis.make_quadratic_testbed(rng)
    for sigma in (0.0, args.sigma):
        run = analysis.run_quadratic_bound(bed, sigma, steps=args.steps, n_seeds=args.n_seeds, seed=cfg.seeds[0])
        alt = analysis.run_quadratic_bound(bed, sigma, steps=args.steps, n_seeds=args.n_seeds, seed=cfg.seeds[0],
                                           contraction="descent")
        run.report.trace.write_csv(out / f"quadratic_sigma{sigma:g}.csv")
        rep = run.report
        print(f"quadratic, sigma={sigma:g}: {rep.satisfied_fraction:.1%} of steps within bound "
              f"(descent-form contraction: {alt.report.satisfied_fraction:.1%}); limit {rep.limit:.4g}")
        for flag in rep.flags:
            print(f"  note: {flag}")

    # convex logistic constants on the pooled data of task 0
    true_tasks = data.assign_true_tasks(cfg.n_users, cfg.n_tasks, rng)
    users = [u for u in data.make_users(cfg.dataset_spec, true_tasks, cfg.n_tasks, rng) if u.true_task == 0]
    X = np.vstack([u.X for u in users])
    y = np.concatenate([u.y for u in users])
    obj = analysis.LogisticObjective(X, y, cfg.dataset_spec.n_classes, l2=args.l2)
    w_star, f_star, _ = analysis.find_optimum(obj)
    iterates = [w_star + rng.normal(scale=0.5, size=obj.dim) for _ in range(5)] + [w_star]
    c = analysis.estimate_constants(obj, iterates, rng)
    print(f"logistic task 0 (l2={args.l2:g}): L={c.L:.4g} mu={c.mu:.4g} zeta1={c.zeta1:.4g} "
          f"zeta2={c.zeta2:.4g} F*={f_star:.6g} ({c.n_iterates} iterates, {c.n_pairs} pairs)")
    for flag in c.flags:
        print(f"  note: {flag}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpcfl")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train schedulers and write CSVs")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seeds", help='e.g. "0..4" or "0,2,3"')
    r.add_argument("--scheduler", choices=experiment.SCHEDULERS)
    r.add_argument("--epochs", type=int)
    r.set_defaults(func=_cmd_run)

    c = sub.add_parser("compare", help="summarize run directories")
    c.add_argument("--out", required=True)
    c.add_argument("--by", default="scheduler", help="config field that labels the groups")
    c.add_argument("runs", nargs="+")
    c.set_defaults(func=_cmd_compare)

    b = sub.add_parser("bounds", help="check the convergence bound on reference problems")
    b.add_argument("--config", required=True)
    b.add_argument("--out", default="bounds")
    b.add_argument("--sigma", type=float, default=0.1)
    b.add_argument("--steps", type=int, default=50)
    b.add_argument("--n-seeds", type=int, default=20)
    b.add_argument("--l2", type=float, default=0.01)
    b.set_defaults(func=_cmd_bounds)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (experiment.ConfigError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
