"""Shared helpers for the experiment scripts: run config variants and tabulate them."""

import argparse
from pathlib import Path

import numpy as np

from dpcfl import experiment as E


def base_parser(description: str, epochs: int = 300) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--config", help="YAML config; defaults are used when omitted")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", default="0..4")
    p.add_argument("--epochs", type=int, default=epochs)
    return p


def base_config(args) -> E.ExperimentConfig:
    cfg = E.load_config(args.config) if args.config else E.ExperimentConfig()
    return cfg.replace(seeds=E.parse_seeds(args.seeds), epochs=args.epochs)


def run_variants(base: E.ExperimentConfig, variants: dict[str, dict], out: Path) -> dict[str, list]:
    """Run each named variant into ``out/<name>`` and return its records."""
    results = {}
    for name, changes in variants.items():
        cfg = base.replace(**changes)
        results[name] = E.run_experiment(cfg, out / name)
        rewards = [r.summary["final_reward"] for r in results[name]]
        print(f"{name}: final reward {np.mean(rewards):.4g} +/- {np.std(rewards):.3g}")
    return results


def write_curves(path: Path, results: dict[str, list], window: int = 10) -> None:
    """Seed-mean accumulated reward per epoch, smoothed, one column per variant."""
    names = list(results)
    curves = [E.smooth(np.mean([r.rewards for r in results[n]], axis=0), window) for n in names]
    rows = [[t, *[c[t] for c in curves]] for t in range(len(curves[0]))]
    E.write_csv(path, ["epoch", *names], rows)


def write_summary_table(path: Path, results: dict[str, list], key_name: str = "variant") -> None:
    header = [key_name, *[f"{k}_{s}" for k in E.SUMMARY_FIELDS for s in ("mean", "std")]]
    rows = []
    for name, recs in results.items():
        row = [name]
        for k in E.SUMMARY_FIELDS:
            v = [r.summary[k] for r in recs]
            row += [float(np.mean(v)), float(np.std(v))]
        rows.append(row)
    E.write_csv(path, header, rows)
