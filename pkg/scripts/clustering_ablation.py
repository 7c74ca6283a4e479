"""Per-round clustering accuracy of the weighted identity rule against the loss-only rule.

Every user uploads every round, so the comparison isolates the identity rule from scheduling.
"""

import argparse
from pathlib import Path

import numpy as np

from dpcfl import experiment as E


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0..4")
    p.add_argument("--rounds", type=int, default=30)
    args = p.parse_args()
    cfg = E.load_config(args.config) if args.config else E.ExperimentConfig()
    seeds = E.parse_seeds(args.seeds)
    curves = {}
    for rule in E.IDENTITY_RULES:
        c = cfg.replace(identity_rule=rule)
        acc = [[m.clustering_accuracy for m in E.run_full_participation(c, s, args.rounds)] for s in seeds]
        curves[rule] = np.mean(acc, axis=0)
        print(f"{rule}: final accuracy {curves[rule][-1]:.3f}, best {curves[rule].max():.3f}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    E.write_csv(out / "clustering_accuracy.csv", ["round", *curves],
                [[t, *[curves[r][t] for r in curves]] for t in range(args.rounds)])
    print(f"wrote {out / 'clustering_accuracy.csv'}")


if __name__ == "__main__":
    main()
