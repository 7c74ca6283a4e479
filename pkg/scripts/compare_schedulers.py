"""Accumulated reward of the learned scheduler against IQL, random and greedy scheduling."""

from pathlib import Path

from _variants import base_config, base_parser, run_variants, write_curves, write_summary_table

SCHEDULERS = ("dpvd", "iql", "random", "full_greedy")


def main():
    args = base_parser(__doc__).parse_args()
    out = Path(args.out)
    results = run_variants(base_config(args), {s: {"scheduler": s} for s in SCHEDULERS}, out)
    write_curves(out / "reward_curves.csv", results)
    write_summary_table(out / "summary.csv", results, "scheduler")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
