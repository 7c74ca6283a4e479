"""Quadratic (dynamic) against constant invalid-action penalty: reward curves and epochs to 90% of max."""

from pathlib import Path

import numpy as np

from _variants import base_config, base_parser, run_variants, write_curves, write_summary_table


def main():
    args = base_parser(__doc__).parse_args()
    out = Path(args.out)
    results = run_variants(base_config(args), {"dynamic": {"scheduler": "dpvd"},
                                               "fixed": {"scheduler": "fixed_penalty"}}, out)
    write_curves(out / "reward_curves.csv", results)
    write_summary_table(out / "summary.csv", results, "penalty")
    for name, recs in results.items():
        print(f"{name}: epochs to 90% of max {np.mean([r.summary['epochs_to_90'] for r in recs]):.1f}")


if __name__ == "__main__":
    main()
