"""Privacy/utility trade-off: final normalized leakage and CFL loss across the leakage weight gamma."""

from pathlib import Path

from _variants import base_config, base_parser, run_variants, write_summary_table

GAMMAS = (1e6, 1e7, 1e8, 1e9)


def main():
    p = base_parser(__doc__)
    p.add_argument("--gammas", type=float, nargs="+", default=list(GAMMAS))
    args = p.parse_args()
    out = Path(args.out)
    results = run_variants(base_config(args), {f"{g:g}": {"gamma": g} for g in args.gammas}, out)
    write_summary_table(out / "gamma_sweep.csv", results, "gamma")
    print(f"wrote {out / 'gamma_sweep.csv'}")


if __name__ == "__main__":
    main()
