"""FDR and power curves over sample size without covariates.

Default cell: m = 1000 genes, 10% DE, fold change 3, q = 0.1, n = 6..24.
Writes a metrics table and prints it.

    python scripts/setting1.py --reps 50 --out setting1.tsv
"""

import argparse
import logging

from nullstrap_de.simulate import ALL_METHODS, SimulationConfig, run_grid, setting_grid, write_metrics

from _common import print_rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=list(range(6, 25, 2)))
    ap.add_argument("--fc", type=float, nargs="+", default=[3.0])
    ap.add_argument("--pi", type=float, nargs="+", default=[0.1])
    ap.add_argument("--q", type=float, nargs="+", default=[0.1])
    ap.add_argument("--m", type=int, default=1000)
    ap.add_argument("--reps", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=None)
    ap.add_argument("--out", default="setting1_metrics.tsv")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)

    base = SimulationConfig(m=args.m, replicates=args.reps, seed=args.seed)
    grid = setting_grid(1, base, n=args.n, fc=args.fc, pi_de=args.pi, q=args.q)
    rows = run_grid(grid, ALL_METHODS, threads=args.threads)
    write_metrics(rows, args.out)
    print_rows(rows)


if __name__ == "__main__":
    main()
