"""Monte Carlo comparison of estimators across truth designs (-1, 0, 1, 2 factors).

Usage: python3 scripts/run_table1.py [--n 1000] [--reps 1000] [--seed 0] [--workers 1] [--out table1.csv]
"""

import argparse
import csv
import time

from staggered_ife.simulate import TABLE1_ROWS, run_monte_carlo, table1_configs, table_header, table_rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="table1.csv")
    args = p.parse_args(argv)

    summaries = {}
    for name, cfg in table1_configs(args.n, args.reps, args.seed).items():
        t0 = time.perf_counter()
        summaries[name] = run_monte_carlo(cfg, workers=args.workers)
        fails = {k: v for k, v in summaries[name].failures.items() if v}
        print(f"{name}: {time.perf_counter() - t0:.1f}s failures={fails}")

    header = table_header(summaries)
    rows = table_rows(summaries, TABLE1_ROWS)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    for design in summaries:
        print(f"\n{design}")
        print(f"{'':18s}{'Bias':>10s}{'RMSE':>10s}{'MAD':>10s}{'Rej':>8s}")
        for label, est in TABLE1_ROWS:
            s = summaries[design].stats.get((est, "overall"))
            if s is None:
                print(f"{label:18s}{'failed':>10s}")
                continue
            print(f"{label:18s}{s.bias:10.4f}{s.rmse:10.4f}{s.mad:10.4f}{s.rejection_rate:8.3f}")


if __name__ == "__main__":
    main()
