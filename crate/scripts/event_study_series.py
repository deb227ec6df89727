#!/usr/bin/env python3
"""Turn a `synthbal montecarlo` summary CSV into event-study series.

Prints one line per (estimator, horizon) with the mean and the 5%/95%
quantiles across replications. With --plot FILE and matplotlib installed,
also draws the solid-mean / dotted-quantile picture.
"""
import argparse
import csv
import sys
from collections import defaultdict


def load(path):
    cells = defaultdict(dict)
    with open(path, newline="") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        for row in rows:
            if row["horizon"] == "":
                continue
            key = (row["estimator"], int(row["horizon"]))
            cells[key][row["statistic"]] = float(row["value"])
    series = defaultdict(list)
    for (est, k), stats in sorted(cells.items()):
        series[est].append((k, stats["mean"], stats["q05"], stats["q95"]))
    return series


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("summary")
    ap.add_argument("--plot")
    args = ap.parse_args()
    series = load(args.summary)
    if not series:
        sys.exit("no event-study rows in " + args.summary)
    print("estimator,horizon,mean,q05,q95")
    for est, points in series.items():
        for k, m, lo, hi in points:
            print(f"{est},{k},{m},{lo},{hi}")
    if args.plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots()
        for est, points in series.items():
            ks = [p[0] for p in points]
            line = ax.plot(ks, [p[1] for p in points], label=est)[0]
            for col in (2, 3):
                ax.plot(ks, [p[col] for p in points], ":", color=line.get_color())
        ax.axhline(0, color="grey", lw=0.5)
        ax.set_xlabel("event time k")
        ax.legend()
        fig.savefig(args.plot, dpi=120)


if __name__ == "__main__":
    main()
