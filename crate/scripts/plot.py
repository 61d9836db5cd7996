#!/usr/bin/env python3
"""Quick matplotlib figures from the CSVs the `sdpse` CLI writes.

Deliberately a stub: the CSVs are the product and any plotting tool works on
them. Given a trials CSV this scatters numerical rank against the grid value;
given a summary CSV it plots mean/min rank per grid point; given a rank
histogram it draws bars.
"""

import argparse
import csv
import sys


def load(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        sys.exit(f"{path}: no data rows")
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("csv", help="trials, summary, or histogram CSV from sdpse")
    parser.add_argument("-o", "--output", help="figure path (default: <csv>.png)")
    args = parser.parse_args()

    rows = load(args.csv)
    columns = list(rows[0].keys())
    out = args.output or (args.csv.rsplit(".", 1)[0] + ".png")

    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        sys.exit("matplotlib is not installed; point any CSV plotting tool at the file instead")

    fig, ax = plt.subplots(figsize=(6, 4))
    grid = columns[0]

    if columns[:2] == ["rank", "count"]:
        ax.bar([int(r["rank"]) for r in rows], [int(r["count"]) for r in rows])
        ax.set_xlabel("numerical rank")
        ax.set_ylabel("trials")
    elif "mean_rank" in columns:
        xs = [float(r[grid]) for r in rows]
        ax.plot(xs, [float(r["mean_rank"]) for r in rows], "o-", label="mean rank")
        ax.plot(xs, [float(r["min_rank"]) for r in rows], "s--", label="min rank")
        ax.set_xlabel(grid)
        ax.set_ylabel("rank of the solution matrix")
        ax.legend()
    elif "numerical_rank" in columns:
        xs = [float(r[grid]) for r in rows]
        ys = [int(r["numerical_rank"]) for r in rows]
        ax.plot(xs, ys, ".", alpha=0.4)
        ax.set_xlabel(grid)
        ax.set_ylabel("numerical rank per trial")
    else:
        sys.exit(f"{args.csv}: unrecognized header {columns}")

    ax.set_title(args.csv)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
