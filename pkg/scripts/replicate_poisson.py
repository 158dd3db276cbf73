"""Poisson single-observation experiments: SNGD instability and the projected fix.

Writes per-run traces and quartile summaries under OUT (default ./results/poisson)
and prints the median objective at t = 0, 1 and T for every group.
"""

import argparse
import csv
from pathlib import Path

from ngvi.cli import cmd_replicate


def medians(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return float(rows[0]["median"]), float(rows[1]["median"]), float(rows[-1]["median"])


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--out", default="results/poisson")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    for figure in ("poisson_instability", "poisson_projection"):
        out = Path(args.out) / figure
        cmd_replicate(figure, out, args.seed)
        print(f"[{figure}] -> {out}")
        for summary in sorted(out.glob("*_summary.csv")):
            t0, t1, tT = medians(summary)
            print(f"  {summary.stem[:-8]:<36} t=0 {t0:10.4f}  t=1 {t1:14.4f}  final {tT:10.6f}")


if __name__ == "__main__":
    main()
