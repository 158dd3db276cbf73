"""Step-size robustness on a synthetic logistic problem (n=200, d=5, 5 seeds).

Runs the fixed sweep and prints, per algorithm, the step sizes for which a
majority of seeds reach the relative threshold and the median iteration count.
"""

import argparse
import csv
import json
from collections import defaultdict
from pathlib import Path

import numpy as np

from ngvi.cli import cmd_replicate


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--out", default="results/stepsize")
    args = p.parse_args()
    out = Path(args.out)
    cmd_replicate("stepsize_robustness", out)
    meta = json.loads((out / "meta.json").read_text())
    print(f"threshold {meta['threshold']:.4f} (l* = {meta['ell_star']:.4f}, l0 = {meta['ell_init']:.4f})")
    table = defaultdict(list)
    with open(out / "sweep.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            table[(r["algorithm"], float(r["gamma0"]))].append(int(r["iterations"]))
    for alg in ("sngd", "proj_sngd"):
        print(alg)
        for gamma in sorted(g for a, g in table if a == alg):
            its = np.array(table[(alg, gamma)])
            hit = its[its >= 0]
            med = f"{np.median(hit):6.0f}" if hit.size else "     -"
            print(f"  gamma0 {gamma:7.2f}  reached {hit.size}/{its.size}  median iterations {med}")


if __name__ == "__main__":
    main()
