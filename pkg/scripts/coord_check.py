"""Per-layer activation scale across widths for the first training steps.

Writes a CSV (parameterization, width, step, layer, mean_abs) and prints the
largest cross-width ratio for muP and for the standard parameterization.
"""

import argparse
import csv
import sys

from ephyslab.pretrain import coord_check, coord_check_spread


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--widths", type=int, nargs="+", default=[64, 128, 256])
    ap.add_argument("--steps", type=int, default=5)
    ap.add_argument("--layers", type=int, default=12)
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="coord_check.csv")
    args = ap.parse_args()

    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["parameterization", "width", "step", "layer", "mean_abs"])
        for name, enabled in (("mup", True), ("standard", False)):
            res = coord_check(tuple(args.widths), args.steps, mup_enabled=enabled, base_width=min(args.widths),
                              lr=args.lr, n_layers=args.layers, seed=args.seed)
            for width, arr in res.items():
                for step, row in enumerate(arr, start=1):
                    for layer, v in enumerate(row):
                        w.writerow([name, width, step, layer, f"{v:.9g}"])
            print(f"{name}: max cross-width ratio {coord_check_spread(res):.3f}", file=sys.stderr)


if __name__ == "__main__":
    main()
