"""IsoLoss grid and compute-optimal frontier for the built-in 1 s and 0.1 s laws.

Writes contour_<name>.csv and frontier_<name>.csv in the output directory,
using a dense grid of model sizes and epochs rather than the trained grid.
"""

import argparse
from pathlib import Path

import numpy as np

from ephyslab import scalinglab as sl

LAWS = {"ieeg_1s": sl.LAW_IEEG_1S, "ieeg_01s": sl.LAW_IEEG_01S}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="frontier_out")
    ap.add_argument("--n-params", type=int, default=40)
    ap.add_argument("--n-epochs", type=int, default=40)
    ap.add_argument("--n-budgets", type=int, default=30)
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = np.geomspace(1e6, 1e10, args.n_params)
    epochs = np.geomspace(1, 128, args.n_epochs)
    for name, law in LAWS.items():
        grid = sl.isoloss_grid(law, sl.IEEG_UNIQUE_TOKENS, params, epochs)
        budgets = np.geomspace(grid.flops.min(), grid.flops.max(), args.n_budgets)
        pts = sl.compute_frontier(grid, budgets)
        (out / f"contour_{name}.csv").write_text(sl.contour_csv(grid))
        (out / f"frontier_{name}.csv").write_text(sl.frontier_csv(pts))
        print(f"{name}: N* = {float(sl.optimal_params(sl.IEEG_UNIQUE_TOKENS, law)):.3e}")
        for p in pts[:: max(1, len(pts) // 6)]:
            print(f"  budget {p.budget:.2e} FLOPs -> N {p.params:.3e}, {p.epochs:.1f} epochs, loss {p.loss:.5f}")


if __name__ == "__main__":
    main()
