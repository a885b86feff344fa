"""Render a grid dump as heatmaps: value, gradient norm, rank invariant.

Usage: python demos/plot_grid.py <grid-dump.txt> [out.png]

Reads the plain-text grid format written by the dump subcommand (or
degenhess.fields.dump_grid) and writes a three-panel PNG. Needs
matplotlib; prints a pointer instead of crashing when it is missing.
"""

import sys

import numpy as np

from degenhess import ck
from degenhess.fields import load_grid


def main(argv):
    if len(argv) < 2:
        print(__doc__.strip())
        return 1
    path = argv[1]
    out = argv[2] if len(argv) > 2 else path.rsplit(".", 1)[0] + ".png"

    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib is not installed; install it to render plots")
        return 1

    with open(path) as fh:
        grid = load_grid(fh)
    if grid.n != 2:
        print(f"plotting handles n = 2 only, this dump has n = {grid.n}")
        return 1

    m = grid.m
    value = grid.values.reshape(m, m)
    gnorm = np.linalg.norm(grid.gradients, axis=1).reshape(m, m)
    rank_inv = ck(grid.hessians, 2).reshape(m, m)
    extent = (grid.lo[0], grid.hi[0], grid.lo[1], grid.hi[1])

    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    panels = [
        (value, "value"),
        (gnorm, "gradient norm"),
        (rank_inv, "C_2 of the Hessian"),
    ]
    for ax, (img, title) in zip(axes, panels):
        # rows are the first axis in the dump, so transpose for x-y axes
        im = ax.imshow(img.T, origin="lower", extent=extent, aspect="equal")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, shrink=0.8)
    fig.suptitle(f"grid dump {path} (m = {m})")
    fig.tight_layout()
    fig.savefig(out, dpi=130)
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
