"""Relative error of the Hutchinson curvature estimate against the exact value as probes grow."""

import argparse

import numpy as np

from curvkan.curvature import composition_curvature
from curvkan.network import init_network


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--widths", type=int, nargs="+", default=[2, 3, 1])
    p.add_argument("--grid", type=int, default=8)
    p.add_argument("--samples", type=int, default=1024)
    p.add_argument("--repeats", type=int, default=10)
    a = p.parse_args()

    net = init_network(a.widths, a.grid, seed=0, grid_scaled=False)
    x = np.random.default_rng(0).uniform(-1, 1, (a.samples, a.widths[0]))
    exact = composition_curvature(net, x)
    print(f"exact {exact:.6g}")
    print("probes  mean_rel_err  max_rel_err")
    for k in (1, 4, 16, 64, 256):
        errs = [abs(composition_curvature(net, x, "hutchinson", probes=k, seed=s) - exact) / exact
                for s in range(a.repeats)]
        print(f"{k:6d}  {np.mean(errs):12.4f}  {np.max(errs):11.4f}")


if __name__ == "__main__":
    main()
