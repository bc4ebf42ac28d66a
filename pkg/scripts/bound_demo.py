"""Train a small network and print every step of the curvature bound chain.

    python scripts/bound_demo.py --epochs 600 --lam 1e-3
"""

import argparse

from curvkan.curvature import verify_bound
from curvkan.network import calibrate_ranges, init_network
from curvkan.optim import TrainConfig, train_adam
from curvkan.penalty import PenaltyConfig
from curvkan.targets import get_target, train_test

STEPS = ["composition curvature", "Cauchy-Schwarz", "A1 (decorrelation)", "A2 (density)",
         "Young", "K_lambda * penalty"]


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--target", default="sin_x_plus_y2")
    p.add_argument("--widths", type=int, nargs="+", default=[2, 3, 1])
    p.add_argument("--grid", type=int, default=10)
    p.add_argument("--epochs", type=int, default=600)
    p.add_argument("--lam", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()

    spec = get_target(a.target)
    tr, te = train_test(spec, a.seed, 1024, 256)
    net = init_network(a.widths, a.grid, input_domain=spec.domain, seed=a.seed)
    log = train_adam(net, tr, te, PenaltyConfig("curvature", a.lam),
                     TrainConfig(epochs=a.epochs, warmup_epochs=min(200, a.epochs // 3), seed=a.seed))
    print(f"test RMSE {log.test_rmse[-1]:.4g}")
    calibrate_ranges(net, tr.inputs)
    d = verify_bound(net, tr.inputs)
    print(f"A1 {d.a1_holds}  A2 {d.a2_holds}  A3 {d.a3_holds}  kappa {d.kappa:.3g}  C {d.density_bound:.3g}")
    for name, v in zip(STEPS, d.chain):
        print(f"  {name:24s} {v:.6g}")
    print(f"ratio {d.ratio:.4g}  monotone {d.chain_monotone}")


if __name__ == "__main__":
    main()
