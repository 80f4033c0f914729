"""Train a ramp-loss SVM on a noisy two-cluster set and compare it with
the hinge SVM from the first convex problem.

    python3 demos/quickstart.py [n]
"""

import sys

import numpy as np

from rampscreen import KernelSpec, TrainConfig, make_synthetic, predict_many, train


def main(n=1000):
    train_set = make_synthetic(n, flip_fraction=0.1, separation=3.0, seed=0)
    clean = make_synthetic(n, flip_fraction=0.0, separation=3.0, seed=1)
    cfg = TrainConfig(kernel=KernelSpec.gaussian(0.5), C=1.0)
    model, trace = train(train_set, cfg)

    print(f"{'outer':>5} {'ramp obj':>12} {'CIL iters':>10} {'mu flips':>9} "
          f"{'dyn':>5} {'prop':>5}")
    for r in trace.records:
        print(f"{r.outer:>5} {r.ramp_objective:>12.4f} {r.cil_iterations:>10} "
              f"{r.mu_changes:>9} {r.screened_dynamic:>5} {r.screened_propagation:>5}")

    hinge_cfg = TrainConfig(kernel=cfg.kernel, C=cfg.C, max_outer=1)
    hinge_model, _ = train(train_set, hinge_cfg)
    for name, m in (("hinge", hinge_model), ("ramp", model)):
        _, labels = predict_many(m, clean.rows)
        print(f"{name:>5}: {m.n_sv} SVs, clean-set accuracy {np.mean(labels == clean.y):.3f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 1000)
