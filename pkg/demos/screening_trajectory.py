"""Watch the screened fraction grow as the duality gap closes, for each
convex problem of one training run.

    python3 demos/screening_trajectory.py [n]
"""

import sys

from rampscreen import KernelSpec, TrainConfig, make_synthetic, train


def main(n=2000):
    ds = make_synthetic(n, flip_fraction=0.05, separation=6.0, seed=0)
    _, trace = train(ds, TrainConfig(kernel=KernelSpec.gaussian(0.5), C=1.0))
    marks = (1e-1, 1e-2, 1e-3, 1e-4, 1e-6)
    print("outer  " + "  ".join(f"gap<={m:g}".rjust(10) for m in marks) + "     final")
    for outer in range(trace.outer_iterations):
        rows = [r for r in trace.trajectory if r["outer"] == outer and r["rule"] == "dynamic"]
        cells = []
        for m in marks:
            hit = next((r["screened_fraction"] for r in rows if r["gap"] <= m), None)
            cells.append("-".rjust(10) if hit is None else f"{hit:10.1%}")
        final = rows[-1]["screened_fraction"] if rows else 0.0
        print(f"{outer:>5}  " + "  ".join(cells) + f"  {final:8.1%}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 2000)
