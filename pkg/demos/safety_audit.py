"""Check every screening decision of a few small runs against the
reference solver, and compare with the point-bias rule, which trusts the
current bias estimate.

    python3 demos/safety_audit.py
"""

import numpy as np

from rampscreen import KernelSpec, SolverConfig, build_problem, make_synthetic, solve
from rampscreen.kernel import KernelCache
from rampscreen.oracle import _gram, solve_cil_reference
from rampscreen.screening import Decision, DynamicScreening


def wrong_calls(pr, reports, a, b):
    dD = _gram(pr) @ a - pr.y + b
    bad = set()
    for rep in reports:
        low = rep.decisions == Decision.SCREENED_LOW
        high = rep.decisions == Decision.SCREENED_HIGH
        bad |= set(np.flatnonzero(low & ((a > pr.lower + 1e-8) | (dD < -1e-8))).tolist())
        bad |= set(np.flatnonzero(high & ((a < pr.upper - 1e-8) | (dD > 1e-8))).tolist())
    return len(bad)


def main():
    print(f"{'seed':>4} {'n':>4} {'C':>5}  {'interval: screened/wrong':>24}  "
          f"{'point: screened/wrong':>22}")
    for seed in range(8):
        ds = make_synthetic(200, 0.1, 2.0, seed)
        C = (0.1, 1.0, 10.0, 100.0)[seed % 4]
        pr = build_problem(ds, KernelCache(KernelSpec.gaussian(0.5), ds), C)
        a, b = solve_cil_reference(pr)
        cells = []
        for rule in ("interval", "point"):
            # each rule fixes what it screens; wrong calls would show up here
            hook = DynamicScreening(pr.n, rule=rule, audit=True)
            st = solve(pr, cfg=SolverConfig(eps=1e-10, screen_warmup=0, screen_every=2),
                       hooks=hook)
            screened = len({i for rep in st.reports for i in rep.screened.tolist()})
            cells.append(f"{screened:>4} / {wrong_calls(pr, st.reports, a, b):<4}")
        print(f"{seed:>4} {pr.n:>4} {C:>5g}  {cells[0]:>24}  {cells[1]:>22}")


if __name__ == "__main__":
    main()
