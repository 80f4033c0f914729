import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import dataset_from_array, random_instance, screening_errors
from rampscreen.kernel import KernelCache, KernelSpec
from rampscreen.oracle import _gram, solve_cil_reference
from rampscreen.screening import (TRAJECTORY_FIELDS, Decision, DynamicScreening, bias_interval,
                                  compute_propagation_bounds, dynamic_screen, propagate_screen,
                                  apply_report, screen_rule, write_trajectory_csv)
from rampscreen.solver import (SolverConfig, SolverState, build_problem,
                               reconstruct_gradient, solve)


def _superderivative_extremes(g, r, lo, up, total, b):
    """Largest and smallest slope of the bias dual at b over all admissible
    gradients (brute force, per sample)."""
    hi = lo_ = -total
    for gi, ri, l, u in zip(g, r, lo, up):
        # a_i(b) is lo when g*+b > 0, up when < 0, anything between at 0
        top = u if gi - ri + b <= 0 else l
        bot = l if gi + ri + b >= 0 else u
        hi += top
        lo_ += bot
    return lo_, hi


@given(st.integers(0, 100_000))
@settings(max_examples=200, deadline=None)
def test_bias_interval_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 12))
    C = float(rng.choice([0.5, 1.0, 3.0]))
    y = rng.choice([-1.0, 1.0], n)
    mu = np.where(rng.random(n) < 0.3, C, 0.0)
    lo = np.minimum(0, C * y) - mu * y
    up = np.maximum(0, C * y) - mu * y
    if rng.random() < 0.3:
        up = up + rng.random(n)          # unequal widths: general path
    total = float(rng.uniform(lo.sum(), up.sum()))
    g = np.round(rng.standard_normal(n), 2)
    r = np.abs(np.round(rng.standard_normal(n), 2)) * (rng.random() < 0.8)
    b_lo, b_hi = bias_interval(g, r, lo, up, total, tol=1e-12)
    # below b_lo the slope is certainly positive, above b_hi certainly negative
    for b in np.linspace(-6, 6, 241):
        smin, smax = _superderivative_extremes(g, r, lo, up, total, b)
        if b < b_lo - 1e-9:
            assert smin > 0, (b, b_lo)
        if b > b_hi + 1e-9:
            assert smax < 0, (b, b_hi)
    # the interval is tight: just inside it the slope can have either sign
    if math.isfinite(b_lo) and b_lo > -6:
        assert _superderivative_extremes(g, r, lo, up, total, b_lo + 1e-7)[0] <= 0
    if math.isfinite(b_hi) and b_hi < 6:
        assert _superderivative_extremes(g, r, lo, up, total, b_hi - 1e-7)[1] >= 0


def test_bias_interval_contains_optimum():
    for seed in range(20):
        _, pr = random_instance(seed)
        a, b = solve_cil_reference(pr)
        g = _gram(pr) @ a - pr.y
        b_lo, b_hi = bias_interval(g, np.zeros(pr.n), pr.lower, pr.upper)
        assert b_lo - 1e-8 <= b <= b_hi + 1e-8


def test_screen_rule_examples():
    g = np.array([1.0, -1.0, 0.1, 0.0])
    r = np.array([0.5, 0.5, 0.5, 0.0])
    d = screen_rule(g, r, -0.2, 0.2)
    assert list(d) == [Decision.SCREENED_LOW, Decision.SCREENED_HIGH, Decision.KEPT, Decision.KEPT]
    # zero radius and point bias still require a strict sign
    assert list(screen_rule(np.array([0.0]), np.array([0.0]), 0.0, 0.0)) == [Decision.KEPT]


def test_zero_gap_screens_every_strict_bound_sample():
    _, pr = random_instance(1)
    a, b = solve_cil_reference(pr)
    st_ = SolverState(alpha=a.copy(), g=reconstruct_gradient(pr, a), b=b)
    rep = dynamic_screen(st_, pr, gap=0.0, apply=False)
    assert not screening_errors(pr, rep.decisions, a, b)
    assert rep.screened.size > 0


@pytest.mark.parametrize("seed", range(15))
def test_dynamic_screen_is_safe(seed):
    _, pr = random_instance(seed, (20, 120))
    a, b = solve_cil_reference(pr)
    for iters in (0, 5, 30, 200):
        st_ = solve(pr, cfg=SolverConfig(max_iter=iters))
        rep = dynamic_screen(st_, pr)
        assert not screening_errors(pr, rep.decisions, a, b)
        assert all(st_.fixed[i] for i in rep.indices(Decision.SCREENED_LOW))
        assert abs(st_.alpha.sum()) < 1e-10 * max(1.0, pr.C)


@pytest.mark.parametrize("seed", range(10))
def test_hook_during_solve_is_safe_and_preserves_optimum(seed):
    _, pr = random_instance(seed, (30, 150))
    a, b = solve_cil_reference(pr)
    cfg = SolverConfig(eps=1e-10, screen_warmup=0, screen_every=3)
    hook = DynamicScreening(pr.n, audit=True)
    st_ = solve(pr, cfg=cfg, hooks=hook)
    assert st_.reports and st_.trajectory
    for rep in st_.reports:
        assert not screening_errors(pr, rep.decisions, a, b)
    plain = solve(pr, cfg=SolverConfig(eps=1e-10))
    assert np.abs(st_.alpha - plain.alpha).max() <= 1e-6
    fractions = [row["screened_fraction"] for row in st_.trajectory]
    assert fractions == sorted(fractions)


def test_point_rule_runs():
    _, pr = random_instance(4, (40, 80))
    st_ = solve(pr, cfg=SolverConfig(max_iter=20))
    rep = dynamic_screen(st_, pr, rule="point", apply=False)
    assert rep.bias_low == rep.bias_high == rep.bias
    with pytest.raises(ValueError):
        dynamic_screen(st_, pr, rule="nope")


def test_negative_gap_is_hard_error():
    _, pr = random_instance(2)
    st_ = solve(pr, cfg=SolverConfig(max_iter=5))
    with pytest.raises(ArithmeticError):
        dynamic_screen(st_, pr, gap=-1e-6)


def test_deferred_when_partner_missing():
    ds = dataset_from_array([[1.0], [-1.0]], [1, -1])
    pr = build_problem(ds, KernelCache(KernelSpec.linear(), ds), 1.0)
    st_ = SolverState(alpha=np.array([0.5, -0.5]), g=np.zeros(2))
    st_.g = reconstruct_gradient(pr, st_.alpha)
    # sample 0 moving to its lower bound needs sample 1, which is in the same batch
    decisions = np.array([Decision.SCREENED_LOW, Decision.SCREENED_HIGH], dtype=np.int8)
    from rampscreen.screening import ScreeningReport
    rep = apply_report(st_, pr, ScreeningReport(decisions, np.zeros(2), 0.0, "dynamic", 0, 0.0))
    assert Decision.DEFERRED in set(rep.decisions.tolist())


def _two_problems(seed, C=None, kernel=None):
    ds, pr0 = random_instance(seed, (30, 80), C=C, kernel=kernel, with_mu=False)
    a0, b0 = solve_cil_reference(pr0)
    prev = solve(pr0, cfg=SolverConfig(eps=1e-10))
    from rampscreen.cccp import compute_mu
    from rampscreen.solver import compute_gap
    prev.gap = compute_gap(prev, pr0, prev.b)
    mu = compute_mu(prev, pr0, -1.0, pr0.C)
    pr1 = build_problem(ds.y, pr0.kernel, pr0.C, mu)
    return pr0, prev, pr1


@pytest.mark.parametrize("seed", range(12))
@pytest.mark.parametrize("variant", ["norm", "exact"])
def test_propagation_is_safe(seed, variant):
    C = (0.1, 1.0, 10.0)[seed % 3]
    pr0, prev, pr1 = _two_problems(seed, C=C)
    bounds = compute_propagation_bounds(prev, pr0, pr1)
    warm = bounds.warm
    assert abs(warm.alpha.sum()) < 1e-10 * max(1.0, C)
    assert np.all(warm.alpha >= pr1.lower) and np.all(warm.alpha <= pr1.upper)
    assert np.allclose(warm.g, reconstruct_gradient(pr1, warm.alpha), atol=1e-9)
    rep = propagate_screen(prev, pr1, bounds, pr1.kernel.row_norms(), variant)
    a1, b1 = solve_cil_reference(pr1)
    assert not screening_errors(pr1, rep.decisions, a1, b1)
    assert bounds.n_lo >= -1e-12 or not rep.screened.size
    apply_report(warm, pr1, rep)
    out = solve(pr1, warm, SolverConfig(eps=1e-10))
    ref = solve(pr1, cfg=SolverConfig(eps=1e-10))
    assert np.abs(out.alpha - ref.alpha).max() <= 1e-6


def test_propagation_fires_at_small_C():
    fired = 0
    for seed in range(12):
        pr0, prev, pr1 = _two_problems(seed, C=0.1, kernel=KernelSpec.gaussian(0.5))
        bounds = compute_propagation_bounds(prev, pr0, pr1)
        rep = propagate_screen(prev, pr1, bounds, pr1.kernel.row_norms())
        fired += rep.screened.size
    assert fired > 0


def test_propagation_requires_row_norms():
    pr0, prev, pr1 = _two_problems(0)
    bounds = compute_propagation_bounds(prev, pr0, pr1)
    with pytest.raises(ValueError, match="row norms"):
        propagate_screen(prev, pr1, bounds)
    with pytest.raises(ValueError):
        propagate_screen(prev, pr1, bounds, displacement="bogus")


def test_trajectory_csv(tmp_path):
    rows = [{k: 0 for k in TRAJECTORY_FIELDS}]
    p = tmp_path / "t.csv"
    write_trajectory_csv(rows, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "# rampscreen-trajectory v1"
    assert next(csv.reader([lines[1]])) == list(TRAJECTORY_FIELDS)
