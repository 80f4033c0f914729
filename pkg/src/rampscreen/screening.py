"""Safe sample screening for the CIL dual.

Two rules fix dual variables at a bound before the solver has converged:

* the dynamic rule, evaluated periodically inside one solve from the
  current duality gap;
* the propagation rule, evaluated once between two successive CIL problems
  of the CCCP loop from the converged state of the previous one.

Both rest on the same fact: for a feasible ``alpha`` with gap ``G`` the
optimal ``w*`` satisfies ``||w(alpha) - w*||^2 <= G``, so the bias-free part
of every optimal dual gradient lies within ``sqrt(K_ii G)`` of the current
one.  The bias is not controlled by the gap, so instead of trusting the
current bias estimate we bound the optimal bias by an interval
(:func:`bias_interval`) that holds for every gradient consistent with those
radii.  A sample is screened only if the sign of its optimal gradient is
certain for every bias in that interval.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .solver import (LOWER, SCREENED_HIGH, SCREENED_LOW, UPPER, CilProblem,
                     SolverState, bias_from, compute_gap, estimate_bias,
                     fix_and_compensate, gap_terms, repair_feasibility, schedule)

__all__ = ["Decision", "ScreeningReport", "PropagationBounds", "bias_interval",
           "screen_rule", "dynamic_screen", "DynamicScreening",
           "compute_propagation_bounds", "propagate_screen", "apply_report",
           "schedule", "write_trajectory_csv", "TRAJECTORY_FIELDS"]


class Decision(enum.IntEnum):
    KEPT = 0
    SCREENED_LOW = 1
    SCREENED_HIGH = 2
    DEFERRED = 3


_REASON = {Decision.SCREENED_LOW: SCREENED_LOW, Decision.SCREENED_HIGH: SCREENED_HIGH}
_BOUND = {Decision.SCREENED_LOW: LOWER, Decision.SCREENED_HIGH: UPPER}


@dataclass
class ScreeningReport:
    decisions: np.ndarray          # Decision codes, one per sample
    radii: np.ndarray              # sqrt(K_ii * gap)
    gap: float
    rule: str                      # "dynamic" | "propagation"
    iteration: int
    screened_fraction: float
    bias: float = math.nan
    bias_low: float = -math.inf
    bias_high: float = math.inf

    def indices(self, decision: Decision) -> np.ndarray:
        return np.flatnonzero(self.decisions == decision)

    @property
    def screened(self) -> np.ndarray:
        return np.flatnonzero((self.decisions == Decision.SCREENED_LOW)
                              | (self.decisions == Decision.SCREENED_HIGH))


@dataclass
class PropagationBounds:
    m: float                       # ||alpha_warm - alpha_prev||_2, repair included
    q: np.ndarray                  # sqrt(K_ii |G_warm - G_prev|)
    changed: np.ndarray            # samples whose mu flipped
    warm: SolverState              # feasible start for the next problem
    prev_gap: float
    prev_bias: float
    shift_norm: float              # C * sqrt(|changed|), before the repair pass
    displacement: np.ndarray       # |g_warm - g_prev| per sample
    n_lo: float = 0.0              # prev_bias - lowest admissible next bias
    n_hi: float = 0.0              # highest admissible next bias - prev_bias

    @property
    def n_b(self) -> float:
        return max(self.n_lo, self.n_hi)


def bias_interval(g, radii, lo, up, total=0.0, tol=None):
    """Interval certain to contain every optimal bias.

    The optimal bias ``b*`` maximises ``sum_i min_{a in box_i} a (g*_i + b)
    - b * total`` where each optimal bias-free gradient ``g*_i`` is only
    known to lie in ``[g_i - r_i, g_i + r_i]``.  The superderivative in
    ``b`` is ``sum_i a_i(b) - total`` with ``a_i(b)`` at the lower bound
    when ``g*_i + b > 0`` and at the upper bound when ``< 0``; wherever its
    extreme value over all admissible ``g*`` keeps a strict sign, ``b*``
    lies on a known side.  ``tol`` absorbs rounding and only widens the
    interval.
    """
    g = np.asarray(g, float)
    n = g.size
    if n == 0:
        return -math.inf, math.inf
    width = up - lo
    if tol is None:
        tol = 1e-9 * max(1.0, float(width.max()))
    start = float(up.sum()) - total
    if start <= tol:
        return -math.inf, math.inf
    thr_lo = -(g + radii)
    thr_hi = radii - g
    w0 = float(width[0])
    if w0 > 0 and np.all(width == w0):
        # equal widths: the crossing is an order statistic, no sort needed
        k = max(1, math.ceil((start - tol) / w0))
        while k > 1 and start - (k - 1) * w0 <= tol:
            k -= 1
        k = min(k, n)
        b_lo = float(np.partition(thr_lo, k - 1)[k - 1])
        k = math.floor((start + tol) / w0) + 1
        while k <= n and not start - k * w0 < -tol:
            k += 1
        while k > 1 and start - (k - 1) * w0 < -tol:
            k -= 1
        b_hi = float(np.partition(thr_hi, k - 1)[k - 1]) if k <= n else math.inf
        return b_lo, b_hi
    step = -width
    order = np.argsort(thr_lo, kind="stable")
    s = start + np.cumsum(step[order])
    hit = np.flatnonzero(s <= tol)
    b_lo = float(thr_lo[order[hit[0]]]) if hit.size else float(thr_lo.max())
    order = np.argsort(thr_hi, kind="stable")
    s = start + np.cumsum(step[order])
    hit = np.flatnonzero(s < -tol)
    b_hi = float(thr_hi[order[hit[0]]]) if hit.size else math.inf
    return b_lo, b_hi


SIGN_MARGIN = 1e-12


def screen_rule(g, radii, b_lo, b_hi, margin: float = SIGN_MARGIN) -> np.ndarray:
    """Decision codes: low if the optimal gradient is surely positive, high if
    surely negative, kept otherwise.  ``margin`` keeps rounding noise on
    free samples from passing for a sign when the gap is near zero."""
    out = np.full(g.shape[0], Decision.KEPT, dtype=np.int8)
    low = g - radii + b_lo > margin
    high = g + radii + b_hi < -margin
    out[low & ~high] = Decision.SCREENED_LOW
    out[high & ~low] = Decision.SCREENED_HIGH
    return out


def _point_or_interval(rule, g, radii, lo, up, total, b):
    if rule == "point":
        return b, b
    if rule != "interval":
        raise ValueError(f"unknown rule {rule!r}")
    return bias_interval(g, radii, lo, up, total)


def dynamic_screen(st: SolverState, pr: CilProblem, gap: Optional[float] = None,
                   rule: str = "interval", apply: bool = True) -> ScreeningReport:
    """Evaluate the dynamic rule on the active samples of a full state and
    (if ``apply``) fix the screened ones via fix-and-compensate.

    ``gap`` defaults to the gap of the problem restricted to the active set.
    ``rule="point"`` uses the current bias estimate instead of the bias
    interval; it is kept for comparison and is not safe in general.
    """
    active = st.active
    lo, up = pr.lower[active], pr.upper[active]
    a, g = st.alpha[active], st.g[active]
    b, _ = bias_from(a, g, lo, up)
    if gap is None:
        gap = float(gap_terms(a, g, b, lo, up).sum())
    if gap < -1e-10:
        raise ArithmeticError(f"negative duality gap {gap:.3e}")
    gap = max(gap, 0.0)
    radii = np.sqrt(pr.kernel.diag * gap)
    b_lo, b_hi = _point_or_interval(rule, g, radii[active], lo, up, float(a.sum()), b)
    decisions = np.zeros(pr.n, dtype=np.int8)
    decisions[active] = screen_rule(g, radii[active], b_lo, b_hi)
    if apply:
        _execute(st, pr, decisions, "dynamic")
    return ScreeningReport(decisions, radii, gap, "dynamic", st.iter,
                           st.safe_fixed_count() / pr.n, b, b_lo, b_hi)


def _execute(st: SolverState, pr: CilProblem, decisions: np.ndarray, provenance: str):
    batch = set(np.flatnonzero((decisions == Decision.SCREENED_LOW)
                               | (decisions == Decision.SCREENED_HIGH)).tolist())
    for i in sorted(batch):
        d = Decision(decisions[i])
        pending = batch - {i}
        if fix_and_compensate(st, pr, i, _BOUND[d], _REASON[d], exclude=pending):
            st.provenance[i] = provenance
        else:
            decisions[i] = Decision.DEFERRED
        batch.discard(i)


def apply_report(st: SolverState, pr: CilProblem, report: ScreeningReport) -> ScreeningReport:
    """Fix the samples a report screened; unplaceable ones become DEFERRED."""
    _execute(st, pr, report.decisions, report.rule)
    report.screened_fraction = st.safe_fixed_count() / pr.n
    return report


TRAJECTORY_FIELDS = ("outer", "iteration", "rule", "gap", "bias", "bias_low", "bias_high",
                     "n_active", "new_low", "new_high", "deferred", "screened_fraction",
                     "shrunk")


class DynamicScreening:
    """Solver hook running the dynamic rule on the live part of a workspace.

    Works on the reduced problem: fixed samples sit at values that every
    optimum shares, so the gap and bias interval of the remaining variables
    (whose equality constraint is ``sum = -sum(fixed)``) are valid for it.
    Returns False once the gap drops to ``handoff_gap``.
    """

    def __init__(self, n_total: int, handoff_gap: Optional[float] = None,
                 rule: str = "interval", audit: bool = False, outer: int = 0):
        self.n_total = n_total
        self.handoff_gap = handoff_gap
        self.rule = rule
        self.audit = audit
        self.outer = outer
        self._fixed = None

    def __call__(self, ws, it: int):
        st = ws.st
        if self._fixed is None:
            self._fixed = st.safe_fixed_count()
        if ws.dead:
            live = np.flatnonzero(ws.live)
            a, g, lo, up, diag = ws.a[live], ws.g[live], ws.lo[live], ws.up[live], ws.diag[live]
        else:
            live = None
            a, g, lo, up, diag = ws.a, ws.g, ws.lo, ws.up, ws.diag
        b, _ = bias_from(a, g, lo, up)
        gap = float(gap_terms(a, g, b, lo, up).sum())
        if gap < -1e-10:
            raise ArithmeticError(f"negative duality gap {gap:.3e}")
        radii = np.sqrt(diag * max(gap, 0.0))
        b_lo, b_hi = _point_or_interval(self.rule, g, radii, lo, up, float(a.sum()), b)
        local = screen_rule(g, radii, b_lo, b_hi)
        hits = np.flatnonzero(local)
        counts = {Decision.SCREENED_LOW: 0, Decision.SCREENED_HIGH: 0, Decision.DEFERRED: 0}
        if hits.size:
            pos_ws = hits if live is None else live[hits]
            batch = np.zeros(ws.m, dtype=bool)
            batch[pos_ws] = True
            for pos, k in zip(hits, pos_ws):
                k = int(k)
                d = Decision(local[pos])
                batch[k] = False
                if ws.fix(k, _BOUND[d], exclude=batch):
                    ws.kill(k, _REASON[d], "dynamic")
                    counts[d] += 1
                else:
                    local[pos] = Decision.DEFERRED
                    counts[Decision.DEFERRED] += 1
        self._fixed += counts[Decision.SCREENED_LOW] + counts[Decision.SCREENED_HIGH]
        fraction = self._fixed / self.n_total
        st.trajectory.append({
            "outer": self.outer, "iteration": it, "rule": "dynamic", "gap": gap,
            "bias": b, "bias_low": b_lo, "bias_high": b_hi,
            "n_active": ws.m - ws.dead,
            "new_low": counts[Decision.SCREENED_LOW],
            "new_high": counts[Decision.SCREENED_HIGH],
            "deferred": counts[Decision.DEFERRED],
            "screened_fraction": fraction,
            "shrunk": ws.n_shrunk,
        })
        if self.audit:
            members = ws.idx if live is None else ws.idx[live]
            decisions = np.zeros(self.n_total, dtype=np.int8)
            decisions[members] = local
            full_radii = np.full(self.n_total, math.nan)
            full_radii[members] = radii
            st.reports.append(ScreeningReport(decisions, full_radii, gap, "dynamic", it,
                                              fraction, b, b_lo, b_hi))
        if self.handoff_gap is not None and gap <= self.handoff_gap:
            return False
        return True


def compute_propagation_bounds(prev: SolverState, pr_prev: CilProblem,
                               pr_next: CilProblem) -> PropagationBounds:
    """Warm start for the next CIL problem and the slack terms of the
    propagation rule.

    The warm point moves every sample whose ``mu`` flipped by
    ``y_i (mu_i - mu'_i)`` (the same beta, re-expressed in the new box), then
    a repair pass restores ``sum(alpha) = 0``.  Only the moved coordinates
    touch kernel rows.  ``prev`` must hold a converged state with a full,
    consistent gradient and its full gap.
    """
    changed = np.flatnonzero(pr_prev.mu != pr_next.mu)
    warm = SolverState(alpha=prev.alpha.copy(), g=prev.g.copy(), b=prev.b)
    shift = pr_prev.y * (pr_prev.mu - pr_next.mu)
    for j in changed:
        warm.alpha[j] += shift[j]
        warm.kernel_rows += 1
        warm.g += shift[j] * pr_next.kernel.row(j)
    np.clip(warm.alpha, pr_next.lower, pr_next.upper, out=warm.alpha)
    repair_feasibility(warm, pr_next)
    warm.b = estimate_bias(warm, pr_next)
    warm.gap = compute_gap(warm, pr_next, warm.b)
    m = float(np.linalg.norm(warm.alpha - prev.alpha))
    diag = pr_next.kernel.diag
    q = np.sqrt(diag * abs(warm.gap - prev.gap))
    return PropagationBounds(m=m, q=q, changed=changed, warm=warm, prev_gap=prev.gap,
                             prev_bias=prev.b, shift_norm=pr_next.C * math.sqrt(changed.size),
                             displacement=np.abs(warm.g - prev.g))


def propagate_screen(prev: SolverState, pr_next: CilProblem, bounds: PropagationBounds,
                     row_norms=None, displacement: str = "norm") -> ScreeningReport:
    """Screen samples of the next CIL problem from the previous solution.

    With ``dD_i = g_i + b`` at the previous converged state, a sample goes
    to the new lower bound when
    ``dD_i - sqrt(K_ii G_prev) - m ||I_i|| - n_lo - q_i > 0`` and to the new
    upper bound when ``dD_i + sqrt(K_ii G_prev) + m ||I_i|| + n_hi + q_i < 0``.
    ``m ||I_i||`` bounds how far the warm start moved the gradient
    (``displacement="exact"`` uses the measured move instead), and
    ``n_lo``/``n_hi`` bound how far the optimal bias of the next problem
    can sit from the previous bias.  Nothing is fixed here; see
    :func:`apply_report`.
    """
    diag = pr_next.kernel.diag
    if displacement == "norm":
        if row_norms is None:
            raise ValueError("propagation screening needs kernel row norms; "
                             "enable row-norm precomputation")
        move = bounds.m * np.asarray(row_norms)
    elif displacement == "exact":
        move = bounds.displacement
    else:
        raise ValueError(f"unknown displacement bound {displacement!r}")
    base = np.sqrt(diag * max(prev.gap, 0.0))
    slack = base + move + bounds.q
    b_lo, b_hi = bias_interval(prev.g, slack, pr_next.lower, pr_next.upper, 0.0)
    bounds.n_lo = prev.b - b_lo
    bounds.n_hi = b_hi - prev.b
    decisions = screen_rule(prev.g, slack, b_lo, b_hi)
    return ScreeningReport(decisions, base, prev.gap, "propagation", 0,
                           0.0, prev.b, b_lo, b_hi)


def write_trajectory_csv(rows, path) -> None:
    """Screening trajectory as CSV, first line ``# rampscreen-trajectory v1``."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write("# rampscreen-trajectory v1\n")
        w = csv.DictWriter(fh, fieldnames=TRAJECTORY_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
