"""SMO solver for one convex inner-loop (CIL) problem of the ramp-loss SVM.

The dual problem is

    min_a  1/2 a'Ha - y'a    s.t.  sum(a) = 0,  lower_i <= a_i <= upper_i

with ``lower_i = min(0, C y_i) - mu_i y_i`` and
``upper_i = max(0, C y_i) - mu_i y_i``.  For ``mu_i`` in {0, C} every box is
either [0, C] or [-C, 0], so ``a = 0`` is always feasible.

The solver keeps the gradient ``g = Ha - y``.  The gradient of the min-max
dual is ``g_i + b`` where ``b`` is the multiplier of the equality
constraint (the primal bias), and the primal score is ``f_i = g_i + y_i + b``.
"""

from __future__ import annotations

import logging
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dataio import Dataset
from .kernel import KernelCache

log = logging.getLogger(__name__)

LOWER = "lower"
UPPER = "upper"

SCREENED_LOW = "screened_low"
SCREENED_HIGH = "screened_high"
SHRUNK = "shrunk"
SAFE_REASONS = (SCREENED_LOW, SCREENED_HIGH)

TAU = 1e-12


@dataclass(frozen=True, eq=False)
class CilProblem:
    y: np.ndarray
    mu: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    C: float
    kernel: KernelCache

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def bound(self, i: int, which: str) -> float:
        return float(self.lower[i] if which == LOWER else self.upper[i])


def box_bounds(y: np.ndarray, mu: np.ndarray, C: float):
    lower = np.minimum(0.0, C * y) - mu * y
    upper = np.maximum(0.0, C * y) - mu * y
    return lower, upper


def build_problem(data, kernel: KernelCache, C: float, mu=None) -> CilProblem:
    """Assemble a CIL problem; ``data`` is a Dataset or a +-1 label vector."""
    y = data.y if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    if not C > 0:
        raise ValueError("C must be positive")
    if kernel.n != y.shape[0]:
        raise ValueError("kernel and labels disagree on n")
    mu = np.zeros_like(y) if mu is None else np.asarray(mu, dtype=float)
    if mu.shape != y.shape:
        raise ValueError("mu must have one entry per sample")
    bad = ~((mu == 0.0) | (mu == C))
    if bad.any():
        raise ValueError(f"mu entries must be 0 or C; sample {int(np.argmax(bad))} is not")
    lower, upper = box_bounds(y, mu, float(C))
    for arr in (y, mu, lower, upper):
        arr.setflags(write=False)
    return CilProblem(y, mu, lower, upper, float(C), kernel)


@dataclass
class SolverConfig:
    eps: float = 1e-8
    max_iter: Optional[int] = None          # None -> max(10**6, 1000 * n)
    screen_warmup: int = 50
    screen_every: int = 10
    shrinking: bool = False
    shrink_after_handoff: bool = False      # shrink+safe: shrink only once safe screening stops
    shrink_warmup: int = 50
    shrink_every: int = 10
    shrink_threshold: float = 0.0
    compact_fraction: float = 0.25
    debug_check_every: int = 0              # >0: verify maintained gradient every k steps


@dataclass
class SolverState:
    alpha: np.ndarray
    g: np.ndarray
    b: float = 0.0
    fixed: dict = field(default_factory=dict)        # index -> reason
    provenance: dict = field(default_factory=dict)   # index -> "dynamic" | "propagation"
    gap: float = math.nan
    iter: int = 0
    status: str = "init"
    kernel_rows: int = 0
    unshrinks: int = 0
    unshrink_resumes: int = 0
    max_step_increase: float = -math.inf
    trajectory: list = field(default_factory=list)
    reports: list = field(default_factory=list)

    @classmethod
    def zeros(cls, pr: CilProblem) -> "SolverState":
        return cls(alpha=np.zeros(pr.n), g=-np.array(pr.y, dtype=float))

    @property
    def active(self) -> np.ndarray:
        mask = np.ones(self.alpha.shape[0], dtype=bool)
        if self.fixed:
            mask[list(self.fixed)] = False
        return np.flatnonzero(mask)

    def safe_fixed_count(self) -> int:
        return sum(1 for r in self.fixed.values() if r in SAFE_REASONS)

    def copy(self) -> "SolverState":
        return SolverState(alpha=self.alpha.copy(), g=self.g.copy(), b=self.b,
                           fixed=dict(self.fixed), provenance=dict(self.provenance),
                           gap=self.gap, iter=self.iter, status=self.status,
                           kernel_rows=self.kernel_rows, unshrinks=self.unshrinks,
                           unshrink_resumes=self.unshrink_resumes,
                           max_step_increase=self.max_step_increase,
                           trajectory=list(self.trajectory), reports=list(self.reports))


# -- array-level helpers shared by the global ops and the solver workspace --

def gap_terms(a, g, b, lo, up) -> np.ndarray:
    """Per-sample duality gap contributions at bias ``b`` (all >= 0).

    sum_i (a_i - lo_i) [g_i + b]_+ + (up_i - a_i) [-(g_i + b)]_+ equals
    P(w(a), b) - D(a) for the CIL primal/dual pair.
    """
    grad = g + b
    return (a - lo) * np.maximum(grad, 0.0) + (up - a) * np.maximum(-grad, 0.0)


def bias_from(a, g, lo, up, mask=None):
    if mask is None:
        mask = np.ones(a.shape[0], dtype=bool)
    free = mask & (a > lo) & (a < up)
    if free.any():
        return float(-g[free].mean()), True
    can_up = mask & (a < up)
    can_down = mask & (a > lo)
    if can_up.any() and can_down.any():
        # b must lie in [-min_up g, -max_down g] at an optimum
        return float(-(g[can_up].min() + g[can_down].max()) / 2.0), True
    if can_up.any():
        return float(-g[can_up].min()), True
    if can_down.any():
        return float(-g[can_down].max()), True
    return 0.0, False


def select_pair(g, can_up, can_down, eps):
    if not can_up.any() or not can_down.any():
        return None
    neg = -g
    vi = np.where(can_up, neg, -np.inf)
    vj = np.where(can_down, neg, np.inf)
    i = int(vi.argmax())
    j = int(vj.argmin())
    if vi[i] - vj[j] <= eps:
        return None
    return i, j


def plan_shift(amount, a, lo, up, cand):
    """Spread ``amount`` over candidate coordinates, largest slack first.

    Returns ``(indices, shifts)`` or None if the candidates cannot absorb it.
    """
    if amount == 0.0:
        return [], []
    slack = (up - a) if amount > 0 else (a - lo)
    slack = np.where(cand, slack, 0.0)
    sign = 1.0 if amount > 0 else -1.0
    need = abs(amount)
    if slack.sum() < need * (1.0 - 1e-12):
        return None
    idx, shifts = [], []
    while need > 0.0:
        k = int(slack.argmax())
        s = float(slack[k])
        if s <= 0.0:
            break
        take = min(s, need)
        idx.append(k)
        shifts.append(sign * take)
        slack[k] = 0.0
        need -= take
    if need > 1e-12 * max(1.0, abs(amount)):
        return None
    return idx, shifts


def _apply_shift(a, g, lo, up, k, shift, row):
    new = a[k] + shift
    # snap onto a bound when the shift exhausts the slack
    if shift > 0 and new >= up[k] - 1e-15 * max(1.0, abs(up[k])):
        new = up[k]
    elif shift < 0 and new <= lo[k] + 1e-15 * max(1.0, abs(lo[k])):
        new = lo[k]
    real = new - a[k]
    a[k] = new
    if real != 0.0:
        g += real * row


def fix_coordinate(a, g, lo, up, cand, k, target, row_fn):
    """Set ``a[k] = target`` and compensate on candidates.  Returns the list
    of partner indices moved, or None if the candidates lack capacity."""
    delta = target - a[k]
    if delta == 0.0:
        return []
    cand = cand.copy()
    cand[k] = False
    plan = plan_shift(-delta, a, lo, up, cand)
    if plan is None:
        return None
    a[k] = target
    g += delta * row_fn(k)
    for p, s in zip(*plan):
        _apply_shift(a, g, lo, up, p, s, row_fn(p))
    return plan[0]


def reconstruct_gradient(pr: CilProblem, alpha: np.ndarray, idx=None) -> np.ndarray:
    """g = H alpha - y from scratch, optionally only for rows ``idx``."""
    idx = np.arange(pr.n) if idx is None else np.asarray(idx, dtype=np.intp)
    nz = np.flatnonzero(alpha)
    if nz.size == 0:
        return -pr.y[idx].astype(float)
    return pr.kernel.block(idx, nz) @ alpha[nz] - pr.y[idx]


# -- public operations on a full SolverState --

def _global_masks(st: SolverState, pr: CilProblem):
    live = np.ones(pr.n, dtype=bool)
    if st.fixed:
        live[list(st.fixed)] = False
    return live, live & (st.alpha < pr.upper), live & (st.alpha > pr.lower)


def select_working_pair(st: SolverState, pr: CilProblem, eps: float = 1e-8):
    """Maximal violating pair ``(i, j)`` over the active set, or None when
    the KKT violation is at most ``eps`` (or nothing can move)."""
    _, can_up, can_down = _global_masks(st, pr)
    return select_pair(st.g, can_up, can_down, eps)


def estimate_bias(st: SolverState, pr: CilProblem) -> float:
    b, ok = bias_from(st.alpha, st.g, pr.lower, pr.upper)
    if not ok:
        warnings.warn("no candidates to estimate the bias; using 0", RuntimeWarning)
    return b


def compute_gap(st: SolverState, pr: CilProblem, b: Optional[float] = None) -> float:
    """Duality gap P(w(alpha), b) - D(alpha) over all samples."""
    if b is None:
        b = estimate_bias(st, pr)
    return float(gap_terms(st.alpha, st.g, b, pr.lower, pr.upper).sum())


def primal_objective(st: SolverState, pr: CilProblem, b: float) -> float:
    """1/2||w||^2 + C sum H_1(y f) + sum mu y f at w = w(alpha)."""
    w2 = float(np.dot(st.g + pr.y, st.alpha))
    z = pr.y * (st.g + b) + 1.0
    return 0.5 * w2 + pr.C * float(np.maximum(0.0, 1.0 - z).sum()) + float(np.dot(pr.mu, z))


def dual_objective(st: SolverState, pr: CilProblem) -> float:
    """Dual value -1/2||w||^2 + y'alpha + sum(mu); a lower bound on the primal."""
    w2 = float(np.dot(st.g + pr.y, st.alpha))
    return -0.5 * w2 + float(np.dot(pr.y, st.alpha)) + float(pr.mu.sum())


def fix_and_compensate(st: SolverState, pr: CilProblem, i: int, bound: str,
                       reason: Optional[str] = None, exclude=None) -> bool:
    """Pin ``alpha_i`` at ``bound`` and move the offset onto other active
    samples so the sum stays zero.  Returns False (state unchanged) when the
    partners lack capacity; the caller may retry later."""
    if i in st.fixed:
        raise ValueError(f"sample {i} is already fixed")
    live, _, _ = _global_masks(st, pr)
    cand = live.copy()
    if exclude is not None:
        cand[np.asarray(list(exclude), dtype=np.intp)] = False

    def row_fn(k):
        st.kernel_rows += 1
        return pr.kernel.row(k)

    ok = fix_coordinate(st.alpha, st.g, pr.lower, pr.upper, cand, i,
                        pr.bound(i, bound), row_fn) is not None
    if ok:
        st.fixed[i] = reason or (SCREENED_LOW if bound == LOWER else SCREENED_HIGH)
    return ok


def shrink_candidates(a, g, lo, up, live, threshold) -> np.ndarray:
    """Samples at a bound whose gradient pushes them further into it by more
    than ``threshold`` beyond the extreme of the opposite candidate set."""
    can_up = live & (a < up)
    can_down = live & (a > lo)
    if not can_up.any() or not can_down.any():
        return np.zeros_like(live)
    neg = -g
    m_up = neg[can_up].max()
    m_down = neg[can_down].min()
    at_upper = live & ~can_up
    at_lower = live & ~can_down
    return (at_upper & (neg - m_up > threshold)) | (at_lower & (m_down - neg > threshold))


def shrink_heuristic(st: SolverState, pr: CilProblem, threshold: float = 0.0,
                     strikes: Optional[dict] = None) -> list:
    """One shrinking check on a full state.

    ``strikes`` carries the per-sample count of consecutive checks that found
    the sample pushed against its bound; a sample is shrunk on its second.
    Returns the newly shrunk indices.
    """
    strikes = {} if strikes is None else strikes
    live, _, _ = _global_masks(st, pr)
    push = shrink_candidates(st.alpha, st.g, pr.lower, pr.upper, live, threshold)
    shrunk = []
    for k in np.flatnonzero(live):
        k = int(k)
        if push[k]:
            strikes[k] = strikes.get(k, 0) + 1
            if strikes[k] >= 2:
                st.fixed[k] = SHRUNK
                shrunk.append(k)
        else:
            strikes.pop(k, None)
    return shrunk


def unshrink(st: SolverState, pr: CilProblem) -> list:
    """Release every shrunk sample, rebuilding its gradient from scratch."""
    back = [k for k, r in st.fixed.items() if r == SHRUNK]
    for k in back:
        del st.fixed[k]
    if back:
        st.g[back] = reconstruct_gradient(pr, st.alpha, back)
    return back


def repair_feasibility(st: SolverState, pr: CilProblem) -> float:
    """Restore sum(alpha) = 0 by moving active coordinates, largest remaining
    slack first.  Returns the norm of the displacement."""
    deficit = -float(st.alpha.sum())
    if deficit == 0.0:
        return 0.0
    live, _, _ = _global_masks(st, pr)
    plan = plan_shift(deficit, st.alpha, pr.lower, pr.upper, live)
    if plan is None:
        raise ValueError("cannot restore sum(alpha) = 0 inside the box")
    moved = 0.0
    for k, s in zip(*plan):
        before = st.alpha[k]
        st.kernel_rows += 1
        _apply_shift(st.alpha, st.g, pr.lower, pr.upper, k, s, pr.kernel.row(k))
        moved += (st.alpha[k] - before) ** 2
    return math.sqrt(moved)


def schedule(it: int, warmup: int = 50, every: int = 10) -> bool:
    return it >= warmup and (it - warmup) % every == 0


# -- the solver proper --

class Workspace:
    """Compacted working copy of the non-fixed part of a problem.

    Local arrays cover ``idx`` (sorted global indices).  Samples fixed
    mid-solve stay in the arrays with ``live = False`` until enough of them
    pile up, then the workspace is rebuilt without them.
    """

    def __init__(self, pr: CilProblem, st: SolverState, members: np.ndarray):
        self.pr = pr
        self.st = st
        self.dropped = False
        self._load(np.asarray(members, dtype=np.intp))

    def _load(self, members):
        pr, st = self.pr, self.st
        self.idx = members
        self.m = members.size
        self.whole = self.m == pr.n
        self.a = st.alpha[members].copy()
        self.g = st.g[members].copy()
        self.lo = np.asarray(pr.lower[members])
        self.up = np.asarray(pr.upper[members])
        self.y = np.asarray(pr.y[members])
        self.diag = np.asarray(pr.kernel.diag[members])
        self.live = np.ones(self.m, dtype=bool)
        self.can_up = self.a < self.up
        self.can_down = self.a > self.lo
        self.strikes = np.zeros(self.m, dtype=np.int64)
        self.dead = 0
        self.n_shrunk = sum(1 for r in st.fixed.values() if r == SHRUNK)
        self._rows = OrderedDict()
        # same memory budget as the global cache, in local-length rows
        self._capacity = max(1, int(pr.kernel.capacity * pr.n / max(self.m, 1)))
        if pr.kernel.full:
            self.K = pr.kernel.matrix if self.whole else pr.kernel.matrix[np.ix_(members, members)]
        else:
            self.K = None

    def row(self, k: int) -> np.ndarray:
        self.st.kernel_rows += 1
        if self.K is not None:
            return self.K[k]
        kc = self.pr.kernel
        gi = int(self.idx[k])
        if self.whole:
            return kc.row(gi)
        r = self._rows.get(k)
        if r is not None:
            self._rows.move_to_end(k)
            return r
        # a cached full row is cheap to slice; otherwise evaluate live columns only
        full = kc.peek(gi)
        r = full[self.idx] if full is not None else kc.row_subset(gi, self.idx)
        self._rows[k] = r
        if len(self._rows) > self._capacity:
            self._rows.popitem(last=False)
        return r

    def _refresh(self, k: int):
        live = self.live[k]
        self.can_up[k] = live and self.a[k] < self.up[k]
        self.can_down[k] = live and self.a[k] > self.lo[k]

    def writeback(self):
        self.st.alpha[self.idx] = self.a
        self.st.g[self.idx] = self.g

    def kill(self, k: int, reason: str, provenance: Optional[str] = None):
        self.live[k] = False
        self.can_up[k] = self.can_down[k] = False
        gi = int(self.idx[k])
        self.st.fixed[gi] = reason
        if reason == SHRUNK:
            self.n_shrunk += 1
        if provenance:
            self.st.provenance[gi] = provenance
        self.dead += 1

    def fix(self, k: int, which: str, exclude=None) -> bool:
        """Local fix-and-compensate; ``exclude`` masks forbidden partners."""
        cand = self.live.copy()
        if exclude is not None:
            cand &= ~exclude
        target = self.lo[k] if which == LOWER else self.up[k]
        moved = fix_coordinate(self.a, self.g, self.lo, self.up, cand, k, target, self.row)
        if moved is None:
            return False
        for p in moved:
            self._refresh(p)
        self._refresh(k)
        return True

    def maybe_compact(self, fraction: float):
        if self.dead and self.dead >= fraction * self.m:
            self.writeback()
            self.dropped = True
            self._load(self.idx[self.live])

    def step(self, i: int, j: int):
        a, g = self.a, self.g
        Ki = self.row(i)
        Kj = self.row(j)
        eta_true = Ki[i] + Kj[j] - 2.0 * Ki[j]
        eta = eta_true if eta_true >= TAU else TAU
        delta = (g[j] - g[i]) / eta
        room_i = self.up[i] - a[i]
        room_j = a[j] - self.lo[j]
        if delta >= room_i or delta >= room_j:
            if room_i <= room_j:
                delta = room_i
                a[i] = self.up[i]
                a[j] = self.lo[j] if room_i == room_j else a[j] - delta
            else:
                delta = room_j
                a[j] = self.lo[j]
                a[i] = a[i] + delta
        else:
            a[i] += delta
            a[j] -= delta
        change = delta * (g[i] - g[j]) + 0.5 * max(eta_true, 0.0) * delta * delta
        if change > self.st.max_step_increase:
            self.st.max_step_increase = change
        step = Ki - Kj
        step *= delta
        g += step
        self._refresh(i)
        self._refresh(j)

    def select(self, eps: float):
        """Working pair by second-order selection: ``i`` is the maximal
        violator, ``j`` maximises the guaranteed decrease with ``i``.  None
        once the maximal violation is at most ``eps``."""
        g = self.g
        g_up = np.where(self.can_up, g, np.inf)
        i = int(g_up.argmin())
        g_i = g_up[i]
        g_down = np.where(self.can_down, g, -np.inf)
        if not g_down.max() - g_i > eps:
            return None
        Ki = self.row(i)
        # decrease of the pair step is diff^2 / curvature for diff > 0
        diff = g_down - g_i
        np.maximum(diff, 0.0, out=diff)
        diff *= diff
        curv = Ki * -2.0
        curv += self.diag
        curv += self.diag[i]
        np.maximum(curv, TAU, out=curv)
        diff /= curv
        return i, int(diff.argmax())

    def shrink(self, threshold: float, fraction: float):
        push = shrink_candidates(self.a, self.g, self.lo, self.up, self.live, threshold)
        self.strikes[push] += 1
        self.strikes[~push] = 0
        for k in np.flatnonzero(push & (self.strikes >= 2)):
            self.kill(int(k), SHRUNK)
        self.maybe_compact(fraction)

    def has_shrunk(self) -> bool:
        return self.n_shrunk > 0

    def unshrink(self):
        self.writeback()
        local = set(self.idx.tolist())
        back = [k for k, r in self.st.fixed.items() if r == SHRUNK]
        missing = [k for k in back if k not in local]
        for k in back:
            del self.st.fixed[k]
        if missing:
            self.st.g[missing] = reconstruct_gradient(self.pr, self.st.alpha, missing)
        self._load(self.st.active)

    def check_gradient(self, tol: float = 1e-8):
        self.writeback()
        ref = reconstruct_gradient(self.pr, self.st.alpha, self.idx)
        err = float(np.max(np.abs(ref - self.g))) if self.m else 0.0
        if err > tol:
            raise AssertionError(f"maintained gradient drifted by {err:.3e}")


Hook = Callable[[Workspace, int], Optional[bool]]


def solve(pr: CilProblem, warm: Optional[SolverState] = None,
          cfg: Optional[SolverConfig] = None, hooks: Optional[Hook] = None) -> SolverState:
    """Run SMO on ``pr`` until the maximal KKT violation is at most ``eps``.

    ``warm`` may carry a box-feasible starting point (and pre-fixed samples);
    if its sum is off, a repair pass runs first.  ``hooks(ws, it)`` is called
    on the screening schedule and may fix samples through ``ws.fix`` /
    ``ws.kill``; returning False stops further screening for this solve.
    """
    cfg = cfg or SolverConfig()
    if warm is None:
        st = SolverState.zeros(pr)
    else:
        st = warm.copy()
        st.trajectory, st.reports = [], []
        slack = 1e-12 * max(1.0, pr.C)
        if np.any(st.alpha < pr.lower - slack) or np.any(st.alpha > pr.upper + slack):
            raise ValueError("warm start violates the box constraints")
        np.clip(st.alpha, pr.lower, pr.upper, out=st.alpha)
        if abs(float(st.alpha.sum())) > 1e-12 * max(1.0, pr.C):
            repair_feasibility(st, pr)
    st.iter = 0
    st.status = "running"
    max_iter = cfg.max_iter if cfg.max_iter is not None else max(10**6, 1000 * pr.n)

    members = st.active
    ws = Workspace(pr, st, members) if members.size else None
    screening = hooks is not None
    shrinking = cfg.shrinking and not (cfg.shrink_after_handoff and screening)
    shrink_from = cfg.shrink_warmup
    last_screen = -1
    it = 0
    status = "optimal"
    while ws is not None and ws.m:
        if screening and it != last_screen and schedule(it, cfg.screen_warmup, cfg.screen_every):
            last_screen = it
            if hooks(ws, it) is False:
                screening = False
                if cfg.shrinking:
                    shrinking = True
                    shrink_from = it + cfg.shrink_every
            ws.maybe_compact(cfg.compact_fraction)
        if shrinking and it >= shrink_from and (it - shrink_from) % cfg.shrink_every == 0:
            ws.shrink(cfg.shrink_threshold, cfg.compact_fraction)
        pair = ws.select(cfg.eps)
        if pair is None:
            if not ws.has_shrunk():
                break
            ws.unshrink()
            st.unshrinks += 1
            pair = ws.select(cfg.eps)
            if pair is None:
                break
            st.unshrink_resumes += 1
        ws.step(*pair)
        it += 1
        if cfg.debug_check_every and it % cfg.debug_check_every == 0:
            ws.check_gradient()
        if it >= max_iter:
            status = "max-iter"
            break

    if ws is not None:
        ws.writeback()
        if ws.dropped or ws.m < pr.n:
            stale = np.setdiff1d(np.arange(pr.n), ws.idx, assume_unique=True)
            if stale.size:
                st.g[stale] = reconstruct_gradient(pr, st.alpha, stale)
    # provisional shrinking never outlives a solve
    for k in [k for k, r in st.fixed.items() if r == SHRUNK]:
        del st.fixed[k]
    if not np.all(np.isfinite(st.g)):
        raise FloatingPointError("non-finite gradient in SMO")
    st.iter = it
    st.status = status
    st.b = estimate_bias(st, pr)
    st.gap = compute_gap(st, pr, st.b)
    if status == "max-iter":
        log.warning("SMO hit the iteration cap (%d) with gap %.3e", max_iter, st.gap)
    return st
