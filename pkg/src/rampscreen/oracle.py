"""Reference solvers for tests.

Deliberately simple and slow (dense matrices, n <= 500).  The CIL solver is
accelerated projected gradient with an exact projection onto
``{sum(a) = c} ∩ box``, finished by a primal active-set method that solves
the equality-constrained problem on each face exactly.  Whatever
path it takes, an answer is only returned once :func:`check_kkt` certifies
it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dataio import Dataset
from .kernel import KernelCache
from .solver import CilProblem, SolverState, build_problem

MAX_N = 500


class OracleError(RuntimeError):
    pass


@dataclass
class KktViolationReport:
    violation: np.ndarray       # per sample, >= 0
    max_violation: float
    sum_residual: float         # |sum(alpha)|
    box_residual: float         # largest box breach

    def ok(self, tol: float) -> bool:
        return max(self.max_violation, self.sum_residual, self.box_residual) <= tol


def _gram(pr: CilProblem) -> np.ndarray:
    idx = np.arange(pr.n)
    K = np.array(pr.kernel.block(idx, idx), dtype=float)
    return 0.5 * (K + K.T)


def _at_bounds(pr: CilProblem, alpha):
    atol = 1e-12 * max(1.0, pr.C)
    return alpha <= pr.lower + atol, alpha >= pr.upper - atol


def check_kkt(pr: CilProblem, alpha, b: float, tol: float = 0.0,
              K: Optional[np.ndarray] = None) -> KktViolationReport:
    """Per-sample distance from the optimality conditions at ``(alpha, b)``.

    With ``dD = K alpha - y + b``: a free sample needs ``dD = 0``, one at
    its lower bound ``dD >= 0``, one at its upper bound ``dD <= 0``.
    """
    alpha = np.asarray(alpha, dtype=float)
    K = _gram(pr) if K is None else K
    grad = K @ alpha - pr.y + b
    at_lo, at_up = _at_bounds(pr, alpha)
    viol = np.abs(grad)
    viol = np.where(at_lo, np.maximum(0.0, -grad), viol)
    viol = np.where(at_up, np.maximum(0.0, grad), viol)
    viol = np.where(at_lo & at_up, 0.0, viol)
    box = float(np.max(np.maximum(pr.lower - alpha, alpha - pr.upper), initial=0.0))
    return KktViolationReport(viol, float(viol.max(initial=0.0)),
                              abs(float(alpha.sum())), max(box, 0.0))


def project(v, lo, up, total: float = 0.0) -> np.ndarray:
    """Euclidean projection onto ``{x : sum(x) = total, lo <= x <= up}``.

    The projection is ``clip(v - t, lo, up)`` for the shift ``t`` at which the
    sum matches; ``sum(clip(v - t))`` is monotone in ``t``, so bisection finds
    it.
    """
    if not lo.sum() <= total <= up.sum():
        raise ValueError("empty feasible set")
    t_lo = float(np.min(v - up)) - 1.0
    t_hi = float(np.max(v - lo)) + 1.0
    for _ in range(200):
        t = 0.5 * (t_lo + t_hi)
        if np.clip(v - t, lo, up).sum() > total:
            t_lo = t
        else:
            t_hi = t
        if t_hi - t_lo <= 1e-16 * max(1.0, abs(t)):
            break
    x = np.clip(v - 0.5 * (t_lo + t_hi), lo, up)
    # bisection leaves a sum error of order 1e-15; put it on a free coordinate
    err = total - x.sum()
    free = np.flatnonzero((x > lo) & (x < up))
    if free.size:
        k = free[np.argmax(np.minimum(x[free] - lo[free], up[free] - x[free]))]
        x[k] = min(max(x[k] + err, lo[k]), up[k])
    return x


def _bias_interval(grad_nob, at_lo, at_up):
    """Range of b satisfying the sign conditions of bound samples."""
    b_min = float(np.max(-grad_nob[at_lo & ~at_up], initial=-np.inf))
    b_max = float(np.min(-grad_nob[at_up & ~at_lo], initial=np.inf))
    return b_min, b_max


def _face_step(pr: CilProblem, K, x, free, grad):
    """Step minimising the objective on the face where only ``free`` moves
    (keeping the sum), and the multiplier of the sum constraint.

    When the reduced system is singular and inconsistent the objective is
    unbounded along a zero-curvature direction on the face; that direction
    is returned with ``unbounded=True``.
    """
    F = np.flatnonzero(free)
    M = np.zeros((F.size + 1, F.size + 1))
    M[:-1, :-1] = K[np.ix_(F, F)]
    M[:-1, -1] = 1.0
    M[-1, :-1] = 1.0
    rhs = np.zeros(F.size + 1)
    rhs[:-1] = -grad[F]
    sol = np.linalg.lstsq(M, rhs, rcond=None)[0]
    resid = rhs - M @ sol
    p = np.zeros(pr.n)
    scale = max(1.0, float(np.abs(rhs).max()))
    if np.linalg.norm(resid) > 1e-9 * scale:
        # resid lies in null(M): zero curvature, sum-preserving, strictly descending
        p[F] = resid[:-1]
        return p, float(sol[-1]), True
    p[F] = sol[:-1]
    return p, float(sol[-1]), False


def _active_set(pr: CilProblem, K, x, tol: float, max_steps=None):
    """Primal active-set method from the feasible point ``x``.

    The working set starts as the samples sitting on a bound.  Each step
    either moves to the minimiser on the current face (or to the first bound
    in the way, which joins the working set) or releases the bound sample
    whose multiplier has the wrong sign.  Returns a certified ``(alpha, b)``
    or None when the step budget runs out.
    """
    lo, up = pr.lower, pr.upper
    x = x.copy()
    at_lo = x <= lo
    at_up = (x >= up) & ~at_lo
    max_steps = max_steps or 20 * pr.n + 50
    for _ in range(max_steps):
        free = ~(at_lo | at_up)
        grad = K @ x - pr.y
        if free.any():
            p, b, unbounded = _face_step(pr, K, x, free, grad)
        else:
            p, unbounded = np.zeros(pr.n), False
            b_min, b_max = _bias_interval(grad, at_lo, at_up)
            finite = [v for v in (b_min, b_max) if math.isfinite(v)]
            b = float(np.mean(finite)) if finite else 0.0
        if unbounded or np.abs(p).max() > 1e-13 * max(1.0, pr.C):
            # longest step along p that stays in the box
            with np.errstate(divide="ignore", invalid="ignore"):
                room = np.where(p > 0, (up - x) / p, np.where(p < 0, (lo - x) / p, np.inf))
            room[~free] = np.inf
            k = int(room.argmin())
            step = float(room[k]) if unbounded else min(1.0, float(room[k]))
            x = x + step * p
            np.clip(x, lo, up, out=x)
            if unbounded or room[k] <= 1.0:
                if p[k] > 0:
                    x[k] = up[k]
                    at_up[k] = True
                else:
                    x[k] = lo[k]
                    at_lo[k] = True
                continue
            # full step: x is the minimiser on this face, go check multipliers
            grad = K @ x - pr.y
            b = float(-np.mean(grad[free]))
        dD = grad + b
        wrong = np.where(at_lo, -dD, 0.0) + np.where(at_up, dD, 0.0)
        wrong[lo == up] = 0.0
        k = int(wrong.argmax())
        if wrong[k] <= 0.0:
            if check_kkt(pr, x, b, K=K).ok(tol):
                return x, b
            return None
        at_lo[k] = at_up[k] = False
    return None


def solve_cil_reference(pr: CilProblem, tol: float = 1e-10, max_iter: int = 20_000,
                        polish_every: int = 500):
    """Reference optimum ``(alpha, b)`` of a CIL problem, KKT-certified to ``tol``.

    Accelerated projected gradient runs in rounds of ``polish_every`` steps;
    after each round an active-set pass tries to finish exactly from the
    current iterate.
    """
    n = pr.n
    if n > MAX_N:
        raise ValueError(f"reference solver is limited to n <= {MAX_N}")
    lo, up = np.asarray(pr.lower, float), np.asarray(pr.upper, float)
    if np.all(lo == up):
        return lo.copy(), 0.0
    K = _gram(pr)
    L = max(float(np.linalg.eigvalsh(K)[-1]), 1e-12)
    x = project(np.zeros(n), lo, up)
    z = x.copy()
    t = 1.0
    for it in range(0, max_iter, polish_every):
        for _ in range(polish_every):
            x_new = project(z - (K @ z - pr.y) / L, lo, up)
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            z = x_new + ((t - 1.0) / t_new) * (x_new - x)
            x, t = x_new, t_new
        res = _active_set(pr, K, x, tol)
        if res is not None:
            return res
    raise OracleError(f"reference solver did not reach tol={tol:g} in {max_iter} steps")


def dual_value(pr: CilProblem, alpha, K: Optional[np.ndarray] = None) -> float:
    """1/2 a'Ka - y'a (the minimised form)."""
    K = _gram(pr) if K is None else K
    return 0.5 * float(alpha @ K @ alpha) - float(pr.y @ alpha)


def reference_state(pr: CilProblem, alpha, b: float) -> SolverState:
    """A full SolverState for a reference solution."""
    K = _gram(pr)
    alpha = np.asarray(alpha, dtype=float).copy()
    return SolverState(alpha=alpha, g=K @ alpha - pr.y, b=float(b), status="reference")


def solve_rsvm_reference(ds: Dataset, cfg, tol: float = 1e-10):
    """CCCP from mu = 0 with the reference CIL solver and no screening.

    Returns ``(Model, states)`` where ``states`` lists ``(problem, state)``
    per outer iteration.
    """
    from .cccp import compute_mu, model_from_state

    if ds.n > MAX_N:
        raise ValueError(f"reference trainer is limited to n <= {MAX_N}")
    cfg = cfg.validate()
    kc = KernelCache(cfg.kernel, ds, full_matrix_max=MAX_N)
    mu = np.zeros(ds.n)
    states = []
    status = "max-outer"
    for _ in range(cfg.max_outer):
        pr = build_problem(ds.y, kc, cfg.C, mu)
        st = reference_state(pr, *solve_cil_reference(pr, tol))
        states.append((pr, st))
        mu_next = compute_mu(st, pr, cfg.s, cfg.C)
        if np.array_equal(mu_next, mu):
            status = "converged"
            break
        mu = mu_next
    model = model_from_state(ds, st, cfg, {"outer_iterations": len(states), "status": status})
    return model, states
