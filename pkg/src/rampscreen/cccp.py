"""CCCP driver for the ramp-loss SVM.

The ramp loss ``R_s(z) = H_1(z) - H_s(z)`` (``H_t(z) = max(0, t - z)``) is a
difference of two convex functions.  Each outer iteration linearises the
concave part ``-C H_s`` at the current model, which turns into the weights
``mu_i = C if y_i f(x_i) < s else 0``, and solves the resulting convex
problem with :func:`rampscreen.solver.solve`.  The loop stops when ``mu``
repeats.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataio import Dataset, Row
from .kernel import GAUSSIAN, KernelCache, KernelSpec, densify, gram
from .screening import (DynamicScreening, apply_report, compute_propagation_bounds,
                        propagate_screen)
from .solver import (SAFE_REASONS, CilProblem, SolverConfig, SolverState, build_problem,
                     primal_objective, solve)

MODES = ("none", "safe", "shrink", "shrink+safe")
MODEL_MAGIC = "rampscreen-model v1"


@dataclass
class TrainConfig:
    kernel: KernelSpec = field(default_factory=lambda: KernelSpec.gaussian(0.5))
    C: float = 1.0
    s: float = 0.0
    eps: float = 1e-8
    mode: str = "safe"
    screen_warmup: int = 50
    screen_every: int = 10
    handoff_gap: float = 1e-4
    max_outer: int = 20
    propagation: bool = True
    propagation_bound: str = "norm"     # "norm": m ||I_i||; "exact": measured gradient move
    rule: str = "interval"              # "point" trusts the bias estimate (not safe)
    audit: bool = False
    max_iter: Optional[int] = None
    cache_rows: int = 1024
    full_matrix_max: int = 4096

    def validate(self) -> "TrainConfig":
        if not (math.isfinite(self.C) and self.C > 0):
            raise ValueError("C must be a positive finite number")
        if not (math.isfinite(self.s) and self.s <= 0):
            raise ValueError("s must be <= 0")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.screen_warmup < 0 or self.screen_every < 1:
            raise ValueError("need screen_warmup >= 0 and screen_every >= 1")
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")
        return self

    @property
    def safe(self) -> bool:
        return self.mode in ("safe", "shrink+safe")

    def solver_config(self) -> SolverConfig:
        return SolverConfig(eps=self.eps, max_iter=self.max_iter,
                            screen_warmup=self.screen_warmup, screen_every=self.screen_every,
                            shrinking=self.mode in ("shrink", "shrink+safe"),
                            shrink_after_handoff=self.mode == "shrink+safe",
                            shrink_warmup=self.screen_warmup, shrink_every=self.screen_every)


# -- losses and the mu rule --

def hinge(z, t: float = 1.0):
    return np.maximum(0.0, t - np.asarray(z, dtype=float))


def ramp(z, s: float = 0.0):
    """R_s(z) = H_1(z) - H_s(z) = min(1 - z, 1 - s) clipped at 0."""
    return hinge(z, 1.0) - hinge(z, s)


def margins(st: SolverState, pr: CilProblem) -> np.ndarray:
    """y_i f(x_i) with f = g + y + b."""
    return pr.y * (st.g + pr.y + st.b)


def compute_mu(st: SolverState, pr: CilProblem, s: float, C: float) -> np.ndarray:
    return np.where(margins(st, pr) < s, float(C), 0.0)


def ramp_objective(st: SolverState, pr: CilProblem, s: float = 0.0) -> float:
    w2 = float(np.dot(st.g + pr.y, st.alpha))
    return 0.5 * w2 + pr.C * float(ramp(margins(st, pr), s).sum())


def tangent_majorizer(st: SolverState, pr: CilProblem, z_prev: np.ndarray, s: float) -> float:
    """Convex surrogate of the ramp objective built at margins ``z_prev``,
    evaluated at ``st``.  It upper-bounds the ramp objective everywhere and
    touches it at the point it was built from."""
    const = float((-pr.C * hinge(z_prev, s) - pr.mu * z_prev).sum())
    return primal_objective(st, pr, st.b) + const


# -- model --

@dataclass
class Model:
    kernel: KernelSpec
    C: float
    s: float
    b: float
    sv_index: np.ndarray        # positions in the training set
    alpha: np.ndarray           # signed coefficients, f(x) = sum alpha_j K(x_j, x) + b
    sv_rows: tuple              # sparse rows of the support vectors
    n_train: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_sv(self) -> int:
        return int(self.sv_index.shape[0])

    def decision_function(self, rows: Sequence[Row]) -> np.ndarray:
        rows = list(rows)
        if not rows:
            return np.zeros(0)
        if self.n_sv == 0:
            return np.full(len(rows), self.b)
        d = max((r[-1][0] for r in list(self.sv_rows) + rows if r), default=0)
        Q = densify(rows, d)
        S = densify(self.sv_rows, d)
        return gram(self.kernel, Q, S) @ self.alpha + self.b

    def save(self, path) -> None:
        Path(path).write_text(format_model(self), encoding="utf-8")


def predict(model: Model, x: Row):
    """(score, label) for one sparse row; label is +1 when score >= 0."""
    score = float(model.decision_function([x])[0])
    return score, (1 if score >= 0 else -1)


def predict_many(model: Model, rows: Sequence[Row]):
    scores = model.decision_function(rows)
    return scores, np.where(scores >= 0, 1, -1)


def format_model(model: Model) -> str:
    k = model.kernel
    lines = [MODEL_MAGIC,
             f"kernel {k.kind}" + (f" {k.kappa!r}" if k.kind == GAUSSIAN else ""),
             f"C {model.C!r}", f"s {model.s!r}", f"b {model.b!r}",
             f"n_train {model.n_train}"]
    for key in sorted(model.meta):
        lines.append(f"meta {key} {model.meta[key]!r}")
    lines.append(f"n_sv {model.n_sv}")
    for i, a, row in zip(model.sv_index, model.alpha, model.sv_rows):
        feats = " ".join(f"{j}:{v!r}" for j, v in row)
        lines.append(f"sv {int(i)} {float(a)!r} {feats}".rstrip())
    return "\n".join(lines) + "\n"


def parse_model(text: str) -> Model:
    lines = text.splitlines()
    if not lines or lines[0].strip() != MODEL_MAGIC:
        raise ValueError(f"not a model file (expected header {MODEL_MAGIC!r})")
    head, meta, svs = {}, {}, []
    for no, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        key = parts[0]
        try:
            if key == "sv":
                row = tuple((int(t.split(":")[0]), float(t.split(":")[1])) for t in parts[3:])
                svs.append((int(parts[1]), float(parts[2]), row))
            elif key == "meta":
                meta[parts[1]] = _literal(" ".join(parts[2:]))
            else:
                head[key] = parts[1:]
        except (IndexError, ValueError) as exc:
            raise ValueError(f"model line {no}: {exc}") from None
    try:
        kind = head["kernel"][0]
        kernel = (KernelSpec.gaussian(float(head["kernel"][1])) if kind == GAUSSIAN
                  else KernelSpec(kind))
        n_sv = int(head["n_sv"][0])
        model = Model(kernel=kernel, C=float(head["C"][0]), s=float(head["s"][0]),
                      b=float(head["b"][0]),
                      sv_index=np.array([t[0] for t in svs], dtype=np.int64),
                      alpha=np.array([t[1] for t in svs], dtype=float),
                      sv_rows=tuple(t[2] for t in svs),
                      n_train=int(head.get("n_train", ["0"])[0]), meta=meta)
    except (KeyError, IndexError) as exc:
        raise ValueError(f"model file missing field {exc}") from None
    if n_sv != len(svs):
        raise ValueError(f"model declares {n_sv} SVs but lists {len(svs)}")
    return model


def _literal(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text.strip("'\"")


def load_model(path) -> Model:
    return parse_model(Path(path).read_text(encoding="utf-8"))


def model_from_state(ds: Dataset, st: SolverState, cfg: TrainConfig, meta=None) -> Model:
    sv = np.flatnonzero(st.alpha != 0.0)
    return Model(kernel=cfg.kernel, C=cfg.C, s=cfg.s, b=float(st.b), sv_index=sv,
                 alpha=st.alpha[sv].copy(), sv_rows=tuple(ds.rows[i] for i in sv),
                 n_train=ds.n, meta=dict(meta or {}))


# -- trace --

@dataclass
class OuterRecord:
    outer: int
    mu_changes: int
    ramp_objective: float
    majorizer: float            # surrogate built at the previous iterate (nan at outer 0)
    cil_iterations: int
    gap: float
    screened_dynamic: int
    screened_propagation: int
    deferred_propagation: int
    kernel_rows: int
    wall_time: float
    status: str
    m: float = 0.0
    n_b: float = 0.0


TRACE_FIELDS = tuple(OuterRecord.__dataclass_fields__)


@dataclass
class CccpTrace:
    records: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)
    status: str = "running"
    final_state: Optional[SolverState] = None
    final_problem: Optional[CilProblem] = None
    states: list = field(default_factory=list)      # (problem, state) per outer, when kept

    @property
    def outer_iterations(self) -> int:
        return len(self.records)

    def descent_violations(self, slack: float = 1e-8) -> list:
        objs = [r.ramp_objective for r in self.records]
        return [k for k in range(1, len(objs)) if objs[k] > objs[k - 1] + slack]

    def majorization_violations(self, slack: float = 1e-8) -> list:
        return [r.outer for r in self.records
                if not math.isnan(r.majorizer) and r.ramp_objective > r.majorizer + slack]

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            fh.write("# rampscreen-trace v1\n")
            w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
            w.writeheader()
            for r in self.records:
                w.writerow({k: (repr(v) if isinstance(v, float) else v)
                            for k, v in asdict(r).items()})


def train(ds: Dataset, cfg: Optional[TrainConfig] = None, keep_states: bool = False,
          kernel: Optional[KernelCache] = None):
    """Fit a ramp-loss SVM.  Returns ``(Model, CccpTrace)``.

    The first convex problem uses ``mu = 0`` (the hinge SVM).  Every later
    one starts from the previous solution re-expressed in the new box, with
    samples cleared by the propagation rule already fixed when a safe mode
    is active.  ``keep_states`` stores every (problem, state) pair on the
    trace for auditing.
    """
    cfg = (cfg or TrainConfig()).validate()
    if ds.n < 2:
        raise ValueError("need at least 2 samples")
    kc = kernel or KernelCache(cfg.kernel, ds, capacity=cfg.cache_rows,
                               full_matrix_max=cfg.full_matrix_max)
    use_prop = cfg.safe and cfg.propagation
    row_norms = kc.row_norms() if use_prop and cfg.propagation_bound == "norm" else None
    scfg = cfg.solver_config()
    y = ds.y
    mu = np.zeros(ds.n)
    trace = CccpTrace()
    prev: Optional[SolverState] = None
    pr_prev: Optional[CilProblem] = None
    z_prev = None
    for outer in range(cfg.max_outer):
        t0 = time.perf_counter()
        pr = build_problem(y, kc, cfg.C, mu)
        warm = None
        n_prop = deferred = 0
        m = n_b = 0.0
        if prev is not None:
            bounds = compute_propagation_bounds(prev, pr_prev, pr)
            warm = bounds.warm
            m = bounds.m
            if use_prop:
                report = propagate_screen(prev, pr, bounds, row_norms, cfg.propagation_bound)
                apply_report(warm, pr, report)
                n_b = bounds.n_b
                n_prop = len(warm.fixed)
                deferred = int((report.decisions == 3).sum())
                trace.trajectory.append({
                    "outer": outer, "iteration": 0, "rule": "propagation",
                    "gap": prev.gap, "bias": prev.b, "bias_low": report.bias_low,
                    "bias_high": report.bias_high, "n_active": ds.n - n_prop,
                    "new_low": int((report.decisions == 1).sum()),
                    "new_high": int((report.decisions == 2).sum()),
                    "deferred": deferred, "screened_fraction": n_prop / ds.n, "shrunk": 0})
                if cfg.audit:
                    warm.reports = [report]
        hooks = (DynamicScreening(ds.n, cfg.handoff_gap if cfg.mode == "shrink+safe" else None,
                                  rule=cfg.rule, audit=cfg.audit, outer=outer)
                 if cfg.safe else None)
        prop_reports = list(warm.reports) if warm is not None else []
        st = solve(pr, warm, scfg, hooks)
        st.reports = prop_reports + st.reports
        if st.gap < -1e-10:
            raise ArithmeticError(f"negative duality gap {st.gap:.3e} at outer {outer}")
        trace.trajectory.extend(st.trajectory)
        z = margins(st, pr)
        obj = ramp_objective(st, pr, cfg.s)
        maj = tangent_majorizer(st, pr, z_prev, cfg.s) if z_prev is not None else math.nan
        mu_next = compute_mu(st, pr, cfg.s, cfg.C)
        safe_fixed = sum(1 for r in st.fixed.values() if r in SAFE_REASONS)
        trace.records.append(OuterRecord(
            outer=outer, mu_changes=int((mu_next != mu).sum()), ramp_objective=obj,
            majorizer=maj, cil_iterations=st.iter, gap=st.gap,
            screened_dynamic=safe_fixed - n_prop, screened_propagation=n_prop,
            deferred_propagation=deferred, kernel_rows=st.kernel_rows,
            wall_time=time.perf_counter() - t0, status=st.status, m=m, n_b=n_b))
        if keep_states:
            trace.states.append((pr, st))
        trace.final_state, trace.final_problem = st, pr
        if np.array_equal(mu_next, mu):
            trace.status = "converged"
            break
        prev, pr_prev, z_prev, mu = st, pr, z, mu_next
    else:
        trace.status = "max-outer"
    st = trace.final_state
    meta = {"outer_iterations": trace.outer_iterations, "final_gap": float(st.gap),
            "status": trace.status, "mode": cfg.mode}
    return model_from_state(ds, st, cfg, meta), trace
