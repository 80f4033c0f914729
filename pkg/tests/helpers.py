"""Shared fixture builders for the test suite."""

import numpy as np

from rampscreen.dataio import Dataset, make_synthetic
from rampscreen.kernel import KernelCache, KernelSpec
from rampscreen.solver import build_problem

KAPPAS = (0.05, 0.5, 5.0)
CS = (0.1, 1.0, 10.0, 100.0)


def dataset_from_array(X, y) -> Dataset:
    rows = tuple(tuple((j + 1, float(v)) for j, v in enumerate(x) if v != 0.0) for x in X)
    return Dataset(rows, tuple(int(v) for v in y))


def random_instance(seed: int, n_range=(10, 60), kernel=None, C=None, with_mu=True):
    """A random CIL problem: points, labels, a mu pattern and a kernel.

    Returns ``(dataset, problem)``.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    d = int(rng.integers(2, 6))
    X = rng.standard_normal((n, d))
    y = np.where(X[:, 0] + 0.7 * rng.standard_normal(n) > 0, 1, -1)
    if abs(int(y.sum())) == n:
        y[0] = -y[0]
    if kernel is None:
        choice = int(rng.integers(0, 4))
        kernel = KernelSpec.linear() if choice == 3 else KernelSpec.gaussian(KAPPAS[choice])
    if C is None:
        C = CS[int(rng.integers(0, len(CS)))]
    ds = dataset_from_array(X, y)
    kc = KernelCache(kernel, ds)
    mu = np.where(rng.random(n) < 0.15, C, 0.0) if with_mu else None
    return ds, build_problem(ds, kc, C, mu)


def outlier_dataset(seed: int, n: int = 80, flip=None, separation: float = 3.0):
    rng = np.random.default_rng(10_000 + seed)
    if flip is None:
        flip = float(rng.uniform(0.05, 0.15))
    return make_synthetic(n, flip, separation, seed)


def screening_errors(pr, decisions, alpha_ref, b_ref, K=None, tol=1e-7):
    """Screened samples whose reference optimum contradicts the decision.

    A sample screened low must sit at its lower bound with a non-negative
    optimal dual gradient, one screened high at its upper bound with a
    non-positive one.
    """
    from rampscreen.oracle import _gram
    from rampscreen.screening import Decision

    K = _gram(pr) if K is None else K
    grad = K @ alpha_ref - pr.y + b_ref
    scale = tol * max(1.0, pr.C)
    bad = []
    for i in np.flatnonzero(decisions == Decision.SCREENED_LOW):
        if alpha_ref[i] > pr.lower[i] + scale or grad[i] < -tol:
            bad.append(int(i))
    for i in np.flatnonzero(decisions == Decision.SCREENED_HIGH):
        if alpha_ref[i] < pr.upper[i] - scale or grad[i] > tol:
            bad.append(int(i))
    return bad
