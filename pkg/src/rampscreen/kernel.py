"""Kernel evaluation and row access for the dual solver.

Small problems (``n <= full_matrix_max``) get the whole Gram matrix up
front; larger ones are served row by row from an LRU cache.
"""

from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dataio import Dataset, Row

LINEAR = "linear"
GAUSSIAN = "gaussian"
_ALIASES = {"linear": LINEAR, "gaussian": GAUSSIAN, "rbf": GAUSSIAN}


@dataclass(frozen=True)
class KernelSpec:
    kind: str = GAUSSIAN
    kappa: Optional[float] = None

    def __post_init__(self):
        kind = _ALIASES.get(self.kind)
        if kind is None:
            raise ValueError(f"unknown kernel {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if kind == GAUSSIAN:
            if self.kappa is None or not (math.isfinite(self.kappa) and self.kappa > 0):
                raise ValueError("gaussian kernel needs a finite kappa > 0")
        else:
            object.__setattr__(self, "kappa", None)

    @classmethod
    def linear(cls) -> "KernelSpec":
        return cls(LINEAR)

    @classmethod
    def gaussian(cls, kappa: float) -> "KernelSpec":
        return cls(GAUSSIAN, float(kappa))


def _sparse_dot(a: Row, b: Row) -> float:
    i = j = 0
    s = 0.0
    while i < len(a) and j < len(b):
        ia, ib = a[i][0], b[j][0]
        if ia == ib:
            s += a[i][1] * b[j][1]
            i += 1
            j += 1
        elif ia < ib:
            i += 1
        else:
            j += 1
    return s


def evaluate(spec: KernelSpec, x_i: Row, x_j: Row) -> float:
    """K(x_i, x_j) on sparse rows."""
    if spec.kind == LINEAR:
        return _sparse_dot(x_i, x_j)
    # ||a-b||^2 by merging, not via the dot-product expansion, so x == y gives 0
    i = j = 0
    sq = 0.0
    while i < len(x_i) or j < len(x_j):
        ia = x_i[i][0] if i < len(x_i) else None
        ib = x_j[j][0] if j < len(x_j) else None
        if ib is None or (ia is not None and ia < ib):
            sq += x_i[i][1] ** 2
            i += 1
        elif ia is None or ib < ia:
            sq += x_j[j][1] ** 2
            j += 1
        else:
            diff = x_i[i][1] - x_j[j][1]
            sq += diff * diff
            i += 1
            j += 1
    return math.exp(-spec.kappa * sq)


def densify(rows: Sequence[Row], d: Optional[int] = None) -> np.ndarray:
    if d is None:
        d = max((r[-1][0] for r in rows if r), default=0)
    X = np.zeros((len(rows), d))
    for k, row in enumerate(rows):
        for idx, val in row:
            if idx <= d:
                X[k, idx - 1] = val
    return X


def gram(spec: KernelSpec, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Dense kernel block K(A_r, B_c)."""
    if spec.kind == LINEAR:
        return A @ B.T
    sq = (np.einsum("ij,ij->i", A, A)[:, None]
          + np.einsum("ij,ij->i", B, B)[None, :] - 2.0 * (A @ B.T))
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-spec.kappa * sq)


class KernelCache:
    """Kernel rows over one dataset.

    ``row(i)`` returns the full length-n row.  With ``n <= full_matrix_max``
    the Gram matrix is built once; otherwise rows are computed on demand and
    kept in an LRU cache of ``capacity`` rows.  ``row_computes`` counts rows
    actually evaluated (the full matrix counts as ``n``).
    """

    def __init__(self, spec: KernelSpec, data, capacity: int = 1024,
                 full_matrix_max: int = 4096):
        self.spec = spec
        self.X = densify(data.rows) if isinstance(data, Dataset) else np.asarray(data, float)
        self.n = self.X.shape[0]
        self.capacity = max(int(capacity), 1)
        self._lock = threading.Lock()
        self._rows: OrderedDict[int, np.ndarray] = OrderedDict()
        self._row_norms: Optional[np.ndarray] = None
        self.row_computes = 0
        self.partial_computes = 0
        self.hits = 0
        if spec.kind == GAUSSIAN:
            self.diag = np.ones(self.n)
        else:
            self.diag = np.einsum("ij,ij->i", self.X, self.X)
        self.matrix: Optional[np.ndarray] = None
        if self.n <= full_matrix_max:
            K = gram(spec, self.X, self.X)
            K = 0.5 * (K + K.T)
            np.fill_diagonal(K, self.diag)
            K.setflags(write=False)
            self.matrix = K
            self.row_computes = self.n

    @property
    def full(self) -> bool:
        return self.matrix is not None

    def _check(self, i: int) -> int:
        i = int(i)
        if not 0 <= i < self.n:
            raise IndexError(f"sample index {i} out of range [0, {self.n})")
        return i

    def row(self, i: int) -> np.ndarray:
        i = self._check(i)
        if self.matrix is not None:
            return self.matrix[i]
        with self._lock:
            r = self._rows.get(i)
            if r is not None:
                self._rows.move_to_end(i)
                self.hits += 1
                return r
        r = gram(self.spec, self.X[i:i + 1], self.X)[0]
        r[i] = self.diag[i]
        r.setflags(write=False)
        with self._lock:
            self.row_computes += 1
            self._rows[i] = r
            self._rows.move_to_end(i)
            while len(self._rows) > self.capacity:
                self._rows.popitem(last=False)
        return r

    def peek(self, i: int) -> Optional[np.ndarray]:
        """Cached row ``i`` or None, without computing anything."""
        if self.matrix is not None:
            return self.matrix[i]
        with self._lock:
            return self._rows.get(int(i))

    def row_subset(self, i: int, cols: np.ndarray) -> np.ndarray:
        """K(x_i, x_cols) computed directly (not cached here)."""
        i = self._check(i)
        r = gram(self.spec, self.X[i:i + 1], self.X[cols])[0]
        r[cols == i] = self.diag[i]
        with self._lock:
            self.partial_computes += 1
        return r

    def block(self, rows, cols) -> np.ndarray:
        """K[rows][:, cols] without touching the row cache."""
        rows = np.asarray(rows, dtype=np.intp)
        cols = np.asarray(cols, dtype=np.intp)
        if self.matrix is not None:
            return self.matrix[np.ix_(rows, cols)]
        out = gram(self.spec, self.X[rows], self.X[cols])
        same = rows[:, None] == cols[None, :]
        if same.any():
            out[same] = self.diag[np.broadcast_to(rows[:, None], same.shape)[same]]
        return out

    def row_norms(self) -> np.ndarray:
        """Euclidean norm of every kernel row, computed once."""
        with self._lock:
            if self._row_norms is not None:
                return self._row_norms
        if self.matrix is not None:
            norms = np.linalg.norm(self.matrix, axis=1)
        else:
            norms = np.empty(self.n)
            step = max(1, 2_000_000 // max(self.n, 1))
            for start in range(0, self.n, step):
                idx = np.arange(start, min(start + step, self.n))
                norms[idx] = np.linalg.norm(self.block(idx, np.arange(self.n)), axis=1)
        norms.setflags(write=False)
        with self._lock:
            self._row_norms = norms
        return norms

    def decision_values(self, X_query: np.ndarray, coef: np.ndarray, idx) -> np.ndarray:
        """sum_j coef_j K(x_idx[j], q) for each query row q."""
        if len(idx) == 0:
            return np.zeros(X_query.shape[0])
        return gram(self.spec, X_query, self.X[np.asarray(idx)]) @ coef
