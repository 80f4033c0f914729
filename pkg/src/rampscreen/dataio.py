"""Datasets in LIBSVM sparse format, deterministic subsampling and a
synthetic two-cluster generator with label-flip outliers.

Labels are always mapped to {-1, +1}: anything > 0 becomes +1, everything
else -1.  Rows are tuples of ``(index, value)`` pairs with 1-based, strictly
increasing indices.
"""

from __future__ import annotations

import io
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, TextIO, Union

import numpy as np

Row = tuple[tuple[int, float], ...]


class LibsvmParseError(ValueError):
    """Raised on malformed LIBSVM input; ``lineno`` is 1-based."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Dataset:
    rows: tuple[Row, ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        if len(self.rows) != len(self.labels):
            raise ValueError(
                f"{len(self.rows)} rows but {len(self.labels)} labels")
        for i, lab in enumerate(self.labels):
            if lab not in (-1, 1):
                raise ValueError(f"label {lab!r} of sample {i} not in {{-1, +1}}")
        for i, row in enumerate(self.rows):
            prev = 0
            for idx, _ in row:
                if idx <= prev:
                    raise ValueError(
                        f"sample {i}: indices must be >= 1 and strictly increasing")
                prev = idx

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def d(self) -> int:
        return max((row[-1][0] for row in self.rows if row), default=0)

    @property
    def y(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=float)

    def take(self, indices: Iterable[int]) -> "Dataset":
        indices = list(indices)
        return Dataset(tuple(self.rows[i] for i in indices),
                       tuple(self.labels[i] for i in indices))

    def with_labels(self, labels: Iterable[int]) -> "Dataset":
        return Dataset(self.rows, tuple(int(v) for v in labels))


def _parse_lines(lines: Iterable[str]) -> Dataset:
    rows, labels = [], []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            label = float(tokens[0])
        except ValueError:
            raise LibsvmParseError(f"bad label {tokens[0]!r}", lineno) from None
        if math.isnan(label):
            raise LibsvmParseError("label is NaN", lineno)
        row = []
        prev = 0
        for tok in tokens[1:]:
            idx_s, sep, val_s = tok.partition(":")
            if not sep:
                raise LibsvmParseError(f"expected index:value, got {tok!r}", lineno)
            try:
                idx = int(idx_s)
                val = float(val_s)
            except ValueError:
                raise LibsvmParseError(f"malformed feature {tok!r}", lineno) from None
            if not math.isfinite(val):
                raise LibsvmParseError(f"non-finite value in {tok!r}", lineno)
            if idx < 1:
                raise LibsvmParseError(f"feature index {idx} < 1", lineno)
            if idx <= prev:
                raise LibsvmParseError(
                    f"non-increasing feature index {idx} after {prev}", lineno)
            prev = idx
            row.append((idx, val))
        rows.append(tuple(row))
        labels.append(1 if label > 0 else -1)
    if not rows:
        raise LibsvmParseError("no samples")
    return Dataset(tuple(rows), tuple(labels))


def parse_libsvm(text: Union[str, TextIO]) -> Dataset:
    """Parse LIBSVM text (a string or an open text stream)."""
    if isinstance(text, str):
        text = io.StringIO(text)
    return _parse_lines(text)


def load_libsvm(path: Union[str, Path]) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        return _parse_lines(fh)


def format_libsvm(ds: Dataset) -> str:
    # repr() keeps floats exact, so parse(format(ds)) == ds
    out = []
    for lab, row in zip(ds.labels, ds.rows):
        feats = " ".join(f"{i}:{v!r}" for i, v in row)
        out.append(f"{lab:+d} {feats}".rstrip())
    return "\n".join(out) + "\n"


def save_libsvm(ds: Dataset, path: Union[str, Path]) -> None:
    Path(path).write_text(format_libsvm(ds), encoding="utf-8")


def subsample(ds: Dataset, m: int, seed: int) -> Dataset:
    """Draw ``m`` samples without replacement, reproducibly.

    The generator is Python's ``random.Random(seed)`` (MT19937), of which only
    ``random()`` is used: a partial Fisher-Yates shuffle swaps position ``k``
    with ``k + floor(random() * (n - k))`` for ``k = 0..m-1``.  ``random()``
    is the one part of the stdlib generator whose output sequence is
    guaranteed stable across Python versions and platforms.
    """
    if not 1 <= m <= ds.n:
        raise ValueError(f"need 1 <= m <= n={ds.n}, got m={m}")
    rng = random.Random(seed)
    perm = list(range(ds.n))
    for k in range(m):
        j = k + int(rng.random() * (ds.n - k))
        perm[k], perm[j] = perm[j], perm[k]
    return ds.take(perm[:m])


def make_synthetic(n: int, flip_fraction: float = 0.0, separation: float = 6.0,
                   seed: int = 0) -> Dataset:
    """Two unit-variance 2-D Gaussian clusters at (+-separation/2, 0).

    Labels are balanced (``n // 2`` negatives).  ``round(flip_fraction * n)``
    samples, chosen with a stream independent of the point draws, get their
    label negated, so for a fixed seed the clean and contaminated datasets
    share the same points and differ exactly in the flipped labels.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    if not 0.0 <= flip_fraction <= 0.5:
        raise ValueError("flip_fraction must lie in [0, 0.5]")
    if not separation > 0:
        raise ValueError("separation must be positive")
    point_rng, flip_rng = (np.random.Generator(np.random.PCG64(s))
                           for s in np.random.SeedSequence(seed).spawn(2))
    y = np.ones(n, dtype=int)
    y[: n // 2] = -1
    y = point_rng.permutation(y)
    X = point_rng.standard_normal((n, 2))
    X[:, 0] += y * separation / 2.0
    n_flip = int(round(flip_fraction * n))
    flipped = flip_rng.choice(n, size=n_flip, replace=False) if n_flip else []
    y[flipped] *= -1
    rows = tuple(((1, float(a)), (2, float(b))) for a, b in X)
    return Dataset(rows, tuple(int(v) for v in y))
