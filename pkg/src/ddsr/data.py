"""Datasets: CSV loading, seeded train/test split and target noise."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    train: np.ndarray
    test: np.ndarray
    names: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    @property
    def X_train(self) -> np.ndarray:
        return self.X[self.train]

    @property
    def y_train(self) -> np.ndarray:
        return self.y[self.train]

    @property
    def X_test(self) -> np.ndarray:
        return self.X[self.test]

    @property
    def y_test(self) -> np.ndarray:
        return self.y[self.test]


def split_indices(n: int, seed: int = 0, train_fraction: float = 0.75) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_train = min(n - 1, max(1, int(round(train_fraction * n))))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def make_dataset(X, y, seed: int = 0, train_fraction: float = 0.75, names=()) -> Dataset:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise DataError(f"{X.shape[0]} input rows but {y.shape[0]} targets")
    if X.shape[0] < 2:
        raise DataError("need at least 2 samples")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise DataError("non-finite values in data")
    tr, te = split_indices(X.shape[0], seed, train_fraction)
    return Dataset(X, y, tr, te, tuple(names))


def load_csv(path: str | Path, seed: int = 0, train_fraction: float = 0.75) -> Dataset:
    """Read ``x1,...,xk,y`` with a header row; errors name the file line."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from None
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise DataError(f"{path}:1: missing header")
    header = next(csv.reader([lines[0]]))
    header = [h.strip() for h in header]
    k = len(header) - 1
    expected = [f"x{i + 1}" for i in range(k)] + ["y"]
    if k < 1 or header != expected:
        raise DataError(f"{path}:1: header must be {','.join(expected) if k >= 1 else 'x1,...,xk,y'}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            raise DataError(f"{path}:{lineno}: blank line")
        cells = next(csv.reader([line]))
        if len(cells) != k + 1:
            raise DataError(f"{path}:{lineno}: expected {k + 1} fields, got {len(cells)}")
        try:
            vals = [float(c) for c in cells]
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric cell") from None
        if not all(math.isfinite(v) for v in vals):
            raise DataError(f"{path}:{lineno}: non-finite value")
        rows.append(vals)
    if len(rows) < 2:
        raise DataError(f"{path}: need at least 2 data rows")
    arr = np.array(rows)
    return make_dataset(arr[:, :k], arr[:, k], seed, train_fraction, header[:k])


def write_csv(path: str | Path, X: np.ndarray, y: np.ndarray) -> None:
    X = np.atleast_2d(X)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(X.shape[1])] + ["y"])
        for xi, yi in zip(X, y):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])


def inject_noise(data: Dataset, gamma: float, rng: np.random.Generator) -> Dataset:
    """Add N(0, gamma * RMS(y)) noise to the training targets only."""
    if gamma < 0:
        raise ValueError("noise level must be non-negative")
    if gamma == 0:
        return data
    y = data.y.copy()
    rms = float(np.sqrt(np.mean(data.y**2)))
    y[data.train] = y[data.train] + rng.normal(0.0, gamma * rms, size=data.train.size)
    return replace(data, y=y)
