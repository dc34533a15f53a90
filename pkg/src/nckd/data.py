"""Balanced labelled datasets: synthetic Gaussian mixtures, CSV I/O, splitting and batching."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, ParseError
from .numcore import Rng

__all__ = ["Dataset", "MixtureSpec", "gaussian_mixture", "load_csv", "save_csv", "split", "batches", "write_manifest"]


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    k: int

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise DimensionError(f"features {X.shape} and labels {y.shape} do not match")
        if y.size and (y.min() < 0 or y.max() >= self.k):
            raise ContractError(f"labels must lie in [0, {self.k})")
        if not np.all(np.isfinite(X)):
            raise ContractError("features must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.k)

    @property
    def balanced(self) -> bool:
        c = self.counts
        return bool(c.size and np.all(c == c[0]))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.k)


@dataclass(frozen=True)
class MixtureSpec:
    k: int = 10
    d: int = 32
    n_per_class: int = 300
    center_separation: float = 6.0
    within_class_std: float = 1.5
    placement: str = "etf"

    def __post_init__(self):
        if self.k < 2 or self.d < 1 or self.n_per_class < 1:
            raise ContractError("mixture needs k >= 2, d >= 1 and n_per_class >= 1")
        if not self.center_separation > 0:
            raise ContractError("center_separation must be positive")
        if not self.within_class_std >= 0:
            raise ContractError("within_class_std must be non-negative")
        if self.placement == "etf" and self.d < self.k - 1:
            raise ContractError(f"ETF placement needs d >= k-1 = {self.k - 1}")
        if self.placement == "orthogonal" and self.d < self.k:
            raise ContractError(f"orthogonal placement needs d >= k = {self.k}")
        if self.placement not in ("etf", "orthogonal"):
            raise ContractError(f"unknown placement {self.placement!r}")

    def centers(self, rng: Rng) -> np.ndarray:
        from .geometry import make_simplex_etf, orthonormal_rows

        if self.placement == "etf":
            dirs = make_simplex_etf(self.k, self.d, rng.spawn("centers"))
        else:
            dirs = orthonormal_rows(self.k, self.d, rng.spawn("centers"))
        return self.center_separation * dirs


def gaussian_mixture(spec: MixtureSpec, rng: Rng) -> Dataset:
    """``n_per_class`` draws from N(center_c, std^2 I) per class, stored class by class."""
    centers = spec.centers(rng)
    noise = rng.spawn("noise").gaussian(spec.k * spec.n_per_class, spec.d)
    y = np.repeat(np.arange(spec.k), spec.n_per_class)
    X = centers[y] + spec.within_class_std * noise
    return Dataset(X, y, spec.k)


def save_csv(data: Dataset, path) -> None:
    """Header ``label,f0,f1,...``; floats with 17 significant digits for a lossless round trip."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + [f"f{j}" for j in range(data.d)])
        for label, row in zip(data.y, data.X):
            writer.writerow([int(label)] + [format(v, ".17g") for v in row])


def load_csv(path, k: int | None = None) -> Dataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "label":
            raise ParseError("header must start with 'label'", line=1)
        width = len(header)
        labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ParseError(f"expected {width} fields, got {len(row)}", line=lineno)
            try:
                label = int(row[0])
            except ValueError:
                raise ParseError(f"label {row[0]!r} is not an integer", line=lineno) from None
            if label < 0:
                raise ParseError(f"negative label {label}", line=lineno)
            try:
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ParseError(f"non-numeric cell ({exc})", line=lineno) from None
            if not all(np.isfinite(values)):
                raise ParseError("non-finite feature value", line=lineno)
            labels.append(label)
            rows.append(values)
    X = np.asarray(rows, dtype=np.float64).reshape(len(rows), width - 1)
    y = np.asarray(labels, dtype=np.int64)
    if k is None:
        k = int(y.max()) + 1 if y.size else 0
    return Dataset(X, y, k)


def write_manifest(path, data: Dataset, seed: int | None = None, spec: MixtureSpec | None = None, **extra) -> dict:
    doc = {
        "k": data.k,
        "d": data.d,
        "n": data.n,
        "counts": [int(c) for c in data.counts],
        "balanced": data.balanced,
        "seed": seed,
        "spec": asdict(spec) if spec is not None else None,
    }
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def split(data: Dataset, test_fraction: float, rng: Rng) -> tuple[Dataset, Dataset]:
    """Stratified split: each class contributes round(n_c * test_fraction) samples to the test side."""
    if not 0 < test_fraction < 1:
        raise ContractError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    train_idx, test_idx = [], []
    for c in range(data.k):
        idx = np.flatnonzero(data.y == c)
        n_test = int(round(len(idx) * test_fraction))
        if n_test == 0 or n_test == len(idx):
            raise ContractError(f"class {c}: test fraction {test_fraction} leaves one side empty")
        perm = idx[rng.spawn(f"class{c}").permutation(len(idx))]
        test_idx.append(np.sort(perm[:n_test]))
        train_idx.append(np.sort(perm[n_test:]))
    return data.subset(np.concatenate(train_idx)), data.subset(np.concatenate(test_idx))


def batches(data: Dataset, batch_size: int, rng: Rng | None = None, shuffle: bool = True) -> list[np.ndarray]:
    """Index arrays for one epoch; the last batch may be smaller."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    order = rng.permutation(data.n) if shuffle else np.arange(data.n)
    return [order[i : i + batch_size] for i in range(0, data.n, batch_size)]
