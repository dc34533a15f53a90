"""Class means, normalized centroids, simplex ETFs and the ETF target matrix."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateCentroidError, DegenerateInputError, DimensionError
from .numcore import Rng

__all__ = [
    "CentroidSet",
    "EtfTarget",
    "class_means",
    "normalize_centroids",
    "make_simplex_etf",
    "etf_target",
    "PcaResult",
    "pca_fit",
    "pca_project",
]


@dataclass(frozen=True)
class CentroidSet:
    class_means: np.ndarray  # (K, d)
    global_mean: np.ndarray  # (d,)
    normalized: np.ndarray  # (K, d), unit rows
    counts: np.ndarray  # (K,)
    balanced: bool = True

    @property
    def k(self) -> int:
        return self.class_means.shape[0]

    @property
    def d(self) -> int:
        return self.class_means.shape[1]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "d": self.d,
            "counts": [int(c) for c in self.counts],
            "balanced": self.balanced,
            "class_means": self.class_means.tolist(),
            "global_mean": self.global_mean.tolist(),
            "normalized": self.normalized.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CentroidSet":
        return cls(
            class_means=np.asarray(doc["class_means"], dtype=np.float64),
            global_mean=np.asarray(doc["global_mean"], dtype=np.float64),
            normalized=np.asarray(doc["normalized"], dtype=np.float64),
            counts=np.asarray(doc["counts"], dtype=np.int64),
            balanced=bool(doc.get("balanced", True)),
        )


@dataclass(frozen=True)
class EtfTarget:
    k: int
    matrix: np.ndarray = field(repr=False)


def normalize_centroids(means: np.ndarray, global_mean: np.ndarray | None = None) -> np.ndarray:
    """Center rows by the global mean (mean of rows by default) and scale each to unit norm."""
    means = np.asarray(means, dtype=np.float64)
    if global_mean is None:
        global_mean = means.mean(axis=0)
    centered = means - global_mean
    norms = np.sqrt(np.einsum("kd,kd->k", centered, centered))
    for k, n in enumerate(norms):
        if n == 0.0:
            raise DegenerateCentroidError(k)
    return centered / norms[:, None]


def class_means(features, labels, k: int | None = None) -> CentroidSet:
    """Per-class means, their average, and the normalized centered centroids.

    Within each class the rows are summed in lexicographic order of their
    values, so shuffling the samples leaves every field bit-identical.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise DimensionError(f"features {features.shape} and labels {labels.shape} do not match")
    if k is None:
        k = int(labels.max()) + 1 if labels.size else 0
    if k < 1:
        raise DegenerateInputError("no classes")
    d = features.shape[1]
    means = np.empty((k, d))
    counts = np.zeros(k, dtype=np.int64)
    for c in range(k):
        rows = features[labels == c]
        if rows.shape[0] == 0:
            raise DegenerateInputError(f"class {c} has no samples")
        # sort rows lexicographically so the sum order is permutation-proof
        rows = rows[np.lexsort(rows.T[::-1])]
        counts[c] = rows.shape[0]
        means[c] = np.ascontiguousarray(rows).sum(axis=0) / counts[c]
    global_mean = means.mean(axis=0)
    normalized = normalize_centroids(means, global_mean) if k > 1 else np.zeros_like(means)
    return CentroidSet(
        class_means=means,
        global_mean=global_mean,
        normalized=normalized,
        counts=counts,
        balanced=bool(np.all(counts == counts[0])),
    )


def orthonormal_rows(n: int, d: int, rng: Rng) -> np.ndarray:
    """n x d matrix with orthonormal rows (n <= d) drawn from a random Gaussian frame."""
    q, r = np.linalg.qr(rng.gaussian(d, n))
    q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
    return q.T


def make_simplex_etf(k: int, d: int, rng: Rng) -> np.ndarray:
    """K unit rows in R^d with every pairwise inner product equal to -1/(K-1)."""
    if k < 2:
        raise ContractError(f"a simplex ETF needs k >= 2, got {k}")
    if d < k - 1:
        raise DimensionError(f"simplex ETF with {k} vertices needs d >= {k - 1}, got {d}")
    centering = np.eye(k) - np.full((k, k), 1.0 / k)
    if d >= k:
        m = np.sqrt(k / (k - 1)) * centering @ orthonormal_rows(k, d, rng)
    else:
        # d == k-1: no K orthonormal rows exist; use a basis of the complement of 1_K
        q, _ = np.linalg.qr(centering)
        basis = q[:, : k - 1]
        m = np.sqrt(k / (k - 1)) * basis @ orthonormal_rows(k - 1, d, rng)
    m = m / np.linalg.norm(m, axis=1, keepdims=True)
    if m[0, 0] < 0:
        m = -m
    return m


def etf_target(k: int) -> EtfTarget:
    if k < 2:
        raise ContractError(f"etf_target needs k >= 2, got {k}")
    matrix = (k / (k - 1)) * (np.eye(k) - np.full((k, k), 1.0 / k))
    # the expression is exact up to rounding; pin the entries to their closed forms
    matrix[~np.eye(k, dtype=bool)] = -1.0 / (k - 1)
    np.fill_diagonal(matrix, 1.0)
    return EtfTarget(k=k, matrix=matrix)


@dataclass(frozen=True)
class PcaResult:
    mean: np.ndarray
    components: np.ndarray  # (dims, d)
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray

    def transform(self, features) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.mean) @ self.components.T


def pca_fit(features, dims: int) -> PcaResult:
    features = np.asarray(features, dtype=np.float64)
    n, d = features.shape
    if dims > d or dims < 1:
        raise DimensionError(f"cannot project {d}-dimensional features onto {dims} components")
    mean = features.mean(axis=0)
    centered = features - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:dims].copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    var = s**2 / max(n - 1, 1)
    total = var.sum()
    ratio = var[:dims] / total if total > 0 else np.zeros(dims)
    return PcaResult(mean=mean, components=comps, explained_variance=var[:dims], explained_variance_ratio=ratio)


def pca_project(features, dims: int) -> np.ndarray:
    """Coordinates of the centered features on their top ``dims`` principal axes."""
    return pca_fit(features, dims).transform(features)
