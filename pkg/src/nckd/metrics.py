"""Neural Collapse metrics NC1, NC2 and NC3 for a feature / label / classifier snapshot."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DegenerateInputError, DimensionError
from .geometry import CentroidSet, class_means
from .numcore import pinv

__all__ = ["ScatterPair", "NcReport", "scatter", "nc1", "nc2", "nc3", "nc_report"]


@dataclass(frozen=True)
class ScatterPair:
    sigma_w: np.ndarray
    sigma_b: np.ndarray
    balanced: bool = True


@dataclass(frozen=True)
class NcReport:
    nc1: float
    nc2: float
    nc3: float | None
    k: int
    d: int
    balanced: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def _check(features, labels):
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise DimensionError(f"features {features.shape} and labels {labels.shape} do not match")
    return features, labels


def scatter(features, labels, k: int | None = None, centroids: CentroidSet | None = None) -> ScatterPair:
    """Within-class and between-class covariance with balanced-data normalizers.

    For unbalanced input each class's inner sum is divided by its own count,
    which reduces to 1/(NK) when every class has N samples.
    """
    features, labels = _check(features, labels)
    if centroids is None:
        centroids = class_means(features, labels, k)
    k = centroids.k
    if k < 2:
        raise DegenerateInputError("scatter needs at least two classes")
    d = features.shape[1]
    sigma_w = np.zeros((d, d))
    for c in range(k):
        dev = features[labels == c] - centroids.class_means[c]
        sigma_w += dev.T @ dev / centroids.counts[c]
    sigma_w /= k
    centered = centroids.class_means - centroids.global_mean
    sigma_b = centered.T @ centered / k
    return ScatterPair(sigma_w=sigma_w, sigma_b=sigma_b, balanced=centroids.balanced)


def nc1(features, labels, k: int | None = None, rel_tol: float = 1e-10) -> float:
    """Within-class variability relative to between-class spread, (1/K) tr(S_W S_B^+)."""
    features, labels = _check(features, labels)
    cs = class_means(features, labels, k)
    pair = scatter(features, labels, centroids=cs)
    return float(np.trace(pair.sigma_w @ pinv(pair.sigma_b, rel_tol)) / cs.k)


def nc2(centroids: CentroidSet) -> float:
    """Mean absolute deviation of pairwise normalized-centroid cosines from -1/(K-1)."""
    h = centroids.normalized
    k = h.shape[0]
    if k < 2:
        raise DegenerateInputError("nc2 needs at least two classes")
    gram = h @ h.T
    off = ~np.eye(k, dtype=bool)
    return float(np.mean(np.abs(gram[off] + 1.0 / (k - 1))))


def nc3(centroids: CentroidSet, classifier_rows) -> float:
    """Mean absolute cosine between each normalized centroid and its classifier row."""
    h = centroids.normalized
    w = np.asarray(classifier_rows, dtype=np.float64)
    if w.shape != h.shape:
        raise DimensionError(f"classifier rows {w.shape} do not match centroids {h.shape}")
    wn = np.sqrt(np.einsum("kd,kd->k", w, w))
    if np.any(wn == 0.0):
        raise DegenerateInputError(f"classifier row {int(np.argmin(wn))} has zero norm")
    hn = np.sqrt(np.einsum("kd,kd->k", h, h))
    cos = np.einsum("kd,kd->k", h, w) / (hn * wn)
    return float(np.mean(np.abs(cos)))


def nc_report(features, labels, classifier_rows=None, k: int | None = None) -> NcReport:
    features, labels = _check(features, labels)
    cs = class_means(features, labels, k)
    pair = scatter(features, labels, centroids=cs)
    v1 = float(np.trace(pair.sigma_w @ pinv(pair.sigma_b)) / cs.k)
    v3 = nc3(cs, classifier_rows) if classifier_rows is not None else None
    return NcReport(nc1=v1, nc2=nc2(cs), nc3=v3, k=cs.k, d=cs.d, balanced=cs.balanced)
