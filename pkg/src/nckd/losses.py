"""Training objectives with analytic gradients.

Every loss returns a :class:`LossValueGrad` whose ``grads`` map input names to
arrays of the same shape as that input. Batched inputs are averaged over the
batch dimension.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateCentroidError, DegenerateInputError, DimensionError
from .geometry import etf_target
from .numcore import log_softmax, softmax

__all__ = [
    "LossValueGrad",
    "LossWeights",
    "cross_entropy",
    "kd_kl",
    "nc1_loss",
    "nc2_loss",
    "total_loss",
    "normalize_rows",
    "normalize_rows_backward",
]


@dataclass
class LossValueGrad:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    alpha: float = 0.0
    tau_proto: float = 0.1
    tau_kd: float = 4.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "alpha"):
            if not getattr(self, name) >= 0:
                raise ContractError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("tau_proto", "tau_kd"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be > 0, got {getattr(self, name)}")


def _as_batch(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
        labels = np.asarray([labels])
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} do not match")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"label out of range for {k} classes")
    return logits, labels, single


def cross_entropy(logits, labels) -> LossValueGrad:
    logits, labels, single = _as_batch(logits, labels)
    b = logits.shape[0]
    rows = np.arange(b)
    logp = log_softmax(logits)
    value = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= b
    return LossValueGrad(float(value), {"logits": grad[0] if single else grad})


def kd_kl(z_s, z_t, tau: float) -> LossValueGrad:
    """tau^2 * KL(teacher || student) on temperature-softened logits; teacher is constant."""
    z_s = np.asarray(z_s, dtype=np.float64)
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_s.shape != z_t.shape:
        raise DimensionError(f"student logits {z_s.shape} vs teacher logits {z_t.shape}")
    if not tau > 0:
        raise ContractError(f"tau must be positive, got {tau}")
    single = z_s.ndim == 1
    s = z_s[None, :] if single else z_s
    t = z_t[None, :] if single else z_t
    b = s.shape[0]
    log_ps = log_softmax(s, tau)
    log_pt = log_softmax(t, tau)
    pt = np.exp(log_pt)
    kl = np.sum(pt * (log_pt - log_ps), axis=1)
    value = tau * tau * kl.mean()
    grad = tau * (np.exp(log_ps) - pt) / b
    return LossValueGrad(float(max(value, 0.0)), {"logits": grad[0] if single else grad})


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    return x / norms[:, None], norms


def normalize_rows_backward(unit: np.ndarray, norms: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Chain rule through x -> x/|x| given the normalized rows and their original norms."""
    radial = np.einsum("ij,ij->i", unit, grad_unit)
    return (grad_unit - unit * radial[:, None]) / norms[:, None]


def nc1_loss(student_feats, labels, teacher_centroids, tau: float) -> LossValueGrad:
    """Prototype-alignment InfoNCE: cosine similarities to every teacher centroid, softened by tau."""
    f = np.asarray(student_feats, dtype=np.float64)
    c = np.asarray(teacher_centroids, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if f.ndim != 2 or c.ndim != 2 or f.shape[1] != c.shape[1]:
        raise DimensionError(f"student features {f.shape} vs teacher centroids {c.shape}")
    if labels.shape != (f.shape[0],):
        raise DimensionError(f"labels {labels.shape} do not match {f.shape[0]} features")
    if not tau > 0:
        raise ContractError(f"tau must be positive, got {tau}")
    k = c.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"label out of range for {k} centroids")
    cn = np.sqrt(np.einsum("ij,ij->i", c, c))
    if np.any(cn == 0.0):
        raise DegenerateCentroidError(int(np.argmin(cn)))
    fn = np.sqrt(np.einsum("ij,ij->i", f, f))
    if np.any(fn == 0.0):
        raise DegenerateInputError(f"student feature {int(np.argmin(fn))} has zero norm")
    cu = c / cn[:, None]
    fu = f / fn[:, None]
    sims = fu @ cu.T
    ce = cross_entropy(sims / tau, labels)
    grad_unit = (ce.grads["logits"] / tau) @ cu
    return LossValueGrad(ce.value, {"features": normalize_rows_backward(fu, fn, grad_unit)})


def nc2_loss(h_student, h_teacher, target: np.ndarray | None = None, unit_tol: float = 1e-9) -> LossValueGrad:
    """Squared Frobenius distance between H_S H_T^T and the simplex-ETF Gram matrix.

    ``target`` defaults to the K-class ETF Gram matrix; callers that only hold
    a subset of classes pass the matching principal submatrix.
    """
    hs = np.asarray(h_student, dtype=np.float64)
    ht = np.asarray(h_teacher, dtype=np.float64)
    if hs.shape != ht.shape or hs.ndim != 2:
        raise DimensionError(f"student rows {hs.shape} vs teacher rows {ht.shape}")
    for name, h in (("student", hs), ("teacher", ht)):
        norms = np.sqrt(np.einsum("ij,ij->i", h, h))
        if np.any(np.abs(norms - 1.0) > unit_tol):
            raise ContractError(f"{name} centroid rows must have unit norm")
    if target is None:
        target = etf_target(hs.shape[0]).matrix
    residual = hs @ ht.T - target
    value = float(np.sum(residual * residual))
    return LossValueGrad(value, {"h_student": 2.0 * residual @ ht})


_ORDER = ("cls", "nc1", "nc2", "kd")


def total_loss(parts: dict[str, LossValueGrad], weights: LossWeights) -> LossValueGrad:
    """L_cls + lambda1 L_NC1 + lambda2 L_NC2 (+ alpha L_KD); gradients are the weighted sums."""
    scale = {"cls": 1.0, "nc1": weights.lambda1, "nc2": weights.lambda2, "kd": weights.alpha}
    unknown = set(parts) - set(_ORDER)
    if unknown:
        raise ContractError(f"unknown loss components {sorted(unknown)}")
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    for name in _ORDER:
        part = parts.get(name)
        w = scale[name]
        if part is None or (w == 0.0 and name != "cls"):
            continue
        value += w * part.value
        for key, g in part.grads.items():
            grads[key] = grads[key] + w * g if key in grads else w * g
    return LossValueGrad(value, grads)
