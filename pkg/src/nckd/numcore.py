"""Dense float64 helpers, seeded counter-based randomness and elementary nonlinearities."""
from __future__ import annotations

import hashlib

import numpy as np

from .errors import ContractError, DegenerateInputError, NumericError

__all__ = ["Rng", "pinv", "softmax", "log_softmax", "cosine", "rng_gaussian"]


class Rng:
    """Seeded random stream that can be split into independent labelled substreams.

    Every substream is a Philox counter-based generator whose key is a hash of
    the root seed and the label path, so ``rng.spawn("init")`` yields the same
    numbers no matter how many other substreams were drawn before it.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ContractError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        self._gen = None

    def spawn(self, label) -> "Rng":
        return Rng(self.seed, self.path + (str(label),))

    @property
    def key(self) -> int:
        text = f"{self.seed}:" + "/".join(self.path)
        digest = hashlib.blake2b(text.encode(), digest_size=16).digest()
        return int.from_bytes(digest, "little")

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            self._gen = np.random.Generator(np.random.Philox(key=self.key))
        return self._gen

    def gaussian(self, *shape) -> np.ndarray:
        return self.generator.standard_normal(shape if shape else None)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"


def rng_gaussian(rng: Rng, n: int) -> np.ndarray:
    return rng.gaussian(n)


def pinv(m, rel_tol: float = 1e-10) -> np.ndarray:
    """Moore-Penrose pseudo-inverse of a symmetric PSD matrix.

    Eigenvalues at or below ``rel_tol`` times the largest one are treated as
    zero, which cleanly removes the null space of a rank-deficient scatter matrix.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ContractError(f"pinv expects a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("pinv: matrix has non-finite entries")
    if m.size == 0:
        return m.copy()
    scale = np.abs(m).max()
    if scale == 0.0:
        return np.zeros_like(m)
    # decompose a unit-scale copy so tiny or huge inputs keep full precision
    w, v = np.linalg.eigh(0.5 * (m + m.T) / scale)
    top = w.max()
    if top <= 0.0:
        return np.zeros_like(m)
    keep = w > rel_tol * top
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    with np.errstate(over="ignore", invalid="ignore"):
        out = ((v * inv) @ v.T) / scale
    if not np.all(np.isfinite(out)):
        raise NumericError("pinv: pseudo-inverse is not representable (matrix too close to zero)")
    return out


def softmax(z, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    if not temperature > 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    z = np.asarray(z, dtype=np.float64)
    # subtract the max before scaling so a representable shift cancels exactly
    z = (z - z.max(axis=axis, keepdims=True)) / temperature
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    if not temperature > 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    z = np.asarray(z, dtype=np.float64)
    z = (z - z.max(axis=axis, keepdims=True)) / temperature
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"cosine: shape mismatch {a.shape} vs {b.shape}")
    na = np.sqrt(np.dot(a, a))
    nb = np.sqrt(np.dot(b, b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine of a zero-norm vector is undefined")
    return float(np.dot(a, b) / (na * nb))
