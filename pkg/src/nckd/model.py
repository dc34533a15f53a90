"""Feedforward ReLU networks with explicit feature access and hand-written backprop.

Parameters live in a flat ``params`` dict so the optimizer, the gradient
checker and the checkpoint writer can treat every tensor uniformly:

* ``W{l}``, ``b{l}`` for hidden layer ``l`` (1-based, shape ``(out, in)``),
* ``head_W``, ``head_b`` for the linear classifier,
* ``proj`` for the bias-free projector onto the teacher feature space.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError
from .numcore import Rng

__all__ = ["Mlp", "ForwardCache", "LINEAR", "NC3"]

LINEAR = "linear"
NC3 = "nc3"

FORMAT = "nckd-mlp/1"


@dataclass
class ForwardCache:
    x: np.ndarray
    acts: list[np.ndarray]  # acts[0] = input, acts[l] = ReLU output of hidden layer l
    logits: np.ndarray
    projected: np.ndarray | None = None  # projector applied to acts[distill_layer]
    distill_layer: int = -1
    head_input: np.ndarray | None = None

    @property
    def penultimate(self) -> np.ndarray:
        return self.acts[-1]


@dataclass
class Mlp:
    """ReLU MLP: ``d_in -> hidden[0] -> ... -> hidden[-1] -> K``.

    ``head`` is either ``"linear"`` (logits = W h + b) or ``"nc3"`` (logits =
    scale * <centroid_k, h> with fixed unit-norm centroid rows). With
    ``head_on_projection`` the NC3 head reads the projected penultimate
    feature instead of the raw one, which lets a student classify against
    teacher-space centroids.
    """

    widths: list[int]
    n_classes: int
    params: dict[str, np.ndarray] = field(default_factory=dict)
    head: str = LINEAR
    nc3_scale: float = 10.0
    centroids: np.ndarray | None = None
    head_on_projection: bool = False
    distill_layer: int = -1
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(
        cls,
        widths,
        n_classes: int,
        rng: Rng,
        proj_dim: int | None = None,
        distill_layer: int = -1,
        nc3_scale: float = 10.0,
    ) -> "Mlp":
        """He-initialized weights, zero biases; one RNG substream per tensor."""
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1 or n_classes < 1:
            raise ContractError(f"invalid layer widths {widths} / classes {n_classes}")
        params = {}
        for l in range(1, len(widths)):
            fan_in = widths[l - 1]
            params[f"W{l}"] = rng.spawn(f"W{l}").gaussian(widths[l], fan_in) * np.sqrt(2.0 / fan_in)
            params[f"b{l}"] = np.zeros(widths[l])
        d_feat = widths[-1]
        params["head_W"] = rng.spawn("head_W").gaussian(n_classes, d_feat) * np.sqrt(2.0 / d_feat)
        params["head_b"] = np.zeros(n_classes)
        model = cls(widths=widths, n_classes=n_classes, params=params, nc3_scale=nc3_scale)
        model.distill_layer = model._resolve_layer(distill_layer)
        src = widths[model.distill_layer]
        if proj_dim is not None and proj_dim != src:
            params["proj"] = rng.spawn("proj").gaussian(proj_dim, src) * np.sqrt(1.0 / src)
        return model

    # -- shape helpers -------------------------------------------------

    @property
    def n_hidden(self) -> int:
        return len(self.widths) - 1

    @property
    def d_feat(self) -> int:
        return self.widths[-1]

    @property
    def has_projector(self) -> bool:
        return "proj" in self.params

    @property
    def feature_dim(self) -> int:
        """Dimension of the features that the distillation losses consume."""
        if self.has_projector:
            return self.params["proj"].shape[0]
        return self.widths[self.distill_layer]

    def _resolve_layer(self, layer: int) -> int:
        l = self.n_hidden + 1 + layer if layer < 0 else layer
        if not 1 <= l <= self.n_hidden:
            raise ContractError(f"distill layer {layer} outside hidden layers 1..{self.n_hidden}")
        return l

    def trainable(self) -> list[str]:
        names = [n for n in self.params if not n.startswith("head_") or self.head == LINEAR]
        return names

    # -- heads ---------------------------------------------------------

    def set_nc3_head(self, centroids, scale: float | None = None, on_projection: bool = False):
        """Replace the classifier by fixed unit-norm centroid rows."""
        rows = np.asarray(getattr(centroids, "normalized", centroids), dtype=np.float64)
        want = self.feature_dim if on_projection else self.d_feat
        if rows.shape != (self.n_classes, want):
            raise DimensionError(f"centroid rows {rows.shape}, expected {(self.n_classes, want)}")
        if on_projection and self.distill_layer != self.n_hidden:
            raise ContractError("a head on projected features needs the penultimate distill layer")
        norms = np.linalg.norm(rows, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ContractError("NC3 centroid rows must be unit-norm")
        if scale is not None:
            if not scale > 0:
                raise ContractError(f"nc3 scale must be positive, got {scale}")
            self.nc3_scale = float(scale)
        self.head = NC3
        self.centroids = rows.copy()
        self.head_on_projection = on_projection

    def classifier_rows(self) -> np.ndarray:
        return self.params["head_W"] if self.head == LINEAR else self.centroids

    # -- forward / backward --------------------------------------------

    def forward(self, x) -> ForwardCache:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.widths[0]:
            raise DimensionError(f"input shape {x.shape}, expected (n, {self.widths[0]})")
        acts = [x]
        a = x
        for l in range(1, self.n_hidden + 1):
            a = np.maximum(a @ self.params[f"W{l}"].T + self.params[f"b{l}"], 0.0)
            acts.append(a)
        src = acts[self.distill_layer]
        projected = src @ self.params["proj"].T if self.has_projector else None
        if self.head == LINEAR:
            head_input = a
            logits = a @ self.params["head_W"].T + self.params["head_b"]
        else:
            if self.centroids is None:
                raise ContractError("NC3 head has no centroids")
            head_input = (projected if projected is not None else src) if self.head_on_projection else a
            logits = self.nc3_scale * (head_input @ self.centroids.T)
        return ForwardCache(x, acts, logits, projected, self.distill_layer, head_input)

    def features(self, x) -> np.ndarray:
        """Inputs to the distillation losses: projected features of the distill layer."""
        cache = self.forward(x)
        return cache.projected if cache.projected is not None else cache.acts[cache.distill_layer]

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.forward(x).logits, axis=1)

    def backward(self, cache: ForwardCache, dlogits=None, dfeatures=None) -> dict[str, np.ndarray]:
        """Reverse-mode gradients of all trainable parameters.

        ``dlogits`` is the upstream gradient on the logits; ``dfeatures`` the
        upstream gradient on the distillation features (projected when a
        projector exists, else the raw distill-layer activations).
        """
        if cache is None:
            raise ContractError("backward needs the cache of a forward pass")
        p = self.params
        grads = {name: np.zeros_like(p[name]) for name in self.trainable()}
        n_hidden = self.n_hidden
        dacts = [None] * (n_hidden + 1)
        dproj = None if dfeatures is None else np.asarray(dfeatures, dtype=np.float64)

        if dlogits is not None:
            dlogits = np.asarray(dlogits, dtype=np.float64)
            if self.head == LINEAR:
                grads["head_W"] = dlogits.T @ cache.acts[-1]
                grads["head_b"] = dlogits.sum(axis=0)
                dacts[n_hidden] = dlogits @ p["head_W"]
            else:
                dhead = self.nc3_scale * (dlogits @ self.centroids)
                if self.head_on_projection and self.has_projector:
                    dproj = dhead if dproj is None else dproj + dhead
                elif self.head_on_projection:
                    dacts[self.distill_layer] = dhead
                else:
                    dacts[n_hidden] = dhead

        if dproj is not None:
            l = self.distill_layer
            if self.has_projector:
                grads["proj"] = dproj.T @ cache.acts[l]
                dsrc = dproj @ p["proj"]
            else:
                dsrc = dproj
            dacts[l] = dsrc if dacts[l] is None else dacts[l] + dsrc

        carry = None
        for l in range(n_hidden, 0, -1):
            da = dacts[l] if carry is None else (carry if dacts[l] is None else carry + dacts[l])
            if da is None:
                continue
            dz = da * (cache.acts[l] > 0.0)
            grads[f"W{l}"] = dz.T @ cache.acts[l - 1]
            grads[f"b{l}"] = dz.sum(axis=0)
            carry = dz @ p[f"W{l}"] if l > 1 else None
        return grads

    # -- persistence ---------------------------------------------------

    def copy(self) -> "Mlp":
        return Mlp(
            widths=list(self.widths),
            n_classes=self.n_classes,
            params={k: v.copy() for k, v in self.params.items()},
            head=self.head,
            nc3_scale=self.nc3_scale,
            centroids=None if self.centroids is None else self.centroids.copy(),
            head_on_projection=self.head_on_projection,
            distill_layer=self.distill_layer,
            meta=dict(self.meta),
        )

    def to_dict(self, probe: np.ndarray | None = None) -> dict:
        doc = {
            "format": FORMAT,
            "widths": list(self.widths),
            "n_classes": self.n_classes,
            "activation": "relu",
            "head": self.head,
            "nc3_scale": self.nc3_scale,
            "head_on_projection": self.head_on_projection,
            "distill_layer": self.distill_layer,
            "meta": self.meta,
            "params": {k: self.params[k].tolist() for k in sorted(self.params)},
            "centroids": None if self.centroids is None else self.centroids.tolist(),
        }
        if probe is not None:
            doc["probe"] = {"x": np.asarray(probe).tolist(), "logits": self.forward(probe).logits.tolist()}
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "Mlp":
        if doc.get("format") != FORMAT:
            raise ContractError(f"unsupported checkpoint format {doc.get('format')!r}")
        return cls(
            widths=list(doc["widths"]),
            n_classes=int(doc["n_classes"]),
            params={k: np.asarray(v, dtype=np.float64) for k, v in doc["params"].items()},
            head=doc["head"],
            nc3_scale=float(doc["nc3_scale"]),
            centroids=None if doc.get("centroids") is None else np.asarray(doc["centroids"], dtype=np.float64),
            head_on_projection=bool(doc.get("head_on_projection", False)),
            distill_layer=int(doc["distill_layer"]),
            meta=dict(doc.get("meta", {})),
        )

    def save(self, path, probe: np.ndarray | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(probe), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, check_probe: bool = True) -> "Mlp":
        doc = json.loads(Path(path).read_text())
        model = cls.from_dict(doc)
        if check_probe and doc.get("probe"):
            want = np.asarray(doc["probe"]["logits"])
            got = model.forward(np.asarray(doc["probe"]["x"])).logits
            if not np.allclose(got, want, rtol=0, atol=1e-12):
                raise ContractError(f"{path}: probe logits do not reproduce")
        return model

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()
