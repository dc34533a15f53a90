"""Teacher training, NC-structure distillation, evaluation and the unconstrained-features harness."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .data import Dataset, batches
from .errors import (
    ContractError,
    DataCoverageError,
    DegenerateInputError,
    DimensionError,
    TrainingDivergedError,
)
from .geometry import CentroidSet, class_means, etf_target, normalize_centroids
from .losses import (
    LossValueGrad,
    LossWeights,
    cross_entropy,
    kd_kl,
    nc1_loss,
    nc2_loss,
    normalize_rows,
    normalize_rows_backward,
    total_loss,
)
from .metrics import NcReport, nc_report
from .model import LINEAR, NC3, Mlp
from .numcore import Rng

log = logging.getLogger(__name__)

__all__ = [
    "DistillConfig",
    "CentroidTracker",
    "LabelGroups",
    "label_groups",
    "EpochRecord",
    "TrainLog",
    "Teacher",
    "EvalResult",
    "UfmResult",
    "sgd_step",
    "train_teacher",
    "extract_teacher_centroids",
    "distill",
    "evaluate",
    "ufm_optimize",
    "tracked_nc2_loss",
]

ZERO_WEIGHTS = LossWeights(lambda1=0.0, lambda2=0.0, alpha=0.0)


@dataclass(frozen=True)
class DistillConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 60
    batch_size: int = 64
    seed: int = 0
    ema_momentum: float = 0.9
    head: str = LINEAR
    nc3_scale: float = 10.0
    centroid_source: str = "student"
    distill_layer: int = -1
    milestones: tuple[int, ...] | None = None
    lr_factor: float = 0.1
    centered_prototypes: bool = False

    def __post_init__(self):
        if not self.lr >= 0:
            raise ContractError(f"lr must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            raise ContractError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 <= self.ema_momentum < 1:
            raise ContractError(f"ema_momentum must lie in [0, 1), got {self.ema_momentum}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")
        if self.head not in (LINEAR, NC3):
            raise ContractError(f"unknown head {self.head!r}")
        if self.centroid_source not in ("student", "teacher"):
            raise ContractError(f"unknown centroid source {self.centroid_source!r}")
        if not self.nc3_scale > 0:
            raise ContractError("nc3_scale must be positive")
        if self.milestones is not None:
            ms = tuple(int(m) for m in self.milestones)
            if any(b <= a for a, b in zip(ms, ms[1:])):
                raise ContractError(f"milestones must be strictly increasing, got {ms}")
            object.__setattr__(self, "milestones", ms)

    def resolved_milestones(self) -> tuple[int, ...]:
        if self.milestones is not None:
            return self.milestones
        raw = [int(round(self.epochs * f)) for f in (0.6, 0.75, 0.9)]
        out: list[int] = []
        for m in raw:
            if 0 < m < self.epochs and (not out or m > out[-1]):
                out.append(m)
        return tuple(out)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch under step decay."""
        drops = sum(1 for m in self.resolved_milestones() if epoch >= m)
        return self.lr * self.lr_factor**drops

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["milestones"] = list(self.resolved_milestones())
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "DistillConfig":
        doc = dict(doc)
        if "weights" in doc and not isinstance(doc["weights"], LossWeights):
            doc["weights"] = LossWeights(**doc["weights"])
        if doc.get("milestones") is not None:
            doc["milestones"] = tuple(doc["milestones"])
        return cls(**doc)


# -- optimizer -----------------------------------------------------------


def sgd_step(params, grads, state, lr, momentum, weight_decay, names=None) -> None:
    """Classic momentum SGD in place: v <- mu v + (g + wd p);  p <- p - lr v."""
    for name in names if names is not None else grads:
        p = params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        step = g + weight_decay * p if weight_decay else g
        v = state.get(name)
        v = step.copy() if v is None else momentum * v + step
        state[name] = v
        p -= lr * v


# -- centroid tracking ---------------------------------------------------


class LabelGroups(NamedTuple):
    present: np.ndarray  # classes in the batch, ascending
    sizes: np.ndarray  # samples per present class
    averaging: np.ndarray  # (len(present), batch); averaging @ features gives the class means


def label_groups(labels, k: int) -> LabelGroups:
    """Batch grouping shared by every tracker fed the same labels."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=k)
    present = np.flatnonzero(counts)
    sizes = counts[present]
    averaging = (labels[None, :] == present[:, None]) / sizes[:, None].astype(np.float64)
    return LabelGroups(present, sizes, averaging)


class CentroidTracker:
    """Exponential moving average of per-class feature means, updated per batch.

    The first update of a class copies the batch mean; later updates blend
    ``m <- beta m + (1 - beta) batch_mean``.
    """

    def __init__(self, k: int, d: int, beta: float = 0.9):
        if not 0 <= beta < 1:
            raise ContractError(f"beta must lie in [0, 1), got {beta}")
        self.k, self.d, self.beta = k, d, beta
        self.means = np.zeros((k, d))
        self.counts = np.zeros(k, dtype=np.int64)

    @property
    def seen(self) -> np.ndarray:
        return self.counts > 0

    def _batch(self, features, labels, groups=None):
        g = groups if groups is not None else label_groups(labels, self.k)
        return g.present, g.averaging @ features, g.sizes

    def coefficients(self, present) -> np.ndarray:
        return np.where(self.counts[present] > 0, 1.0 - self.beta, 1.0)

    def preview(self, features, labels, groups=None):
        """Updated means without committing; returns (means, present, coef, batch_sizes)."""
        present, bm, sizes = self._batch(features, labels, groups)
        coef = self.coefficients(present)
        means = self.means.copy()
        if present.size:
            means[present] = coef[:, None] * bm + (1.0 - coef)[:, None] * self.means[present]
        return means, present, coef, sizes

    def update(self, features, labels, groups=None) -> None:
        features = np.asarray(features, dtype=np.float64)
        means, present, _, sizes = self.preview(features, np.asarray(labels, dtype=np.int64), groups)
        self.means = means
        self.counts[present] += sizes

    def normalized(self) -> tuple[np.ndarray, np.ndarray]:
        """Normalized centroids of the seen classes (centered on their average) and their indices."""
        idx = np.flatnonzero(self.seen)
        if idx.size < 2:
            raise DegenerateInputError("need at least two tracked classes")
        return normalize_centroids(self.means[idx]), idx

    def centroid_set(self) -> CentroidSet:
        if not self.seen.all():
            missing = np.flatnonzero(~self.seen).tolist()
            raise DataCoverageError(f"classes never seen by the centroid tracker: {missing}")
        g = self.means.mean(axis=0)
        return CentroidSet(
            class_means=self.means.copy(),
            global_mean=g,
            normalized=normalize_centroids(self.means, g),
            counts=self.counts.copy(),
            balanced=bool(np.all(self.counts == self.counts[0])),
        )


def tracked_nc2_loss(
    features, labels, tracker: CentroidTracker, teacher_normalized, target=None, groups=None
) -> LossValueGrad:
    """ETF-matching loss on the tracker's centroids after this batch's update.

    Old tracker means are constants; the gradient reaches ``features`` only
    through the current batch's class means. Classes never seen are left out.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    means, present, coef, sizes = tracker.preview(features, labels, groups)
    seen = tracker.seen.copy()
    seen[present] = True
    idx = np.flatnonzero(seen)
    if idx.size < 2:
        return LossValueGrad(0.0, {"features": np.zeros_like(features)})
    if target is None:
        target = etf_target(tracker.k).matrix
    m = means[idx]
    centered = m - m.mean(axis=0)
    unit, norms = normalize_rows(centered)
    if np.any(norms == 0.0):
        from .errors import DegenerateCentroidError

        raise DegenerateCentroidError(int(idx[np.argmin(norms)]))
    inner = nc2_loss(unit, teacher_normalized[idx], target[np.ix_(idx, idx)])
    dc = normalize_rows_backward(unit, norms, inner.grads["h_student"])
    dm = dc - dc.mean(axis=0)
    dfull = np.zeros((tracker.k, tracker.d))
    dfull[idx] = dm
    scale = np.zeros(tracker.k)
    scale[present] = coef / sizes
    grad = dfull[labels] * scale[labels][:, None]
    return LossValueGrad(inner.value, {"features": grad})


# -- logs ----------------------------------------------------------------

LOG_FIELDS = (
    "epoch",
    "loss_cls",
    "loss_nc1",
    "loss_nc2",
    "loss_kd",
    "loss_total",
    "acc_train",
    "acc_test",
    "nc1",
    "nc2",
    "nc3",
    "secs",
)


@dataclass
class EpochRecord:
    epoch: int
    loss_cls: float
    loss_nc1: float
    loss_nc2: float
    loss_kd: float
    loss_total: float
    acc_train: float
    acc_test: float | None
    nc1: float | None
    nc2: float | None
    nc3: float | None
    secs: float


def _clean(v):
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


class TrainLog(list):
    """Per-epoch records; serialized as JSON lines."""

    def to_jsonl(self, timing: bool = False) -> str:
        lines = []
        for rec in self:
            doc = {f: _clean(getattr(rec, f)) for f in LOG_FIELDS}
            if not timing:
                doc["secs"] = None
            lines.append(json.dumps(doc))
        return "".join(line + "\n" for line in lines)

    def timing_jsonl(self) -> str:
        return "".join(json.dumps({"epoch": r.epoch, "secs": r.secs}) + "\n" for r in self)

    def final(self) -> EpochRecord:
        return self[-1]

    def mean_secs(self) -> float:
        return float(np.mean([r.secs for r in self])) if self else float("nan")


# -- evaluation ----------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    report: NcReport | None
    finite: bool = True


def evaluate(model: Mlp, data: Dataset) -> EvalResult:
    """Top-1 accuracy plus NC metrics of the features the classifier reads."""
    cache = model.forward(data.X)
    pred = np.argmax(cache.logits, axis=1)
    acc = float(np.mean(pred == data.y))
    if not (np.all(np.isfinite(cache.logits)) and np.all(np.isfinite(cache.head_input))):
        return EvalResult(acc, None, finite=False)
    try:
        report = nc_report(cache.head_input, data.y, model.classifier_rows(), k=data.k)
    except DegenerateInputError as exc:
        log.warning("NC metrics undefined: %s", exc)
        report = None
    return EvalResult(acc, report)


# -- training loop -------------------------------------------------------


@dataclass
class Teacher:
    model: Mlp
    centroids: CentroidSet


def extract_teacher_centroids(model: Mlp, data: Dataset) -> CentroidSet:
    """Exact class means of the teacher's penultimate features over one full pass."""
    return class_means(model.forward(data.X).penultimate, data.y, k=data.k)


def _batch_nc1(feats, labels, protos, tau) -> LossValueGrad:
    """Prototype alignment over the batch; rows with all-zero features (dead ReLUs) contribute nothing."""
    alive = np.einsum("ij,ij->i", feats, feats) > 0.0
    if alive.all():
        return nc1_loss(feats, labels, protos, tau)
    grad = np.zeros_like(feats)
    if not alive.any():
        return LossValueGrad(0.0, {"features": grad})
    part = nc1_loss(feats[alive], labels[alive], protos, tau)
    share = alive.sum() / len(alive)
    grad[alive] = part.grads["features"] * share
    return LossValueGrad(part.value * share, {"features": grad})


def _set_head_from(model: Mlp, rows: np.ndarray, cfg: DistillConfig, on_projection: bool = False):
    model.set_nc3_head(rows, cfg.nc3_scale, on_projection=on_projection)


def _fit(
    model: Mlp,
    cfg: DistillConfig,
    data: Dataset,
    test: Dataset | None,
    rng: Rng,
    teacher: Teacher | None = None,
) -> TrainLog:
    w = cfg.weights if teacher is not None else ZERO_WEIGHTS
    if data.n == 0 or not data.balanced:
        raise ContractError("training data must be non-empty and balanced")
    k = data.k

    protos = None
    teacher_norm = None
    if teacher is not None:
        cs = teacher.centroids
        if cs.d != model.feature_dim:
            raise DimensionError(
                f"teacher centroids have dimension {cs.d}, student features {model.feature_dim}"
            )
        protos = cs.class_means - cs.global_mean if cfg.centered_prototypes else cs.class_means
        teacher_norm = cs.normalized

    loss_tracker = CentroidTracker(k, model.feature_dim, cfg.ema_momentum) if w.lambda2 > 0 else None
    head_tracker = None
    if cfg.head == NC3:
        if cfg.centroid_source == "teacher":
            if teacher is None:
                raise ContractError("teacher centroid source requires a teacher")
            _set_head_from(model, teacher_norm, cfg, on_projection=True)
        else:
            head_tracker = CentroidTracker(k, model.d_feat, cfg.ema_momentum)
            init = class_means(model.forward(data.X).penultimate, data.y, k=k)
            _set_head_from(model, init.normalized, cfg)

    shuffle_rng = rng.spawn("shuffle")
    state: dict[str, np.ndarray] = {}
    history = TrainLog()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        sums = dict.fromkeys(("cls", "nc1", "nc2", "kd", "total"), 0.0)
        t0 = time.perf_counter()
        for idx in batches(data, cfg.batch_size, shuffle_rng.spawn(epoch), shuffle=True):
            xb, yb = data.X[idx], data.y[idx]
            groups = label_groups(yb, k) if loss_tracker is not None or head_tracker is not None else None
            cache = model.forward(xb)
            parts = {"cls": cross_entropy(cache.logits, yb)}
            feats = None
            if w.lambda1 > 0 or w.lambda2 > 0:
                feats = cache.projected if cache.projected is not None else cache.acts[cache.distill_layer]
            if w.lambda1 > 0:
                parts["nc1"] = _batch_nc1(feats, yb, protos, w.tau_proto)
            if w.lambda2 > 0:
                parts["nc2"] = tracked_nc2_loss(feats, yb, loss_tracker, teacher_norm, groups=groups)
            if w.alpha > 0:
                parts["kd"] = kd_kl(cache.logits, teacher.model.forward(xb).logits, w.tau_kd)
            total = total_loss(parts, w)
            if not np.isfinite(total.value):
                raise TrainingDivergedError(epoch + 1)
            grads = model.backward(cache, total.grads.get("logits"), total.grads.get("features"))
            if loss_tracker is not None:
                loss_tracker.update(feats, yb, groups)
            if head_tracker is not None:
                head_tracker.update(cache.penultimate, yb, groups)
            sgd_step(model.params, grads, state, lr, cfg.momentum, cfg.weight_decay, names=model.trainable())
            nb = len(idx)
            for name, part in parts.items():
                sums[name] += part.value * nb
            sums["total"] += total.value * nb

        for tracker in (loss_tracker, head_tracker):
            if tracker is not None and not tracker.seen.all():
                raise DataCoverageError(
                    f"epoch {epoch + 1}: classes {np.flatnonzero(~tracker.seen).tolist()} never seen"
                )
        if head_tracker is not None:
            # the centroid refresh is part of the head's per-epoch cost
            _set_head_from(model, head_tracker.centroid_set().normalized, cfg)
        secs = time.perf_counter() - t0
        if not all(np.all(np.isfinite(p)) for p in model.params.values()):
            raise TrainingDivergedError(epoch + 1)

        train_eval = evaluate(model, data)
        if not train_eval.finite:
            raise TrainingDivergedError(epoch + 1)
        test_eval = evaluate(model, test) if test is not None else None
        rep = (test_eval or train_eval).report
        history.append(
            EpochRecord(
                epoch=epoch + 1,
                loss_cls=sums["cls"] / data.n,
                loss_nc1=sums["nc1"] / data.n,
                loss_nc2=sums["nc2"] / data.n,
                loss_kd=sums["kd"] / data.n,
                loss_total=sums["total"] / data.n,
                acc_train=train_eval.accuracy,
                acc_test=None if test_eval is None else test_eval.accuracy,
                nc1=None if rep is None else rep.nc1,
                nc2=None if rep is None else rep.nc2,
                nc3=None if rep is None else rep.nc3,
                secs=secs,
            )
        )
        log.debug("epoch %d loss %.5f acc %.4f", epoch + 1, history[-1].loss_total, train_eval.accuracy)
    return history


def _build(widths, k, cfg: DistillConfig, rng: Rng, proj_dim=None) -> Mlp:
    model = Mlp.init(
        widths, k, rng.spawn("model"), proj_dim=proj_dim, distill_layer=cfg.distill_layer, nc3_scale=cfg.nc3_scale
    )
    model.meta = {"seed": cfg.seed}
    return model


def train_teacher(
    cfg: DistillConfig, data: Dataset, hidden=(256, 256), test: Dataset | None = None
) -> tuple[Mlp, TrainLog]:
    """Cross-entropy training of an MLP; the distillation weights in ``cfg`` are ignored."""
    rng = Rng(cfg.seed)
    model = _build([data.d, *hidden], data.k, cfg, rng)
    history = _fit(model, cfg, data, test, rng)
    return model, history


def distill(
    teacher: Teacher, cfg: DistillConfig, data: Dataset, hidden=(16,), test: Dataset | None = None
) -> tuple[Mlp, TrainLog]:
    """Train a student under L_cls + lambda1 L_NC1 + lambda2 L_NC2 (+ alpha L_KD).

    The student shares its RNG substreams with :func:`train_teacher`, so with
    all distillation weights at zero both produce the same trajectory.
    """
    if data.d != teacher.model.widths[0]:
        raise DimensionError("student data and teacher input widths differ")
    rng = Rng(cfg.seed)
    student = _build([data.d, *hidden], data.k, cfg, rng, proj_dim=teacher.centroids.d)
    history = _fit(student, cfg, data, test, rng, teacher=teacher)
    return student, history


# -- unconstrained features ----------------------------------------------


@dataclass
class UfmResult:
    features: np.ndarray
    labels: np.ndarray
    log: list[dict]

    @property
    def final(self) -> dict:
        return self.log[-1]


def _ufm_objective(features, labels, teacher_etf, teacher_norm, target, weights: LossWeights):
    parts = {}
    if weights.lambda1 > 0:
        parts["nc1"] = nc1_loss(features, labels, teacher_etf, weights.tau_proto)
    if weights.lambda2 > 0:
        cs_means = np.stack([features[labels == c].mean(axis=0) for c in range(teacher_etf.shape[0])])
        centered = cs_means - cs_means.mean(axis=0)
        unit, norms = normalize_rows(centered)
        inner = nc2_loss(unit, teacher_norm, target)
        dc = normalize_rows_backward(unit, norms, inner.grads["h_student"])
        dm = dc - dc.mean(axis=0)
        counts = np.bincount(labels, minlength=teacher_etf.shape[0])
        parts["nc2"] = LossValueGrad(inner.value, {"features": dm[labels] / counts[labels][:, None]})
    tot = total_loss(parts, weights)
    return tot.value, tot.grads.get("features")


def ufm_optimize(
    k: int,
    d: int,
    n_per_class: int,
    teacher_etf,
    weights: LossWeights,
    steps: int,
    lr: float,
    rng: Rng,
    init_scale: float = 0.1,
    tol: float | None = None,
    eval_every: int = 10,
    init: np.ndarray | None = None,
) -> UfmResult:
    """Gradient descent on free per-sample features under lambda1 L_NC1 + lambda2 L_NC2.

    Class means are recomputed exactly at every step. A step that would raise
    the objective is retried with half the learning rate (and the halved rate
    is kept), so the recorded loss never increases. With ``tol`` the run stops
    once both NC1 and NC2 fall below it. ``init`` replaces the Gaussian start
    (``init_scale`` times standard normal) with given features, ordered class
    by class.
    """
    teacher_etf = np.asarray(teacher_etf, dtype=np.float64)
    if teacher_etf.shape != (k, d):
        raise DimensionError(f"teacher ETF has shape {teacher_etf.shape}, expected {(k, d)}")
    gram = teacher_etf @ teacher_etf.T
    if np.max(np.abs(gram - etf_target(k).matrix)) > 1e-8:
        raise ContractError("teacher_etf is not a simplex ETF")
    if not lr > 0:
        raise ContractError("lr must be positive")
    labels = np.repeat(np.arange(k), n_per_class)
    if init is None:
        features = init_scale * rng.spawn("features").gaussian(k * n_per_class, d)
    else:
        features = np.array(init, dtype=np.float64)
        if features.shape != (k * n_per_class, d):
            raise DimensionError(f"init has shape {features.shape}, expected {(k * n_per_class, d)}")
    teacher_norm = normalize_centroids(teacher_etf)
    target = etf_target(k).matrix

    def metrics(f):
        try:
            rep = nc_report(f, labels, k=k)
            return rep.nc1, rep.nc2
        except DegenerateInputError:
            return float("nan"), float("nan")

    def record(step, value, f, cur_lr):
        v1, v2 = metrics(f)
        history.append({"step": step, "loss": value, "nc1": v1, "nc2": v2, "lr": cur_lr})
        return v1, v2

    history: list[dict] = []
    if weights.lambda1 == 0 and weights.lambda2 == 0:
        record(0, 0.0, features, lr)
        return UfmResult(features, labels, history)

    value, grad = _ufm_objective(features, labels, teacher_etf, teacher_norm, target, weights)
    v1, v2 = record(0, value, features, lr)
    cur = lr
    done = 0
    for step in range(1, steps + 1):
        if tol is not None and v1 < tol and v2 < tol:
            break
        for _ in range(60):
            cand = features - cur * grad
            cand_value, cand_grad = _ufm_objective(cand, labels, teacher_etf, teacher_norm, target, weights)
            if cand_value <= value:
                break
            cur *= 0.5
        else:
            log.info("ufm: no decreasing step at step %d", step)
            break
        if not np.isfinite(cand_value):
            raise TrainingDivergedError(step, f"ufm objective became non-finite at step {step}")
        features, value, grad = cand, cand_value, cand_grad
        done = step
        if step % eval_every == 0 or step == steps:
            v1, v2 = record(step, value, features, cur)
    if history[-1]["step"] != done:
        record(done, value, features, cur)
    return UfmResult(features, labels, history)
