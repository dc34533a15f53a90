"""scikit-learn style wrappers around the teacher trainer and the distillation driver.

The functional API in :mod:`nckd.trainer` does the work; these classes add the
usual ``fit`` / ``predict`` / ``transform`` surface, label encoding and input
validation so the models drop into sklearn pipelines and model selection.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset
from .errors import ContractError
from .losses import LossWeights
from .metrics import NcReport, nc_report
from .model import LINEAR
from .numcore import softmax
from .trainer import DistillConfig, Teacher, distill, extract_teacher_centroids, train_teacher

__all__ = ["MLPClassifier", "NCKDClassifier"]


def _dataset(X, y, encoder: LabelEncoder) -> Dataset:
    return Dataset(X, encoder.transform(y), len(encoder.classes_))


def _eval_dataset(eval_set, encoder, n_features):
    if eval_set is None:
        return None
    Xe, ye = check_X_y(*eval_set, dtype=np.float64)
    if Xe.shape[1] != n_features:
        raise ContractError(f"eval_set has {Xe.shape[1]} features, expected {n_features}")
    return _dataset(Xe, ye, encoder)


class _NetMixin(ClassifierMixin, TransformerMixin):
    """Prediction and feature access shared by both estimators."""

    def _check_input(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ContractError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def decision_function(self, X) -> np.ndarray:
        X = self._check_input(X)
        return self.model_.forward(X).logits

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def transform(self, X) -> np.ndarray:
        """Penultimate-layer features."""
        X = self._check_input(X)
        return self.model_.forward(X).penultimate

    def nc_report(self, X, y) -> NcReport:
        """NC1/NC2/NC3 of the features the classifier reads, with its own classifier rows."""
        X = self._check_input(X)
        labels = self._encoder.transform(y)
        cache = self.model_.forward(X)
        return nc_report(cache.head_input, labels, self.model_.classifier_rows(), k=len(self.classes_))


class MLPClassifier(_NetMixin, BaseEstimator):
    """ReLU MLP trained with cross-entropy and SGD with momentum; used as the teacher.

    After ``fit`` the class means of the training features are available as
    ``centroids_`` and the pair as ``teacher_`` for :class:`NCKDClassifier`.
    """

    def __init__(
        self,
        hidden_layer_sizes=(256, 256),
        lr=0.05,
        momentum=0.9,
        weight_decay=5e-4,
        epochs=60,
        batch_size=64,
        random_state=0,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def _config(self) -> DistillConfig:
        return DistillConfig(
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=int(self.random_state),
        )

    def fit(self, X, y, eval_set=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        self.n_features_in_ = X.shape[1]
        data = _dataset(X, y, self._encoder)
        test = _eval_dataset(eval_set, self._encoder, self.n_features_in_)
        self.model_, self.log_ = train_teacher(self._config(), data, tuple(self.hidden_layer_sizes), test)
        self.centroids_ = extract_teacher_centroids(self.model_, data)
        return self

    @property
    def teacher_(self) -> Teacher:
        check_is_fitted(self, "model_")
        return Teacher(self.model_, self.centroids_)


class NCKDClassifier(_NetMixin, BaseEstimator):
    """Student MLP distilled from a teacher's Neural Collapse structure.

    ``teacher`` is a fitted :class:`MLPClassifier` or a
    :class:`nckd.trainer.Teacher`. The loss is cross-entropy plus
    ``lambda1`` times the prototype-alignment term, ``lambda2`` times the
    ETF-alignment term and ``alpha`` times classic logit distillation.
    """

    def __init__(
        self,
        teacher=None,
        hidden_layer_sizes=(16,),
        lambda1=1.0,
        lambda2=1.0,
        alpha=0.0,
        tau_proto=0.1,
        tau_kd=4.0,
        lr=0.05,
        momentum=0.9,
        weight_decay=5e-4,
        epochs=60,
        batch_size=64,
        ema_momentum=0.9,
        head=LINEAR,
        nc3_scale=10.0,
        centroid_source="student",
        distill_layer=-1,
        random_state=0,
    ):
        self.teacher = teacher
        self.hidden_layer_sizes = hidden_layer_sizes
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.alpha = alpha
        self.tau_proto = tau_proto
        self.tau_kd = tau_kd
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.ema_momentum = ema_momentum
        self.head = head
        self.nc3_scale = nc3_scale
        self.centroid_source = centroid_source
        self.distill_layer = distill_layer
        self.random_state = random_state

    def _config(self) -> DistillConfig:
        return DistillConfig(
            weights=LossWeights(self.lambda1, self.lambda2, self.alpha, self.tau_proto, self.tau_kd),
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=int(self.random_state),
            ema_momentum=self.ema_momentum,
            head=self.head,
            nc3_scale=self.nc3_scale,
            centroid_source=self.centroid_source,
            distill_layer=self.distill_layer,
        )

    def _resolve_teacher(self, y) -> tuple[Teacher, LabelEncoder]:
        if isinstance(self.teacher, MLPClassifier):
            check_is_fitted(self.teacher, "model_")
            unknown = np.setdiff1d(np.unique(y), self.teacher.classes_)
            if unknown.size:
                raise ContractError(f"labels {unknown.tolist()} are unknown to the teacher")
            return self.teacher.teacher_, self.teacher._encoder
        if isinstance(self.teacher, Teacher):
            return self.teacher, LabelEncoder().fit(np.arange(self.teacher.model.n_classes))
        raise ContractError("teacher must be a fitted MLPClassifier or a Teacher")

    def fit(self, X, y, eval_set=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        teacher, self._encoder = self._resolve_teacher(y)
        self.classes_ = self._encoder.classes_
        self.n_features_in_ = X.shape[1]
        data = _dataset(X, y, self._encoder)
        test = _eval_dataset(eval_set, self._encoder, self.n_features_in_)
        self.model_, self.log_ = distill(teacher, self._config(), data, tuple(self.hidden_layer_sizes), test)
        return self
