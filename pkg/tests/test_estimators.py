import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from nckd import MLPClassifier, NCKDClassifier
from nckd.data import MixtureSpec, gaussian_mixture
from nckd.errors import ContractError
from nckd.numcore import Rng
from nckd.trainer import DistillConfig, Teacher, distill, extract_teacher_centroids, train_teacher


@pytest.fixture(scope="module")
def blobs():
    data = gaussian_mixture(MixtureSpec(k=3, d=6, n_per_class=30, center_separation=5.0), Rng(0))
    names = np.array(["cat", "dog", "eel"])
    return data, data.X, names[data.y]


@pytest.fixture(scope="module")
def teacher(blobs):
    _, X, y = blobs
    return MLPClassifier(hidden_layer_sizes=(16, 16), epochs=5, batch_size=16).fit(X, y)


def test_teacher_fit_predict_transform(blobs, teacher):
    _, X, y = blobs
    assert list(teacher.classes_) == ["cat", "dog", "eel"]
    assert teacher.n_features_in_ == 6
    assert set(teacher.predict(X)) <= set(teacher.classes_)
    assert teacher.score(X, y) > 0.9
    proba = teacher.predict_proba(X)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    assert teacher.transform(X).shape == (90, 16)
    assert len(teacher.log_) == 5
    assert teacher.centroids_.class_means.shape == (3, 16)


def test_teacher_matches_functional_api(blobs, teacher):
    data, X, _ = blobs
    model, _ = train_teacher(DistillConfig(epochs=5, batch_size=16, seed=0), data, (16, 16))
    np.testing.assert_array_equal(model.forward(X).logits, teacher.decision_function(X))


def test_get_params_and_clone(teacher):
    params = teacher.get_params()
    assert params["hidden_layer_sizes"] == (16, 16) and params["epochs"] == 5
    fresh = clone(teacher)
    assert not hasattr(fresh, "model_")
    fresh.set_params(epochs=2)
    assert fresh.epochs == 2


def test_unfitted_raises(blobs):
    _, X, _ = blobs
    with pytest.raises(NotFittedError):
        MLPClassifier().predict(X)
    with pytest.raises(NotFittedError):
        NCKDClassifier(teacher=MLPClassifier()).fit(X, np.zeros(len(X)))


def test_feature_count_mismatch(teacher):
    with pytest.raises(ContractError):
        teacher.predict(np.zeros((2, 5)))


def test_input_validation():
    with pytest.raises(ValueError):
        MLPClassifier(epochs=1).fit(np.array([[np.nan, 0.0]]), [0])
    with pytest.raises(ValueError):
        MLPClassifier(epochs=1).fit(np.zeros((3, 2)), [0, 1])


def test_student_distills_with_encoded_labels(blobs, teacher):
    data, X, y = blobs
    student = NCKDClassifier(teacher=teacher, hidden_layer_sizes=(8,), epochs=5, batch_size=16).fit(X, y)
    assert list(student.classes_) == ["cat", "dog", "eel"]
    assert student.transform(X).shape == (90, 8)
    rep = student.nc_report(X, y)
    assert rep.nc1 >= 0.0 and 0.0 <= rep.nc3 <= 1.0
    cfg = DistillConfig(epochs=5, batch_size=16, seed=0)
    tm = teacher.model_
    model, _ = distill(Teacher(tm, extract_teacher_centroids(tm, data)), cfg, data, (8,))
    np.testing.assert_array_equal(model.forward(X).logits, student.decision_function(X))


def test_student_accepts_teacher_record(blobs, teacher):
    data, X, _ = blobs
    rec = teacher.teacher_
    student = NCKDClassifier(teacher=rec, hidden_layer_sizes=(8,), epochs=2, head="nc3").fit(X, data.y)
    np.testing.assert_array_equal(student.classes_, [0, 1, 2])


def test_student_rejects_unknown_labels(blobs, teacher):
    _, X, y = blobs
    bad = y.copy()
    bad[0] = "fox"
    with pytest.raises(ContractError):
        NCKDClassifier(teacher=teacher, epochs=1).fit(X, bad)
    with pytest.raises(ContractError):
        NCKDClassifier(teacher="nope", epochs=1).fit(X, y)


def test_pipeline(blobs):
    _, X, y = blobs
    pipe = make_pipeline(StandardScaler(), MLPClassifier(hidden_layer_sizes=(8,), epochs=3, batch_size=16))
    pipe.fit(X, y)
    assert pipe.predict(X).shape == (90,)


def test_eval_set_logs_test_metrics(blobs):
    _, X, y = blobs
    clf = MLPClassifier(hidden_layer_sizes=(8,), epochs=2).fit(X, y, eval_set=(X, y))
    assert clf.log_[-1].acc_test is not None
