import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cmssl.encoders import EncoderSpec
from cmssl.errors import ConfigError, DimensionError
from cmssl.estimators import ContrastivePretrainer, FusionClassifier, check_labels, check_multimodal

SMALL = {"S1": EncoderSpec(hidden=(16,), output_dim=8), "S2": EncoderSpec(hidden=(16,), output_dim=8)}


@pytest.fixture(scope="module")
def arrays():
    rng = np.random.default_rng(0)
    n = 36
    y = np.arange(n) % 6
    centers = rng.standard_normal((6, 2, 4, 4)) * 2
    X = {"S1": centers[y] + 0.3 * rng.standard_normal((n, 2, 4, 4)),
         "S2": -centers[y] + 0.3 * rng.standard_normal((n, 2, 4, 4))}
    return X, y


def test_clone_and_params():
    est = FusionClassifier(modalities=("S1", "S2"), epochs=3)
    twin = clone(est)
    assert twin.get_params()["epochs"] == 3 and twin.get_params()["modalities"] == ("S1", "S2")
    assert ContrastivePretrainer(temperature=0.2).get_params()["temperature"] == 0.2


def test_classifier_random_init(arrays):
    X, y = arrays
    clf = FusionClassifier(modalities=("S1", "S2"), epochs=40, learning_rate=1e-2, batch_size=12,
                           encoder_specs=SMALL).fit(X, y)
    proba = clf.predict_proba(X)
    assert proba.shape == (36, 6)
    assert np.allclose(proba.sum(axis=1), 1)
    assert np.array_equal(clf.predict(X), clf.classes_[np.argmax(proba, axis=1)])
    assert clf.score(X, y) > 0.9


def test_pretrainer_then_classifier(arrays):
    X, y = arrays
    labels = y.copy()
    labels[:6] = -1  # a negative pool
    pre = ContrastivePretrainer(modalities=("S1", "S2"), epochs=2, batch_size=12, encoder_specs=SMALL).fit(X, labels)
    feats = pre.transform(X)
    assert feats.shape == (36, 16) and pre.n_features_out_ == 16
    assert len(pre.training_log_) == 2
    clf = FusionClassifier(modalities=("S2",), pretrained=pre, epochs=2, batch_size=12).fit(X, y)
    assert clf.decision_function(X).shape == (36, 6)
    with pytest.raises(ConfigError):
        FusionClassifier(modalities=("NAIP",), pretrained=pre).fit({"NAIP": X["S1"]}, y)


def test_deterministic(arrays):
    X, y = arrays
    a = FusionClassifier(modalities=("S1",), epochs=2, encoder_specs=SMALL, seed=5).fit(X, y)
    b = FusionClassifier(modalities=("S1",), epochs=2, encoder_specs=SMALL, seed=5).fit(X, y)
    assert a.decision_function(X).tobytes() == b.decision_function(X).tobytes()


def test_not_fitted(arrays):
    with pytest.raises(NotFittedError):
        FusionClassifier().predict(arrays[0])
    with pytest.raises(NotFittedError):
        ContrastivePretrainer().transform(arrays[0])


def test_input_validation(arrays):
    X, y = arrays
    with pytest.raises(TypeError):
        check_multimodal(np.zeros((3, 2, 4, 4)))
    with pytest.raises(DimensionError):
        check_multimodal({"S1": np.zeros((3, 16))})
    with pytest.raises(DimensionError):
        check_multimodal({"S1": np.zeros((3, 1, 2, 2)), "S2": np.zeros((4, 1, 2, 2))})
    with pytest.raises(ValueError):
        check_multimodal({"S1": np.full((2, 1, 2, 2), np.nan)})
    with pytest.raises(ConfigError):
        check_multimodal({"S1": np.zeros((2, 1, 2, 2))}, ["S2"])
    with pytest.raises(ValueError):
        check_labels([0, 7], 2)
    with pytest.raises(ValueError):
        check_labels([-1, 0], 2)
    assert check_labels([-1, 0], 2, allow_negative=True).tolist() == [-1, 0]
    with pytest.raises(DimensionError):
        check_labels([0, 1, 2], 2)


def test_wrong_image_shape_at_predict(arrays):
    X, y = arrays
    clf = FusionClassifier(modalities=("S1",), epochs=1, encoder_specs=SMALL).fit(X, y)
    with pytest.raises(DimensionError):
        clf.predict({"S1": np.zeros((2, 2, 8, 8))})
