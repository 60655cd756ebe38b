import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from sdat.estimators import PushforwardGenerator, SDATTuner, SubgroupClassifier
from sdat.testbed import PopulationSpec, TrainingFailure, nearest_mode_labels, sample_population


@pytest.fixture(scope="module")
def data():
    ds = sample_population(PopulationSpec((0.5, 0.5)), 600, np.random.default_rng(0))
    return ds.samples, ds.labels


def test_params_and_clone():
    clf = SubgroupClassifier(epochs=7, random_state=3)
    assert clf.get_params()["epochs"] == 7
    c2 = clone(clf)
    assert c2.get_params() == clf.get_params() and c2 is not clf
    tuner = SDATTuner(tau=0.9).set_params(lambda_reg=0.5)
    assert tuner.get_params()["lambda_reg"] == 0.5


def test_classifier_fit_predict(data):
    X, y = data
    clf = SubgroupClassifier(random_state=0).fit(X, y + 10)
    assert clf.classes_.tolist() == [10, 11]
    assert clf.score(X, y + 10) >= 0.99
    proba = clf.predict_proba(X[:5])
    np.testing.assert_allclose(proba.sum(1), 1.0)
    assert clf.params_.frozen


def test_classifier_errors(data):
    X, y = data
    with pytest.raises(NotFittedError):
        SubgroupClassifier().predict(X)
    with pytest.raises(TrainingFailure):
        SubgroupClassifier(epochs=1).fit(X, np.zeros(len(X)))
    with pytest.raises(ValueError):
        SubgroupClassifier(epochs=1).fit(X[:, :1].tolist() + [["a"]], list(y) + [0])


def test_classifier_deterministic(data):
    X, y = data
    a = SubgroupClassifier(epochs=5, random_state=1).fit(X, y).params_
    b = SubgroupClassifier(epochs=5, random_state=1).fit(X, y).params_
    assert a.equal(b)


def test_generator_and_tuner(data):
    X, y = data
    clf = SubgroupClassifier(random_state=0).fit(X, y)
    biased = sample_population(PopulationSpec((0.9, 0.1)), 600, np.random.default_rng(1)).samples
    gen = PushforwardGenerator(steps=300, random_state=0).fit(biased)
    pts = gen.sample(500, random_state=0)
    assert pts.shape == (500, 2)
    assert np.array_equal(pts, gen.sample(500, random_state=0))

    frozen_bytes = gen.params_.flat().tobytes()
    tuner = SDATTuner(gen, clf, steps=20, batch_size=16, random_state=0).fit(X)
    assert len(tuner.history_) == 20
    np.testing.assert_allclose(tuner.target_freq_, np.bincount(y) / len(y), atol=0.01)
    assert gen.params_.flat().tobytes() == frozen_bytes
    report = tuner.bias_report((0.5, 0.5), n_samples=200)
    assert 0.0 <= report.bias <= 1.0
    assert tuner.sample(3, random_state=1).shape == (3, 2)
    assert nearest_mode_labels(tuner.sample(10, random_state=2)).shape == (10,)


def test_tuner_requires_models(data):
    X, _ = data
    with pytest.raises(ValueError):
        SDATTuner().fit(X)
    with pytest.raises(TypeError):
        SDATTuner(generator="gen", classifier="clf").fit(X)
