"""scikit-learn compatible wrappers around the testbed networks and SDAT.

>>> clf = SubgroupClassifier(random_state=0).fit(X, y)
>>> gen = PushforwardGenerator(random_state=0).fit(X_biased)
>>> tuner = SDATTuner(gen, clf, random_state=0).fit(X_target)
>>> points = tuner.sample(1000)
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state, check_X_y

from .fairness import evaluate
from .numerics import (
    AdamState,
    ValueGraph,
    adam_step,
    backward,
    cross_entropy,
    init_mlp,
    mean,
    mlp_forward,
    softmax,
)
from .testbed import EMBEDDER_SEED, TrainingFailure, fit_generator_mmd, make_embedder
from .tuning import SdatConfig, dataset_sampler, sdat_finetune


def _rng(random_state) -> np.random.Generator:
    if isinstance(random_state, np.random.Generator):
        return random_state
    if random_state is None or isinstance(random_state, (int, np.integer)):
        return np.random.default_rng(random_state)
    # RandomState instance: draw a seed from it
    return np.random.default_rng(check_random_state(random_state).randint(2**31 - 1))


class SubgroupClassifier(ClassifierMixin, BaseEstimator):
    """Tanh MLP trained with full-batch Adam; parameters are frozen after fit."""

    def __init__(self, hidden=(16, 16), epochs=200, lr=1e-2, random_state=None):
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise TrainingFailure("need at least two classes")
        rng = _rng(self.random_state)
        params = init_mlp((X.shape[1], *self.hidden, len(self.classes_)), rng)
        state = AdamState.for_params(params)
        for _ in range(self.epochs):
            g = ValueGraph()
            loss = mean(cross_entropy(softmax(mlp_forward(params, X, g)), y_idx))
            params = adam_step(params, backward(g, loss)[params], state, self.lr)
        self.params_ = params.freeze()
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        return mlp_forward(self.params_, check_array(X, dtype=np.float64))

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class PushforwardGenerator(BaseEstimator):
    """Noise -> point MLP fitted to data by minimizing the RBF MMD."""

    def __init__(self, noise_dim=4, hidden=(32, 32), steps=3000, batch_size=128, lr=5e-3,
                 bandwidth=None, random_state=None):
        self.noise_dim = noise_dim
        self.hidden = hidden
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.bandwidth = bandwidth
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        rng = _rng(self.random_state)
        gen = init_mlp((self.noise_dim, *self.hidden, X.shape[1]), rng)
        self.params_ = fit_generator_mmd(
            X, self.steps, rng, batch_size=self.batch_size, lr=self.lr, gen=gen, bandwidth=self.bandwidth
        )
        self.n_features_in_ = X.shape[1]
        return self

    def sample(self, n_samples=1, random_state=None):
        check_is_fitted(self, "params_")
        rng = _rng(random_state)
        return mlp_forward(self.params_, rng.standard_normal((n_samples, self.params_.sizes[0])))


class SDATTuner(BaseEstimator):
    """Fine-tunes a fitted generator so its classifier-assigned subgroup mix
    matches that of the data passed to :meth:`fit`.

    ``generator`` and ``classifier`` are fitted :class:`PushforwardGenerator`
    and :class:`SubgroupClassifier` instances (or raw ``MlpParams``); neither is
    modified.
    """

    def __init__(self, generator=None, classifier=None, tau=0.8, lambda_reg=1.0, batch_size=64,
                 steps=2000, target_batches=1, lr=1e-3, confidence_source="target",
                 embedder_seed=EMBEDDER_SEED, random_state=None):
        self.generator = generator
        self.classifier = classifier
        self.tau = tau
        self.lambda_reg = lambda_reg
        self.batch_size = batch_size
        self.steps = steps
        self.target_batches = target_batches
        self.lr = lr
        self.confidence_source = confidence_source
        self.embedder_seed = embedder_seed
        self.random_state = random_state

    @staticmethod
    def _params(obj, name):
        if obj is None:
            raise ValueError(f"{name} is required")
        if hasattr(obj, "params_"):
            return obj.params_
        if hasattr(obj, "layers"):
            return obj
        raise TypeError(f"{name} must be fitted or MlpParams, got {type(obj).__name__}")

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        gen0 = self._params(self.generator, "generator")
        clf = self._params(self.classifier, "classifier")
        cfg = SdatConfig(
            tau=self.tau, lambda_reg=self.lambda_reg, batch_size=self.batch_size, steps=self.steps,
            target_batches=self.target_batches, lr=self.lr, confidence_source=self.confidence_source,
        )
        gen, history, _ = sdat_finetune(
            gen0.copy(frozen=False), gen0.freeze(), clf.freeze(), make_embedder(self.embedder_seed),
            dataset_sampler(X), cfg, _rng(self.random_state),
        )
        self.params_ = gen
        self.history_ = history
        labels = np.argmax(mlp_forward(clf, X), axis=1)
        self.target_freq_ = np.bincount(labels, minlength=clf.sizes[-1]) / len(X)
        return self

    def sample(self, n_samples=1, random_state=None):
        check_is_fitted(self, "params_")
        rng = _rng(random_state)
        return mlp_forward(self.params_, rng.standard_normal((n_samples, self.params_.sizes[0])))

    def bias_report(self, target_freq, n_samples=2000, random_state=0):
        check_is_fitted(self, "params_")
        clf = self._params(self.classifier, "classifier")
        return evaluate(self.params_, clf, target_freq, n_samples, _rng(random_state))
