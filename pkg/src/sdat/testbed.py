"""Synthetic two-mode population, classifier, generator and embedder.

Small stand-ins for the heavyweight networks of an imaging pipeline: the
alignment machinery only ever sees classifier probabilities and embedding
vectors, so 2-D points are enough to exercise it end to end.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .numerics import (
    AdamState,
    MlpParams,
    ValueGraph,
    adam_step,
    backward,
    cross_entropy,
    init_mlp,
    mean,
    median_bandwidth,
    mlp_forward,
    mmd_rbf,
    softmax,
)

log = logging.getLogger(__name__)

CLASSIFIER_SIZES = (2, 16, 16, 2)
EMBEDDER_SIZES = (2, 16, 8)
GENERATOR_HIDDEN = (32, 32)
NOISE_DIM = 4
EMBEDDER_SEED = 20240917


class TrainingFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class PopulationSpec:
    weights: tuple[float, ...] = (0.5, 0.5)
    means: tuple[tuple[float, float], ...] = ((-2.0, 0.0), (2.0, 0.0))
    std: float = 0.5

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if len(w) != len(self.means):
            raise ValueError("one weight per mode required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must lie on the simplex, got {self.weights}")
        if not self.std > 0:
            raise ValueError("std must be positive")

    @property
    def k(self) -> int:
        return len(self.means)


@dataclass
class TargetDataset:
    samples: np.ndarray
    labels: np.ndarray
    declared_weights: tuple[float, ...]

    def __len__(self):
        return len(self.labels)

    def label_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=len(self.declared_weights)).tolist()


def stratified_counts(weights, n: int) -> list[int]:
    """Largest-remainder rounding of ``n * weights`` to integers summing to n."""
    w = np.asarray(weights, dtype=np.float64)
    raw = w * n
    counts = np.floor(raw).astype(int)
    short = n - int(counts.sum())
    # stable sort keeps the lowest index first among equal remainders
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts.tolist()


def sample_population(spec: PopulationSpec, n: int, rng: np.random.Generator) -> TargetDataset:
    if n < spec.k:
        raise ValueError(f"need at least {spec.k} samples, got {n}")
    counts = stratified_counts(spec.weights, n)
    labels = np.repeat(np.arange(spec.k), counts)
    means = np.asarray(spec.means, dtype=np.float64)
    samples = means[labels] + spec.std * rng.standard_normal((n, means.shape[1]))
    order = rng.permutation(n)
    return TargetDataset(samples[order], labels[order], tuple(float(x) for x in spec.weights))


def classifier_probs(classifier: MlpParams, x) -> np.ndarray:
    return softmax(mlp_forward(classifier, x))


def predict_labels(classifier: MlpParams, x) -> np.ndarray:
    # argmax returns the lowest index on ties
    return np.argmax(mlp_forward(classifier, x), axis=1)


def train_classifier(
    dataset: TargetDataset,
    epochs: int = 200,
    rng: np.random.Generator | None = None,
    lr: float = 1e-2,
    holdout: float = 0.2,
    min_accuracy: float = 0.99,
) -> MlpParams:
    """Full-batch Adam on cross-entropy; frozen params on success."""
    rng = np.random.default_rng(0) if rng is None else rng
    k = len(dataset.declared_weights)
    if len(np.unique(dataset.labels)) < 2:
        raise TrainingFailure("dataset has a single label; nothing to separate")
    n_hold = max(1, int(round(holdout * len(dataset))))
    idx = rng.permutation(len(dataset))
    hold, fit = idx[:n_hold], idx[n_hold:]
    X, y = dataset.samples[fit], dataset.labels[fit]
    params = init_mlp(CLASSIFIER_SIZES[:-1] + (k,), rng)
    state = AdamState.for_params(params)
    for _ in range(epochs):
        g = ValueGraph()
        loss = mean(cross_entropy(softmax(mlp_forward(params, X, g)), y))
        params = adam_step(params, backward(g, loss)[params], state, lr)
    acc = float(np.mean(predict_labels(params, dataset.samples[hold]) == dataset.labels[hold]))
    log.info("classifier held-out accuracy %.4f", acc)
    if acc < min_accuracy:
        raise TrainingFailure(f"held-out accuracy {acc:.4f} below {min_accuracy}")
    return params.freeze()


def make_embedder(seed: int = EMBEDDER_SEED) -> MlpParams:
    """Random, never-trained 2 -> 16 -> 8 tanh network."""
    return init_mlp(EMBEDDER_SIZES, np.random.default_rng(seed)).freeze()


def init_generator(rng: np.random.Generator, noise_dim: int = NOISE_DIM) -> MlpParams:
    return init_mlp((noise_dim, *GENERATOR_HIDDEN, 2), rng)


def generate_batch(gen: MlpParams, n: int, rng: np.random.Generator):
    """Returns ``(points, noise)``; replaying ``noise`` reproduces the points."""
    if n < 1:
        raise ValueError(f"batch size must be positive, got {n}")
    noise = rng.standard_normal((n, gen.sizes[0]))
    return mlp_forward(gen, noise), noise


def nearest_mode_labels(points, spec: PopulationSpec = PopulationSpec()) -> np.ndarray:
    means = np.asarray(spec.means)
    d = ((np.asarray(points)[:, None, :] - means[None]) ** 2).sum(axis=-1)
    return np.argmin(d, axis=1)


def fit_generator_mmd(
    target,
    steps: int,
    rng: np.random.Generator,
    batch_size: int = 128,
    lr: float = 5e-3,
    gen: MlpParams | None = None,
    bandwidth: float | None = None,
) -> MlpParams:
    """Adam on the RBF MMD between generated and target minibatches.

    ``bandwidth`` defaults to the median pairwise distance of (at most 1000
    rows of) ``target``, computed once and kept fixed.
    """
    target = np.asarray(target, dtype=np.float64)
    n_target = len(target)
    if bandwidth is None:
        bandwidth = median_bandwidth(target[:1000])
    gen = init_generator(rng) if gen is None else gen
    state = AdamState.for_params(gen)
    take = min(batch_size, n_target)
    for step in range(steps):
        g = ValueGraph()
        noise = rng.standard_normal((batch_size, gen.sizes[0]))
        y = target[rng.choice(n_target, size=take, replace=False)]
        loss = mmd_rbf(mlp_forward(gen, noise, g), y, bandwidth)
        gen = adam_step(gen, backward(g, loss)[gen], state, lr)
        if step % 500 == 0:
            log.debug("mmd step %d: %.5f", step, float(loss.value))
    return gen


def pretrain_generator(
    biased_weights=(0.9, 0.1),
    n_target: int = 2000,
    steps: int = 3000,
    rng: np.random.Generator | None = None,
    batch_size: int = 128,
    lr: float = 5e-3,
    classifier: MlpParams | None = None,
    check_samples: int = 2000,
    tolerance: float | None = 0.05,
) -> MlpParams:
    """Fit a pushforward generator to a biased two-mode mixture.

    After training, the subgroup-0 frequency (argmax of ``classifier``, or the
    nearest mode when no classifier is given) must lie within ``tolerance`` of
    ``biased_weights[0]``, else TrainingFailure. ``tolerance=None`` skips it.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    spec = PopulationSpec(weights=tuple(biased_weights))
    target = sample_population(spec, n_target, rng).samples
    gen = fit_generator_mmd(target, steps, rng, batch_size=batch_size, lr=lr)
    if tolerance is not None and steps > 0:
        points, _ = generate_batch(gen, check_samples, rng)
        if classifier is not None:
            labels = predict_labels(classifier, points)
        else:
            labels = nearest_mode_labels(points, spec)
        freq0 = float(np.mean(labels == 0))
        log.info("pretrained generator freq_0 %.4f (wanted %.2f)", freq0, biased_weights[0])
        if abs(freq0 - biased_weights[0]) > tolerance:
            raise TrainingFailure(
                f"generator subgroup-0 frequency {freq0:.3f} not within "
                f"{tolerance} of {biased_weights[0]}"
            )
    return gen
