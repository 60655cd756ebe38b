"""Subgroup frequency estimation and the pairwise-gap bias score."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .numerics import MlpParams, mlp_forward, softmax


@dataclass(frozen=True)
class FrequencyVector:
    freq: tuple[float, ...]
    n_samples: int = 0

    def __post_init__(self):
        f = np.asarray(self.freq, dtype=np.float64)
        if f.ndim != 1 or f.size == 0:
            raise ValueError("frequency vector must be 1-D and nonempty")
        if np.any(f < 0) or np.any(f > 1) or abs(f.sum() - 1.0) > 1e-9:
            raise ValueError(f"frequencies must lie on the simplex, got {self.freq}")
        object.__setattr__(self, "freq", tuple(float(x) for x in f))

    @property
    def k(self) -> int:
        return len(self.freq)


@dataclass(frozen=True)
class BiasReport:
    bias: float
    freq: FrequencyVector
    target_freq: FrequencyVector
    abs_target_gap: float

    def to_dict(self) -> dict:
        return {
            "bias": self.bias,
            "freq": list(self.freq.freq),
            "n_samples": self.freq.n_samples,
            "target_freq": list(self.target_freq.freq),
            "abs_target_gap": self.abs_target_gap,
        }


def bias_metric(freq) -> float:
    """Mean absolute gap over all subgroup pairs, normalized by K(K-1)/2.

    0 for a uniform distribution, 1 when one subgroup takes all the mass.
    """
    f = freq.freq if isinstance(freq, FrequencyVector) else tuple(freq)
    k = len(f)
    if k < 2:
        raise ValueError("bias needs at least two subgroups")
    gaps = sum(abs(f[i] - f[j]) for i, j in combinations(range(k), 2))
    return gaps / (k * (k - 1) / 2)


def target_gap(freq, target) -> float:
    """Total variation distance between two frequency vectors."""
    f = np.asarray(freq.freq if isinstance(freq, FrequencyVector) else freq)
    t = np.asarray(target.freq if isinstance(target, FrequencyVector) else target)
    if f.shape != t.shape:
        raise ValueError("frequency vectors have different K")
    return float(np.abs(f - t).sum() / 2)


def estimate_frequencies(
    generator,
    classifier: MlpParams,
    n_samples: int,
    rng: np.random.Generator,
    counting: str = "argmax",
) -> FrequencyVector:
    """Classify ``n_samples`` generated points and return subgroup frequencies.

    ``generator`` is MlpParams (fed standard-normal noise) or any callable
    ``(n, rng) -> points``. ``counting="soft"`` averages softmax mass instead of
    counting argmax labels.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    if isinstance(generator, MlpParams):
        noise = rng.standard_normal((n_samples, generator.sizes[0]))
        points = mlp_forward(generator, noise)
    else:
        points = np.asarray(generator(n_samples, rng), dtype=np.float64)
    logits = mlp_forward(classifier, points)
    k = logits.shape[1]
    if counting == "argmax":
        freq = np.bincount(np.argmax(logits, axis=1), minlength=k) / n_samples
    elif counting == "soft":
        freq = softmax(logits).mean(axis=0)
        freq = freq / freq.sum()
    else:
        raise ValueError(f"unknown counting mode {counting!r}")
    return FrequencyVector(tuple(freq), n_samples)


def evaluate(
    generator,
    classifier: MlpParams,
    target_freq,
    n_samples: int,
    rng: np.random.Generator,
    counting: str = "argmax",
) -> BiasReport:
    if not isinstance(target_freq, FrequencyVector):
        target_freq = FrequencyVector(tuple(target_freq))
    freq = estimate_frequencies(generator, classifier, n_samples, rng, counting)
    if freq.k != target_freq.k:
        raise ValueError(f"classifier has {freq.k} classes, target has {target_freq.k}")
    return BiasReport(bias_metric(freq), freq, target_freq, target_gap(freq, target_freq))


def report_from_dict(d: dict) -> BiasReport:
    return BiasReport(
        d["bias"],
        FrequencyVector(tuple(d["freq"]), d.get("n_samples", 0)),
        FrequencyVector(tuple(d["target_freq"])),
        d["abs_target_gap"],
    )

