"""Subgroup-distribution aligned fine-tuning of a pushforward generator.

Each step matches the classifier histograms of a generated batch to those of
target-dataset batches with an exact L1 assignment, turns the matched target
histograms into pseudo-labels, and minimizes a confidence-gated cross-entropy
plus a cosine distillation term against a frozen copy of the generator that
sees the same noise.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .numerics import (
    AdamState,
    MlpParams,
    Node,
    ShapeError,
    ValueGraph,
    adam_step,
    backward,
    cosine_similarity,
    mean,
    mlp_forward,
    mul,
    neg_log_floor,
    softmax,
    take_columns,
)
from .transport import TIE_TOL, check_prob_batch, l1_cost_matrix, solve_assignment

log = logging.getLogger(__name__)

TargetSampler = Callable[[int, np.random.Generator], np.ndarray]


@dataclass
class SdatConfig:
    tau: float = 0.8
    lambda_reg: float = 1.0
    batch_size: int = 64
    steps: int = 2000
    target_batches: int = 1
    lr: float = 1e-3
    seed: int = 0
    confidence_source: str = "target"

    def __post_init__(self):
        if not 0.0 <= self.tau or not np.isfinite(self.tau):
            raise ValueError(f"tau must be finite and >= 0, got {self.tau}")
        if self.lambda_reg < 0:
            raise ValueError(f"lambda_reg must be >= 0, got {self.lambda_reg}")
        if self.batch_size < 1 or self.target_batches < 1:
            raise ValueError("batch_size and target_batches must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.confidence_source not in ("target", "generated"):
            raise ValueError("confidence_source must be 'target' or 'generated'")


@dataclass
class PseudoLabelBatch:
    q: np.ndarray
    y: np.ndarray
    c: np.ndarray
    sigmas: list[tuple[int, ...]] = field(default_factory=list)
    costs: list[float] = field(default_factory=list)
    identity_costs: list[float] = field(default_factory=list)


@dataclass
class StepMetrics:
    step: int
    l_align: float
    l_reg: float
    total: float
    gate_pass: int
    gate_rate: float
    transport_cost: float
    identity_cost: float


def pseudo_labels(P, targets, confidence_source: str = "target") -> PseudoLabelBatch:
    """Average the optimally matched target rows over all target batches.

    ``q[i] = mean_m U_m[sigma_m[i]]``; ``y`` is the argmax of ``q`` (lowest
    index on ties) and ``c`` its value. With ``confidence_source="generated"``
    the confidence is ``max_k P[i, k]`` instead. Everything returned is plain
    data: it is held constant during the gradient step.
    """
    P = check_prob_batch(P, "generated histograms")
    targets = list(targets)
    if not targets:
        raise ValueError("at least one target batch is required")
    q = np.zeros_like(P)
    out = PseudoLabelBatch(q, None, None)
    for m, U in enumerate(targets):
        U = check_prob_batch(U, f"target batch {m}")
        if U.shape != P.shape:
            raise ValueError(f"target batch {m} has shape {U.shape}, expected {P.shape}")
        C = l1_cost_matrix(P, U)
        a = solve_assignment(C)
        q += U[list(a.sigma)]
        out.sigmas.append(a.sigma)
        out.costs.append(a.cost)
        out.identity_costs.append(float(np.trace(C)))
    q /= len(targets)
    out.q = q
    out.y = np.argmax(q, axis=1)
    if confidence_source == "target":
        out.c = q[np.arange(len(q)), out.y]
    elif confidence_source == "generated":
        out.c = P.max(axis=1)
    else:
        raise ValueError(f"unknown confidence source {confidence_source!r}")
    return out


def _gate(labels: PseudoLabelBatch, tau: float) -> np.ndarray:
    return (np.asarray(labels.c) >= tau).astype(np.float64)


def alignment_loss(P, labels: PseudoLabelBatch, tau: float):
    """Mean over all N samples of ``[c_i >= tau] * -ln p_i[y_i]``.

    The divisor is N, not the number of samples that pass the gate. ``P`` may
    be a Node (differentiable) or an array (returns a float).
    """
    eager = not isinstance(P, Node)
    g = ValueGraph() if eager else P.graph
    P = g.const(P) if eager else P
    n = P.shape[0]
    y = np.asarray(labels.y)
    if y.shape != (n,) or np.shape(labels.c) != (n,):
        raise ShapeError(f"labels for {y.shape} samples, predictions for {n}")
    if np.any((y < 0) | (y >= P.shape[1])):
        raise IndexError("pseudo-label out of range")
    ce = neg_log_floor(take_columns(P, y))
    loss = mean(mul(ce, g.const(_gate(labels, tau))))
    return float(loss.value) if eager else loss


def consistency_reg(tuned, frozen):
    """Mean of ``1 - cos(tuned_i, frozen_i)`` over the batch, in [0, 2]."""
    if isinstance(tuned, Node) or isinstance(frozen, Node):
        return mean(1.0 - cosine_similarity(tuned, frozen))
    tuned, frozen = np.asarray(tuned, dtype=np.float64), np.asarray(frozen, dtype=np.float64)
    if tuned.ndim != 2 or tuned.shape != frozen.shape:
        raise ShapeError(f"embedding batches differ: {tuned.shape} vs {frozen.shape}")
    return float(np.mean(1.0 - cosine_similarity(tuned, frozen)))


def dataset_sampler(points) -> TargetSampler:
    """Sampler drawing rows of ``points`` without replacement within a batch."""
    points = np.asarray(points, dtype=np.float64)

    def sample(n, rng):
        return points[rng.choice(len(points), size=n, replace=n > len(points))]

    return sample


def sdat_objective(gen, frozen_gen, classifier, embedder, noise, target_hists, cfg, labels=None):
    """Build the loss for one batch; returns ``(graph, total, parts)``.

    ``target_hists`` holds the classifier histograms of the M target batches.
    Pseudo-labels are computed from the current generator (unless ``labels``
    is given) and then treated as constants.
    """
    g = ValueGraph()
    x = mlp_forward(gen, noise, g)
    p = softmax(mlp_forward(classifier, x, g))
    if labels is None:
        labels = pseudo_labels(p.value, target_hists, cfg.confidence_source)
    l_align = alignment_loss(p, labels, cfg.tau)
    o = mlp_forward(frozen_gen, noise)
    l_reg = consistency_reg(mlp_forward(embedder, x, g), mlp_forward(embedder, o))
    total = l_align + l_reg * cfg.lambda_reg
    return g, total, {"labels": labels, "l_align": l_align, "l_reg": l_reg}


def sdat_step(
    gen: MlpParams,
    frozen_gen: MlpParams,
    classifier: MlpParams,
    embedder: MlpParams,
    target_sampler: TargetSampler,
    cfg: SdatConfig,
    rng: np.random.Generator,
    state: AdamState | None = None,
    step: int = 0,
):
    """One update of ``gen``; classifier, embedder and frozen_gen are read only."""
    if state is None:
        state = AdamState.for_params(gen)
    n = cfg.batch_size
    noise = rng.standard_normal((n, gen.sizes[0]))
    target_hists = [
        softmax(mlp_forward(classifier, target_sampler(n, rng))) for _ in range(cfg.target_batches)
    ]
    g, total, parts = sdat_objective(gen, frozen_gen, classifier, embedder, noise, target_hists, cfg)
    grads = backward(g, total)[gen]
    gen = adam_step(gen, grads, state, cfg.lr)
    labels = parts["labels"]
    cost = float(np.mean(labels.costs))
    identity = float(np.mean(labels.identity_costs))
    assert cost <= identity + TIE_TOL * n, "optimal matching worse than identity"
    gate = int(_gate(labels, cfg.tau).sum())
    metrics = StepMetrics(
        step=step,
        l_align=float(parts["l_align"].value),
        l_reg=float(parts["l_reg"].value),
        total=float(total.value),
        gate_pass=gate,
        gate_rate=gate / n,
        transport_cost=cost,
        identity_cost=identity,
    )
    return gen, metrics


def sdat_finetune(
    gen: MlpParams,
    frozen_gen: MlpParams,
    classifier: MlpParams,
    embedder: MlpParams,
    target_sampler: TargetSampler,
    cfg: SdatConfig,
    rng: np.random.Generator | None = None,
    steps: int | None = None,
    eval_every: int = 0,
    evaluator: Callable[[MlpParams], dict] | None = None,
):
    """Run ``steps`` (default ``cfg.steps``) SDAT updates.

    Returns ``(gen, log, snapshots)`` where ``log`` is a list of StepMetrics and
    ``snapshots`` holds ``evaluator(gen)`` results every ``eval_every`` steps.
    """
    steps = cfg.steps if steps is None else steps
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    state = AdamState.for_params(gen)
    history, snapshots = [], []
    for t in range(steps):
        gen, m = sdat_step(gen, frozen_gen, classifier, embedder, target_sampler, cfg, rng, state, t)
        history.append(m)
        if evaluator is not None and eval_every and (t + 1) % eval_every == 0:
            snapshots.append({"step": t + 1, **evaluator(gen)})
        if t % 250 == 0:
            log.debug("sdat step %d %s", t, asdict(m))
    return gen, history, snapshots
