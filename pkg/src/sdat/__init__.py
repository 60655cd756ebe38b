"""Subgroup distribution aligned tuning (SDAT) on a synthetic generative testbed."""
from .fairness import BiasReport, FrequencyVector, bias_metric, estimate_frequencies, evaluate
from .numerics import (
    AdamState,
    MlpParams,
    ValueGraph,
    adam_step,
    backward,
    cosine_similarity,
    cross_entropy,
    mlp_forward,
    mmd_rbf,
    softmax,
)
from .transport import Assignment, l1_cost_matrix, solve_assignment, solve_assignment_bruteforce
from .tuning import (
    PseudoLabelBatch,
    SdatConfig,
    StepMetrics,
    alignment_loss,
    consistency_reg,
    pseudo_labels,
    sdat_finetune,
    sdat_step,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "Assignment", "BiasReport", "FrequencyVector", "MlpParams", "PseudoLabelBatch",
    "SdatConfig", "StepMetrics", "ValueGraph", "adam_step", "alignment_loss", "backward",
    "bias_metric", "consistency_reg", "cosine_similarity", "cross_entropy", "estimate_frequencies",
    "evaluate", "l1_cost_matrix", "mlp_forward", "mmd_rbf", "pseudo_labels", "sdat_finetune",
    "sdat_step", "softmax", "solve_assignment", "solve_assignment_bruteforce",
]
