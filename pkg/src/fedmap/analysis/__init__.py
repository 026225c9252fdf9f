"""Evaluation metrics, paired statistics, and the convergence-theory checks."""

from .metrics import auroc, balanced_accuracy, brier, c_index
from .stats import PairedSample, gain_regression, spearman, wilcoxon_signed_rank
from .theory import (
    ConvexInstance,
    bilevel_oracle,
    envelope_value,
    run_theory_iterates,
    verify_danskin,
    verify_m_convexity,
)

__all__ = [
    "auroc",
    "balanced_accuracy",
    "brier",
    "c_index",
    "PairedSample",
    "gain_regression",
    "spearman",
    "wilcoxon_signed_rank",
    "ConvexInstance",
    "bilevel_oracle",
    "envelope_value",
    "run_theory_iterates",
    "verify_danskin",
    "verify_m_convexity",
]
