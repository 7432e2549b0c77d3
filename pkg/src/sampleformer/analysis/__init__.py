"""Experiment engines that turn the layer's claimed properties into measurements."""

from .benchmarks import flop_count, time_attention
from .convexity import (
    PseudoconvexityReport,
    prob_orthant_audit,
    pseudoconvexity_check,
    vanilla_counterexample,
    vanilla_probe_audit,
)
from .progression import rank_progression, similarity_progression
from .scaling import ScalingReport, gradnorm_scaling

__all__ = [
    "flop_count",
    "time_attention",
    "PseudoconvexityReport",
    "prob_orthant_audit",
    "pseudoconvexity_check",
    "vanilla_counterexample",
    "vanilla_probe_audit",
    "rank_progression",
    "similarity_progression",
    "ScalingReport",
    "gradnorm_scaling",
]
