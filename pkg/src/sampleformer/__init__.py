"""Sampled sparse attention with a leaky pairwise-maxout formulation.

The package couples a differentiable sampling-without-replacement scheme with
an attention layer whose score is a pairwise maximum and whose probability
function is a leaky ReLU normalizer, plus the experiment engines that check
the formulation's claimed properties (rank injection, pseudoconvexity,
gradient-norm scaling, runtime scaling, rotation invariance).
"""

__version__ = "0.1.0"
