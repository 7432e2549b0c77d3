"""Rank and similarity probes across layer stacks.

The rank-injection experiment feeds a rank-1 token matrix (one random row
repeated) through freshly initialized stacks and tracks the numerical rank of
every layer's output.  With the leaky formulation and a random relative
matrix the rank climbs; the non-leaky ReLU baseline cannot separate identical
rows, so it stays at rank 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..layer import LayerConfig, init_params, stack_forward
from ..numerics import Rng, mean_pairwise_cosine, numerical_rank

__all__ = ["rank_progression", "similarity_progression", "RankTable"]

RANK_REL_TOL = 1e-6


@dataclass
class RankTable:
    """Per-depth rank statistics; row 0 is the input matrix."""

    depths: list[int]
    mean: list[float]
    lo: list[int]
    hi: list[int]

    def rows(self):
        return list(zip(self.depths, self.mean, self.lo, self.hi))


def rank_progression(
    cfg: LayerConfig,
    n_layers: int,
    n_trials: int,
    rng: Rng,
    n_tokens: int = 64,
) -> RankTable:
    """Track numerical rank through n_layers freshly initialized layers.

    Each trial repeats one random row n_tokens times (rank 1 by construction)
    and, when the config carries relative channels, draws one random normal
    relative matrix.
    """
    per_depth = np.zeros((n_trials, n_layers + 1), dtype=np.int64)
    for trial in range(n_trials):
        r = rng.split(trial)
        row = r.split("row").normal(cfg.d)
        x = np.tile(row, (n_tokens, 1))
        x_r = r.split("rel").normal((n_tokens, n_tokens, cfg.rpe_dim)) if cfg.rpe_dim > 0 else None
        layers = [(init_params(r.split(f"init{i}"), cfg), cfg) for i in range(n_layers)]
        per_depth[trial, 0] = numerical_rank(x, RANK_REL_TOL)
        _, snaps = stack_forward(x, x_r, layers, rng=r.split("fwd"), train=False, keep_snapshots=True)
        for i, snap in enumerate(snaps):
            per_depth[trial, i + 1] = numerical_rank(snap, RANK_REL_TOL)
    return RankTable(
        depths=list(range(n_layers + 1)),
        mean=per_depth.mean(axis=0).tolist(),
        lo=per_depth.min(axis=0).tolist(),
        hi=per_depth.max(axis=0).tolist(),
    )


def similarity_progression(layers, x: np.ndarray, x_r=None, rng: Rng | None = None):
    """Per-depth (mean pairwise cosine, numerical rank), input row included.

    Returns a list of (depth, cosine, rank) of length len(layers) + 1.
    """
    out = [(0, mean_pairwise_cosine(x), numerical_rank(x, RANK_REL_TOL))]
    _, snaps = stack_forward(x, x_r, layers, rng=rng, train=False, keep_snapshots=True)
    for i, snap in enumerate(snaps):
        out.append((i + 1, mean_pairwise_cosine(snap), numerical_rank(snap, RANK_REL_TOL)))
    return out
