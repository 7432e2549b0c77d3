"""Wall-clock and operation-count accounting for the layer.

Timing is strictly single-threaded (BLAS pools pinned to one thread), with a
global warmup pass and interleaved round-robin reps so slow drifts hit every
configuration equally.  Medians are the headline numbers; means are reported
alongside.

The FLOP table mirrors the layer's submodules at a given sampling rate,
counting a fused multiply-add as 2 operations.  Query-side work and the
importance-score head do not depend on the sampling rate; key/value/leak
projections and the relative maps shrink proportionally with it.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from ..layer import LayerConfig, init_params, layer_forward
from ..numerics import Rng

__all__ = ["time_attention", "flop_count", "TimingRow"]


@contextmanager
def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pools stay at their ambient width; noted in the row labels
        yield False
        return
    with threadpool_limits(limits=1):
        yield True


@dataclass
class TimingRow:
    label: str
    n: int
    k: int
    rate: float
    median_s: float
    mean_s: float
    reps: int


def time_attention(
    n: int = 1024,
    k_list=(32, 64, 128, 256, 512),
    reps: int = 10,
    d: int = 64,
    heads: int = 1,
    seed: int = 0,
    calls_per_rep: int = 3,
) -> list[TimingRow]:
    """Forward wall time per sampling count, plus the dense softmax reference.

    Returns one row per k in k_list (leaky-maxout mode with sampling) and a
    final row for the full softmax/dot layer at k = n.
    """
    x = Rng(seed).normal((n, d))
    setups = []
    for k in k_list:
        cfg = LayerConfig(d=d, heads=heads, k=int(k), mode="sft_maxout_leaky", ln_position="post")
        setups.append(("sft", int(k), cfg, init_params(Rng(seed + 1), cfg)))
    cfg_ref = LayerConfig(d=d, heads=heads, k=n, mode="softmax_dot", ln_position="post")
    setups.append(("softmax_full", n, cfg_ref, init_params(Rng(seed + 1), cfg_ref)))

    rows = []
    with _single_thread():
        for _, _, cfg, params in setups:  # jit + allocator + cache warmup
            layer_forward(x, None, params, cfg, train=False)
            layer_forward(x, None, params, cfg, train=False)
        samples = {i: [] for i in range(len(setups))}
        for _ in range(reps):
            for i, (_, _, cfg, params) in enumerate(setups):
                t0 = time.perf_counter()
                for _ in range(calls_per_rep):
                    layer_forward(x, None, params, cfg, train=False)
                samples[i].append((time.perf_counter() - t0) / calls_per_rep)
        for i, (label, k, cfg, _) in enumerate(setups):
            ts = np.asarray(samples[i])
            rows.append(
                TimingRow(
                    label=label, n=n, k=k, rate=k / n,
                    median_s=float(np.median(ts)), mean_s=float(ts.mean()), reps=reps,
                )
            )
    return rows


def flop_count(cfg: LayerConfig, n: int) -> dict[str, int]:
    """Exact per-submodule operation counts (multiply-add = 2 ops) at n tokens."""
    d = cfg.d
    h = cfg.heads
    r = cfg.rpe_dim
    kv = n if cfg.k >= n else cfg.k
    counts = {
        "sampling": 2 * n * d,
        "q_proj": 2 * n * d * d,
        "k_proj": 2 * kv * d * d,
        "v_proj": 2 * kv * d * d,
        "c_proj": 2 * kv * d * h,
        "relative": 4 * n * kv * r * h if r > 0 else 0,
        "w_cat": 2 * n * d * d,
        "attention_remainder": 4 * n * kv * d + 4 * n * kv,
        "mlp": 2 * 2 * n * d * (cfg.ffn_expansion * d),
    }
    counts["total"] = sum(counts.values())
    return counts
