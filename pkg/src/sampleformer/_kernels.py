"""Numba kernels for the pairwise-maxout score.

The maxout score has no GEMM form (it is an elementwise max reduced over the
feature axis), so a compiled loop is the difference between the sparse path
beating the dense softmax reference and losing to it.  The forward kernel
uses fastmath so LLVM can vectorize the reduction (roughly 2x); the sum is
reassociated but still deterministic call-to-call for a given build.  The
backward kernel keeps exact branch semantics: gradient routes to the larger
side per coordinate, ties to Q, deterministically.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def maxout_score_kernel(q, k, inv_sqrt_d):
    n, d = q.shape
    m = k.shape[0]
    out = np.empty((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(d):
                a = q[i, t]
                b = k[j, t]
                s += a if a >= b else b
            out[i, j] = s * inv_sqrt_d
    return out


@njit(cache=True)
def maxout_score_backward_kernel(q, k, d_score, inv_sqrt_d):
    """Accumulate dQ and dK from the score gradient (ties go to Q)."""
    n, d = q.shape
    m = k.shape[0]
    dq = np.zeros((n, d), dtype=np.float64)
    dk = np.zeros((m, d), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            g = d_score[i, j] * inv_sqrt_d
            if g == 0.0:
                continue
            for t in range(d):
                if q[i, t] >= k[j, t]:
                    dq[i, t] += g
                else:
                    dk[j, t] += g
    return dq, dk
