"""Throwaway probe: empirical log-log slopes of the attention-only gradient norms."""
import math
import time

import numpy as np

from sampleformer._kernels import maxout_score_kernel
from sampleformer.numerics import Rng


def grad_norms(n, d, c0, rng):
    x = rng.normal((n, d))
    scale = math.sqrt(2.0 / d)
    w_q = rng.normal((d, d)) * scale
    w_k = rng.normal((d, d)) * scale
    w_v = rng.normal((d, d)) * scale
    q = x @ w_q
    k = x @ w_k
    a = maxout_score_kernel(q, k, 1.0 / math.sqrt(d))
    u = a > 0
    num = np.where(u, a, 0.0)
    den = num.sum(axis=1) + c0
    r = num / den[:, None]
    v = x @ w_v
    sa0 = r @ v

    norm_v = d * np.sum((r @ x) ** 2)

    # W_Q norm: chunked over rows
    total_q = 0.0
    inv = 1.0 / math.sqrt(d)
    for i0 in range(0, n, 128):
        i1 = min(n, i0 + 128)
        e_blk = (q[i0:i1, None, :] >= k[None, :, :]).astype(np.float64)  # (b, n, d)
        m_blk = (u[i0:i1, :, None] * (v[None, :, :] - sa0[i0:i1, None, :])) * (inv / den[i0:i1, None, None])
        g = np.matmul(m_blk.transpose(0, 2, 1), e_blk)  # (b, d, d)
        total_q += np.sum((x[i0:i1] ** 2).sum(axis=1) * (g ** 2).sum(axis=(1, 2)))
    return norm_v, total_q


def fit_slope(ns, ys):
    lx = np.log(np.asarray(ns, float))
    ly = np.log(np.asarray(ys, float))
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    return coef[0]


if __name__ == "__main__":
    for d in (8, 16):
        for c0 in (1.0, 5.0):
            ns = [32, 64, 128, 256, 512, 1024]
            trials = 16
            means_v, means_q = [], []
            t0 = time.time()
            for n in ns:
                vs, qs = [], []
                for t in range(trials):
                    rng = Rng(1000 + t).split(n)
                    nv, nq = grad_norms(n, d, c0, rng)
                    vs.append(nv)
                    qs.append(nq)
                means_v.append(np.mean(vs))
                means_q.append(np.mean(qs))
            sv = fit_slope(ns, means_v)
            sq = fit_slope(ns, means_q)
            print(f"d={d} c0={c0}: slope_V={sv:+.3f} slope_Q={sq:+.3f}  "
                  f"V={[f'{v:.3g}' for v in means_v]} Q={[f'{v:.3g}' for v in means_q]}  ({time.time()-t0:.1f}s)")
