"""Probe 2: slopes with scalar query/key projections (d_a = 1), as in the proof."""
import math
import time

import numpy as np

from sampleformer.numerics import Rng


def grad_norms_da1(n, d, c0, rng):
    x = rng.normal((n, d))
    scale = math.sqrt(2.0 / d)
    w_q = rng.normal((d, 1)) * scale
    w_k = rng.normal((d, 1)) * scale
    w_v = rng.normal((d, d)) * scale
    q = (x @ w_q).ravel()  # (n,)
    k = (x @ w_k).ravel()
    a = np.maximum(q[:, None], k[None, :])  # (n, n)
    u = a > 0
    num = np.where(u, a, 0.0)
    den = num.sum(axis=1) + c0
    r = num / den[:, None]
    v = x @ w_v
    sa0 = r @ v

    norm_v = d * np.sum((r @ x) ** 2)

    # d_a = 1: e_ij = 1{q_i >= k_j}; G_i[l] = sum_j u_ij e_ij (v[j,l] - sa0[i,l]) / den_i
    e = (q[:, None] >= k[None, :]).astype(np.float64)
    w_ue = (u * e) / den[:, None]                       # (n, n)
    g = w_ue @ v - w_ue.sum(axis=1, keepdims=True) * sa0  # (n, d)
    norm_q = np.sum((x**2).sum(axis=1) * (g**2).sum(axis=1))
    return norm_v, norm_q


def fit_slope(ns, ys):
    lx = np.log(np.asarray(ns, float))
    ly = np.log(np.asarray(ys, float))
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    return coef[0]


if __name__ == "__main__":
    ns = [32, 64, 128, 256, 512, 1024]
    for d in (8, 16, 32):
        for c0 in (1.0, 5.0):
            trials = 24
            means_v, means_q = [], []
            t0 = time.time()
            for n in ns:
                vs, qs = [], []
                for t in range(trials):
                    rng = Rng(2000 + t).split(n)
                    nv, nq = grad_norms_da1(n, d, c0, rng)
                    vs.append(nv)
                    qs.append(nq)
                means_v.append(np.mean(vs))
                means_q.append(np.mean(qs))
            sv = fit_slope(ns, means_v)
            sq = fit_slope(ns, means_q)
            print(f"d={d} c0={c0}: slope_V={sv:+.3f} slope_Q={sq:+.3f}  "
                  f"V={[f'{v:.3g}' for v in means_v]} Q={[f'{v:.3g}' for v in means_q]}  ({time.time()-t0:.1f}s)")
