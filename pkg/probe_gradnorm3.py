"""Probe 3: parameter scan for the gradient-norm scaling regime."""
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
    q = (x @ w_q).ravel()
    k = (x @ w_k).ravel()
    a = np.maximum(q[:, None], k[None, :])
    u = a > 0
    num = np.where(u, a, 0.0)
    den = num.sum(axis=1) + c0
    r = num / den[:, None]
    v = x @ w_v
    sa0 = r @ v
    norm_v = d * np.sum((r @ x) ** 2)
    e = (q[:, None] >= k[None, :]).astype(np.float64)
    w_ue = (u * e) / den[:, None]
    g = w_ue @ v - w_ue.sum(axis=1, keepdims=True) * sa0
    norm_q = np.sum((x**2).sum(axis=1) * (g**2).sum(axis=1))
    return norm_v, norm_q


def fit_slope(ns, ys):
    lx = np.log(np.asarray(ns, float))
    ly = np.log(np.asarray(ys, float))
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    return coef[0]


if __name__ == "__main__":
    ns = [32, 64, 128, 256, 512, 1024, 2048]
    trials = 48
    for d in (4, 8):
        for c0 in (0.1, 1.0, 5.0, 20.0):
            means_v, means_q = [], []
            for n in ns:
                vs, qs = [], []
                for t in range(trials):
                    rng = Rng(3000 + t).split(n)
                    nv, nq = grad_norms_da1(n, d, c0, rng)
                    vs.append(nv)
                    qs.append(nq)
                means_v.append(np.mean(vs))
                means_q.append(np.mean(qs))
            sv = fit_slope(ns[:6], means_v[:6])
            sq = fit_slope(ns[:6], means_q[:6])
            sq_tail = fit_slope(ns[3:], means_q[3:])
            print(f"d={d} c0={c0:5.1f}: V(32..1024)={sv:+.3f} Q(32..1024)={sq:+.3f} Q(256..2048)={sq_tail:+.3f} "
                  f"Q={[f'{v:.3g}' for v in means_q]}")
