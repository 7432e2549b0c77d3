"""Probe 4: confirm the correlation mechanism by decorrelating the value path."""
import math

import numpy as np

from sampleformer.numerics import Rng


def grad_norms(n, d, c0, rng, independent_values):
    x = rng.normal((n, d))
    x_val = rng.normal((n, d)) if independent_values else x
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
    v = x_val @ w_v
    sa0 = r @ v
    norm_v = d * np.sum((r @ x_val) ** 2)
    e = (q[:, None] >= k[None, :]).astype(np.float64)
    w_ue = (u * e) / den[:, None]
    g = w_ue @ v - w_ue.sum(axis=1, keepdims=True) * sa0
    norm_q = np.sum((x**2).sum(axis=1) * (g**2).sum(axis=1))
    return norm_v, norm_q


def fit_slope(ns, ys):
    lx, ly = np.log(np.asarray(ns, float)), np.log(np.asarray(ys, float))
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    return np.linalg.lstsq(A, ly, rcond=None)[0][0]


if __name__ == "__main__":
    ns = [32, 64, 128, 256, 512, 1024]
    for independent in (False, True):
        for d, c0 in ((8, 1.0), (16, 1.0)):
            mv, mq = [], []
            for n in ns:
                vals = [grad_norms(n, d, c0, Rng(4000 + t).split(n), independent) for t in range(48)]
                mv.append(np.mean([v for v, _ in vals]))
                mq.append(np.mean([q for _, q in vals]))
            print(f"indep={independent} d={d} c0={c0}: slope_V={fit_slope(ns, mv):+.3f} "
                  f"slope_Q={fit_slope(ns, mq):+.3f} Q={[f'{v:.3g}' for v in mq]}")
