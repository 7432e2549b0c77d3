"""Probe 5: validate the closed-form Frobenius norms against a numerical Jacobian."""
import math

import numpy as np

from sampleformer.numerics import Rng


def sa_forward(x, w_q, w_k, w_v, c0):
    q = (x @ w_q).ravel()
    k = (x @ w_k).ravel()
    a = np.maximum(q[:, None], k[None, :])
    num = np.maximum(a, 0.0)
    den = num.sum(axis=1) + c0
    r = num / den[:, None]
    return r @ (x @ w_v) + x


def closed_form(x, w_q, w_k, w_v, c0):
    n, d = x.shape
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


if __name__ == "__main__":
    rng = Rng(123)
    n, d = 5, 3
    x = rng.normal((n, d))
    w_q = rng.normal((d, 1)) * 0.7
    w_k = rng.normal((d, 1)) * 0.7
    w_v = rng.normal((d, d)) * 0.7
    c0 = 1.3
    h = 1e-6

    def jac_norm(which):
        w = {"q": w_q, "v": w_v}[which]
        total = 0.0
        for p in range(w.shape[0]):
            for qq in range(w.shape[1]):
                wp = w.copy(); wp[p, qq] += h
                wm = w.copy(); wm[p, qq] -= h
                if which == "q":
                    fp = sa_forward(x, wp, w_k, w_v, c0)
                    fm = sa_forward(x, wm, w_k, w_v, c0)
                else:
                    fp = sa_forward(x, w_q, w_k, wp, c0)
                    fm = sa_forward(x, w_q, w_k, wm, c0)
                total += np.sum(((fp - fm) / (2 * h)) ** 2)
        return total

    nv, nq = closed_form(x, w_q, w_k, w_v, c0)
    print(f"closed form:  V={nv:.9f}  Q={nq:.9f}")
    print(f"numerical:    V={jac_norm('v'):.9f}  Q={jac_norm('q'):.9f}")
