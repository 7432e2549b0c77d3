"""Gradient-norm scaling of the attention-only map across token counts.

The probed map keeps the theory setup: scalar query/key projections (the
score is a scalar pairwise max), a constant positive leak in the normalizer,
He-initialized weights, and i.i.d. standard-normal tokens whose per-token
norm scale does not change with n.  Both squared Jacobian Frobenius norms are
accumulated exactly (closed form, validated against a numerical Jacobian in
the tests); no stochastic estimator is involved.

Alongside the exact norms, the engine reports a decorrelated control in
which the value path uses an independent token copy.  The control removes
the same-row coupling between score gates and value rows, which is the
regime the query-side Theta(1) bound describes; the exact map's query norm
grows linearly instead (see the report's two slope sets).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..numerics import Rng

__all__ = ["ScalingReport", "gradnorm_scaling", "attention_grad_norms", "grad_norms_from"]


def grad_norms_from(x: np.ndarray, x_val: np.ndarray, w_q: np.ndarray, w_k: np.ndarray, w_v: np.ndarray, c0: float):
    """Exact squared Frobenius norms (wv, wq) of the attention-only Jacobians.

    Sa = Prob(max(q_i, k_j), c0) X_val W_V + X with q = X w_q, k = X w_k
    scalar projections; X_val is the value-path token matrix (equal to X for
    the real map, an independent copy for the control).
    """
    d = x.shape[1]
    q = (x @ w_q).ravel()
    k = (x @ w_k).ravel()
    a = np.maximum(q[:, None], k[None, :])
    u = a > 0
    num = np.where(u, a, 0.0)
    den = num.sum(axis=1) + c0
    r = num / den[:, None]
    v = x_val @ w_v
    sa0 = r @ v

    norm_v = d * float(np.sum((r @ x_val) ** 2))

    # query side: d Sa[i,l] / d W_Q[p] = X[i,p] * G[i,l] with
    # G[i] = sum_j 1{a_ij > 0} 1{q_i >= k_j} (v_j - sa0_i) / den_i
    e = (q[:, None] >= k[None, :]).astype(np.float64)
    w_ue = (u * e) / den[:, None]
    g = w_ue @ v - w_ue.sum(axis=1, keepdims=True) * sa0
    norm_q = float(np.sum((x**2).sum(axis=1) * (g**2).sum(axis=1)))
    return norm_v, norm_q


def attention_grad_norms(n: int, d: int, c0: float, rng: Rng, independent_values: bool = False):
    """Sample one He-initialized instance and return its exact (wv, wq) norms."""
    x = rng.normal((n, d))
    x_val = rng.normal((n, d)) if independent_values else x
    scale = math.sqrt(2.0 / d)
    w_q = rng.normal((d, 1)) * scale
    w_k = rng.normal((d, 1)) * scale
    w_v = rng.normal((d, d)) * scale
    return grad_norms_from(x, x_val, w_q, w_k, w_v, c0)


def _fit_slope(ns, ys):
    lx = np.log(np.asarray(ns, dtype=np.float64))
    ly = np.log(np.asarray(ys, dtype=np.float64))
    a = np.stack([lx, np.ones_like(lx)], axis=1)
    coef, *_ = np.linalg.lstsq(a, ly, rcond=None)
    resid = ly - a @ coef
    dof = max(len(ns) - 2, 1)
    se = math.sqrt(float(resid @ resid) / dof / float(((lx - lx.mean()) ** 2).sum()))
    return float(coef[0]), 1.96 * se


@dataclass
class ScalingReport:
    ns: list[int]
    mean_sq_gradnorms: dict[str, list[float]]
    slopes: dict[str, float]
    slope_half_widths: dict[str, float]
    trials: int = 0
    d: int = 0
    leak: float = 1.0
    control: dict[str, float] = field(default_factory=dict)


def gradnorm_scaling(
    ns: list[int],
    d: int,
    trials: int,
    rng: Rng,
    leak: float = 1.0,
    with_control: bool = True,
) -> ScalingReport:
    """Mean squared gradient norms per token count and their log-log slopes."""
    ns = [int(n) for n in ns]
    if len(ns) < 4:
        raise ValueError("need at least 4 token counts")
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("token counts must be strictly increasing")
    means: dict[str, list[float]] = {"w_v": [], "w_q": [], "w_v_control": [], "w_q_control": []}
    for n in ns:
        acc_v = acc_q = acc_vc = acc_qc = 0.0
        for t in range(trials):
            r = rng.split(n).split(t)
            nv, nq = attention_grad_norms(n, d, leak, r)
            acc_v += nv
            acc_q += nq
            if with_control:
                nvc, nqc = attention_grad_norms(n, d, leak, rng.split(n).split(t).split("ctl"), independent_values=True)
                acc_vc += nvc
                acc_qc += nqc
        means["w_v"].append(acc_v / trials)
        means["w_q"].append(acc_q / trials)
        if with_control:
            means["w_v_control"].append(acc_vc / trials)
            means["w_q_control"].append(acc_qc / trials)
    slopes = {}
    halves = {}
    for key in ("w_v", "w_q"):
        slopes[key], halves[key] = _fit_slope(ns, means[key])
    control = {}
    if with_control:
        for key in ("w_v_control", "w_q_control"):
            s, h = _fit_slope(ns, means[key])
            control[key] = s
            control[key + "_half_width"] = h
    else:
        means.pop("w_v_control")
        means.pop("w_q_control")
    return ScalingReport(
        ns=ns, mean_sq_gradnorms=means, slopes=slopes, slope_half_widths=halves,
        trials=trials, d=d, leak=leak, control=control,
    )
