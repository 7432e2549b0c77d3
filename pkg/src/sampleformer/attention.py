"""Attention with a pairwise-maxout score and a leaky ReLU probability row.

Three interchangeable (score, probability) pairs are provided:

* ``sft_maxout_leaky``   - elementwise-max score, ReLU rows normalized with a
  learned positive leak in the denominator (row sums stay strictly below 1),
* ``softmax_dot``        - scaled dot product with row softmax,
* ``relu_dot_nonleaky``  - scaled dot product with plain ReLU normalization.

Pairwise relative features enter the score multiplicatively (through a
Softplus-positive map) and additively (through a linear map).  Keys and
values may be restricted to a sample plan's duplet rows; queries always
cover every token.  All backward passes are hand-derived and are validated
against central finite differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._kernels import maxout_score_backward_kernel, maxout_score_kernel
from .numerics import Rng, as_matrix, sigmoid, softplus
from .sampler import SamplePlan, _gather_relative_columns

__all__ = [
    "ATTN_MODES",
    "AttnParams",
    "GradBundle",
    "maxout_score",
    "dot_score",
    "leaky_prob",
    "relu_prob",
    "softmax_prob",
    "apply_rpe",
    "mha_forward",
    "mha_backward",
    "attn_delta_forward",
    "attn_delta_backward",
]

ATTN_MODES = ("sft_maxout_leaky", "softmax_dot", "relu_dot_nonleaky")


@dataclass
class AttnParams:
    """Weights of one attention block, grouped by role.

    The leak head w_c produces one scalar logit per token per head.  The
    relative maps w_rmul / w_radd are shared across heads and emit one output
    channel per head.  w_cat is a bare projection (no bias).
    """

    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_c: np.ndarray
    b_c: np.ndarray
    w_cat: np.ndarray
    heads: int
    head_dim: int
    w_rmul: Optional[np.ndarray] = None
    b_rmul: Optional[np.ndarray] = None
    w_radd: Optional[np.ndarray] = None
    b_radd: Optional[np.ndarray] = None
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.heads * self.head_dim != self.w_q.shape[1]:
            raise ValueError("heads * head_dim must equal the model dimension")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @property
    def has_rpe(self) -> bool:
        return self.w_rmul is not None

    def arrays(self) -> dict[str, np.ndarray]:
        out = {
            "w_q": self.w_q, "b_q": self.b_q,
            "w_k": self.w_k, "b_k": self.b_k,
            "w_v": self.w_v, "b_v": self.b_v,
            "w_c": self.w_c, "b_c": self.b_c,
            "w_cat": self.w_cat,
        }
        if self.has_rpe:
            out.update({"w_rmul": self.w_rmul, "b_rmul": self.b_rmul,
                        "w_radd": self.w_radd, "b_radd": self.b_radd})
        return out


@dataclass
class GradBundle:
    """Gradients keyed like the parameter dict, plus input-side gradients."""

    params: dict[str, np.ndarray]
    d_x: np.ndarray
    d_wtop: Optional[np.ndarray] = None
    d_wrand: Optional[np.ndarray] = None

    def add_params(self, other: dict[str, np.ndarray]) -> None:
        for key, val in other.items():
            if key in self.params:
                self.params[key] = self.params[key] + val
            else:
                self.params[key] = val


def _fingerprint(arr: np.ndarray):
    if arr.size == 0:
        return (id(arr), arr.shape)
    flat = arr.ravel()
    return (id(arr), arr.ctypes.data, arr.shape, flat[0], flat[-1], flat[flat.size // 2])


def _params_fingerprint(p: AttnParams):
    return tuple(_fingerprint(a) for a in p.arrays().values())


def maxout_score(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Score[i, j] = sum_t max(q[i, t], k[j, t]) / sqrt(head_dim)."""
    q = as_matrix(q)
    k = as_matrix(k)
    if q.shape[1] != k.shape[1]:
        raise ValueError("q and k must share their feature dimension")
    return maxout_score_kernel(np.ascontiguousarray(q), np.ascontiguousarray(k), 1.0 / math.sqrt(q.shape[1]))


def dot_score(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Score[i, j] = <q[i], k[j]> / sqrt(head_dim)."""
    q = as_matrix(q)
    k = as_matrix(k)
    if q.shape[1] != k.shape[1]:
        raise ValueError("q and k must share their feature dimension")
    return (q @ k.T) / math.sqrt(q.shape[1])


def leaky_prob(a: np.ndarray, c: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """ReLU rows normalized with a per-row positive leak.

    P[i, j] = relu(a[i, j]) / (sum_r relu(a[i, r]) + softplus(c[i]) + eps);
    the leak keeps every row sum strictly below 1.
    """
    a = as_matrix(a)
    c = np.asarray(c, dtype=np.float64).ravel()
    if c.shape[0] != a.shape[0]:
        raise ValueError("one leak logit per row required")
    num = np.maximum(a, 0.0)
    den = num.sum(axis=1) + softplus(c) + eps
    return num / den[:, None]


def relu_prob(a: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """ReLU rows normalized without a leak (rows of active scores sum to ~1)."""
    a = as_matrix(a)
    num = np.maximum(a, 0.0)
    den = num.sum(axis=1) + eps
    return num / den[:, None]


def softmax_prob(a: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Row softmax, stabilized by row-max subtraction, with eps in the denominator."""
    a = as_matrix(a)
    m = a.max(axis=1, keepdims=True)
    e = np.exp(a - m)
    return e / (e.sum(axis=1, keepdims=True) + eps)


def _rpe_maps(p: AttnParams, feat: np.ndarray):
    """Per-head multiplicative and additive relative maps for a feature block."""
    lin_mul = feat @ p.w_rmul + p.b_rmul
    lin_add = feat @ p.w_radd + p.b_radd
    return softplus(lin_mul), lin_add, lin_mul


def apply_rpe(a: np.ndarray, rfeat: np.ndarray, p: AttnParams, head: int) -> np.ndarray:
    """Inject relative features into a score matrix for one head.

    Score'[i, j] = a[i, j] * softplus(linear_mul(rfeat))[i, j, head]
                 + linear_add(rfeat)[i, j, head].
    """
    a = as_matrix(a)
    rfeat = np.asarray(rfeat, dtype=np.float64)
    if not p.has_rpe:
        raise ValueError("params carry no relative maps")
    if rfeat.ndim == 2:
        rfeat = rfeat[:, :, None]
    if rfeat.shape[:2] != a.shape:
        raise ValueError("relative feature block must match the score shape")
    if rfeat.shape[2] != p.w_rmul.shape[0]:
        raise ValueError("relative feature dim does not match w_rmul")
    r_mul, r_add, _ = _rpe_maps(p, rfeat)
    return a * r_mul[:, :, head] + r_add[:, :, head]


def _dropout_mask(rng: Rng, shape, rate: float) -> np.ndarray:
    keep = (rng.gen.random(shape) >= rate).astype(np.float64)
    return keep / (1.0 - rate)


def attn_delta_forward(
    x: np.ndarray,
    x_r,
    p: AttnParams,
    mode: str,
    plan: Optional[SamplePlan],
    rng: Optional[Rng],
    train: bool,
    drop_attn: float = 0.0,
):
    """Attention output without the residual term (the layer owns residuals).

    With a non-bypass plan, keys/values (and the relative-feature columns) are
    restricted to the plan's duplet rows while queries stay on all n tokens.
    Returns (delta, cache); the cache is a single-use token for the backward.
    """
    x = as_matrix(x)
    if mode not in ATTN_MODES:
        raise ValueError(f"unknown attention mode {mode!r}")
    n, d = x.shape
    h, dh = p.heads, p.head_dim
    use_plan = plan is not None and not plan.bypass
    use_rpe = x_r is not None
    if use_rpe and not p.has_rpe:
        raise ValueError("relative features supplied but params carry no relative maps")

    if use_plan:
        x_kv = plan.w_top[:, None] * x[plan.idx_top] + plan.w_rand[:, None] * x[plan.idx_rand]
    else:
        x_kv = x
    m = x_kv.shape[0]

    q = x @ p.w_q + p.b_q
    k = x_kv @ p.w_k + p.b_k
    v = x_kv @ p.w_v + p.b_v
    c_all = x @ p.w_c + p.b_c if mode == "sft_maxout_leaky" else None

    mask_q = mask_k = None
    if train and drop_attn > 0.0:
        if rng is None:
            raise ValueError("dropout in train mode needs an rng")
        mask_q = _dropout_mask(rng, q.shape, drop_attn)
        mask_k = _dropout_mask(rng, k.shape, drop_attn)
        q = q * mask_q
        k = k * mask_k

    rpe = None
    if use_rpe:
        if use_plan:
            feat_top = _gather_relative_columns(x_r, plan.idx_top)
            feat_rand = _gather_relative_columns(x_r, plan.idx_rand)
            mul_top, add_top, lin_top = _rpe_maps(p, feat_top)
            mul_rand, add_rand, lin_rand = _rpe_maps(p, feat_rand)
            wt = plan.w_top[None, :, None]
            wr = plan.w_rand[None, :, None]
            r_mul = wt * mul_top + wr * mul_rand
            r_add = wt * add_top + wr * add_rand
            rpe = dict(feat_top=feat_top, feat_rand=feat_rand, lin_top=lin_top,
                       lin_rand=lin_rand, mul_top=mul_top, mul_rand=mul_rand,
                       add_top=add_top, add_rand=add_rand, r_mul=r_mul, r_add=r_add)
        else:
            feat = np.asarray(x_r, dtype=np.float64)
            if feat.ndim == 2:
                feat = feat[:, :, None]
            if feat.shape[:2] != (n, m):
                raise ValueError("dense relative tensor must be n x n")
            r_mul, r_add, lin_mul = _rpe_maps(p, feat)
            rpe = dict(feat=feat, lin_mul=lin_mul, r_mul=r_mul, r_add=r_add)

    scores_raw, scores, probs, outs = [], [], [], []
    for head in range(h):
        sl = slice(head * dh, (head + 1) * dh)
        q_h, k_h, v_h = q[:, sl], k[:, sl], v[:, sl]
        if mode == "sft_maxout_leaky":
            s_raw = maxout_score(q_h, k_h)
        else:
            s_raw = dot_score(q_h, k_h)
        if use_rpe:
            s = s_raw * rpe["r_mul"][:, :, head] + rpe["r_add"][:, :, head]
        else:
            s = s_raw
        if mode == "sft_maxout_leaky":
            prob = leaky_prob(s, c_all[:, head], p.epsilon)
        elif mode == "softmax_dot":
            prob = softmax_prob(s, p.epsilon)
        else:
            prob = relu_prob(s, p.epsilon)
        scores_raw.append(s_raw)
        scores.append(s)
        probs.append(prob)
        outs.append(prob @ v_h)

    o_cat = np.concatenate(outs, axis=1)
    delta = o_cat @ p.w_cat
    cache = dict(
        x=x, x_kv=x_kv, q=q, k=k, v=v, c_all=c_all, mode=mode, plan=plan,
        mask_q=mask_q, mask_k=mask_k, rpe=rpe, scores_raw=scores_raw,
        scores=scores, probs=probs, o_cat=o_cat, params=p,
        fingerprint=_params_fingerprint(p), used=False,
    )
    return delta, cache


def mha_forward(
    x: np.ndarray,
    x_r,
    p: AttnParams,
    mode: str,
    plan: Optional[SamplePlan] = None,
    rng: Optional[Rng] = None,
    train: bool = False,
    drop_attn: float = 0.0,
):
    """Full attention block output: x + attention delta.  Returns (out, cache)."""
    delta, cache = attn_delta_forward(x, x_r, p, mode, plan, rng, train, drop_attn)
    cache["residual"] = True
    return x + delta, cache


def _prob_backward_leaky(d_prob, s, c_col, eps):
    num = np.maximum(s, 0.0)
    gate = (s > 0.0).astype(np.float64)
    den = num.sum(axis=1) + softplus(c_col) + eps
    d_num = d_prob / den[:, None]
    d_den = -(d_prob * num).sum(axis=1) / den**2
    d_s = (d_num + d_den[:, None]) * gate
    d_c = d_den * sigmoid(c_col)
    return d_s, d_c


def _prob_backward_relu(d_prob, s, eps):
    num = np.maximum(s, 0.0)
    gate = (s > 0.0).astype(np.float64)
    den = num.sum(axis=1) + eps
    d_num = d_prob / den[:, None]
    d_den = -(d_prob * num).sum(axis=1) / den**2
    return (d_num + d_den[:, None]) * gate


def _prob_backward_softmax(d_prob, s, eps):
    # P = e / (sum e + eps) with e = exp(s - rowmax); the rowmax term does not
    # cancel when eps > 0, so its (piecewise-constant) derivative is included
    m_idx = np.argmax(s, axis=1)
    e = np.exp(s - s.max(axis=1, keepdims=True))
    total = e.sum(axis=1) + eps
    prob = e / total[:, None]
    sbar = (d_prob * prob).sum(axis=1)
    d_s = prob * d_prob - prob * sbar[:, None]
    ratio = e.sum(axis=1) / total
    rows = np.arange(s.shape[0])
    d_s[rows, m_idx] -= sbar * (1.0 - ratio)
    return d_s


def attn_delta_backward(cache: dict, upstream: np.ndarray) -> GradBundle:
    """Backward through attn_delta_forward.

    Returns gradients for every attention parameter, the direct input
    gradient d_x (query, leak, and duplet-scatter routes; plan blend weights
    treated as data), and the blend-weight gradients contributed by the
    relative-feature mixing for the layer to route through the sampler.
    """
    p: AttnParams = cache["params"]
    if cache["used"]:
        raise RuntimeError("cache already consumed by a backward pass")
    if _params_fingerprint(p) != cache["fingerprint"]:
        raise RuntimeError("parameters mutated since the forward pass; cache is stale")
    cache["used"] = True

    x, x_kv = cache["x"], cache["x_kv"]
    q, k, v, c_all = cache["q"], cache["k"], cache["v"], cache["c_all"]
    mode, plan, rpe = cache["mode"], cache["plan"], cache["rpe"]
    h, dh = p.heads, p.head_dim
    n, d = x.shape
    m = x_kv.shape[0]
    use_plan = plan is not None and not plan.bypass
    use_rpe = rpe is not None

    d_delta = np.asarray(upstream, dtype=np.float64)
    d_wcat = cache["o_cat"].T @ d_delta
    d_ocat = d_delta @ p.w_cat.T

    d_q = np.zeros_like(q)
    d_k = np.zeros_like(k)
    d_v = np.zeros_like(v)
    d_call = np.zeros((n, h)) if c_all is not None else None
    d_rmul = np.zeros((n, m, h)) if use_rpe else None
    d_radd = np.zeros((n, m, h)) if use_rpe else None

    for head in range(h):
        sl = slice(head * dh, (head + 1) * dh)
        prob = cache["probs"][head]
        s = cache["scores"][head]
        s_raw = cache["scores_raw"][head]
        d_o = d_ocat[:, sl]
        d_prob = d_o @ v[:, sl].T
        d_v[:, sl] = prob.T @ d_o
        if mode == "sft_maxout_leaky":
            d_s, d_c = _prob_backward_leaky(d_prob, s, c_all[:, head], p.epsilon)
            d_call[:, head] = d_c
        elif mode == "softmax_dot":
            d_s = _prob_backward_softmax(d_prob, s, p.epsilon)
        else:
            d_s = _prob_backward_relu(d_prob, s, p.epsilon)
        if use_rpe:
            d_rmul[:, :, head] = d_s * s_raw
            d_radd[:, :, head] = d_s
            d_s_raw = d_s * rpe["r_mul"][:, :, head]
        else:
            d_s_raw = d_s
        if mode == "sft_maxout_leaky":
            dq_h, dk_h = maxout_score_backward_kernel(
                np.ascontiguousarray(q[:, sl]), np.ascontiguousarray(k[:, sl]),
                np.ascontiguousarray(d_s_raw), 1.0 / math.sqrt(dh))
            d_q[:, sl] += dq_h
            d_k[:, sl] += dk_h
        else:
            inv = 1.0 / math.sqrt(dh)
            d_q[:, sl] += d_s_raw @ k[:, sl] * inv
            d_k[:, sl] += d_s_raw.T @ q[:, sl] * inv

    grads: dict[str, np.ndarray] = {"w_cat": d_wcat}
    d_wtop = d_wrand = None
    if use_rpe:
        if use_plan:
            d_lin_top = d_rmul * plan.w_top[None, :, None] * sigmoid(rpe["lin_top"])
            d_lin_rand = d_rmul * plan.w_rand[None, :, None] * sigmoid(rpe["lin_rand"])
            d_add_top = d_radd * plan.w_top[None, :, None]
            d_add_rand = d_radd * plan.w_rand[None, :, None]
            grads["w_rmul"] = np.einsum("nkr,nkh->rh", rpe["feat_top"], d_lin_top) + \
                np.einsum("nkr,nkh->rh", rpe["feat_rand"], d_lin_rand)
            grads["b_rmul"] = d_lin_top.sum(axis=(0, 1)) + d_lin_rand.sum(axis=(0, 1))
            grads["w_radd"] = np.einsum("nkr,nkh->rh", rpe["feat_top"], d_add_top) + \
                np.einsum("nkr,nkh->rh", rpe["feat_rand"], d_add_rand)
            grads["b_radd"] = d_add_top.sum(axis=(0, 1)) + d_add_rand.sum(axis=(0, 1))
            d_wtop = np.einsum("nkh,nkh->k", d_rmul, rpe["mul_top"]) + \
                np.einsum("nkh,nkh->k", d_radd, rpe["add_top"])
            d_wrand = np.einsum("nkh,nkh->k", d_rmul, rpe["mul_rand"]) + \
                np.einsum("nkh,nkh->k", d_radd, rpe["add_rand"])
        else:
            d_lin_mul = d_rmul * sigmoid(rpe["lin_mul"])
            grads["w_rmul"] = np.einsum("nmr,nmh->rh", rpe["feat"], d_lin_mul)
            grads["b_rmul"] = d_lin_mul.sum(axis=(0, 1))
            grads["w_radd"] = np.einsum("nmr,nmh->rh", rpe["feat"], d_radd)
            grads["b_radd"] = d_radd.sum(axis=(0, 1))

    mask_q, mask_k = cache["mask_q"], cache["mask_k"]
    if mask_q is not None:
        d_q = d_q * mask_q
        d_k = d_k * mask_k

    grads["w_q"] = x.T @ d_q
    grads["b_q"] = d_q.sum(axis=0)
    grads["w_k"] = x_kv.T @ d_k
    grads["b_k"] = d_k.sum(axis=0)
    grads["w_v"] = x_kv.T @ d_v
    grads["b_v"] = d_v.sum(axis=0)
    d_x = d_q @ p.w_q.T
    if c_all is not None:
        grads["w_c"] = x.T @ d_call
        grads["b_c"] = d_call.sum(axis=0)
        d_x += d_call @ p.w_c.T
    else:
        grads["w_c"] = np.zeros_like(p.w_c)
        grads["b_c"] = np.zeros_like(p.b_c)

    d_xkv = d_k @ p.w_k.T + d_v @ p.w_v.T
    if use_plan:
        # scatter through the duplet blend with the plan's weights as data;
        # token-value contributions to the weights join the relative ones
        dup_wtop = np.einsum("kd,kd->k", d_xkv, x[plan.idx_top])
        dup_wrand = np.einsum("kd,kd->k", d_xkv, x[plan.idx_rand])
        d_wtop = dup_wtop if d_wtop is None else d_wtop + dup_wtop
        d_wrand = dup_wrand if d_wrand is None else d_wrand + dup_wrand
        np.add.at(d_x, plan.idx_top, plan.w_top[:, None] * d_xkv)
        np.add.at(d_x, plan.idx_rand, plan.w_rand[:, None] * d_xkv)
    else:
        d_x += d_xkv

    for key, arr in p.arrays().items():
        if key not in grads:
            grads[key] = np.zeros_like(arr)

    if cache.get("residual"):
        d_x = d_x + d_delta
    return GradBundle(params=grads, d_x=d_x, d_wtop=d_wtop, d_wrand=d_wrand)


def mha_backward(cache: dict, upstream: np.ndarray) -> GradBundle:
    """Backward for mha_forward (includes the residual path into d_x)."""
    if not cache.get("residual"):
        raise ValueError("cache does not come from mha_forward")
    return attn_delta_backward(cache, upstream)
