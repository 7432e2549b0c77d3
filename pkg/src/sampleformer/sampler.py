"""Differentiable token sampling.

Selection is driven by learned importance scores perturbed with Gumbel noise.
The with-replacement path keeps the classic hard-forward / soft-backward
pairing (a Softplus-power surrogate instead of a tempered softmax).  The
without-replacement path pairs each of the k top-scoring tokens with a random
token drawn from the complement and emits their Softplus-weighted blend, so
every output row is a duplet: a point on the segment between two distinct
input rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import Rng, as_matrix, gumbel_draw, sigmoid, softplus

__all__ = [
    "SamplerParams",
    "SamplePlan",
    "SparseRelative",
    "importance_scores",
    "choose_one",
    "choose_one_soft",
    "sample_with_replacement",
    "sample_without_replacement",
    "gather_sparse_rpe",
]

# Evaluation-mode complement draws come from this fixed stream so that a plan
# is a pure function of (tokens, params) when train=False.
_EVAL_S2_SEED = 0x5EED5B2


@dataclass
class SamplerParams:
    """Importance-score head: one scalar score per token, z = X w_s + b_s."""

    w_s: np.ndarray  # (d, 1)
    b_s: float = 0.0
    tau: float = 1.0

    def __post_init__(self):
        self.w_s = np.asarray(self.w_s, dtype=np.float64).reshape(-1, 1)
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass
class SamplePlan:
    """Outcome of one sampling pass: paired index sets and blend weights."""

    idx_top: np.ndarray
    idx_rand: np.ndarray
    w_top: np.ndarray
    w_rand: np.ndarray
    bypass: bool
    n: int

    @property
    def k(self) -> int:
        return len(self.idx_top)

    def validate(self) -> None:
        if self.bypass:
            if len(self.idx_top) or len(self.idx_rand):
                raise ValueError("bypass plan must have empty index lists")
            return
        top = set(self.idx_top.tolist())
        rand = set(self.idx_rand.tolist())
        if len(top) != len(self.idx_top) or len(rand) != len(self.idx_rand):
            raise ValueError("duplicate indices in plan")
        if top & rand:
            raise ValueError("top and random sets intersect")
        s = self.w_top + self.w_rand
        if not np.allclose(s, 1.0, atol=1e-12):
            raise ValueError("blend weights must sum to 1 per bin")
        if np.any(self.w_top <= 0.0) or np.any(self.w_top >= 1.0):
            raise ValueError("blend weights must lie strictly inside (0, 1)")


def importance_scores(x: np.ndarray, p: SamplerParams) -> np.ndarray:
    """Per-token score z[i] = <x[i], w_s> + b_s."""
    x = as_matrix(x)
    if x.shape[1] != p.w_s.shape[0]:
        raise ValueError(f"token dim {x.shape[1]} does not match w_s dim {p.w_s.shape[0]}")
    return (x @ p.w_s).ravel() + p.b_s


def _softplus_power_weights(y: np.ndarray, tau: float):
    """Normalized Softplus(y)^(1/tau) weights plus the pieces the vjp needs."""
    sp = softplus(y)
    w = sp ** (1.0 / tau)
    total = w.sum()
    probs = w / total
    # d log w / d y, with the y -> -inf limit handled (sigmoid/softplus -> 1)
    sig = sigmoid(y)
    dlogw = np.where(sp > 0.0, sig / np.where(sp > 0.0, sp, 1.0), 1.0) / tau
    return probs, dlogw


def choose_one_soft(v: np.ndarray, z: np.ndarray, g: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Soft surrogate of choose_one: the Softplus-power weighted average row.

    This is exactly the function whose gradient the hard path backpropagates,
    so finite differences of it are the oracle for choose_one's vjp.
    """
    probs, _ = _softplus_power_weights(np.asarray(z, float) + np.asarray(g, float), tau)
    return probs @ as_matrix(v)


def choose_one(v: np.ndarray, z: np.ndarray, g: np.ndarray, tau: float = 1.0):
    """Hard-select the row of v with the highest perturbed score.

    Returns (row, vjp).  The forward pass is the argmax row; the vjp
    backpropagates through the Softplus-power surrogate, yielding gradients
    for both v and z.
    """
    v = as_matrix(v)
    z = np.asarray(z, dtype=np.float64).ravel()
    g = np.asarray(g, dtype=np.float64).ravel()
    if v.shape[0] == 0:
        raise ValueError("empty input")
    if not (len(z) == len(g) == v.shape[0]):
        raise ValueError("score/noise length must match row count")
    y = z + g
    hard = v[int(np.argmax(y))].copy()
    probs, dlogw = _softplus_power_weights(y, tau)
    soft = probs @ v

    def vjp(upstream: np.ndarray):
        u = np.asarray(upstream, dtype=np.float64).ravel()
        dv = np.outer(probs, u)
        dz = (v @ u - soft @ u) * probs * dlogw
        return dv, dz

    return hard, vjp


def sample_with_replacement(x: np.ndarray, k: int, p: SamplerParams, rng: Rng):
    """Stack k independent hard choices of token rows (fresh noise per row).

    The returned vjp scales all gradients that pass through the sampling
    function by 1/k, which keeps their magnitude independent of k.
    """
    x = as_matrix(x)
    if k < 1:
        raise ValueError("k must be >= 1")
    n = x.shape[0]
    z = importance_scores(x, p)
    rows = []
    vjps = []
    for _ in range(k):
        g = gumbel_draw(rng, n)
        row, vjp = choose_one(x, z, g, p.tau)
        rows.append(row)
        vjps.append(vjp)
    out = np.stack(rows, axis=0)

    def vjp_all(upstream: np.ndarray):
        u = np.asarray(upstream, dtype=np.float64)
        dx = np.zeros_like(x)
        dz = np.zeros(n)
        for i in range(k):
            dv_i, dz_i = vjps[i](u[i])
            dx += dv_i
            dz += dz_i
        dx /= k
        dz /= k
        dx += dz[:, None] @ p.w_s.T
        dw_s = x.T @ dz[:, None]
        db_s = float(dz.sum())
        return dx, dw_s, db_s

    return out, vjp_all


def _duplet_weights(z_sel: np.ndarray, idx_top, idx_rand, tau: float):
    sp_top = softplus(z_sel[idx_top])
    sp_rand = softplus(z_sel[idx_rand])
    wt = sp_top ** (1.0 / tau)
    wr = sp_rand ** (1.0 / tau)
    w_top = wt / (wt + wr)
    return w_top, 1.0 - w_top, sp_top, sp_rand


def sample_without_replacement(
    x: np.ndarray,
    k: int,
    p: SamplerParams,
    rng: Rng,
    train: bool,
    gumbel_before_topk: bool = True,
):
    """Duplet sampling: k top-scoring tokens blended with k disjoint random tokens.

    Scores get Gumbel noise only in train mode (gumbel_before_topk also lets
    the noise drive the top-k sort; both selection and blend weights then use
    the same perturbed scores).  Returns (plan, sampled rows, vjp); the vjp
    maps an upstream gradient on the sampled rows back to x and the sampler
    parameters, optionally folding in extra gradient contributions on the
    blend weights from downstream consumers of the plan.

    k >= n bypasses sampling entirely; sampling rates strictly between 50%
    and 100% are rejected.
    """
    x = as_matrix(x)
    n = x.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= n:
        plan = SamplePlan(
            idx_top=np.empty(0, dtype=np.int64),
            idx_rand=np.empty(0, dtype=np.int64),
            w_top=np.empty(0),
            w_rand=np.empty(0),
            bypass=True,
            n=n,
        )

        def vjp_bypass(upstream, d_wtop=None, d_wrand=None):
            u = np.asarray(upstream, dtype=np.float64)
            return u.copy(), np.zeros_like(p.w_s), 0.0

        return plan, x.copy(), vjp_bypass
    if 2 * k > n:
        raise ValueError("sampling rate above 50% unsupported; use bypass")

    z = importance_scores(x, p)
    z_sel = z + gumbel_draw(rng, n) if train else z
    # noise can be kept out of the sort while still stochasticizing the blend
    z_sort = z_sel if (not train or gumbel_before_topk) else z

    order = np.argsort(-z_sort, kind="stable")
    idx_top = order[:k].copy()
    complement = order[k:]
    s2_rng = rng if train else Rng(_EVAL_S2_SEED)
    idx_rand = complement[s2_rng.gen.choice(len(complement), size=k, replace=False)]

    w_top, w_rand, sp_top, sp_rand = _duplet_weights(z_sel, idx_top, idx_rand, p.tau)
    plan = SamplePlan(idx_top=idx_top, idx_rand=idx_rand, w_top=w_top, w_rand=w_rand, bypass=False, n=n)
    out = w_top[:, None] * x[idx_top] + w_rand[:, None] * x[idx_rand]

    sig_top = sigmoid(z_sel[idx_top])
    sig_rand = sigmoid(z_sel[idx_rand])
    dlog_top = np.where(sp_top > 0, sig_top / np.where(sp_top > 0, sp_top, 1.0), 1.0) / p.tau
    dlog_rand = np.where(sp_rand > 0, sig_rand / np.where(sp_rand > 0, sp_rand, 1.0), 1.0) / p.tau

    def vjp(upstream, d_wtop=None, d_wrand=None):
        u = np.asarray(upstream, dtype=np.float64)
        dw_top = np.einsum("kd,kd->k", u, x[idx_top])
        dw_rand = np.einsum("kd,kd->k", u, x[idx_rand])
        if d_wtop is not None:
            dw_top = dw_top + d_wtop
        if d_wrand is not None:
            dw_rand = dw_rand + d_wrand
        dx = np.zeros_like(x)
        np.add.at(dx, idx_top, w_top[:, None] * u)
        np.add.at(dx, idx_rand, w_rand[:, None] * u)
        # w_top = a/(a+b) with a, b the Softplus powers; route (dw_top - dw_rand)
        # through the ratio since w_rand = 1 - w_top
        dpair = dw_top - dw_rand
        common = dpair * w_top * w_rand
        dz = np.zeros(n)
        np.add.at(dz, idx_top, common * dlog_top)
        np.add.at(dz, idx_rand, -common * dlog_rand)
        dx += dz[:, None] @ p.w_s.T
        dw_s = x.T @ dz[:, None]
        db_s = float(dz.sum())
        return dx, dw_s, db_s

    return plan, out, vjp


@dataclass
class SparseRelative:
    """Pairwise relative features in coordinate form.

    Stores (row, col) index arrays and an (m, r) value block; absent pairs are
    implicit zeros.  ``gather_cols`` densifies only the requested columns.
    """

    n: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    _lookup: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.vals = np.atleast_2d(np.asarray(self.vals, dtype=np.float64))
        if self.vals.shape[0] != len(self.rows):
            self.vals = self.vals.reshape(len(self.rows), -1)
        self._lookup = {}
        for i in range(len(self.rows)):
            self._lookup[(int(self.rows[i]), int(self.cols[i]))] = i

    @property
    def r(self) -> int:
        return self.vals.shape[1]

    def gather_cols(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n):
            raise IndexError("relative-feature column index out of range")
        out = np.zeros((self.n, len(idx), self.r))
        for j, c in enumerate(idx):
            for i in range(self.n):
                hit = self._lookup.get((i, int(c)))
                if hit is not None:
                    out[i, j] = self.vals[hit]
        return out


def _gather_relative_columns(x_r, idx: np.ndarray) -> np.ndarray:
    """(n, k, r) block of relative features for the given key columns."""
    if isinstance(x_r, SparseRelative):
        return x_r.gather_cols(idx)
    arr = np.asarray(x_r, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= arr.shape[1]):
        raise IndexError("relative-feature column index out of range")
    return arr[:, idx, :]


def gather_sparse_rpe(x_r, plan: SamplePlan, transform: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Plan-restricted relative features: transform, then blend.

    Gathers the top and random key columns separately, applies ``transform``
    to each gathered block on its own (the map never sees blended features),
    and only then mixes the two with the plan's bin weights.
    """
    if plan.bypass:
        raise ValueError("plan is bypass; relative features need no gathering")
    a_top = transform(_gather_relative_columns(x_r, plan.idx_top))
    a_rand = transform(_gather_relative_columns(x_r, plan.idx_rand))
    return plan.w_top[None, :, None] * a_top + plan.w_rand[None, :, None] * a_rand
