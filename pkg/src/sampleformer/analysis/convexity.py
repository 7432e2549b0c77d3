"""Pseudoconvexity audits.

A differentiable f is pseudoconvex when <grad f(x1), x2 - x1> >= 0 implies
f(x2) >= f(x1).  The audit samples (x1, x2) pairs, keeps only pairs whose
ReLU/max gate pattern agrees (the regime the layer's piecewise-smooth
structure makes comparable), and counts implication triggers and violations.
The scalar probe is one output coordinate of a bypass-sampling layer as a
function of one weight group, everything else frozen.

The vanilla-attention counterexample is analytic: with identity tokens and
values, one softmax entry reduces to f(w1, w2) = 1 / (1 + e^w1 + e^w2), whose
sublevel sets are visibly non-convex; a collinear triple with the midpoint
above both ends certifies the quasiconvexity failure (and with it, the
pseudoconvexity failure).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..layer import LayerConfig, init_params, layer_backward, layer_forward, params_to_dict, set_params_from_dict
from ..numerics import Rng

__all__ = [
    "PseudoconvexityReport",
    "CounterexampleCertificate",
    "WEIGHT_GROUPS",
    "pseudoconvexity_check",
    "vanilla_counterexample",
    "vanilla_probe_audit",
    "prob_orthant_audit",
]

WEIGHT_GROUPS = {
    "qk": ("attn.w_q", "attn.b_q", "attn.w_k", "attn.b_k"),
    "relative": ("attn.w_rmul", "attn.b_rmul", "attn.w_radd", "attn.b_radd"),
    "leak": ("attn.w_c", "attn.b_c"),
}


@dataclass
class PseudoconvexityReport:
    weight_group: str
    pairs_tested: int
    implications_triggered: int
    violations: int
    max_violation: float
    gate_restricted: bool
    ffn_activation: str = "gelu"
    discarded_gate_flips: int = 0

    def ok(self) -> bool:
        return self.violations == 0


def _gate_signature(cache) -> np.ndarray:
    """Concatenated max-gate and ReLU-gate booleans of the attention block."""
    attn = cache["attn_cache"]
    q, k = attn["q"], attn["k"]
    p = attn["params"]
    bits = []
    for head in range(p.heads):
        sl = slice(head * p.head_dim, (head + 1) * p.head_dim)
        bits.append((q[:, None, sl] >= k[None, :, sl]).ravel())
        bits.append((attn["scores"][head] > 0.0).ravel())
    return np.concatenate(bits)


def _probe(params, cfg, x, x_r, coord, want_grad: bool, group_keys=None):
    out, cache = layer_forward(x, x_r, params, cfg, rng=None, train=False)
    value = float(out[coord])
    sig = _gate_signature(cache)
    if not want_grad:
        return value, sig, None
    upstream = np.zeros_like(out)
    upstream[coord] = 1.0
    bundle = layer_backward(cache, upstream)
    grad = np.concatenate([np.asarray(bundle.params[key]).ravel() for key in group_keys])
    return value, sig, grad


def pseudoconvexity_check(
    group: str,
    n_pairs: int,
    rng: Rng,
    step_scale: float = 0.5,
    tol: float = 1e-8,
    gate_restricted: bool = True,
    ffn_activation: str = "gelu",
    n_tokens: int = 6,
    d: int = 4,
    heads: int = 1,
    rpe_dim: int = 2,
    probe_coord: tuple[int, int] = (0, 0),
    resamples_per_scale: int = 3,
    n_backoffs: int = 18,
    segment_checks: int | None = None,
) -> PseudoconvexityReport:
    """Audit one weight group of the bypass-sampling layer for pseudoconvexity.

    Per pair: fresh He-initialized layer, a random direction on the group's
    parameters scaled by step_scale times the group's He scale, and the
    implication check at the fixed probe coordinate.  With gate_restricted
    the direction is resampled until no ReLU/max gate differs between the
    endpoints; because the query/key groups flip some of the dense gate set
    at any fixed scale, resampling backs the scale off geometrically until a
    same-gate pair lands.  The implication being audited holds at every
    scale, so the backoff narrows coverage per pair without weakening it.

    For the query/key and leak groups the same-gate region is convex (all
    gate conditions are affine in those weights once the max gates are
    pinned), so matching endpoints already pin the whole segment.  The
    relative maps sit inside a Softplus, the gate region is not convex, and
    the segment can cross a gate boundary that both endpoints hide; interior
    points are therefore checked as well (segment_checks, default 5 for the
    relative group).
    """
    if group not in WEIGHT_GROUPS:
        raise ValueError("unsupported group")
    if segment_checks is None:
        segment_checks = 5 if group == "relative" else 0
    cfg = LayerConfig(
        d=d, heads=heads, k=n_tokens, ln_position="none", mode="sft_maxout_leaky",
        rpe_dim=rpe_dim, ffn_activation=ffn_activation,
    )
    keys = WEIGHT_GROUPS[group]
    x = rng.split("tokens").normal((n_tokens, d))
    x_r = rng.split("relative").normal((n_tokens, n_tokens, rpe_dim))

    triggered = 0
    violations = 0
    max_violation = 0.0
    discarded = 0
    tested = 0
    for pair in range(n_pairs):
        r = rng.split(pair)
        params = init_params(r.split("init"), cfg)
        base = {key: np.asarray(val, dtype=np.float64).copy() for key, val in params_to_dict(params).items() if key in keys}
        flat0 = np.concatenate([base[key].ravel() for key in keys])
        scale = step_scale * float(np.std(flat0) + 1e-3)
        f1, sig1, grad1 = _probe(params, cfg, x, x_r, probe_coord, True, keys)

        accepted = False
        attempt = 0
        for backoff in range(n_backoffs):
            trial_scale = scale * (0.5**backoff)
            for _ in range(resamples_per_scale):
                delta = r.split(f"dir{attempt}").normal(flat0.shape) * trial_scale
                attempt += 1
                flat2 = flat0 + delta
                pos = 0
                update = {}
                for key in keys:
                    size = base[key].size
                    update[key] = flat2[pos : pos + size].reshape(base[key].shape)
                    pos += size
                set_params_from_dict(params, update)
                f2, sig2, _ = _probe(params, cfg, x, x_r, probe_coord, False)
                set_params_from_dict(params, base)
                if gate_restricted and not np.array_equal(sig1, sig2):
                    discarded += 1
                    continue
                if gate_restricted and segment_checks:
                    interior_ok = True
                    for step in range(1, segment_checks + 1):
                        frac = step / (segment_checks + 1)
                        mid = flat0 + frac * delta
                        pos = 0
                        mid_update = {}
                        for key in keys:
                            size = base[key].size
                            mid_update[key] = mid[pos : pos + size].reshape(base[key].shape)
                            pos += size
                        set_params_from_dict(params, mid_update)
                        _, sig_mid, _ = _probe(params, cfg, x, x_r, probe_coord, False)
                        set_params_from_dict(params, base)
                        if not np.array_equal(sig1, sig_mid):
                            interior_ok = False
                            break
                    if not interior_ok:
                        discarded += 1
                        continue
                accepted = True
                break
            if accepted:
                break
        if not accepted:
            continue
        tested += 1
        if float(grad1 @ delta) >= 0.0:
            triggered += 1
            gap = f1 - f2
            if gap > tol:
                violations += 1
                max_violation = max(max_violation, gap)
    return PseudoconvexityReport(
        weight_group=group,
        pairs_tested=tested,
        implications_triggered=triggered,
        violations=violations,
        max_violation=max_violation,
        gate_restricted=gate_restricted,
        ffn_activation=ffn_activation,
        discarded_gate_flips=discarded,
    )


@dataclass
class CounterexampleCertificate:
    w_a: tuple[float, float]
    w_mid: tuple[float, float]
    w_b: tuple[float, float]
    f_a: float
    f_mid: float
    f_b: float

    @property
    def margin(self) -> float:
        return self.f_mid - max(self.f_a, self.f_b)


def _vanilla_entry(w1: float, w2: float) -> float:
    return 1.0 / (1.0 + np.exp(w1) + np.exp(w2))


def vanilla_counterexample(spread: float = 10.0) -> CounterexampleCertificate:
    """Collinear triple where the softmax-attention entry peaks at the midpoint.

    f(w1, w2) = 1/(1 + e^w1 + e^w2) is the first attention entry when tokens
    and values are the 3x3 identity and the remaining query entry is pinned
    at zero.  The endpoints (0, -M) and (-M, 0) give f close to 1/2 while the
    midpoint (-M/2, -M/2) gives f close to 1: quasiconvexity fails on the
    segment, so the map cannot be pseudoconvex.
    """
    w_a = (0.0, -spread)
    w_b = (-spread, 0.0)
    w_mid = ((w_a[0] + w_b[0]) / 2.0, (w_a[1] + w_b[1]) / 2.0)
    cert = CounterexampleCertificate(
        w_a=w_a, w_mid=w_mid, w_b=w_b,
        f_a=_vanilla_entry(*w_a), f_mid=_vanilla_entry(*w_mid), f_b=_vanilla_entry(*w_b),
    )
    if cert.margin <= 1e-6:
        raise RuntimeError("analytic counterexample failed to certify a violation")
    return cert


def vanilla_probe_audit(n_pairs: int, rng: Rng, tol: float = 1e-8, spread: float = 3.0):
    """Random-pair audit of the vanilla softmax entry; violations are expected.

    Returns (pairs, triggered, violations).
    """
    triggered = 0
    violations = 0
    for pair in range(n_pairs):
        r = rng.split(pair)
        w1 = r.normal(2) * spread
        w2 = r.normal(2) * spread
        e = np.exp(w1)
        denom = 1.0 + e.sum()
        grad = -e / denom**2
        if float(grad @ (w2 - w1)) >= 0.0:
            triggered += 1
            if _vanilla_entry(*w2) < _vanilla_entry(*w1) - tol:
                violations += 1
    return n_pairs, triggered, violations


def prob_orthant_audit(n_pairs: int, rng: Rng, dim: int = 6, leak: float = 1.0, tol: float = 1e-8):
    """Audit the leaky normalizer itself as a scalar map inside one orthant.

    f(x) = relu(x_0) / (sum_k relu(x_k) + leak); pairs are resampled until
    the sign pattern matches, which pins the orthant.  Returns a
    PseudoconvexityReport.
    """
    triggered = 0
    violations = 0
    max_violation = 0.0
    tested = 0
    discarded = 0
    for pair in range(n_pairs):
        r = rng.split(pair)
        x1 = r.normal(dim)
        gate1 = x1 > 0

        def f_and_grad(x):
            u = (x > 0).astype(np.float64)
            num = max(x[0], 0.0)
            den = np.maximum(x, 0.0).sum() + leak
            grad = -num * u / den**2
            grad[0] += u[0] / den
            return num / den, grad

        f1, g1 = f_and_grad(x1)
        ok = False
        for attempt in range(100):
            x2 = x1 + r.split(attempt).normal(dim) * 0.4
            if np.array_equal(x2 > 0, gate1):
                ok = True
                break
            discarded += 1
        if not ok:
            continue
        tested += 1
        if float(g1 @ (x2 - x1)) >= 0.0:
            triggered += 1
            f2 = max(x2[0], 0.0) / (np.maximum(x2, 0.0).sum() + leak)
            gap = f1 - f2
            if gap > tol:
                violations += 1
                max_violation = max(max_violation, gap)
    return PseudoconvexityReport(
        weight_group="prob-orthant",
        pairs_tested=tested,
        implications_triggered=triggered,
        violations=violations,
        max_violation=max_violation,
        gate_restricted=True,
        ffn_activation="none",
        discarded_gate_flips=discarded,
    )
