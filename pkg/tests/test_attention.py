import math

import numpy as np
import pytest

from sampleformer.attention import (
    AttnParams,
    apply_rpe,
    attn_delta_backward,
    attn_delta_forward,
    dot_score,
    leaky_prob,
    maxout_score,
    mha_backward,
    mha_forward,
    relu_prob,
    softmax_prob,
)
from sampleformer.numerics import Rng, finite_diff_grad, softplus
from sampleformer.sampler import SamplerParams, sample_without_replacement


def make_params(rng, d, heads, r=0, eps=1e-6):
    dh = d // heads
    scale = math.sqrt(2.0 / d)

    def w(shape, s=scale):
        return rng.normal(shape) * s

    kwargs = {}
    if r > 0:
        rs = math.sqrt(2.0 / max(r, 1))
        kwargs = dict(w_rmul=w((r, heads), rs), b_rmul=rng.normal(heads) * 0.1,
                      w_radd=w((r, heads), rs), b_radd=rng.normal(heads) * 0.1)
    return AttnParams(
        w_q=w((d, d)), b_q=rng.normal(d) * 0.1,
        w_k=w((d, d)), b_k=rng.normal(d) * 0.1,
        w_v=w((d, d)), b_v=rng.normal(d) * 0.1,
        w_c=w((d, heads)), b_c=rng.normal(heads) * 0.1,
        w_cat=w((d, d)), heads=heads, head_dim=dh, epsilon=eps, **kwargs,
    )


# ---------------------------------------------------------------- scores


def test_maxout_score_zero_inputs():
    assert np.allclose(maxout_score(np.zeros((3, 2)), np.zeros((4, 2))), 0.0)


def test_maxout_score_single_pair():
    q = np.array([[1.0, -1.0]])
    k = np.array([[0.0, 2.0]])
    assert maxout_score(q, k)[0, 0] == pytest.approx((1.0 + 2.0) / math.sqrt(2), abs=1e-12)


def test_maxout_score_against_triple_loop():
    rng = Rng(0)
    q, k = rng.normal((5, 3)), rng.normal((5, 3))
    a = maxout_score(q, k)
    ref = np.zeros((5, 5))
    for i in range(5):
        for j in range(5):
            ref[i, j] = sum(max(q[i, t], k[j, t]) for t in range(3)) / math.sqrt(3)
    assert np.allclose(a, ref, atol=1e-12)


def test_maxout_symmetry_and_scale():
    rng = Rng(1)
    q, k = rng.normal((4, 3)), rng.normal((6, 3))
    assert np.allclose(maxout_score(q, k).T, maxout_score(k, q), atol=1e-15)
    lam = 3.7
    assert np.allclose(maxout_score(lam * q, lam * k), lam * maxout_score(q, k), atol=1e-12)


def test_dot_score_identity_and_loop():
    assert np.allclose(dot_score(np.eye(2), np.eye(2)), np.eye(2) / math.sqrt(2), atol=1e-15)
    q = np.array([[1.0, 0.0], [0.0, 2.0]])
    k = np.array([[0.0, 1.0], [1.0, 0.0]])
    a = dot_score(q, k)
    assert a[0, 0] == 0.0 and a[1, 1] == 0.0
    rng = Rng(2)
    q, k = rng.normal((4, 3)), rng.normal((4, 3))
    ref = np.array([[sum(q[i, t] * k[j, t] for t in range(3)) for j in range(4)] for i in range(4)]) / math.sqrt(3)
    assert np.allclose(dot_score(q, k), ref, atol=1e-12)


# ---------------------------------------------------------------- prob functions


def test_leaky_prob_values():
    a = np.array([[-1.0, -2.0], [1.0, 1.0]])
    c = np.array([0.0, 100.0])  # softplus(100) ~ 100
    p = leaky_prob(a, c, eps=1e-12)
    assert np.allclose(p[0], 0.0)
    # row (1, 1) with leak 2: 1 / (1 + 1 + 2) = 0.25 each, row sum 0.5
    c2 = np.log(np.e**2 - 1.0)  # softplus(c2) = 2
    p2 = leaky_prob(np.array([[1.0, 1.0]]), np.array([c2]), eps=1e-15)
    assert np.allclose(p2, 0.25, atol=1e-12)
    assert p2.sum() == pytest.approx(0.5, abs=1e-12)


def test_leaky_prob_nonleaky_limit():
    rng = Rng(3)
    a = np.abs(rng.normal((4, 5))) + 0.1
    lk = leaky_prob(a, np.full(4, -1e6), eps=1e-300)
    nl = relu_prob(a, eps=1e-300)
    assert np.allclose(lk, nl, atol=1e-9)


def test_leaky_prob_row_mass_strictly_below_one():
    rng = Rng(4)
    a = rng.normal((6, 8))
    c = rng.normal(6)
    p = leaky_prob(a, c)
    sums = p.sum(axis=1)
    assert np.all(sums >= 0.0) and np.all(sums < 1.0)


def test_softmax_prob_uniform_and_saturation():
    p = softmax_prob(np.full((1, 4), 2.5), eps=0.0 + 1e-300)
    assert np.allclose(p, 0.25, atol=1e-12)
    p2 = softmax_prob(np.array([[0.0, 50.0]]), eps=1e-9)
    assert p2[0, 1] == pytest.approx(1.0, abs=1e-6)
    rng = Rng(5)
    row = rng.normal((1, 7))
    naive = np.exp(row) / (np.exp(row).sum() + 0.0)
    assert np.allclose(softmax_prob(row, eps=1e-300), naive, atol=1e-12)


# ---------------------------------------------------------------- RPE injection


def test_apply_rpe_zero_maps_give_log2_scaling():
    rng = Rng(6)
    d, h, r = 4, 2, 3
    p = make_params(rng, d, h, r=r)
    p.w_rmul = np.zeros((r, h))
    p.b_rmul = np.zeros(h)
    p.w_radd = np.zeros((r, h))
    p.b_radd = np.zeros(h)
    a = rng.normal((5, 5))
    feat = rng.normal((5, 5, r))
    out = apply_rpe(a, feat, p, head=0)
    assert np.allclose(out, np.log(2.0) * a, atol=1e-12)


def test_apply_rpe_bias_only():
    rng = Rng(7)
    d, h, r = 4, 2, 2
    p = make_params(rng, d, h, r=r)
    p.w_rmul = np.zeros((r, h))
    p.w_radd = np.zeros((r, h))
    a = rng.normal((3, 3))
    out = apply_rpe(a, np.zeros((3, 3, r)), p, head=1)
    expected = softplus(p.b_rmul[1]) * a + p.b_radd[1]
    assert np.allclose(out, expected, atol=1e-12)


def test_apply_rpe_against_loop():
    rng = Rng(8)
    d, h, r = 4, 2, 3
    p = make_params(rng, d, h, r=r)
    a = rng.normal((4, 6))
    feat = rng.normal((4, 6, r))
    out = apply_rpe(a, feat, p, head=0)
    ref = np.zeros_like(a)
    for i in range(4):
        for j in range(6):
            lin_m = feat[i, j] @ p.w_rmul[:, 0] + p.b_rmul[0]
            lin_a = feat[i, j] @ p.w_radd[:, 0] + p.b_radd[0]
            ref[i, j] = a[i, j] * softplus(lin_m) + lin_a
    assert np.allclose(out, ref, atol=1e-12)


# ---------------------------------------------------------------- forward contracts


def test_mha_pure_residual_when_values_vanish():
    rng = Rng(9)
    d, h = 6, 2
    p = make_params(rng, d, h)
    p.w_v = np.zeros((d, d))
    p.b_v = np.zeros(d)
    p.w_cat = np.eye(d)
    x = rng.normal((5, d))
    out, _ = mha_forward(x, None, p, "sft_maxout_leaky")
    assert np.allclose(out, x, atol=1e-12)


def test_mha_single_token_closed_form():
    rng = Rng(10)
    d, h = 3, 1
    p = make_params(rng, d, h)
    x = rng.normal((1, d))
    out, _ = mha_forward(x, None, p, "sft_maxout_leaky")
    q = x @ p.w_q + p.b_q
    k = x @ p.w_k + p.b_k
    v = x @ p.w_v + p.b_v
    c = float((x @ p.w_c + p.b_c)[0, 0])
    a = float(np.sum(np.maximum(q, k)) / math.sqrt(d))
    prob = max(a, 0.0) / (max(a, 0.0) + softplus(c) + p.epsilon)
    ref = x + (prob * v) @ p.w_cat
    assert np.allclose(out, ref, atol=1e-12)


def test_mha_bypass_plan_equals_dense():
    rng = Rng(11)
    d, h, n = 4, 2, 6
    p = make_params(rng, d, h, r=2)
    x = rng.normal((n, d))
    x_r = rng.normal((n, n, 2))
    sp = SamplerParams(w_s=rng.normal((d, 1)))
    plan, _, _ = sample_without_replacement(x, n, sp, Rng(1), train=False)
    assert plan.bypass
    out_plan, _ = mha_forward(x, x_r, p, "sft_maxout_leaky", plan=plan)
    out_dense, _ = mha_forward(x, x_r, p, "sft_maxout_leaky", plan=None)
    assert np.allclose(out_plan, out_dense, atol=1e-12)


def test_mha_rejects_unknown_mode_and_missing_maps():
    rng = Rng(12)
    p = make_params(rng, 4, 2)
    x = rng.normal((3, 4))
    with pytest.raises(ValueError):
        mha_forward(x, None, p, "bogus")
    with pytest.raises(ValueError, match="no relative maps"):
        mha_forward(x, np.ones((3, 3, 2)), p, "sft_maxout_leaky")


def test_scale_gate_invariance_of_row_argmax():
    rng = Rng(13)
    d, h = 4, 1
    p = make_params(rng, d, h)
    x = rng.normal((5, d))
    _, cache = mha_forward(x, None, p, "sft_maxout_leaky")
    base = cache["probs"][0]
    lam = 2.5
    p2 = make_params(Rng(13), d, h)
    p2.w_q = p.w_q * lam
    p2.b_q = p.b_q * lam
    p2.w_k = p.w_k * lam
    p2.b_k = p.b_k * lam
    _, cache2 = mha_forward(x, None, p2, "sft_maxout_leaky")
    scaled = cache2["probs"][0]
    assert np.array_equal(np.argmax(base, axis=1), np.argmax(scaled, axis=1))
    assert np.allclose(cache2["scores"][0], lam * cache["scores"][0], atol=1e-10)


# ---------------------------------------------------------------- backward


def flatten_params(p: AttnParams):
    keys = sorted(p.arrays().keys())
    arrs = [p.arrays()[k] for k in keys]
    return keys, np.concatenate([a.ravel() for a in arrs])


def unflatten_into(p: AttnParams, keys, flat):
    pos = 0
    for k in keys:
        a = p.arrays()[k]
        newa = flat[pos : pos + a.size].reshape(a.shape)
        setattr(p, k, newa)
        pos += a.size


def gradcheck_attention(seed, mode, r, with_plan, n=6, d=4, heads=2, k=2):
    rng = Rng(seed)
    p = make_params(rng, d, heads, r=r)
    x = rng.normal((n, d))
    x_r = rng.normal((n, n, r)) if r > 0 else None
    plan = None
    if with_plan:
        sp = SamplerParams(w_s=rng.normal((d, 1)))
        plan, _, _ = sample_without_replacement(x, k, sp, Rng(seed + 1), train=False)
    u = Rng(seed + 2).normal((n, d))

    out, cache = mha_forward(x, x_r, p, mode, plan=plan)
    bundle = mha_backward(cache, u)

    keys, flat0 = flatten_params(p)

    def objective(flat):
        p2 = make_params(Rng(seed), d, heads, r=r)
        unflatten_into(p2, keys, flat)
        out2, _ = mha_forward(x, x_r, p2, mode, plan=plan)
        return float(np.sum(out2 * u))

    fd = finite_diff_grad(objective, flat0, h=1e-6)
    analytic = np.concatenate([bundle.params[k].ravel() for k in keys])
    err = np.abs(analytic - fd) / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(fd)))
    assert err.max() < 1e-6, f"param grad mismatch {err.max():.2e} for mode={mode}"

    def objective_x(xf):
        out2, _ = mha_forward(xf.reshape(n, d), x_r, p, mode, plan=plan)
        return float(np.sum(out2 * u))

    fd_x = finite_diff_grad(objective_x, x.ravel(), h=1e-6)
    err_x = np.abs(bundle.d_x.ravel() - fd_x) / np.maximum(1.0, np.abs(fd_x))
    assert err_x.max() < 1e-6, f"input grad mismatch {err_x.max():.2e} for mode={mode}"


@pytest.mark.parametrize("mode", ["sft_maxout_leaky", "softmax_dot", "relu_dot_nonleaky"])
@pytest.mark.parametrize("r,with_plan", [(0, False), (2, False), (2, True)])
def test_attention_gradcheck(mode, r, with_plan):
    gradcheck_attention(seed=100 + r + (10 if with_plan else 0), mode=mode, r=r, with_plan=with_plan)


def test_attention_blend_weight_gradients_via_plan():
    # perturb sampler params and compare the assembled chain against finite
    # differences of the full mha output (plan weights recomputed each call)
    seed, n, d, heads, k, r = 50, 8, 4, 2, 3, 2
    rng = Rng(seed)
    p = make_params(rng, d, heads, r=r)
    x = rng.normal((n, d))
    x_r = rng.normal((n, n, r))
    sp = SamplerParams(w_s=rng.normal((d, 1)), b_s=0.15)
    u = Rng(seed + 1).normal((n, d))

    plan, _, svjp = sample_without_replacement(x, k, sp, Rng(7), train=False)
    out, cache = mha_forward(x, x_r, p, "sft_maxout_leaky", plan=plan)
    bundle = mha_backward(cache, u)
    dx_s, dws, dbs = svjp(np.zeros((k, d)), d_wtop=bundle.d_wtop, d_wrand=bundle.d_wrand)
    total_dx = bundle.d_x + dx_s

    def objective(flat):
        xx = flat[: n * d].reshape(n, d)
        ws = flat[n * d : n * d + d].reshape(d, 1)
        bs = flat[-1]
        sp2 = SamplerParams(w_s=ws, b_s=bs)
        plan2, _, _ = sample_without_replacement(xx, k, sp2, Rng(7), train=False)
        out2, _ = mha_forward(xx, x_r, p, "sft_maxout_leaky", plan=plan2)
        return float(np.sum(out2 * u))

    flat0 = np.concatenate([x.ravel(), sp.w_s.ravel(), [sp.b_s]])
    fd = finite_diff_grad(objective, flat0, h=1e-6)
    analytic = np.concatenate([total_dx.ravel(), dws.ravel(), [dbs]])
    assert np.allclose(analytic, fd, rtol=1e-5, atol=1e-7)


def test_zero_upstream_gives_zero_grads():
    rng = Rng(60)
    p = make_params(rng, 4, 2, r=2)
    x = rng.normal((5, 4))
    x_r = rng.normal((5, 5, 2))
    _, cache = mha_forward(x, x_r, p, "sft_maxout_leaky")
    bundle = mha_backward(cache, np.zeros((5, 4)))
    for g in bundle.params.values():
        assert np.allclose(g, 0.0)
    assert np.allclose(bundle.d_x, 0.0)


def test_single_token_wv_gradient_closed_form():
    # softmax mode, one token: out = x + P v w_cat with P = 1/(1 + eps) scalar
    rng = Rng(61)
    d = 3
    p = make_params(rng, d, 1, eps=1e-6)
    x = rng.normal((1, d))
    u = Rng(62).normal((1, d))
    out, cache = mha_forward(x, None, p, "softmax_dot")
    bundle = mha_backward(cache, u)
    prob = 1.0 / (1.0 + p.epsilon)
    d_v = prob * (u @ p.w_cat.T)
    ref = x.T @ d_v
    assert np.allclose(bundle.params["w_v"], ref, atol=1e-10)


def test_gradient_gate_consistency_taylor():
    # small parameter steps that flip no gate must obey a second-order Taylor bound
    seed, n, d = 70, 6, 4
    rng = Rng(seed)
    p = make_params(rng, d, 2)
    x = rng.normal((n, d))
    u = Rng(seed + 1).normal((n, d))
    out, cache = mha_forward(x, None, p, "sft_maxout_leaky")
    f0 = float(np.sum(out * u))
    bundle = mha_backward(cache, u)
    direction = Rng(seed + 2).normal(p.w_q.shape)
    direction /= np.linalg.norm(direction)
    g_dot = float(np.sum(bundle.params["w_q"] * direction))
    rema = []
    for delta in (1e-3, 1e-4, 1e-5):
        p2 = make_params(Rng(seed), d, 2)
        p2.w_q = p.w_q + delta * direction
        out2, _ = mha_forward(x, None, p2, "sft_maxout_leaky")
        f1 = float(np.sum(out2 * u))
        rema.append(abs(f1 - f0 - delta * g_dot) / delta**2)
    assert max(rema) < 1e3 * max(1.0, min(rema) + 1.0)


def test_cache_is_single_use_and_mutation_guarded():
    rng = Rng(80)
    p = make_params(rng, 4, 2)
    x = rng.normal((3, 4))
    _, cache = mha_forward(x, None, p, "softmax_dot")
    mha_backward(cache, np.zeros((3, 4)))
    with pytest.raises(RuntimeError, match="already consumed"):
        mha_backward(cache, np.zeros((3, 4)))
    _, cache2 = mha_forward(x, None, p, "softmax_dot")
    p.w_q = p.w_q * 2.0
    with pytest.raises(RuntimeError, match="mutated"):
        mha_backward(cache2, np.zeros((3, 4)))


def test_attention_dropout_scaling_and_determinism():
    rng = Rng(90)
    p = make_params(rng, 4, 2)
    x = rng.normal((6, 4))
    out1, _ = mha_forward(x, None, p, "sft_maxout_leaky", rng=Rng(3), train=True, drop_attn=0.4)
    out2, _ = mha_forward(x, None, p, "sft_maxout_leaky", rng=Rng(3), train=True, drop_attn=0.4)
    assert np.array_equal(out1, out2)
    out3, _ = mha_forward(x, None, p, "sft_maxout_leaky", rng=Rng(4), train=True, drop_attn=0.4)
    assert not np.array_equal(out1, out3)
