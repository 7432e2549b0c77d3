"""One full transformer layer built around the sampled leaky-maxout attention.

Composition per block: (optional pre-LN) -> sampler -> attention -> token
dropout -> residual (optional post-LN) -> (optional pre-LN) -> FFN at 4x
expansion with GeLU (or linear, for convexity audits) -> token dropout ->
residual (optional post-LN).  Weights follow He initialization.  Parameters
serialize to a JSON header plus raw float64 payload, round-tripping bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from .attention import AttnParams, GradBundle, attn_delta_backward, attn_delta_forward
from .numerics import Rng, as_matrix
from .sampler import SamplerParams, sample_without_replacement

__all__ = [
    "LayerConfig",
    "LayerParams",
    "init_params",
    "gelu",
    "gelu_grad",
    "layer_forward",
    "layer_backward",
    "stack_forward",
    "params_to_dict",
    "set_params_from_dict",
    "save_stack",
    "load_stack",
]

LN_EPS = 1e-5
_GELU_A = math.sqrt(2.0 / math.pi)
_GELU_B = 0.044715


@dataclass
class LayerConfig:
    d: int
    heads: int
    k: int
    ln_position: str = "post"  # "pre" | "post" | "none"
    drop_attn: float = 0.0
    drop_token: float = 0.0
    drop_ffn: float = 0.0
    ffn_expansion: int = 4
    mode: str = "sft_maxout_leaky"
    rpe_dim: int = 0
    ffn_activation: str = "gelu"  # "gelu" | "linear"
    gumbel_before_topk: bool = True
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError("model dim must divide evenly across heads")
        if self.ln_position not in ("pre", "post", "none"):
            raise ValueError("ln_position must be pre, post, or none")
        if self.ffn_activation not in ("gelu", "linear"):
            raise ValueError("ffn_activation must be gelu or linear")
        for rate in (self.drop_attn, self.drop_token, self.drop_ffn):
            if not (0.0 <= rate < 1.0):
                raise ValueError("dropout rates must lie in [0, 1)")


@dataclass
class LayerParams:
    attn: AttnParams
    sampler: SamplerParams
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    ln1_scale: np.ndarray
    ln1_shift: np.ndarray
    ln2_scale: np.ndarray
    ln2_shift: np.ndarray


def init_params(rng: Rng, cfg: LayerConfig) -> LayerParams:
    """He-initialized layer: weights ~ N(0, 2/fan_in), biases 0, LN at (1, 0)."""
    d, h, r = cfg.d, cfg.heads, cfg.rpe_dim

    def he(shape, fan_in):
        return rng.normal(shape) * math.sqrt(2.0 / fan_in)

    rpe_kwargs = {}
    if r > 0:
        rpe_kwargs = dict(
            w_rmul=he((r, h), r), b_rmul=np.zeros(h),
            w_radd=he((r, h), r), b_radd=np.zeros(h),
        )
    attn = AttnParams(
        w_q=he((d, d), d), b_q=np.zeros(d),
        w_k=he((d, d), d), b_k=np.zeros(d),
        w_v=he((d, d), d), b_v=np.zeros(d),
        w_c=he((d, h), d), b_c=np.zeros(h),
        w_cat=he((d, d), d), heads=h, head_dim=d // h,
        epsilon=cfg.epsilon, **rpe_kwargs,
    )
    sampler = SamplerParams(w_s=he((d, 1), d), b_s=0.0)
    dff = cfg.ffn_expansion * d
    return LayerParams(
        attn=attn,
        sampler=sampler,
        ffn_w1=he((d, dff), d), ffn_b1=np.zeros(dff),
        ffn_w2=he((dff, d), dff), ffn_b2=np.zeros(d),
        ln1_scale=np.ones(d), ln1_shift=np.zeros(d),
        ln2_scale=np.ones(d), ln2_shift=np.zeros(d),
    )


def gelu(x):
    """tanh-approximation GeLU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = np.asarray(x, dtype=np.float64)
    inner = _GELU_A * (x + _GELU_B * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    inner = _GELU_A * (x + _GELU_B * x**3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * _GELU_A * (1.0 + 3.0 * _GELU_B * x**2)


def _ln_forward(x, scale, shift):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * scale + shift, (xhat, inv)


def _ln_backward(d_out, cache, scale):
    xhat, inv = cache
    d = xhat.shape[1]
    d_xhat = d_out * scale
    d_scale = (d_out * xhat).sum(axis=0)
    d_shift = d_out.sum(axis=0)
    # standard layernorm input gradient
    d_x = inv * (d_xhat - d_xhat.mean(axis=1, keepdims=True) - xhat * (d_xhat * xhat).mean(axis=1, keepdims=True))
    return d_x, d_scale, d_shift


def _mask(rng: Optional[Rng], shape, rate: float, train: bool):
    if not train or rate <= 0.0:
        return None
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.gen.random(shape) >= rate).astype(np.float64)
    return keep / (1.0 - rate)


def _apply(x, mask):
    return x if mask is None else x * mask


def layer_forward(
    x: np.ndarray,
    x_r,
    params: LayerParams,
    cfg: LayerConfig,
    rng: Optional[Rng] = None,
    train: bool = False,
):
    """Run one layer.  Returns (out, cache).

    The rng argument is a stream namespace: child streams are derived by tag
    for the sampler and each dropout site, so one (seed, call) pair pins every
    random choice.  Pass a distinct rng per call (stack_forward splits one per
    layer).
    """
    x = as_matrix(x, cols=cfg.d)
    n = x.shape[0]
    if not (cfg.k >= n or 2 * cfg.k <= n):
        raise ValueError("sampling rate above 50% unsupported; use bypass")
    if train and rng is None and (cfg.k < n or max(cfg.drop_attn, cfg.drop_token, cfg.drop_ffn) > 0):
        raise ValueError("train mode needs an rng for noise and dropout streams")
    pre = cfg.ln_position == "pre"
    post = cfg.ln_position == "post"
    cache: dict = {"cfg": cfg, "params": params, "x": x}

    # attention half-block
    if pre:
        u1, ln1_cache = _ln_forward(x, params.ln1_scale, params.ln1_shift)
        cache["ln1"] = ln1_cache
    else:
        u1 = x
    plan = None
    svjp = None
    if cfg.k < n:
        plan, _, svjp = sample_without_replacement(
            u1, cfg.k, params.sampler,
            rng.split("sampler") if rng is not None else Rng(0),
            train=train, gumbel_before_topk=cfg.gumbel_before_topk,
        )
    delta, attn_cache = attn_delta_forward(
        u1, x_r, params.attn, cfg.mode, plan,
        rng.split("attn") if rng is not None else None,
        train, cfg.drop_attn,
    )
    mask_tok1 = _mask(rng.split("tok1") if rng is not None else None, delta.shape, cfg.drop_token, train)
    y = x + _apply(delta, mask_tok1)
    if post:
        y_post, ln1_cache = _ln_forward(y, params.ln1_scale, params.ln1_shift)
        cache["ln1"] = ln1_cache
        y_out = y_post
    else:
        y_out = y

    # feed-forward half-block
    if pre:
        u2, ln2_cache = _ln_forward(y_out, params.ln2_scale, params.ln2_shift)
        cache["ln2"] = ln2_cache
    else:
        u2 = y_out
    pre_act = u2 @ params.ffn_w1 + params.ffn_b1
    hidden = gelu(pre_act) if cfg.ffn_activation == "gelu" else pre_act
    mask_ffn = _mask(rng.split("ffn") if rng is not None else None, hidden.shape, cfg.drop_ffn, train)
    hidden_d = _apply(hidden, mask_ffn)
    f = hidden_d @ params.ffn_w2 + params.ffn_b2
    mask_tok2 = _mask(rng.split("tok2") if rng is not None else None, f.shape, cfg.drop_token, train)
    z = y_out + _apply(f, mask_tok2)
    if post:
        out, ln2_cache = _ln_forward(z, params.ln2_scale, params.ln2_shift)
        cache["ln2"] = ln2_cache
    else:
        out = z

    cache.update(
        plan=plan, svjp=svjp, attn_cache=attn_cache, u1=u1, u2=u2, y=y, y_out=y_out,
        pre_act=pre_act, hidden_d=hidden_d, z=z,
        mask_tok1=mask_tok1, mask_ffn=mask_ffn, mask_tok2=mask_tok2,
    )
    return out, cache


def layer_backward(cache: dict, upstream: np.ndarray) -> GradBundle:
    """Analytic vjp through the whole layer, sampler blend weights included."""
    cfg: LayerConfig = cache["cfg"]
    params: LayerParams = cache["params"]
    pre = cfg.ln_position == "pre"
    post = cfg.ln_position == "post"
    grads: dict[str, np.ndarray] = {}
    d_out = np.asarray(upstream, dtype=np.float64)

    # feed-forward half-block
    if post:
        d_z, d_sc2, d_sh2 = _ln_backward(d_out, cache["ln2"], params.ln2_scale)
        grads["ln2_scale"], grads["ln2_shift"] = d_sc2, d_sh2
    else:
        d_z = d_out
    d_yout = d_z.copy()
    d_f = _apply(d_z, cache["mask_tok2"])
    grads["ffn_w2"] = cache["hidden_d"].T @ d_f
    grads["ffn_b2"] = d_f.sum(axis=0)
    d_hidden_d = d_f @ params.ffn_w2.T
    d_hidden = _apply(d_hidden_d, cache["mask_ffn"])
    if cfg.ffn_activation == "gelu":
        d_pre = d_hidden * gelu_grad(cache["pre_act"])
    else:
        d_pre = d_hidden
    grads["ffn_w1"] = cache["u2"].T @ d_pre
    grads["ffn_b1"] = d_pre.sum(axis=0)
    d_u2 = d_pre @ params.ffn_w1.T
    if pre:
        d_from_ln2, d_sc2, d_sh2 = _ln_backward(d_u2, cache["ln2"], params.ln2_scale)
        grads["ln2_scale"], grads["ln2_shift"] = d_sc2, d_sh2
        d_yout += d_from_ln2
    else:
        d_yout += d_u2
    if not pre and not post:
        grads["ln2_scale"] = np.zeros_like(params.ln2_scale)
        grads["ln2_shift"] = np.zeros_like(params.ln2_shift)

    # attention half-block
    if post:
        d_y, d_sc1, d_sh1 = _ln_backward(d_yout, cache["ln1"], params.ln1_scale)
        grads["ln1_scale"], grads["ln1_shift"] = d_sc1, d_sh1
    else:
        d_y = d_yout
    d_x = d_y.copy()
    d_delta = _apply(d_y, cache["mask_tok1"])
    bundle = attn_delta_backward(cache["attn_cache"], d_delta)
    for key, val in bundle.params.items():
        grads[f"attn.{key}"] = val
    d_u1 = bundle.d_x
    if cache["svjp"] is not None:
        k = cache["plan"].k
        zero_up = np.zeros((k, cache["x"].shape[1]))
        dx_s, d_ws, d_bs = cache["svjp"](zero_up, d_wtop=bundle.d_wtop, d_wrand=bundle.d_wrand)
        d_u1 = d_u1 + dx_s
        grads["sampler.w_s"] = d_ws
        grads["sampler.b_s"] = np.array(d_bs)
    else:
        grads["sampler.w_s"] = np.zeros_like(params.sampler.w_s)
        grads["sampler.b_s"] = np.array(0.0)
    if pre:
        d_from_ln1, d_sc1, d_sh1 = _ln_backward(d_u1, cache["ln1"], params.ln1_scale)
        grads["ln1_scale"], grads["ln1_shift"] = d_sc1, d_sh1
        d_x += d_from_ln1
    else:
        d_x += d_u1
    if not pre and not post:
        grads["ln1_scale"] = np.zeros_like(params.ln1_scale)
        grads["ln1_shift"] = np.zeros_like(params.ln1_shift)

    return GradBundle(params=grads, d_x=d_x)


def stack_forward(
    x: np.ndarray,
    x_r,
    layers: list[tuple[LayerParams, LayerConfig]],
    rng: Optional[Rng] = None,
    train: bool = False,
    keep_snapshots: bool = False,
):
    """Apply layers sequentially.  Returns (out, snapshots).

    Snapshots (one per layer, opt-in) retain each layer's output for rank and
    similarity probes.
    """
    out = x
    snapshots: list[np.ndarray] = []
    for i, (params, cfg) in enumerate(layers):
        out, _ = layer_forward(out, x_r, params, cfg, rng.split(i) if rng is not None else None, train)
        if keep_snapshots:
            snapshots.append(out.copy())
    return out, snapshots


# ------------------------------------------------------------ parameter plumbing


def params_to_dict(params: LayerParams) -> dict[str, np.ndarray]:
    out = {f"attn.{k}": v for k, v in params.attn.arrays().items()}
    out["sampler.w_s"] = params.sampler.w_s
    out["sampler.b_s"] = np.array(params.sampler.b_s)
    for name in ("ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln1_scale", "ln1_shift", "ln2_scale", "ln2_shift"):
        out[name] = getattr(params, name)
    return out


def set_params_from_dict(params: LayerParams, d: dict[str, np.ndarray]) -> None:
    for key, val in d.items():
        if key.startswith("attn."):
            setattr(params.attn, key[5:], np.asarray(val, dtype=np.float64))
        elif key == "sampler.w_s":
            params.sampler.w_s = np.asarray(val, dtype=np.float64).reshape(-1, 1)
        elif key == "sampler.b_s":
            params.sampler.b_s = float(np.asarray(val).reshape(-1)[0])
        else:
            setattr(params, key, np.asarray(val, dtype=np.float64))


def flatten_dict(d: dict[str, np.ndarray]):
    keys = sorted(d.keys())
    flat = np.concatenate([np.asarray(d[k], dtype=np.float64).ravel() for k in keys])
    return keys, flat


def unflatten_dict(keys, flat, template: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    pos = 0
    for k in keys:
        size = int(np.asarray(template[k]).size)
        out[k] = flat[pos : pos + size].reshape(np.asarray(template[k]).shape)
        pos += size
    return out


# ------------------------------------------------------------ serialization


def save_stack(path, layers: list[tuple[LayerParams, LayerConfig]], seed: int | None = None) -> None:
    """Write a stack as a JSON header line plus raw little-endian float64 payload."""
    entries = []
    blobs = []
    offset = 0
    for i, (params, cfg) in enumerate(layers):
        for name, arr in params_to_dict(params).items():
            arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
            entries.append({"name": f"layer{i}/{name}", "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header = {
        "format": "sampleformer-stack-v1",
        "seed": seed,
        "configs": [asdict(cfg) for _, cfg in layers],
        "arrays": entries,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_stack(path) -> tuple[list[tuple[LayerParams, LayerConfig]], int | None]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    if header.get("format") != "sampleformer-stack-v1":
        raise ValueError("unrecognized stack file")
    configs = [LayerConfig(**c) for c in header["configs"]]
    layers = []
    arrays_by_layer: dict[int, dict[str, np.ndarray]] = {}
    for entry in header["arrays"]:
        layer_str, name = entry["name"].split("/", 1)
        idx = int(layer_str.removeprefix("layer"))
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=start).reshape(shape).copy()
        arrays_by_layer.setdefault(idx, {})[name] = arr
    for idx in sorted(arrays_by_layer.keys()):
        cfg = configs[idx]
        params = init_params(Rng(0), cfg)
        set_params_from_dict(params, arrays_by_layer[idx])
        layers.append((params, cfg))
    return layers, header.get("seed")
