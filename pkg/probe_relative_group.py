"""Probe: dissect a violating pair in the relative-group pseudoconvexity audit."""
import numpy as np

from sampleformer.analysis.convexity import WEIGHT_GROUPS, _gate_signature, _probe
from sampleformer.layer import LayerConfig, init_params, layer_backward, layer_forward, params_to_dict, set_params_from_dict
from sampleformer.numerics import Rng

cfg = LayerConfig(d=4, heads=1, k=6, ln_position="none", mode="sft_maxout_leaky",
                  rpe_dim=2, ffn_activation="linear")
keys = WEIGHT_GROUPS["relative"]
rng = Rng(10)
x = rng.split("tokens").normal((6, 4))
x_r = rng.split("relative").normal((6, 6, 2))

found = 0
for pair in range(4000):
    r = rng.split(pair)
    params = init_params(r.split("init"), cfg)
    base = {k: np.asarray(v, float).copy() for k, v in params_to_dict(params).items() if k in keys}
    flat0 = np.concatenate([base[k].ravel() for k in keys])
    scale = 0.5 * float(np.std(flat0) + 1e-3)
    f1, sig1, grad1 = _probe(params, cfg, x, x_r, (0, 0), True, keys)

    def set_flat(flat):
        pos = 0
        upd = {}
        for k in keys:
            size = base[k].size
            upd[k] = flat[pos:pos + size].reshape(base[k].shape)
            pos += size
        set_params_from_dict(params, upd)

    for attempt in range(40):
        delta = r.split(f"dir{attempt}").normal(flat0.shape) * scale * 0.5 ** (attempt // 6)
        set_flat(flat0 + delta)
        f2, sig2, _ = _probe(params, cfg, x, x_r, (0, 0), False)
        set_params_from_dict(params, base)
        if not np.array_equal(sig1, sig2):
            continue
        if float(grad1 @ delta) >= 0.0 and f2 < f1 - 1e-8:
            print(f"pair {pair}: f1={f1:.9f} f2={f2:.9f} gap={f1-f2:.3e} <g,d>={float(grad1@delta):.3e}")
            # scan the segment finely
            ts = np.linspace(0, 1, 51)
            vals = []
            sig_changes = 0
            for t in ts:
                set_flat(flat0 + t * delta)
                ft, sigt, _ = _probe(params, cfg, x, x_r, (0, 0), False)
                set_params_from_dict(params, base)
                vals.append(ft)
                if not np.array_equal(sigt, sig1):
                    sig_changes += 1
            vals = np.array(vals)
            print(f"  gate changes along segment: {sig_changes}/51")
            print(f"  f along segment: start={vals[0]:.6f} min={vals.min():.6f} "
                  f"argmin={ts[vals.argmin()]:.2f} max={vals.max():.6f} argmax={ts[vals.argmax()]:.2f} end={vals[-1]:.6f}")
            # directional derivative at t=0 via small finite difference
            h = 1e-7
            set_flat(flat0 + h * delta)
            fh, _, _ = _probe(params, cfg, x, x_r, (0, 0), False)
            set_params_from_dict(params, base)
            print(f"  analytic <g,d>={float(grad1@delta):.6e}  fd=({fh - f1:.3e})/h={(fh-f1)/h:.6e}")
            found += 1
            break
    if found >= 3:
        break
print("violations dissected:", found)
