"""Probe: isolate kernel monotonicity and steadier rep strategy."""
import math
import time

import numpy as np

from sampleformer._kernels import maxout_score_kernel
from sampleformer.layer import LayerConfig, init_params, layer_forward
from sampleformer.numerics import Rng
from threadpoolctl import threadpool_limits


def kernel_only(n=1024, d=64, reps=30):
    rng = Rng(0)
    q = rng.normal((n, d))
    print("maxout kernel alone:")
    for k in (32, 64, 128, 256, 512):
        kk = rng.normal((k, d))
        maxout_score_kernel(q, kk, 1.0 / math.sqrt(d))
        ts = []
        for _ in range(reps):
            t0 = time.perf_counter()
            maxout_score_kernel(q, kk, 1.0 / math.sqrt(d))
            ts.append(time.perf_counter() - t0)
        print(f"  k={k:4d}: median={np.median(ts)*1e3:7.3f} ms min={min(ts)*1e3:7.3f}")


def layer_calls_per_rep(n=1024, d=64, heads=1, reps=9, calls=3):
    rng = Rng(0)
    x = rng.normal((n, d))
    ks = [n // 32, n // 16, n // 8, n // 4, n // 2]
    configs = []
    for k in ks:
        cfg = LayerConfig(d=d, heads=heads, k=k, mode="sft_maxout_leaky", ln_position="post")
        configs.append((k, cfg, init_params(Rng(1), cfg)))
    cfg_ref = LayerConfig(d=d, heads=heads, k=n, mode="softmax_dot", ln_position="post")
    configs.append((n, cfg_ref, init_params(Rng(1), cfg_ref)))
    for _, cfg, p in configs:
        layer_forward(x, None, p, cfg, train=False)
        layer_forward(x, None, p, cfg, train=False)
    med = []
    for idx, (k, cfg, p) in enumerate(configs):
        pass
    times = {i: [] for i in range(len(configs))}
    for rep in range(reps):
        for i, (k, cfg, p) in enumerate(configs):
            t0 = time.perf_counter()
            for _ in range(calls):
                layer_forward(x, None, p, cfg, train=False)
            times[i].append((time.perf_counter() - t0) / calls)
    print(f"\nlayer, {calls} calls per rep, {reps} reps:")
    meds = []
    for i, (k, cfg, p) in enumerate(configs):
        ts = np.array(times[i])
        meds.append(np.median(ts))
        print(f"  k={k:5d}: median={np.median(ts)*1e3:8.2f} ms  min={ts.min()*1e3:8.2f}")
    print("monotone:", all(meds[i+1] >= meds[i] for i in range(len(ks)-1)), " ratio:", meds[len(ks)-1]/meds[len(ks)])


if __name__ == "__main__":
    with threadpool_limits(limits=1):
        kernel_only()
        layer_calls_per_rep()
