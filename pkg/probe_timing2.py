"""Probe: interleaved round-robin timing for stability."""
import time

import numpy as np

from sampleformer.layer import LayerConfig, init_params, layer_forward
from sampleformer.numerics import Rng
from threadpoolctl import threadpool_limits


def bench(n=1024, d=64, heads=1, reps=15):
    rng = Rng(0)
    x = rng.normal((n, d))
    ks = [n // 32, n // 16, n // 8, n // 4, n // 2]
    configs = []
    for k in ks:
        cfg = LayerConfig(d=d, heads=heads, k=k, mode="sft_maxout_leaky", ln_position="post")
        configs.append(("sft", k, cfg, init_params(Rng(1), cfg)))
    cfg_ref = LayerConfig(d=d, heads=heads, k=n, mode="softmax_dot", ln_position="post")
    configs.append(("ref", n, cfg_ref, init_params(Rng(1), cfg_ref)))

    for _, _, cfg, p in configs:  # global warmup: jit + allocator + caches
        layer_forward(x, None, p, cfg, train=False)
        layer_forward(x, None, p, cfg, train=False)

    times = {i: [] for i in range(len(configs))}
    for rep in range(reps):
        for i, (_, _, cfg, p) in enumerate(configs):
            t0 = time.perf_counter()
            layer_forward(x, None, p, cfg, train=False)
            times[i].append(time.perf_counter() - t0)
    for i, (tag, k, _, _) in enumerate(configs):
        ts = np.array(times[i])
        print(f"d={d} {tag:4s} k={k:5d} median={np.median(ts)*1e3:8.2f} ms  "
              f"mean={ts.mean()*1e3:8.2f}  min={ts.min()*1e3:8.2f}  max={ts.max()*1e3:8.2f}")
    meds = [np.median(np.array(times[i])) for i in range(len(ks))]
    print("monotone medians:", all(meds[i+1] >= meds[i] for i in range(len(meds)-1)),
          " ratio(k=n/2 / ref):", np.median(np.array(times[len(ks)-1])) / np.median(np.array(times[len(ks)])))


if __name__ == "__main__":
    with threadpool_limits(limits=1):
        bench(d=64)
        print()
        bench(d=128)
