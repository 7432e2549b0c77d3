"""Throwaway probe: single-thread layer forward timing, sparse vs dense reference."""
import time

import numpy as np

from sampleformer.layer import LayerConfig, init_params, layer_forward
from sampleformer.numerics import Rng

try:
    from threadpoolctl import threadpool_limits
    HAVE_TPC = True
except ImportError:
    HAVE_TPC = False
    print("threadpoolctl not available")


def bench(n=1024, d=64, heads=1, reps=10):
    rng = Rng(0)
    x = rng.normal((n, d))
    rows = []
    ks = [n // 32, n // 16, n // 8, n // 4, n // 2]
    for k in ks:
        cfg = LayerConfig(d=d, heads=heads, k=k, mode="sft_maxout_leaky", ln_position="post")
        p = init_params(Rng(1), cfg)
        layer_forward(x, None, p, cfg, train=False)  # warmup (jit, caches)
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            layer_forward(x, None, p, cfg, train=False)
            times.append(time.perf_counter() - t0)
        rows.append(("sft", k, np.median(times), np.mean(times)))
    cfg_ref = LayerConfig(d=d, heads=heads, k=n, mode="softmax_dot", ln_position="post")
    p_ref = init_params(Rng(1), cfg_ref)
    layer_forward(x, None, p_ref, cfg_ref, train=False)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        layer_forward(x, None, p_ref, cfg_ref, train=False)
        times.append(time.perf_counter() - t0)
    rows.append(("softmax-ref", n, np.median(times), np.mean(times)))
    return rows


if __name__ == "__main__":
    def run():
        for tag, k, med, mean in bench():
            print(f"{tag:12s} k={k:5d}  median={med*1e3:8.2f} ms  mean={mean*1e3:8.2f} ms")

    if HAVE_TPC:
        with threadpool_limits(limits=1):
            run()
    else:
        run()
