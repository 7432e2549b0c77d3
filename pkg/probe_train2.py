"""Probe: leaner toy config with the untuned warmup at beta2 = 0.99."""
import time

from sampleformer.encodings import ToyDatasetSpec
from sampleformer.numerics import Rng
from sampleformer.trainer import OptimState, ToyModelConfig, prepare_task, train_run

spec = ToyDatasetSpec(kind="shapes3d", n_tokens=64, n_classes=4, n_train=192, n_test=64, noise=0.02, seed=5)
task = prepare_task(spec)

for label, mode, use_rpe, k in (
    ("sft+rpe", "sft_maxout_leaky", True, 16),
    ("softmax+rpe", "softmax_dot", True, 16),
    ("vanilla", "softmax_dot", False, 64),
):
    t0 = time.time()
    cfg = ToyModelConfig(kind="shapes3d", mode=mode, use_rpe=use_rpe, d=24, heads=2,
                         n_layers=2, k=k, n_classes=4, d_in=1, rpe_dim=2)
    state = OptimState(lr=1e-3, betas=(0.9, 0.99), weight_decay=0.1, clip_norm=1.0)
    res = train_run(cfg, task, epochs=60, state=state, rng=Rng(1), batch_size=16)
    test_curve = res.curve("test")
    print(f"{label:12s}: {time.time()-t0:6.1f}s  loss {res.train_losses[0]:.3f}->{res.train_losses[-1]:.3f}  "
          f"test@10s {[f'{a:.2f}' for a in test_curve[::10]]} final {test_curve[-1]:.2f} best {max(test_curve):.2f}")
