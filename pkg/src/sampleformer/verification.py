"""Full-layer gradient verification battery.

Sweeps every attention mode, both LayerNorm placements, sampling on/off, and
relative features on/off; for each combination the analytic backward pass is
compared against central finite differences of a random scalar objective over
every parameter group and the input.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .attention import ATTN_MODES
from .layer import (
    LayerConfig,
    flatten_dict,
    init_params,
    layer_backward,
    layer_forward,
    params_to_dict,
    set_params_from_dict,
    unflatten_dict,
)
from .numerics import Rng, finite_diff_grad

__all__ = ["GradcheckResult", "gradcheck_layer_config", "gradcheck_battery"]


@dataclass
class GradcheckResult:
    label: str
    seed: int
    max_rel_err: float
    params_checked: int

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def gradcheck_layer_config(cfg: LayerConfig, seed: int, n: int = 8, h_fd: float = 1e-5) -> GradcheckResult:
    """Max relative error between analytic and finite-difference gradients."""
    rng = Rng(seed)
    params = init_params(rng, cfg)
    x = rng.normal((n, cfg.d))
    x_r = rng.normal((n, n, cfg.rpe_dim)) if cfg.rpe_dim > 0 else None
    u = Rng(seed + 10_000).normal((n, cfg.d))

    out, cache = layer_forward(x, x_r, params, cfg, rng=Rng(seed + 20_000), train=True)
    bundle = layer_backward(cache, u)
    pdict = params_to_dict(params)
    keys, flat0 = flatten_dict(pdict)

    def objective(flat):
        p2 = init_params(Rng(seed), cfg)
        set_params_from_dict(p2, unflatten_dict(keys, flat, pdict))
        out2, _ = layer_forward(x, x_r, p2, cfg, rng=Rng(seed + 20_000), train=True)
        return float(np.sum(out2 * u))

    fd = finite_diff_grad(objective, flat0, h=h_fd)
    analytic = np.concatenate([np.asarray(bundle.params[k]).ravel() for k in keys])
    err = np.abs(analytic - fd) / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(fd)))
    worst = float(err.max())

    def objective_x(xf):
        out2, _ = layer_forward(xf.reshape(n, cfg.d), x_r, params, cfg, rng=Rng(seed + 20_000), train=True)
        return float(np.sum(out2 * u))

    fd_x = finite_diff_grad(objective_x, x.ravel(), h=h_fd)
    err_x = np.abs(bundle.d_x.ravel() - fd_x) / np.maximum(1.0, np.abs(fd_x))
    worst = max(worst, float(err_x.max()))
    label = f"{cfg.mode}/ln={cfg.ln_position}/k={'sampled' if cfg.k < n else 'bypass'}/rpe={cfg.rpe_dim > 0}"
    return GradcheckResult(label=label, seed=seed, max_rel_err=worst, params_checked=len(flat0) + x.size)


def gradcheck_battery(
    base_seed: int = 0,
    n: int = 8,
    d: int = 4,
    heads: int = 2,
    k: int = 3,
    h_fd: float = 1e-5,
) -> list[GradcheckResult]:
    """All mode x LN x sampling x relative combinations, one fresh seed each."""
    results = []
    combos = list(product(ATTN_MODES, ("pre", "post"), (True, False), (True, False)))
    for idx, (mode, ln, sampled, with_rpe) in enumerate(combos):
        cfg = LayerConfig(
            d=d, heads=heads, k=k if sampled else max(n, 2 * k),
            ln_position=ln, mode=mode, rpe_dim=2 if with_rpe else 0,
        )
        results.append(gradcheck_layer_config(cfg, seed=base_seed + idx, n=n, h_fd=h_fd))
    return results
