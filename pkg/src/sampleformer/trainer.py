"""Minimal training loop for the toy tasks.

Optimizer: adaptive moments with decoupled weight decay (bias and norm
parameters excluded from decay), global gradient-norm clipping, linear
warmup at the untuned rule ceil(2 / (1 - beta2)) steps, and stepwise decay
per epoch.  The learning-curve harness trains the three attention variants
on the same data and records per-epoch accuracy plus its running maximum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

from .encodings import PointCloud, ToyDatasetSpec, gen_seq_parity, gen_toy_shapes, point_cloud_relative, sinusoid_rpe
from .layer import LayerConfig, LayerParams, init_params, layer_backward, layer_forward, params_to_dict, set_params_from_dict
from .numerics import Rng

__all__ = [
    "OptimState",
    "lr_at",
    "clip_gradients",
    "optimizer_step",
    "ToyModelConfig",
    "ToyModel",
    "TrainResult",
    "prepare_task",
    "train_run",
    "rotation_invariance_gap",
]


@dataclass
class OptimState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    warmup_steps: int | None = None  # None: untuned rule ceil(2 / (1 - beta2))
    step_size: int = 30
    decay_rate: float = 0.8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.warmup_steps is None:
            self.warmup_steps = math.ceil(2.0 / (1.0 - self.betas[1]))


def lr_at(step: int, epoch: int, state: OptimState) -> float:
    """base_lr * min(1, step/warmup) * decay^(epoch // step_size)."""
    if step < 1:
        raise ValueError("step counts from 1")
    warm = min(1.0, step / state.warmup_steps)
    return state.lr * warm * state.decay_rate ** (epoch // state.step_size)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients so the global L2 norm does not exceed max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = math.sqrt(sum(float(np.sum(np.asarray(g) ** 2)) for g in grads.values()))
    if total <= max_norm:
        return grads
    factor = max_norm / total
    return {k: np.asarray(g) * factor for k, g in grads.items()}


def _decays(key: str) -> bool:
    leaf = key.split(".")[-1]
    if leaf.startswith("b_") or leaf.startswith("ln") or leaf.startswith("ffn_b"):
        return False
    if leaf in ("bias", "b"):
        return False
    return True


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState, epoch: int = 0) -> dict[str, np.ndarray]:
    """One decoupled-weight-decay adaptive update; returns new parameter arrays."""
    state.step += 1
    lr = lr_at(state.step, epoch, state)
    b1, b2 = state.betas
    out = {}
    for key, p in params.items():
        g = np.asarray(grads[key], dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {key}")
        if key not in state.m:
            state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        state.m[key] = b1 * state.m[key] + (1 - b1) * g
        state.v[key] = b2 * state.v[key] + (1 - b2) * g * g
        m_hat = state.m[key] / (1 - b1**state.step)
        v_hat = state.v[key] / (1 - b2**state.step)
        new_p = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay > 0 and _decays(key):
            new_p = new_p - lr * state.weight_decay * p
        out[key] = new_p
    return out


# ------------------------------------------------------------ toy classifier


@dataclass
class ToyModelConfig:
    kind: Literal["shapes3d", "seq_parity"]
    mode: str = "sft_maxout_leaky"
    use_rpe: bool = True
    d: int = 32
    heads: int = 2
    n_layers: int = 2
    k: int = 32
    n_classes: int = 4
    d_in: int = 1
    rpe_dim: int = 2
    ln_position: str = "post"


class ToyModel:
    """Input projection -> layer stack -> mean pool -> linear head."""

    def __init__(self, cfg: ToyModelConfig, rng: Rng):
        self.cfg = cfg
        self.layer_cfg = LayerConfig(
            d=cfg.d, heads=cfg.heads, k=cfg.k, ln_position=cfg.ln_position,
            mode=cfg.mode, rpe_dim=cfg.rpe_dim if cfg.use_rpe else 0,
        )
        self.layers: list[LayerParams] = [init_params(rng.split(f"layer{i}"), self.layer_cfg) for i in range(cfg.n_layers)]
        scale_in = math.sqrt(2.0 / cfg.d_in)
        scale_head = math.sqrt(2.0 / cfg.d)
        self.extra = {
            "input.w": rng.split("input").normal((cfg.d_in, cfg.d)) * scale_in,
            "input.b": np.zeros(cfg.d),
            "head.w": rng.split("head").normal((cfg.d, cfg.n_classes)) * scale_head,
            "head.b": np.zeros(cfg.n_classes),
        }

    # --- parameter dict plumbing

    def get_params(self) -> dict[str, np.ndarray]:
        out = dict(self.extra)
        for i, lp in enumerate(self.layers):
            for key, val in params_to_dict(lp).items():
                out[f"layer{i}.{key}"] = val
        return out

    def set_params(self, flat: dict[str, np.ndarray]) -> None:
        for key, val in flat.items():
            if key.startswith("layer"):
                idx, sub = key.split(".", 1)
                set_params_from_dict(self.layers[int(idx.removeprefix("layer"))], {sub: val})
            else:
                self.extra[key] = np.asarray(val, dtype=np.float64)

    # --- forward / backward

    def logits(self, tokens: np.ndarray, x_r, rng: Optional[Rng], train: bool):
        x = tokens @ self.extra["input.w"] + self.extra["input.b"]
        caches = []
        for i in range(self.cfg.n_layers):
            x, cache = layer_forward(
                x, x_r if self.layer_cfg.rpe_dim > 0 else None,
                self.layers[i], self.layer_cfg,
                rng.split(i) if rng is not None else None, train,
            )
            caches.append(cache)
        pooled = x.mean(axis=0)
        logits = pooled @ self.extra["head.w"] + self.extra["head.b"]
        return logits, (tokens, caches, x, pooled)

    def loss_and_grads(self, batch, rng: Optional[Rng], train: bool = True):
        """Mean cross-entropy over the batch plus parameter gradients."""
        grads = {key: np.zeros_like(val) for key, val in self.get_params().items()}
        total_loss = 0.0
        correct = 0
        bs = len(batch)
        for item_idx, (tokens, x_r, label) in enumerate(batch):
            item_rng = rng.split(item_idx) if rng is not None else None
            logits, (tok, caches, x_last, pooled) = self.logits(tokens, x_r, item_rng, train)
            shifted = logits - logits.max()
            logsumexp = math.log(np.exp(shifted).sum())
            probs = np.exp(shifted - logsumexp)
            total_loss += float(logsumexp - shifted[label])
            if int(np.argmax(logits)) == label:
                correct += 1

            d_logits = probs.copy()
            d_logits[label] -= 1.0
            d_logits /= bs
            grads["head.w"] += np.outer(pooled, d_logits)
            grads["head.b"] += d_logits
            d_pooled = self.extra["head.w"] @ d_logits
            d_x = np.tile(d_pooled / x_last.shape[0], (x_last.shape[0], 1))
            for i in reversed(range(self.cfg.n_layers)):
                bundle = layer_backward(caches[i], d_x)
                for key, val in bundle.params.items():
                    grads[f"layer{i}.{key}"] += val
                d_x = bundle.d_x
            grads["input.w"] += tok.T @ d_x
            grads["input.b"] += d_x.sum(axis=0)
        return total_loss / bs, correct / bs, grads


# ------------------------------------------------------------ tasks and the loop


def prepare_task(
    spec: ToyDatasetSpec,
    rpe_dim_seq: int = 4,
    tokens: str = "ones",
    rotate: bool = False,
    rescale: bool = False,
):
    """Materialize (tokens, relative tensor, label) triples for both splits.

    For shapes, tokens are either all-ones rows (the rotation-invariant
    configuration, d_in = 1) or raw coordinates (d_in = 3).  rotate applies
    an independent seeded rotation to every cloud, which leaves the relative
    channels untouched but scrambles raw-coordinate tokens; rescale
    multiplies each cloud by a uniform factor in [0.6, 1.4], removing the
    radius-histogram shortcut (the normal-dot relative channel is unaffected).
    """
    if spec.kind == "shapes3d":
        from .encodings import random_rotation

        train, test = gen_toy_shapes(spec)
        aug_rng = Rng(spec.seed).split("augmentations")

        def to_item(cloud: PointCloud):
            coords = cloud.coords
            normals = cloud.normals
            if rotate:
                rot = random_rotation(aug_rng)
                coords = coords @ rot.T
                normals = normals @ rot.T
            if rescale:
                coords = coords * aug_rng.gen.uniform(0.6, 1.4)
            cloud = PointCloud(coords=coords, normals=normals, label=cloud.label)
            if tokens == "ones":
                tok = np.ones((spec.n_tokens, 1))
            elif tokens == "coords":
                tok = cloud.coords.copy()
            else:
                raise ValueError("tokens must be 'ones' or 'coords'")
            return tok, point_cloud_relative(cloud), cloud.label

        return [to_item(c) for c in train], [to_item(c) for c in test], (1 if tokens == "ones" else 3), 2
    if spec.kind == "seq_parity":
        train, test = gen_seq_parity(spec)
        rel = sinusoid_rpe(spec.n_tokens, rpe_dim_seq).dense()

        def to_item_seq(pair):
            tokens, label = pair
            onehot = np.zeros((spec.n_tokens, 4))
            onehot[np.arange(spec.n_tokens), tokens] = 1.0
            return onehot, rel, label

        return [to_item_seq(p) for p in train], [to_item_seq(p) for p in test], 4, rpe_dim_seq
    raise ValueError(f"unknown task kind {spec.kind!r}")


@dataclass
class TrainResult:
    rows: list[tuple[int, str, float, float]]
    train_losses: list[float]

    def curve(self, split: str) -> list[float]:
        return [acc for _, s, acc, _ in self.rows if s == split]

    def cumulative_max(self, split: str) -> list[float]:
        return [cm for _, s, _, cm in self.rows if s == split]

    def epochs_to_threshold(self, threshold: float, split: str = "test") -> int | None:
        for epoch, s, _, cm in self.rows:
            if s == split and cm >= threshold:
                return epoch
        return None


def _evaluate(model: ToyModel, items) -> float:
    correct = 0
    for tokens, x_r, label in items:
        logits, _ = model.logits(tokens, x_r, None, train=False)
        if int(np.argmax(logits)) == label:
            correct += 1
    return correct / len(items)


def train_run(
    model_cfg: ToyModelConfig,
    task,
    epochs: int,
    state: OptimState,
    rng: Rng,
    batch_size: int = 32,
) -> TrainResult:
    """Train one model; deterministic given the rng seed.

    Records per-epoch train/test accuracy with running maxima; aborts with a
    diagnostic if the loss goes non-finite.
    """
    train_items, test_items, d_in, rpe_dim = task
    model = ToyModel(model_cfg, rng.split("init"))
    rows: list[tuple[int, str, float, float]] = []
    losses: list[float] = []
    best = {"train": 0.0, "test": 0.0}
    order_rng = rng.split("order")
    step_rng = rng.split("steps")
    for epoch in range(epochs):
        order = order_rng.permutation(len(train_items))
        epoch_loss = 0.0
        epoch_acc = 0.0
        n_batches = 0
        for start in range(0, len(train_items), batch_size):
            batch = [train_items[i] for i in order[start : start + batch_size]]
            loss, acc, grads = model.loss_and_grads(batch, step_rng.split(state.step), train=True)
            if not math.isfinite(loss):
                raise FloatingPointError(
                    f"training diverged: non-finite loss at epoch {epoch}, step {state.step}"
                )
            epoch_loss += loss
            epoch_acc += acc
            n_batches += 1
            grads = clip_gradients(grads, state.clip_norm)
            model.set_params(optimizer_step(model.get_params(), grads, state, epoch))
        losses.append(epoch_loss / max(n_batches, 1))
        # running batch accuracy stands in for a separate train-set pass
        train_acc = epoch_acc / max(n_batches, 1)
        test_acc = _evaluate(model, test_items)
        best["train"] = max(best["train"], train_acc)
        best["test"] = max(best["test"], test_acc)
        rows.append((epoch, "train", train_acc, best["train"]))
        rows.append((epoch, "test", test_acc, best["test"]))
    result = TrainResult(rows=rows, train_losses=losses)
    result.model = model  # retained for invariance probes and checkpoints
    return result


def rotation_invariance_gap(model: ToyModel, clouds: list[PointCloud], n_rotations: int, rng: Rng) -> float:
    """Max |logit difference| between each cloud and its rotated copies (eval mode)."""
    from .encodings import random_rotation

    worst = 0.0
    for cloud in clouds:
        tokens = np.ones((cloud.coords.shape[0], 1))
        base, _ = model.logits(tokens, point_cloud_relative(cloud), None, train=False)
        for _ in range(n_rotations):
            rot = random_rotation(rng)
            turned = PointCloud(coords=cloud.coords @ rot.T, normals=cloud.normals @ rot.T, label=cloud.label)
            out, _ = model.logits(tokens, point_cloud_relative(turned), None, train=False)
            worst = max(worst, float(np.abs(out - base).max()))
    return worst
