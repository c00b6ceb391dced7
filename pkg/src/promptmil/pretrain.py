"""Pretrain-lite: a short auxiliary training run that gives the frozen
backbone informative but task-agnostic features.

The auxiliary task is orientation classification of whole-image gratings
over a fine set of angles, read from the class token by a linear probe.
It never sees bags, labels, or the localized witness layout.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .optim import Optimizer, cosine_lr
from .vit import ViT, ViTConfig, encode


def auxiliary_batch(rng, cfg: ViTConfig, batch: int, num_bins: int, noise: float = 0.15):
    size = cfg.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    labels = rng.integers(num_bins, size=batch)
    images = np.empty((batch, size, size, cfg.channels))
    for i, lab in enumerate(labels):
        theta = np.pi * lab / num_bins
        freq = rng.uniform(0.08, 0.2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.1, 0.3)
        g = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        img = 0.5 + amp * g[..., None] + noise * rng.standard_normal((size, size, cfg.channels))
        images[i] = np.clip(img, 0.0, 1.0)
    return images, labels


def pretrain_lite(cfg: ViTConfig, seed: int = 0, steps: int = 300, batch: int = 32,
                  lr: float = 2e-3, num_bins: int = 8, log=None) -> ViT:
    """Train a fresh backbone on the auxiliary task, then freeze and return it."""
    vit = ViT(cfg, seed=seed)
    vit.set_trainable(True)
    rng = np.random.default_rng([seed, 0x5EED])
    probe_w = Tensor(rng.normal(0, 0.02, size=(cfg.embed_dim, num_bins)), requires_grad=True)
    probe_b = Tensor(np.zeros(num_bins), requires_grad=True)
    params = {f"backbone.{k}": v for k, v in vit.params.items()}
    params.update({"probe.weight": probe_w, "probe.bias": probe_b})
    opt = Optimizer(params, "adamw", weight_decay=1e-4)
    for step in range(steps):
        images, labels = auxiliary_batch(rng, cfg, batch, num_bins)
        with Graph():
            feats = encode(images, vit, None)
            logits = ad.matmul(feats, probe_w) + probe_b
            picked = logits[np.arange(batch), labels]
            loss = ad.mean(ad.logsumexp(logits, axis=-1) - picked)
        grads = ad.backward(loss, wrt=list(params.values()))
        opt.step({k: grads[t] for k, t in params.items()}, cosine_lr(step, lr, steps))
        if log is not None and (step % 50 == 0 or step == steps - 1):
            acc = float(np.mean(np.argmax(logits.data, axis=-1) == labels))
            log(f"pretrain step {step}: loss {float(loss.data):.4f} acc {acc:.3f}")
    vit.set_trainable(False)
    return vit
