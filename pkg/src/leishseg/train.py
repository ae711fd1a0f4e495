"""Mini-batch Adam training of the U-Net under two-stage patch sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Patch, SamplerConfig, augment_arrays, epoch_rng, one_hot, random_augmentation, sample_epoch, stage1_pool
from .losses import generalized_dice_loss
from .tensor import NonFiniteError
from .unet import UNetParams, backward, forward


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = True
    strict: bool = True
    sampler: SamplerConfig = field(default_factory=SamplerConfig)


def stack_batch(patches: Sequence[Patch], dtype, num_classes: int):
    x = np.stack([p.rgb for p in patches]).astype(dtype, copy=False)
    r = one_hot(np.stack([p.labels for p in patches]), num_classes, dtype=dtype)
    return x, r


def train_step(params: UNetParams, x: np.ndarray, r: np.ndarray, cfg: TrainConfig) -> float:
    probs, cache = forward(params, x, training=True)
    loss, grad = generalized_dice_loss(probs, r)
    if not math.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss}")
    backward(params, cache, grad)
    params.adam_step(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, strict=cfg.strict)
    return loss


def batch_loss(params: UNetParams, patches: Sequence[Patch], batch_size: int) -> float:
    """Mean GDL over fixed consecutive batches, no parameter update."""
    if not patches:
        return float("nan")
    losses = []
    for i in range(0, len(patches), batch_size):
        x, r = stack_batch(patches[i:i + batch_size], params.config.dtype, params.config.num_classes)
        probs, _ = forward(params, x, training=False)
        losses.append(generalized_dice_loss(probs, r)[0])
    return float(np.mean(losses))


def run_epoch(params: UNetParams, patches: Sequence[Patch], epoch: int, cfg: TrainConfig,
              pool: list[int] | None = None) -> float:
    rng = epoch_rng(cfg.sampler.seed, epoch)
    order = sample_epoch(patches, epoch, cfg.sampler, rng, pool=pool)
    losses = []
    for i in range(0, len(order), cfg.batch_size):
        chunk = order[i:i + cfg.batch_size]
        if cfg.augment:
            chunk = [Patch(*augment_arrays(p.rgb, p.labels, random_augmentation(rng)), p.image_id, p.origin)
                     for p in chunk]
        x, r = stack_batch(chunk, params.config.dtype, params.config.num_classes)
        losses.append(train_step(params, x, r, cfg))
    return float(np.mean(losses))


def train(params: UNetParams, train_patches: Sequence[Patch], val_patches: Sequence[Patch],
          cfg: TrainConfig, start_epoch: int = 0,
          on_epoch_end: Callable[[int, float, float], None] | None = None) -> list[tuple[int, float, float]]:
    """Run epochs ``start_epoch .. total_epochs - 1``; returns (epoch, train, val) rows.

    ``on_epoch_end(epoch, train_loss, val_loss)`` is called after every epoch.
    """
    pool = stage1_pool(train_patches, cfg.sampler) if cfg.sampler.stage1_epochs > start_epoch else None
    history = []
    for epoch in range(start_epoch, cfg.sampler.total_epochs):
        tr = run_epoch(params, train_patches, epoch, cfg, pool)
        va = batch_loss(params, val_patches, cfg.batch_size) if val_patches else float("nan")
        history.append((epoch, tr, va))
        if on_epoch_end is not None:
            on_epoch_end(epoch, tr, va)
    return history
