"""Whole-image prediction by tiling, per-patch forward passes and stitching."""
from __future__ import annotations

import numpy as np

from .data import plan_patch_grid, stitch_predictions
from .unet import UNetParams, argmax_labels, predict_proba


def predict_tiled(params: UNetParams, rgb: np.ndarray, patch_size: int, stride: int,
                  batch_size: int = 5) -> np.ndarray:
    """C x H x W probabilities for a 3 x H x W image.

    An image exactly one patch in size is run in a single forward pass.
    """
    _, h, w = rgb.shape
    if (h, w) == (patch_size, patch_size):
        return predict_proba(params, rgb)
    grid = plan_patch_grid(h, w, patch_size, stride)
    p = patch_size
    tiles = np.stack([rgb[:, r:r + p, c:c + p] for r, c in grid.origins])
    probs = [predict_proba(params, tiles[i:i + batch_size]) for i in range(0, len(tiles), batch_size)]
    return stitch_predictions(list(np.concatenate(probs)), grid, h, w)


def predict_labels_tiled(params: UNetParams, rgb: np.ndarray, patch_size: int, stride: int) -> np.ndarray:
    return argmax_labels(predict_tiled(params, rgb, patch_size, stride))
