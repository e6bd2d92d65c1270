"""PNG export of attention-head argmax maps and patch-embedding PCA."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from satdino.augment import Normalization, resize, to_float_image
from satdino.evaluation import pca_patch_projection
from satdino.vit import VisionTransformer, attention_head_map

# one colour per attention head (repeats past 12 heads)
HEAD_COLOURS = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230],
    [210, 245, 60], [250, 190, 212], [0, 128, 128], [170, 110, 40],
], dtype=np.uint8)


def _model_input(image: np.ndarray, input_size: int, norm: Normalization) -> torch.Tensor:
    return norm.apply(resize(to_float_image(image), input_size))


def _upsample(grid: np.ndarray, size: int) -> np.ndarray:
    gh, gw = grid.shape[:2]
    rows = np.arange(size) * gh // size
    cols = np.arange(size) * gw // size
    return grid[rows][:, cols]


def attention_image(model: VisionTransformer, image: np.ndarray, input_size: int,
                    norm: Normalization) -> np.ndarray:
    """Colour each patch by the head with the strongest [CLS] attention."""
    dtype = next(model.parameters()).dtype
    _, argmax = attention_head_map(model, _model_input(image, input_size, norm).to(dtype))
    colours = HEAD_COLOURS[argmax.numpy() % len(HEAD_COLOURS)]
    return _upsample(colours, input_size)


@torch.no_grad()
def pca_image(model: VisionTransformer, image: np.ndarray, input_size: int,
              norm: Normalization) -> np.ndarray:
    """First three principal components of the patch embeddings as RGB."""
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        out = model(_model_input(image, input_size, norm).to(dtype).unsqueeze(0))
    finally:
        model.train(was_training)
    grid = pca_patch_projection(out.patch_embeddings[0].double().numpy(), out.grid)
    return _upsample(np.round(grid * 255).astype(np.uint8), input_size)


def side_by_side(image: np.ndarray, overlay: np.ndarray) -> np.ndarray:
    """Resized input next to ``overlay`` (both input_size square)."""
    size = overlay.shape[0]
    src = resize(to_float_image(image), size).clamp(0, 1)
    src = np.round(src.permute(1, 2, 0).numpy() * 255).astype(np.uint8)
    return np.concatenate([src, overlay], axis=1)


def write_png(path, image: np.ndarray) -> Path:
    from satdino.data import save_image

    save_image(path, image)
    return Path(path)
