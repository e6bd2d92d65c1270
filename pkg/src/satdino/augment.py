"""Photometric augmentation, temporal source selection and view assembly."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from satdino.data import GeoSample
from satdino.exceptions import ConfigurationError, DataError
from satdino.geometry import CropWindow, ViewSpecConfig, effective_gsd, sample_view_windows

LEVELS = ("none", "soft", "mid", "default")
LEVEL_SCALE = {"none": 0.0, "soft": 0.25, "mid": 0.75, "default": 1.0}

# Probabilities that follow the intensity level. Flip is deliberately absent.
PHOTOMETRIC_FIELDS = (
    "jitter_p",
    "grayscale_p",
    "blur_p_global1",
    "blur_p_global2",
    "blur_p_local",
    "solarize_p_global2",
)

# Color-jitter magnitudes and blur sigma range, expressed at 224 px.
BRIGHTNESS = 0.4
CONTRAST = 0.4
SATURATION = 0.2
HUE = 0.1
BLUR_SIGMA = (0.1, 2.0)
BLUR_REFERENCE_SIZE = 224


@dataclass(frozen=True)
class AugProfile:
    level: str = "default"
    flip_p: float = 0.5
    jitter_p: float = 0.8
    grayscale_p: float = 0.2
    blur_p_global1: float = 1.0
    blur_p_global2: float = 0.1
    blur_p_local: float = 0.5
    solarize_p_global2: float = 0.2
    temporal: bool = False

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ConfigurationError(f"unknown augmentation level {self.level!r}")
        for name in ("flip_p",) + PHOTOMETRIC_FIELDS:
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"{name}={p} is not a probability")
        if self.level == "none" and any(getattr(self, n) for n in PHOTOMETRIC_FIELDS):
            raise ConfigurationError("level 'none' requires zero photometric probabilities")


def scale_intensity(base: AugProfile, level: str) -> AugProfile:
    """Rescale the photometric probabilities of a ``default`` profile."""
    if base.level != "default":
        raise ConfigurationError("intensity scaling starts from the default profile")
    if level not in LEVEL_SCALE:
        raise ConfigurationError(f"unknown augmentation level {level!r}")
    if level == "default":
        return base
    factor = LEVEL_SCALE[level]
    scaled = {name: getattr(base, name) * factor for name in PHOTOMETRIC_FIELDS}
    return replace(base, level=level, **scaled)


def make_profile(level: str = "default", temporal: bool = False) -> AugProfile:
    return scale_intensity(AugProfile(temporal=temporal), level)


@dataclass(frozen=True)
class Normalization:
    mean: tuple = (0.0, 0.0, 0.0)
    std: tuple = (1.0, 1.0, 1.0)

    def apply(self, img: torch.Tensor) -> torch.Tensor:
        mean = torch.tensor(self.mean, dtype=img.dtype).view(-1, 1, 1)
        std = torch.tensor(self.std, dtype=img.dtype).view(-1, 1, 1)
        return (img - mean) / std


@dataclass
class ViewBatch:
    """Augmented views of one source sample, globals first."""

    global_views: list
    local_views: list
    gsd_targets: np.ndarray
    source_id: object = None
    windows: list = field(default_factory=list)

    @property
    def views(self) -> list:
        return list(self.global_views) + list(self.local_views)


def select_temporal_sources(series: Sequence[GeoSample], rng: np.random.Generator):
    """Pick sources for (global 1, global 2, locals) from one time series."""
    n = len(series)
    if n == 0:
        raise DataError("temporal source selection needs a non-empty series")
    if n == 1:
        return series[0], series[0], series[0]
    if n == 2:
        order = rng.permutation(2)
        local = series[int(rng.integers(2))]
        return series[order[0]], series[order[1]], local
    a, b, c = rng.choice(n, size=3, replace=False)
    return series[a], series[b], series[c]


def to_float_image(image: np.ndarray) -> torch.Tensor:
    """HxWx3 uint8 array to a 3xHxW float tensor in [0, 1]."""
    arr = np.ascontiguousarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"expected an HxWx3 image, got shape {arr.shape}")
    t = torch.from_numpy(arr).permute(2, 0, 1)
    if t.dtype == torch.uint8:
        return t.float().div_(255.0)
    return t.float()


def resize(img: torch.Tensor, size: int | tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a CxHxW tensor (antialiased when shrinking)."""
    if isinstance(size, int):
        size = (size, size)
    if tuple(img.shape[-2:]) == tuple(size):
        return img
    out = F.interpolate(img.unsqueeze(0), size=size, mode="bilinear",
                        align_corners=False, antialias=True)
    return out.squeeze(0)


def crop_resize(img: torch.Tensor, window: CropWindow) -> torch.Tensor:
    patch = img[:, window.y:window.y + window.h, window.x:window.x + window.w]
    return resize(patch, window.out_size)


def _color_jitter(img: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    ops = rng.permutation(4)
    b = rng.uniform(1 - BRIGHTNESS, 1 + BRIGHTNESS)
    c = rng.uniform(1 - CONTRAST, 1 + CONTRAST)
    s = rng.uniform(1 - SATURATION, 1 + SATURATION)
    h = rng.uniform(-HUE, HUE)
    for op in ops:
        if op == 0:
            img = TF.adjust_brightness(img, b)
        elif op == 1:
            img = TF.adjust_contrast(img, c)
        elif op == 2:
            img = TF.adjust_saturation(img, s)
        else:
            img = TF.adjust_hue(img, h)
    return img


def _blur(img: torch.Tensor, rng: np.random.Generator, scale: float) -> torch.Tensor:
    sigma = rng.uniform(*BLUR_SIGMA) * scale
    radius = max(1, int(math.ceil(3 * sigma)))
    return TF.gaussian_blur(img, [2 * radius + 1] * 2, [sigma, sigma])


def photometric(img: torch.Tensor, aug: AugProfile, blur_p: float, solarize_p: float,
                rng: np.random.Generator, blur_scale: float = 1.0) -> torch.Tensor:
    """Apply flip, jitter, grayscale, blur and solarize in that order."""
    if rng.random() < aug.flip_p:
        img = TF.hflip(img)
    if rng.random() < aug.jitter_p:
        img = _color_jitter(img, rng)
    if rng.random() < aug.grayscale_p:
        img = TF.rgb_to_grayscale(img, num_output_channels=3)
    if rng.random() < blur_p:
        img = _blur(img, rng, blur_scale)
    if rng.random() < solarize_p:
        img = TF.solarize(img, 0.5)
    return img


def build_views(source, view_cfg: ViewSpecConfig, aug: AugProfile,
                rng: np.random.Generator,
                norm: Normalization | None = None) -> ViewBatch:
    """Crop, resize, augment and normalize all views of one sample.

    ``source`` is a single :class:`GeoSample` or, for temporal augmentation,
    a sequence of samples from the same time series.
    """
    norm = norm or Normalization()
    if isinstance(source, GeoSample):
        series = [source]
    else:
        series = list(source)
        if not series:
            raise DataError("empty series")
        ids = {s.series_id for s in series}
        if len(ids) > 1:
            raise DataError(f"samples from different series: {sorted(map(str, ids))}")
    if aug.temporal:
        g1, g2, loc = select_temporal_sources(series, rng)
    else:
        g1 = g2 = loc = series[0]
    per_view = [g1, g2] + [loc] * view_cfg.n_local
    h, w = g1.image.shape[:2]
    for s in (g2, loc):
        if s.image.shape[:2] != (h, w):
            raise DataError("series images must share dimensions")

    # geometry is drawn once, then each window is re-targeted at its source's GSD
    windows = sample_view_windows(w, h, 1.0, view_cfg, rng)
    windows = [
        CropWindow(win.x, win.y, win.w, win.h, win.out_size,
                   effective_gsd(src.gsd, win.w, win.h, win.out_size))
        for win, src in zip(windows, per_view)
    ]
    tensors = {}
    for src in {id(s): s for s in per_view}.values():
        tensors[id(src)] = to_float_image(src.image)

    blur_scale = view_cfg.global_out / BLUR_REFERENCE_SIZE
    views = []
    for i, (win, src) in enumerate(zip(windows, per_view)):
        img = crop_resize(tensors[id(src)], win)
        if i == 0:
            blur_p, sol_p = aug.blur_p_global1, 0.0
        elif i == 1:
            blur_p, sol_p = aug.blur_p_global2, aug.solarize_p_global2
        else:
            blur_p, sol_p = aug.blur_p_local, 0.0
        img = photometric(img, aug, blur_p, sol_p, rng, blur_scale)
        views.append(norm.apply(img.clamp(0.0, 1.0)))
    return ViewBatch(
        global_views=views[:2],
        local_views=views[2:],
        gsd_targets=np.array([win.effective_gsd for win in windows], dtype=np.float64),
        source_id=g1.sample_id,
        windows=windows,
    )
