"""Crop-window sampling for global and local views.

Area fractions are drawn uniformly and aspect ratios log-uniformly, following
the usual random-resized-crop recipe. Integer crop sides are obtained with
stochastic rounding so that the realised area fraction stays unbiased, and a
draw is only accepted when the integer rectangle honours both the area and
aspect bounds exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from satdino.exceptions import ConfigurationError

STRATEGIES = ("random", "uniform", "variable-size")

# Local output sizes used by the variable-size strategy at 224/96 resolution.
REFERENCE_VARIABLE_SIZES = (192, 176, 144, 128, 112, 96)
REFERENCE_LOCAL_OUT = 96

MAX_RETRIES = 10


@dataclass(frozen=True)
class ScaleRange:
    lo: float
    hi: float

    def __post_init__(self):
        if not (0.0 < self.lo <= self.hi <= 1.0):
            raise ConfigurationError(f"invalid scale range [{self.lo}, {self.hi}]")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lo + self.hi)


@dataclass(frozen=True)
class AspectRange:
    lo: float
    hi: float

    def __post_init__(self):
        if not (0.0 < self.lo <= self.hi):
            raise ConfigurationError(f"invalid aspect range [{self.lo}, {self.hi}]")


@dataclass(frozen=True)
class CropWindow:
    x: int
    y: int
    w: int
    h: int
    out_size: int
    effective_gsd: float

    def area_fraction(self, src_w: int, src_h: int) -> float:
        return self.w * self.h / (src_w * src_h)


@dataclass(frozen=True)
class ViewSpecConfig:
    """Geometry of the 2 global and ``n_local`` local views of one sample."""

    n_local: int = 8
    local_scale: ScaleRange = ScaleRange(0.05, 0.25)
    global_scale: ScaleRange = ScaleRange(0.25, 1.0)
    strategy: str = "random"
    aspect: AspectRange = AspectRange(3 / 4, 4 / 3)
    global_out: int = 224
    local_out: int = 96
    variable_sizes: tuple = field(default=())

    n_global = 2

    def __post_init__(self):
        if self.n_local < 0:
            raise ConfigurationError("n_local must be >= 0")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(
                f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}"
            )
        if self.global_out < 1 or self.local_out < 1:
            raise ConfigurationError("output sizes must be positive")
        if self.strategy == "variable-size" and len(self.variable_sizes) != self.n_local:
            raise ConfigurationError(
                f"variable-size strategy needs {self.n_local} sizes, "
                f"got {len(self.variable_sizes)}"
            )

    @property
    def n_views(self) -> int:
        return self.n_global + self.n_local

    def local_out_sizes(self) -> list[int]:
        if self.strategy == "variable-size":
            return [int(s) for s in self.variable_sizes]
        return [self.local_out] * self.n_local


def default_variable_sizes(n_local: int, local_out: int = REFERENCE_LOCAL_OUT,
                           multiple: int = 1) -> tuple[int, ...]:
    """Variable-size output sides for ``n_local`` views.

    The reference list is rescaled by ``local_out / 96`` and rounded to a
    multiple of ``multiple`` (the patch size). With fewer than six views the
    largest ones are kept.
    """
    if not 1 <= n_local <= len(REFERENCE_VARIABLE_SIZES):
        raise ConfigurationError(
            f"no default variable sizes for {n_local} local views"
        )
    ratio = local_out / REFERENCE_LOCAL_OUT
    sizes = []
    for s in REFERENCE_VARIABLE_SIZES[:n_local]:
        scaled = max(multiple, int(round(s * ratio / multiple)) * multiple)
        sizes.append(scaled)
    return tuple(sizes)


def effective_gsd(src_gsd: float, crop_w: float, crop_h: float, out_size: float) -> float:
    """Ground sample distance of a crop after resizing it to ``out_size``.

    Non-square crops use the geometric mean of the two sides.
    """
    if src_gsd <= 0 or crop_w <= 0 or crop_h <= 0 or out_size <= 0:
        raise ValueError(
            f"effective_gsd needs positive inputs, got "
            f"({src_gsd}, {crop_w}, {crop_h}, {out_size})"
        )
    return src_gsd * math.sqrt(crop_w * crop_h) / out_size


def uniform_subranges(scale: ScaleRange, n: int) -> list[ScaleRange]:
    """Split ``scale`` into ``n`` equal, contiguous, ascending subranges."""
    if n < 1:
        raise ConfigurationError("need at least one subrange")
    edges = [scale.lo + (scale.hi - scale.lo) * i / n for i in range(n)] + [scale.hi]
    return [ScaleRange(edges[i], edges[i + 1]) for i in range(n)]


def _stochastic_round(value: float, rng: np.random.Generator) -> int:
    base = math.floor(value)
    return base + int(rng.random() < value - base)


def _fallback_window(src_w, src_h, scale, aspect, out_size, src_gsd) -> CropWindow:
    # centered crop, aspect clamped to bounds, as large as the scale range allows
    src_ratio = src_w / src_h
    ratio = min(max(src_ratio, aspect.lo), aspect.hi)
    target = scale.hi * src_w * src_h
    w = min(src_w, math.sqrt(target * ratio))
    h = w / ratio
    if h > src_h:
        h = src_h
        w = h * ratio
    w = max(1, min(src_w, int(w)))
    h = max(1, min(src_h, int(h)))
    x = (src_w - w) // 2
    y = (src_h - h) // 2
    return CropWindow(x, y, w, h, out_size, effective_gsd(src_gsd, w, h, out_size))


def sample_crop(src_w: int, src_h: int, scale: ScaleRange, aspect: AspectRange,
                out_size: int, src_gsd: float, rng: np.random.Generator,
                max_retries: int = MAX_RETRIES) -> CropWindow:
    """Draw one crop rectangle whose area fraction lies in ``scale``.

    Returns a centered fallback crop when no feasible rectangle is found
    within ``max_retries`` attempts.
    """
    if src_w < 1 or src_h < 1:
        raise ConfigurationError(f"invalid source size {src_w}x{src_h}")
    area = src_w * src_h
    log_lo, log_hi = math.log(aspect.lo), math.log(aspect.hi)
    lo_px, hi_px = scale.lo * area, scale.hi * area
    for _ in range(max_retries):
        target = area * rng.uniform(scale.lo, scale.hi)
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        w = _stochastic_round(math.sqrt(target * ratio), rng)
        if not 1 <= w <= src_w:
            continue
        h = _stochastic_round(target / w, rng)
        if not 1 <= h <= src_h:
            continue
        if not lo_px <= w * h <= hi_px:
            continue
        if not aspect.lo <= w / h <= aspect.hi:
            continue
        x = int(rng.integers(0, src_w - w + 1))
        y = int(rng.integers(0, src_h - h + 1))
        return CropWindow(x, y, w, h, out_size, effective_gsd(src_gsd, w, h, out_size))
    return _fallback_window(src_w, src_h, scale, aspect, out_size, src_gsd)


def sample_view_windows(src_w: int, src_h: int, src_gsd: float, cfg: ViewSpecConfig,
                        rng: np.random.Generator) -> list[CropWindow]:
    """Windows for 2 global views followed by ``cfg.n_local`` local views."""
    windows = [
        sample_crop(src_w, src_h, cfg.global_scale, cfg.aspect, cfg.global_out, src_gsd, rng)
        for _ in range(cfg.n_global)
    ]
    if cfg.n_local == 0:
        return windows
    if cfg.strategy == "uniform":
        ranges = uniform_subranges(cfg.local_scale, cfg.n_local)
    else:
        ranges = [cfg.local_scale] * cfg.n_local
    for scale, out in zip(ranges, cfg.local_out_sizes()):
        windows.append(sample_crop(src_w, src_h, scale, cfg.aspect, out, src_gsd, rng))
    return windows
