"""Run configuration as nested dataclasses with a dotted ``key = value`` text format.

Example file::

    # desk-scale uniform sampling run
    views.strategy = uniform
    views.n_local = 10
    views.aspect = [3/4, 4/3]
    loss.gamma = 0.1
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping

from satdino.augment import AugProfile, make_profile
from satdino.dino import DinoHeadConfig, ScheduleConfig
from satdino.exceptions import ConfigurationError
from satdino.geometry import (
    AspectRange,
    ScaleRange,
    ViewSpecConfig,
    default_variable_sizes,
)
from satdino.vit import ViTConfig


@dataclass
class ModelSection:
    variant: str = "tiny"
    patch_size: int = 8
    embed_dim: int = 96
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    use_gsd_token: bool = True


@dataclass
class ViewsSection:
    n_local: int = 8
    local_scale: tuple = (0.05, 0.25)
    global_scale: tuple = (0.25, 1.0)
    strategy: str = "uniform"
    aspect: tuple = (0.75, 4 / 3)
    global_out: int = 64
    local_out: int = 32
    # empty means "derive from the reference sizes" for the variable-size strategy
    variable_sizes: tuple = ()


@dataclass
class AugSection:
    level: str = "default"
    temporal: bool = False


@dataclass
class LossSection:
    gamma: float = 0.1


@dataclass
class HeadSection:
    prototypes: int = 512
    hidden_dim: int = 256
    bottleneck_dim: int = 64
    tau_s: float = 0.1
    tau_t_start: float = 0.04
    tau_t_end: float = 0.04
    tau_t_warmup_epochs: int = 0
    center_momentum: float = 0.9
    # off only for collapse experiments
    centering: bool = True


@dataclass
class OptimSection:
    lr: float = 1e-3
    min_lr: float = 1e-6
    warmup_epochs: float = 2.0
    epochs: int = 20
    batch_size: int = 64
    weight_decay: float = 0.04
    ema_start: float = 0.996
    ema_end: float = 1.0
    clip_grad: float = 3.0
    freeze_last_layer_epochs: int = 1


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    views: ViewsSection = field(default_factory=ViewsSection)
    aug: AugSection = field(default_factory=AugSection)
    loss: LossSection = field(default_factory=LossSection)
    head: HeadSection = field(default_factory=HeadSection)
    optim: OptimSection = field(default_factory=OptimSection)
    seed: int = 0
    exact_repro: bool = True

    # -- construction ---------------------------------------------------
    @classmethod
    def paper(cls) -> "RunConfig":
        """ViT-Small/16 at 224/96 with the published training schedule."""
        cfg = cls()
        cfg.model = ModelSection(variant="small", patch_size=16, embed_dim=384, depth=12, heads=6)
        cfg.views = ViewsSection(global_out=224, local_out=96)
        cfg.head = HeadSection(prototypes=4096, hidden_dim=2048, bottleneck_dim=256,
                               tau_t_end=0.07, tau_t_warmup_epochs=30)
        cfg.optim = OptimSection(warmup_epochs=10.0, epochs=200, freeze_last_layer_epochs=1)
        return cfg

    @classmethod
    def from_file(cls, path, overrides: Mapping[str, Any] | None = None) -> "RunConfig":
        cfg = cls()
        cfg.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
        if overrides:
            cfg.update(overrides)
        cfg.validate()
        return cfg

    def copy(self) -> "RunConfig":
        return dataclasses.replace(
            self, **{f.name: dataclasses.replace(getattr(self, f.name))
                     for f in dataclasses.fields(self)
                     if dataclasses.is_dataclass(getattr(self, f.name))}
        )

    # -- dotted access --------------------------------------------------
    def flat(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in dataclasses.fields(value):
                    out[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
            else:
                out[f.name] = value
        return out

    def get(self, key: str):
        flat = self.flat()
        if key not in flat:
            raise ConfigurationError(f"unknown config key {key!r}")
        return flat[key]

    def set(self, key: str, value) -> None:
        current = self.get(key)
        coerced = coerce(value, current, key)
        parts = key.split(".")
        target = self
        for p in parts[:-1]:
            target = getattr(target, p)
        setattr(target, parts[-1], coerced)

    def update(self, values: Mapping[str, Any]) -> "RunConfig":
        for key, value in values.items():
            self.set(key, value)
        return self

    def to_text(self) -> str:
        lines = [f"{k} = {format_value(v)}" for k, v in sorted(self.flat().items())]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    # -- derived component configs ---------------------------------------
    def vit_config(self) -> ViTConfig:
        m = self.model
        return ViTConfig(patch_size=m.patch_size, embed_dim=m.embed_dim, depth=m.depth,
                         heads=m.heads, mlp_ratio=m.mlp_ratio, use_gsd_token=m.use_gsd_token,
                         img_size=self.views.global_out, variant=m.variant)

    def view_config(self) -> ViewSpecConfig:
        v = self.views
        sizes = tuple(int(s) for s in v.variable_sizes)
        if v.strategy == "variable-size" and not sizes:
            sizes = default_variable_sizes(v.n_local, v.local_out, self.model.patch_size)
        return ViewSpecConfig(
            n_local=v.n_local,
            local_scale=ScaleRange(*v.local_scale),
            global_scale=ScaleRange(*v.global_scale),
            strategy=v.strategy,
            aspect=AspectRange(*v.aspect),
            global_out=v.global_out,
            local_out=v.local_out,
            variable_sizes=sizes,
        )

    def aug_profile(self) -> AugProfile:
        return make_profile(self.aug.level, self.aug.temporal)

    def head_config(self) -> DinoHeadConfig:
        h = self.head
        return DinoHeadConfig(prototypes=h.prototypes, hidden_dim=h.hidden_dim,
                              bottleneck_dim=h.bottleneck_dim, tau_s=h.tau_s,
                              tau_t_start=h.tau_t_start, tau_t_end=h.tau_t_end,
                              tau_t_warmup_epochs=h.tau_t_warmup_epochs,
                              center_momentum=h.center_momentum)

    def schedule_config(self) -> ScheduleConfig:
        o, h = self.optim, self.head
        return ScheduleConfig(lr=o.lr, min_lr=o.min_lr, warmup_epochs=o.warmup_epochs,
                              epochs=o.epochs, ema_start=o.ema_start, ema_end=o.ema_end,
                              tau_t_start=h.tau_t_start, tau_t_end=h.tau_t_end,
                              tau_t_warmup_epochs=h.tau_t_warmup_epochs)

    def validate(self) -> "RunConfig":
        view_cfg = self.view_config()
        self.vit_config()
        self.aug_profile()
        self.head_config()
        if self.loss.gamma < 0:
            raise ConfigurationError("loss.gamma must be non-negative")
        if self.optim.batch_size < 1 or self.optim.epochs < 1:
            raise ConfigurationError("optim.batch_size and optim.epochs must be positive")
        p = self.model.patch_size
        for size in [view_cfg.global_out] + view_cfg.local_out_sizes():
            if size % p:
                raise ConfigurationError(f"view size {size} is not a multiple of patch {p}")
        return self


# --------------------------------------------------------------------------
# value parsing
# --------------------------------------------------------------------------

def _number(token: str):
    token = token.strip()
    if "/" in token:
        return float(Fraction(token))
    try:
        return int(token)
    except ValueError:
        return float(token)


def parse_value(text: str):
    """Parse a scalar, boolean, bracketed list or bare string."""
    text = text.strip()
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        if not inner:
            return ()
        return tuple(parse_value(t) for t in inner.split(","))
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return _number(text)
    except (ValueError, ZeroDivisionError):
        return text


INT_TUPLE_KEYS = {"views.variable_sizes"}


def coerce(value, like, key: str = "?"):
    """Convert ``value`` to the type of the existing setting ``like``."""
    if isinstance(value, str):
        value = parse_value(value)
    try:
        if isinstance(like, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(like, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if isinstance(like, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(like, tuple):
            items = value if isinstance(value, (tuple, list)) else (value,)
            if key in INT_TUPLE_KEYS:
                if any(isinstance(v, bool) or float(v) != int(v) for v in items):
                    raise TypeError
                return tuple(int(v) for v in items)
            return tuple(float(v) for v in items)
        if isinstance(like, str):
            return str(value)
    except (TypeError, ValueError):
        pass
    raise ConfigurationError(f"{key}: cannot interpret {value!r} as {type(like).__name__}")


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return "[" + ", ".join(format_value(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def parse_overrides(items) -> dict:
    """``["a.b=1", ...]`` from the command line into a dict."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out
