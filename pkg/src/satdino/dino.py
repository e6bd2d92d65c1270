"""Self-distillation objective, GSD regression and the EMA teacher."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from satdino.exceptions import ConfigurationError
from satdino.vit import VisionTransformer, ViTConfig


@dataclass(frozen=True)
class DinoHeadConfig:
    prototypes: int = 512
    hidden_dim: int = 256
    bottleneck_dim: int = 64
    tau_s: float = 0.1
    tau_t_start: float = 0.04
    tau_t_end: float = 0.04
    tau_t_warmup_epochs: int = 0
    center_momentum: float = 0.9

    def __post_init__(self):
        if self.tau_s <= 0:
            raise ConfigurationError("tau_s must be positive")
        if not 0 < self.tau_t_start <= self.tau_t_end:
            raise ConfigurationError("need 0 < tau_t_start <= tau_t_end")
        if not 0 <= self.center_momentum < 1:
            raise ConfigurationError("center_momentum must lie in [0, 1)")
        if self.prototypes < 2:
            raise ConfigurationError("need at least two prototypes")


class DINOHead(nn.Module):
    """MLP, L2-normalized bottleneck, then a weight-normalized prototype layer."""

    def __init__(self, in_dim: int, cfg: DinoHeadConfig):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, cfg.hidden_dim),
            nn.GELU(),
            nn.Linear(cfg.hidden_dim, cfg.hidden_dim),
            nn.GELU(),
            nn.Linear(cfg.hidden_dim, cfg.bottleneck_dim),
        )
        # prototype directions; their norm is fixed to 1 in forward
        self.prototypes = nn.Parameter(torch.empty(cfg.prototypes, cfg.bottleneck_dim))
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        nn.init.trunc_normal_(self.prototypes, std=0.02)

    def bottleneck(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.mlp(x), dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.bottleneck(x) @ F.normalize(self.prototypes, dim=-1).t()


def project(head: DINOHead, cls_embedding: torch.Tensor) -> torch.Tensor:
    """Prototype logits for a batch of class-token embeddings."""
    if cls_embedding.shape[-1] != head.mlp[0].in_features:
        raise ValueError(
            f"embedding dim {cls_embedding.shape[-1]} does not match head input "
            f"{head.mlp[0].in_features}"
        )
    return head(cls_embedding)


class SatDINONetwork(nn.Module):
    """Backbone plus DINO head on [CLS] and a linear GSD regressor on [GSD]."""

    def __init__(self, vit_cfg: ViTConfig, head_cfg: DinoHeadConfig):
        super().__init__()
        self.backbone = VisionTransformer(vit_cfg)
        self.head = DINOHead(vit_cfg.embed_dim, head_cfg)
        self.gsd_head = nn.Linear(vit_cfg.embed_dim, 1) if vit_cfg.use_gsd_token else None
        if self.gsd_head is not None:
            nn.init.zeros_(self.gsd_head.weight)
            nn.init.zeros_(self.gsd_head.bias)

    def forward(self, images: torch.Tensor):
        """Return (prototype logits, GSD predictions or None) for a batch."""
        out = self.backbone(images)
        logits = self.head(out.cls_embedding)
        gsd = None
        if self.gsd_head is not None:
            gsd = self.gsd_head(out.gsd_embedding).squeeze(-1)
        return logits, gsd


def teacher_probs(teacher_logits: torch.Tensor, center: torch.Tensor, tau_t: float) -> torch.Tensor:
    if tau_t <= 0:
        raise ConfigurationError("teacher temperature must be positive")
    return F.softmax((teacher_logits - center) / tau_t, dim=-1)


def dino_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
              center: torch.Tensor, tau_s: float, tau_t: float) -> torch.Tensor:
    """Cross-entropy between centered/sharpened teacher and student views.

    ``student_logits`` is V x B x K over all views (globals first) and
    ``teacher_logits`` is G x B x K over the global views, G <= V. Every
    ordered pair (g, v) with v != g contributes equally.
    """
    if tau_s <= 0:
        raise ConfigurationError("student temperature must be positive")
    n_views, n_global = student_logits.shape[0], teacher_logits.shape[0]
    if n_global > n_views:
        raise ValueError("more teacher views than student views")
    targets = teacher_probs(teacher_logits, center, tau_t).detach()
    log_q = F.log_softmax(student_logits / tau_s, dim=-1)
    total = student_logits.new_zeros(())
    pairs = 0
    for g in range(n_global):
        for v in range(n_views):
            if v == g:
                continue
            total = total + torch.sum(-targets[g] * log_q[v], dim=-1).mean()
            pairs += 1
    if pairs == 0:
        raise ValueError("no (teacher, student) view pairs")
    return total / pairs


def gsd_loss(predicted: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean squared error over student GSD predictions."""
    if predicted.shape != targets.shape:
        raise ValueError(f"prediction shape {tuple(predicted.shape)} != target shape "
                         f"{tuple(targets.shape)}")
    return torch.mean((predicted - targets) ** 2)


@dataclass
class LossBreakdown:
    l_dino: torch.Tensor
    l_gsd: torch.Tensor
    gamma: float
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {name: float(torch.as_tensor(getattr(self, name)).detach())
                for name in ("l_dino", "l_gsd", "total")}


def total_loss(l_dino, l_gsd, gamma: float) -> LossBreakdown:
    if gamma < 0:
        raise ConfigurationError(f"gamma must be non-negative, got {gamma}")
    # with gamma == 0 the GSD term stays out of the graph entirely
    total = l_dino if gamma == 0 else l_dino + gamma * l_gsd
    return LossBreakdown(l_dino, l_gsd, gamma, total)


@torch.no_grad()
def update_center(center: torch.Tensor, teacher_logits: torch.Tensor, m_c: float) -> torch.Tensor:
    """EMA of the mean teacher logit over global views and batch."""
    if not 0 <= m_c < 1:
        raise ConfigurationError("center momentum must lie in [0, 1)")
    batch_mean = teacher_logits.reshape(-1, teacher_logits.shape[-1]).mean(dim=0)
    return center * m_c + batch_mean * (1 - m_c)


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, m: float) -> None:
    """In-place ``t = m * t + (1 - m) * s`` over matching parameters."""
    if not 0 <= m <= 1:
        raise ConfigurationError("EMA momentum must lie in [0, 1]")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ValueError("teacher and student parameter names differ")
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        t.copy_(t * m + s.detach() * (1 - m))


def mean_entropy(probs: torch.Tensor) -> float:
    """Entropy of the batch-averaged distribution (natural log)."""
    p = probs.reshape(-1, probs.shape[-1]).mean(dim=0)
    return float(-(p * torch.log(p.clamp_min(1e-30))).sum())


@dataclass(frozen=True)
class ScheduleConfig:
    lr: float = 1e-3
    min_lr: float = 1e-6
    warmup_epochs: float = 10
    epochs: int = 100
    ema_start: float = 0.996
    ema_end: float = 1.0
    tau_t_start: float = 0.04
    tau_t_end: float = 0.04
    tau_t_warmup_epochs: float = 0


def schedules(step: int, steps_per_epoch: int, cfg: ScheduleConfig) -> tuple[float, float, float]:
    """Learning rate, teacher EMA momentum and teacher temperature at ``step``."""
    total = max(1, cfg.epochs * steps_per_epoch)
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        lr = cfg.lr * step / warm
    else:
        progress = min(1.0, (step - warm) / max(1, total - warm))
        lr = cfg.lr - (cfg.lr - cfg.min_lr) * (1 - math.cos(math.pi * progress)) / 2

    progress = min(1.0, step / total)
    ema = cfg.ema_end - (cfg.ema_end - cfg.ema_start) * (math.cos(math.pi * progress) + 1) / 2

    tau_warm = cfg.tau_t_warmup_epochs * steps_per_epoch
    if step >= tau_warm:
        tau = cfg.tau_t_end
    else:
        tau = cfg.tau_t_start + (cfg.tau_t_end - cfg.tau_t_start) * step / tau_warm
    return lr, ema, tau
