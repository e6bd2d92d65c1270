"""Vision Transformer backbone with an optional GSD token."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from satdino.exceptions import ConfigurationError

VARIANTS = {
    # name: (embed_dim, depth, heads)
    "tiny": (96, 4, 4),
    "small": (384, 12, 6),
    "base": (768, 12, 12),
}


@dataclass(frozen=True)
class ViTConfig:
    patch_size: int = 8
    embed_dim: int = 96
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    use_gsd_token: bool = True
    img_size: int = 64
    variant: str = "tiny"

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}"
            )
        if self.img_size % self.patch_size:
            raise ConfigurationError(
                f"patch size {self.patch_size} does not divide image size {self.img_size}"
            )

    @classmethod
    def from_variant(cls, variant: str, **kwargs) -> "ViTConfig":
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {variant!r}")
        dim, depth, heads = VARIANTS[variant]
        return cls(embed_dim=dim, depth=depth, heads=heads, variant=variant, **kwargs)

    @property
    def n_prefix(self) -> int:
        return 2 if self.use_gsd_token else 1


@dataclass
class TokenOutputs:
    cls_embedding: torch.Tensor
    gsd_embedding: Optional[torch.Tensor]
    patch_embeddings: torch.Tensor
    grid: tuple
    attentions: Optional[list] = None


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Split BxCxHxW images into Bx(H/p * W/p)x(C*p*p) row-major patch vectors."""
    b, c, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image size {h}x{w} is not divisible by patch size {patch_size}")
    x = images.reshape(b, c, h // patch_size, patch_size, w // patch_size, patch_size)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(b, (h // patch_size) * (w // patch_size), -1)


def interpolate_pos_embed(pos_embed: torch.Tensor, n_prefix: int,
                          target_hw: tuple[int, int]) -> torch.Tensor:
    """Resize the patch part of ``pos_embed`` (1 x (prefix + G*G) x D) bicubically.

    Prefix entries ([CLS], [GSD]) are passed through unchanged.
    """
    prefix, grid = pos_embed[:, :n_prefix], pos_embed[:, n_prefix:]
    n = grid.shape[1]
    side = int(round(n ** 0.5))
    if side * side != n:
        raise ValueError(f"stored positional grid with {n} entries is not square")
    h, w = target_hw
    if (h, w) == (side, side):
        return pos_embed
    dim = grid.shape[-1]
    grid = grid.reshape(1, side, side, dim).permute(0, 3, 1, 2)
    grid = F.interpolate(grid, size=(h, w), mode="bicubic", align_corners=False)
    grid = grid.permute(0, 2, 3, 1).reshape(1, h * w, dim)
    return torch.cat([prefix, grid], dim=1)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, return_attention: bool = False):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        if not return_attention:
            out = F.scaled_dot_product_attention(q, k, v)
            return self.proj(out.transpose(1, 2).reshape(b, n, d)), None
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out), attn


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, return_attention=False):
        y, attn = self.attn(self.norm1(x), return_attention)
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, attn


class VisionTransformer(nn.Module):
    """Pre-norm ViT whose token order is [CLS], [GSD] (optional), patches."""

    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        grid = cfg.img_size // cfg.patch_size
        self.patch_embed = nn.Conv2d(3, d, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.gsd_token = nn.Parameter(torch.zeros(1, 1, d)) if cfg.use_gsd_token else None
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.n_prefix + grid * grid, d))
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d, eps=1e-6)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        if self.gsd_token is not None:
            nn.init.trunc_normal_(self.gsd_token, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def prepare_tokens(self, images: torch.Tensor):
        b, _, h, w = images.shape
        p = self.cfg.patch_size
        if h % p or w % p:
            raise ValueError(f"image size {h}x{w} is not divisible by patch size {p}")
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        prefix = [self.cls_token.expand(b, -1, -1)]
        if self.gsd_token is not None:
            prefix.append(self.gsd_token.expand(b, -1, -1))
        x = torch.cat(prefix + [x], dim=1)
        grid = (h // p, w // p)
        return x + interpolate_pos_embed(self.pos_embed, self.cfg.n_prefix, grid), grid

    def forward(self, images: torch.Tensor, return_attention: bool = False) -> TokenOutputs:
        x, grid = self.prepare_tokens(images)
        attentions = [] if return_attention else None
        for blk in self.blocks:
            x, attn = blk(x, return_attention)
            if return_attention:
                attentions.append(attn)
        x = self.norm(x)
        npre = self.cfg.n_prefix
        return TokenOutputs(
            cls_embedding=x[:, 0],
            gsd_embedding=x[:, 1] if self.gsd_token is not None else None,
            patch_embeddings=x[:, npre:],
            grid=grid,
            attentions=attentions,
        )


@torch.no_grad()
def attention_head_map(model: VisionTransformer, image: torch.Tensor):
    """Last-layer [CLS] attention over patches, per head, plus the argmax head.

    ``image`` is a single 3xHxW tensor. Returns ``(maps, argmax)`` with maps of
    shape heads x gh x gw and argmax of shape gh x gw.
    """
    was_training = model.training
    model.eval()
    try:
        out = model(image.unsqueeze(0), return_attention=True)
    finally:
        model.train(was_training)
    attn = out.attentions[-1][0]  # heads x tokens x tokens
    gh, gw = out.grid
    maps = attn[:, 0, model.cfg.n_prefix:].reshape(attn.shape[0], gh, gw)
    return maps, maps.argmax(dim=0)
