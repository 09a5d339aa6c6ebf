"""U-shaped decoder that restores a 2x super-resolved image from the shared pyramid."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import SRDecoderConfig
from .encoder import FeaturePyramid, SwinLayer, init_weights
from .errors import ConfigError, ContractError, ShapeError

SCALE = 2


@dataclass
class SRImage:
    image: torch.Tensor  # (B, 2H, 2W, 3)
    source_id: Optional[str] = None


def pixel_shuffle(x: torch.Tensor, r: int = SCALE) -> torch.Tensor:
    """Channel-last sub-pixel shuffle: (B, H, W, r*r*k) -> (B, rH, rW, k)."""
    if x.shape[-1] % (r * r):
        raise ConfigError(f"{x.shape[-1]} channels not divisible by {r * r}")
    return F.pixel_shuffle(x.permute(0, 3, 1, 2), r).permute(0, 2, 3, 1)


def pixel_unshuffle(x: torch.Tensor, r: int = SCALE) -> torch.Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    return F.pixel_unshuffle(x.permute(0, 3, 1, 2), r).permute(0, 2, 3, 1)


def bicubic_up(image: torch.Tensor) -> torch.Tensor:
    """Channel-last bicubic x2 upsampling (a = -0.5), clamped to [0, 1]."""
    up = F.interpolate(image.permute(0, 3, 1, 2), scale_factor=SCALE, mode="bicubic",
                       align_corners=False, antialias=True)
    return up.clamp(0.0, 1.0).permute(0, 2, 3, 1)


class PatchExpand(nn.Module):
    """rearrange-in -> LayerNorm -> stride-2 transposed conv -> rearrange-out.

    Doubles H and W and halves the channel count.
    """

    def __init__(self, dim: int, bias: bool = True):
        super().__init__()
        if dim % 2:
            raise ConfigError(f"patch expanding needs an even channel count, got {dim}")
        self.dim = dim
        self.norm = nn.LayerNorm(dim)
        self.up = nn.ConvTranspose2d(dim, dim // 2, kernel_size=2, stride=2, bias=bias)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.dim:
            raise ShapeError(f"expected {self.dim} channels, got {z.shape[-1]}")
        B, H, W, C = z.shape
        seq = z.reshape(B, H * W, C)  # R_in
        seq = self.norm(seq)
        grid = seq.transpose(1, 2).reshape(B, C, H, W)
        out = self.up(grid)
        return out.permute(0, 2, 3, 1)  # R_out


class Reconstruct(nn.Module):
    """Conv -> LeakyReLU -> PixelShuffle(2) -> Conv, producing 3 channels."""

    def __init__(self, dim: int, recon_channels: int, slope: float = 0.2):
        super().__init__()
        self.conv_in = nn.Conv2d(dim, SCALE * SCALE * recon_channels, 3, padding=1)
        self.act = nn.LeakyReLU(slope)
        self.conv_out = nn.Conv2d(recon_channels, 3, 3, padding=1)

    def forward(self, f_dec: torch.Tensor) -> torch.Tensor:
        x = self.act(self.conv_in(f_dec.permute(0, 3, 1, 2)))
        if x.shape[1] % (SCALE * SCALE):
            raise ConfigError(f"{x.shape[1]} channels before shuffle not divisible by {SCALE * SCALE}")
        x = F.pixel_shuffle(x, SCALE)
        return self.conv_out(x).permute(0, 2, 3, 1)


class SkipFusion(nn.Module):
    """Concatenate a skip feature and project back to the decoder width."""

    def __init__(self, dim: int, skip_dim: int):
        super().__init__()
        self.proj = nn.Linear(dim + skip_dim, dim)

    def forward(self, z: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        return self.proj(torch.cat([z, skip], dim=-1))


def _crop_to(z: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    h, w = hw
    if z.shape[1] < h or z.shape[2] < w:
        raise ShapeError(f"cannot crop {tuple(z.shape[1:3])} to {hw}")
    return z[:, :h, :w]


class SRDecoder(nn.Module):
    """Decoder from F_4 back to full LR resolution, then sub-pixel x2 reconstruction.

    Levels F_3..F_1 are fused through skip connections; the input image (F_0)
    is fused at full LR resolution. Two extra expansions carry F_1 (stride 4)
    up to stride 1. With ``global_residual`` the network predicts a correction
    on top of the bicubic upsampling of the input.
    """

    def __init__(self, stage_channels: list[int], cfg: SRDecoderConfig, num_heads: Optional[list[int]] = None):
        super().__init__()
        problems = cfg.problems()
        if problems:
            raise ConfigError("; ".join(problems))
        self.cfg = cfg
        c4 = stage_channels[3]
        # widths from F_4 down to stride 1: c4, c3, c2, c1, c1/2, c1/4
        widths = [c4 // 2 ** i for i in range(6)]
        if widths[-1] < 1 or c4 % 32:
            raise ConfigError(f"C_4={c4} must be divisible by 32 for five halving expansions")
        if widths[1:4] != list(reversed(stage_channels[:3])):
            raise ConfigError("decoder widths must mirror encoder channels")
        self.widths = widths
        self.expands = nn.ModuleList(PatchExpand(widths[i]) for i in range(5))
        skip_dims = [stage_channels[2], stage_channels[1], stage_channels[0], None, 3]
        self.fusions = nn.ModuleList(
            SkipFusion(widths[i + 1], sd) if sd is not None else nn.Identity() for i, sd in enumerate(skip_dims)
        )
        self.blocks = nn.ModuleList()
        for i in range(5):
            w = widths[i + 1]
            heads = math.gcd(w, max(1, w // 24))
            self.blocks.append(nn.ModuleList(
                SwinLayer(w, heads, cfg.window_size, shift=(b % 2 == 1)) for b in range(cfg.blocks_per_level)
            ))
        self.reconstruct = Reconstruct(widths[-1], cfg.recon_channels, cfg.leaky_slope)
        self.apply(init_weights)

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        if len(pyramid.levels) != 4 or pyramid.image is None:
            raise ContractError("SR decoding needs all four pyramid levels and the input image")
        H, W = pyramid.source_dims
        f1, f2, f3, f4 = pyramid.levels
        skips = [f3, f2, f1, None, pyramid.image]
        half = (-(-H // 2), -(-W // 2))
        targets = [f3.shape[1:3], f2.shape[1:3], f1.shape[1:3], half, (H, W)]
        z = f4
        for expand, fuse, blocks, skip, hw in zip(self.expands, self.fusions, self.blocks, skips, targets):
            z = _crop_to(expand(z), tuple(hw))
            if skip is not None:
                z = fuse(z, skip)
            for blk in blocks:
                z = blk(z)
        out = self.reconstruct(z)
        if self.cfg.global_residual:
            out = out + bicubic_up(pyramid.image)
        if not self.training:
            out = out.clamp(0.0, 1.0)
        return out


def sr_loss(sr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    """Mean absolute error between super-resolved and reference images."""
    if sr.shape != hr.shape:
        raise ShapeError(f"SR {tuple(sr.shape)} vs HR {tuple(hr.shape)}")
    return (sr - hr).abs().mean()
