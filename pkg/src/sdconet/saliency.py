"""Per-level saliency prediction, top-down propagation and Gaussian centrality targets."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError, DegenerateBoxError, ShapeError
from .losses import sigmoid_focal_loss


@dataclass
class SaliencyPyramid:
    maps: list[torch.Tensor]  # each (B, H_l, W_l, 1) logits, finest level first
    alpha: torch.Tensor

    def flatten(self) -> torch.Tensor:
        """(B, sum H_l W_l) scores in the flattened multi-scale token order."""
        return torch.cat([m.flatten(1) for m in self.maps], dim=1)


class SaliencyPredictor(nn.Module):
    """MLP_1 -> split into local / global halves -> pool+broadcast global -> concat -> MLP_2."""

    def __init__(self, dim: int, hidden: int, pool_global: bool = True):
        super().__init__()
        if hidden % 2:
            raise ConfigError(f"saliency hidden width must be even, got {hidden}")
        self.hidden = hidden
        self.pool_global = pool_global
        self.mlp1 = nn.Sequential(nn.LayerNorm(dim), nn.Linear(dim, hidden), nn.GELU())
        self.mlp2 = nn.Sequential(nn.Linear(hidden, hidden // 2), nn.GELU(), nn.Linear(hidden // 2, 1))
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        z = self.mlp1(f)
        local, glob = z.split(self.hidden // 2, dim=-1)
        if self.pool_global:
            glob = glob.mean(dim=(1, 2), keepdim=True).expand_as(local)
        return self.mlp2(torch.cat([local, glob], dim=-1))


def upsample_nearest(s: torch.Tensor, target_hw: Sequence[int]) -> torch.Tensor:
    """x2 nearest-neighbour upsampling of (B, H, W, 1) maps, cropped to ``target_hw``.

    The target may be one cell smaller than 2x per axis (ceil-division pyramids).
    """
    h, w = s.shape[1:3]
    th, tw = target_hw
    if not (2 * h - 1 <= th <= 2 * h and 2 * w - 1 <= tw <= 2 * w):
        raise ShapeError(f"cannot upsample {h}x{w} to {th}x{tw}")
    up = s.repeat_interleave(2, dim=1).repeat_interleave(2, dim=2)
    return up[:, :th, :tw]


def propagate(s_coarse: torch.Tensor, s_fine_local: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """Refined map S_{l-1} = alpha * UP(S_l) + Saliency(F_{l-1})."""
    return alpha * upsample_nearest(s_coarse, s_fine_local.shape[1:3]) + s_fine_local


class SaliencyHead(nn.Module):
    """One predictor shared over levels plus a single learnable propagation coefficient."""

    def __init__(self, dim: int, hidden: int, alpha_init: float = 0.5):
        super().__init__()
        self.predictor = SaliencyPredictor(dim, hidden)
        self.alpha = nn.Parameter(torch.tensor(float(alpha_init)))

    def forward(self, levels: list[torch.Tensor]) -> SaliencyPyramid:
        local = [self.predictor(f) for f in levels]
        maps = [None] * len(levels)
        maps[-1] = local[-1]
        for l in range(len(levels) - 1, 0, -1):
            maps[l - 1] = propagate(maps[l], local[l - 1], self.alpha)
        return SaliencyPyramid(maps=maps, alpha=self.alpha)


@dataclass
class LevelGeometry:
    """Maps cell (i, j) of one pyramid level to image pixel coordinates."""

    height: int
    width: int
    stride: float
    image_size: tuple[int, int]  # (H, W) in pixels of the frame the boxes are given in

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        ys = (np.arange(self.height) + 0.5) * self.stride
        xs = (np.arange(self.width) + 0.5) * self.stride
        return ys, xs


@dataclass
class ConfidenceTarget:
    C: np.ndarray  # (H_l, W_l) in [0, 1]
    sigma: float
    boxes: list = field(default_factory=list)


def confidence_target(boxes, geometry: LevelGeometry, sigma: float = 1.0 / 3.0) -> ConfidenceTarget:
    """Gaussian centrality target for one level.

    ``boxes`` are GTBox-like objects with normalized ``cx, cy, w, h``. A cell
    whose center lies inside a box gets exp(-(dx^2 + dy^2) / (2 sigma^2)) with
    offsets normalized by the box half-extent; overlapping boxes take the max.
    """
    if not sigma > 0:
        raise ContractError("sigma must be positive")
    H_img, W_img = geometry.image_size
    ys, xs = geometry.cell_centers()
    C = np.zeros((geometry.height, geometry.width), dtype=np.float64)
    for b in boxes:
        if not (b.w > 0 and b.h > 0):
            raise DegenerateBoxError(f"box with zero area: w={b.w}, h={b.h}")
        cx, cy = b.cx * W_img, b.cy * H_img
        hw, hh = b.w * W_img / 2.0, b.h * H_img / 2.0
        dx = (xs - cx) / hw
        dy = (ys - cy) / hh
        inside = (np.abs(dy)[:, None] <= 1.0) & (np.abs(dx)[None, :] <= 1.0)
        g = np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / (2.0 * sigma ** 2))
        C = np.maximum(C, np.where(inside, g, 0.0))
    return ConfidenceTarget(C=C, sigma=sigma, boxes=list(boxes))


def pyramid_targets(boxes, level_shapes, strides, image_size, sigma: float = 1.0 / 3.0) -> list[np.ndarray]:
    return [
        confidence_target(boxes, LevelGeometry(h, w, s, image_size), sigma).C
        for (h, w), s in zip(level_shapes, strides)
    ]


def saliency_loss(maps: list[torch.Tensor], targets: list[torch.Tensor],
                  alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Sigmoid focal loss averaged over every cell of every level."""
    if len(maps) != len(targets):
        raise ShapeError(f"{len(maps)} maps vs {len(targets)} targets")
    logits, tgts = [], []
    for m, t in zip(maps, targets):
        t = t.to(m.dtype).reshape(m.shape)
        if bool(((t < 0) | (t > 1)).any()):
            raise ContractError("saliency targets must lie in [0, 1]")
        logits.append(m.flatten())
        tgts.append(t.flatten())
    loss = sigmoid_focal_loss(torch.cat(logits), torch.cat(tgts), alpha=alpha, gamma=gamma)
    return loss.mean()
