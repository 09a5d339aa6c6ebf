"""Multi-scale deformable attention (pure PyTorch, grid_sample based)."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


def ms_deform_attn_core(value: torch.Tensor, spatial_shapes: list[tuple[int, int]],
                        sampling_locations: torch.Tensor, attention_weights: torch.Tensor) -> torch.Tensor:
    """
    Args:
        value: (B, S, M, D) with S = sum of H_l * W_l.
        spatial_shapes: per-level (H_l, W_l).
        sampling_locations: (B, Lq, M, L, P, 2), normalized to [0, 1] per level, (x, y) order.
        attention_weights: (B, Lq, M, L, P), softmax-normalized over L*P.

    Returns:
        (B, Lq, M*D)
    """
    B, S, M, D = value.shape
    _, Lq, _, L, P, _ = sampling_locations.shape
    value_list = value.split([h * w for h, w in spatial_shapes], dim=1)
    grids = 2 * sampling_locations - 1
    sampled = []
    for lid, (h, w) in enumerate(spatial_shapes):
        v = value_list[lid].flatten(2).transpose(1, 2).reshape(B * M, D, h, w)
        g = grids[:, :, :, lid].transpose(1, 2).flatten(0, 1)
        sampled.append(F.grid_sample(v, g, mode="bilinear", padding_mode="zeros", align_corners=False))
    attention_weights = attention_weights.transpose(1, 2).reshape(B * M, 1, Lq, L * P)
    out = (torch.stack(sampled, dim=-2).flatten(-2) * attention_weights).sum(-1)
    return out.view(B, M * D, Lq).transpose(1, 2)


class MSDeformAttn(nn.Module):
    """Each query attends to ``n_points`` sampled locations per head and per level.

    ``site_count`` accumulates query-sites x heads x points, summed over the
    batch and over forward calls, while ``count_sites`` is enabled.
    """

    def __init__(self, d_model: int = 256, n_levels: int = 4, n_heads: int = 8, n_points: int = 4):
        super().__init__()
        if d_model % n_heads:
            raise ConfigError(f"d_model {d_model} not divisible by {n_heads} heads")
        self.d_model = d_model
        self.n_levels = n_levels
        self.n_heads = n_heads
        self.n_points = n_points
        self.sampling_offsets = nn.Linear(d_model, n_heads * n_levels * n_points * 2)
        self.attention_weights = nn.Linear(d_model, n_heads * n_levels * n_points)
        self.value_proj = nn.Linear(d_model, d_model)
        self.output_proj = nn.Linear(d_model, d_model)
        self.count_sites = False
        self.site_count = 0
        self._reset_parameters()

    def _reset_parameters(self):
        nn.init.constant_(self.sampling_offsets.weight, 0.0)
        thetas = torch.arange(self.n_heads, dtype=torch.float32) * (2.0 * math.pi / self.n_heads)
        grid = torch.stack([thetas.cos(), thetas.sin()], -1)
        grid = (grid / grid.abs().max(-1, keepdim=True)[0]).view(self.n_heads, 1, 1, 2)
        grid = grid.repeat(1, self.n_levels, self.n_points, 1)
        for i in range(self.n_points):
            grid[:, :, i, :] *= i + 1
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.view(-1))
        nn.init.constant_(self.attention_weights.weight, 0.0)
        nn.init.constant_(self.attention_weights.bias, 0.0)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.constant_(self.value_proj.bias, 0.0)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.constant_(self.output_proj.bias, 0.0)

    def forward(self, query: torch.Tensor, reference_points: torch.Tensor, value_input: torch.Tensor,
                spatial_shapes: list[tuple[int, int]]) -> torch.Tensor:
        """
        Args:
            query: (B, Lq, d).
            reference_points: (B, Lq, L, 2) points or (B, Lq, L, 4) boxes, normalized per level.
            value_input: (B, S, d) flattened multi-scale tokens.
            spatial_shapes: per-level (H_l, W_l).
        """
        B, Lq, _ = query.shape
        S = value_input.shape[1]
        if sum(h * w for h, w in spatial_shapes) != S:
            raise ShapeError("spatial shapes do not match the value length")
        M, L, P = self.n_heads, self.n_levels, self.n_points
        value = self.value_proj(value_input).view(B, S, M, self.d_model // M)
        offsets = self.sampling_offsets(query).view(B, Lq, M, L, P, 2)
        weights = self.attention_weights(query).view(B, Lq, M, L * P).softmax(-1).view(B, Lq, M, L, P)
        if reference_points.shape[-1] == 2:
            normalizer = torch.tensor([[w, h] for h, w in spatial_shapes], dtype=query.dtype, device=query.device)
            loc = reference_points[:, :, None, :, None, :] + offsets / normalizer[None, None, None, :, None, :]
        elif reference_points.shape[-1] == 4:
            loc = (reference_points[:, :, None, :, None, :2]
                   + offsets / P * reference_points[:, :, None, :, None, 2:] * 0.5)
        else:
            raise ShapeError(f"reference points must end in 2 or 4, got {reference_points.shape[-1]}")
        if self.count_sites:
            self.site_count += B * Lq * M * P
        out = ms_deform_attn_core(value, spatial_shapes, loc, weights)
        return self.output_proj(out)
