"""Saliency-ranked token filtering for the detection encoder.

At encoder layer ``l`` and pyramid level ``t`` only the ``floor(beta_t * gamma_l * N_t)``
most salient tokens run deformable attention; the rest pass through and
receive a learnable row/column background embedding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .config import DEFAULT_BETA, DEFAULT_GAMMA
from .deform_attn import MSDeformAttn
from .errors import ConfigError, ContractError, ShapeError

# absorbs representation error in beta*gamma*N before flooring (0.29*100 -> 28.999...)
_FLOOR_EPS = 1e-9


@dataclass
class FilterSchedule:
    beta: tuple[float, ...] = DEFAULT_BETA     # per pyramid level, finest first
    gamma: tuple[float, ...] = DEFAULT_GAMMA   # per encoder layer

    def __post_init__(self):
        self.beta = tuple(float(b) for b in self.beta)
        self.gamma = tuple(float(g) for g in self.gamma)
        for r in self.beta + self.gamma:
            if not 0.0 < r <= 1.0:
                raise ConfigError(f"filter ratios must lie in (0, 1], got {r}")
        if not self.gamma:
            raise ConfigError("at least one encoder layer ratio is required")

    @classmethod
    def unfiltered(cls, num_levels: int = 4, num_layers: int = 6) -> "FilterSchedule":
        return cls((1.0,) * num_levels, (1.0,) * num_layers)

    @property
    def num_layers(self) -> int:
        return len(self.gamma)


def budget(n: int, beta: float, gamma: float) -> int:
    """Number of active tokens: floor(beta * gamma * n), at least 1 when n >= 1."""
    if not (0.0 < beta <= 1.0 and 0.0 < gamma <= 1.0):
        raise ConfigError(f"ratios must lie in (0, 1], got beta={beta}, gamma={gamma}")
    if n < 0:
        raise ContractError(f"token count must be non-negative, got {n}")
    if n == 0:
        return 0
    return max(1, min(n, math.floor(beta * gamma * n + _FLOOR_EPS)))


@dataclass
class ActiveQuerySet:
    phi: torch.Tensor                 # (B, K) or (K,) sorted flat token indices
    level_offsets: list[int]
    budget_per_level: list[int]

    @property
    def size(self) -> int:
        return int(self.phi.shape[-1])


def level_offsets(level_sizes: Sequence[int]) -> list[int]:
    offs, acc = [], 0
    for n in level_sizes:
        offs.append(acc)
        acc += n
    return offs


def select_active(scores, level_sizes: Sequence[int], schedule: FilterSchedule, layer: int) -> ActiveQuerySet:
    """Per level, keep the ``budget`` highest-scoring tokens; ties go to the lower index.

    ``scores`` is (N,) or (B, N) aligned with the flattened multi-scale token order.
    """
    scores = torch.as_tensor(scores)
    squeeze = scores.dim() == 1
    if squeeze:
        scores = scores[None]
    if scores.shape[-1] != sum(level_sizes):
        raise ShapeError(f"{scores.shape[-1]} scores for {sum(level_sizes)} tokens")
    if len(level_sizes) != len(schedule.beta):
        raise ConfigError(f"{len(level_sizes)} levels but {len(schedule.beta)} level ratios")
    gamma = schedule.gamma[layer]
    offs = level_offsets(level_sizes)
    picked, budgets = [], []
    for n, off, beta in zip(level_sizes, offs, schedule.beta):
        k = budget(n, beta, gamma)
        budgets.append(k)
        seg = scores[:, off:off + n]
        order = torch.sort(seg, dim=1, descending=True, stable=True).indices[:, :k]
        picked.append(order + off)
    phi = torch.sort(torch.cat(picked, dim=1), dim=1).values
    if squeeze:
        phi = phi[0]
    return ActiveQuerySet(phi=phi, level_offsets=offs, budget_per_level=budgets)


class BackgroundEmbedding(nn.Module):
    """B_{i,j} = concat(R_i, C_j) with learnable row and column tables of width d/2."""

    def __init__(self, d_model: int, max_rows: int = 256, max_cols: int = 256):
        super().__init__()
        if d_model % 2:
            raise ConfigError(f"background embedding needs an even width, got {d_model}")
        self.rows = nn.Parameter(torch.empty(max_rows, d_model // 2))
        self.cols = nn.Parameter(torch.empty(max_cols, d_model // 2))
        nn.init.trunc_normal_(self.rows, std=0.02)
        nn.init.trunc_normal_(self.cols, std=0.02)

    def forward(self, i: torch.Tensor, j: torch.Tensor) -> torch.Tensor:
        i = torch.as_tensor(i)
        j = torch.as_tensor(j)
        if bool((i < 0).any() or (i >= self.rows.shape[0]).any() or (j < 0).any() or (j >= self.cols.shape[0]).any()):
            raise ContractError(
                f"background index out of range (tables are {self.rows.shape[0]} x {self.cols.shape[0]})")
        return torch.cat([self.rows[i], self.cols[j]], dim=-1)

    def for_grid(self, spatial_shapes: Sequence[tuple[int, int]]) -> torch.Tensor:
        """(N, d) embedding for every token of the flattened pyramid."""
        ii, jj = [], []
        for h, w in spatial_shapes:
            idx = torch.arange(h * w, device=self.rows.device)
            ii.append(idx // w)
            jj.append(idx % w)
        return self(torch.cat(ii), torch.cat(jj))


class FilteredEncoderLayer(nn.Module):
    """Deformable encoder layer evaluated only at the active token sites.

    Selected tokens: q <- LN(q + A(q + pos, q)); q <- LN(q + FFN(q)).
    Unselected tokens: q <- q + B_{i,j} (or unchanged when no embedding is given).
    """

    def __init__(self, d_model: int, n_levels: int, n_heads: int, n_points: int, dim_feedforward: int):
        super().__init__()
        self.self_attn = MSDeformAttn(d_model, n_levels, n_heads, n_points)
        self.norm1 = nn.LayerNorm(d_model)
        self.linear1 = nn.Linear(d_model, dim_feedforward)
        self.act = nn.ReLU()
        self.linear2 = nn.Linear(dim_feedforward, d_model)
        self.norm2 = nn.LayerNorm(d_model)

    def _update(self, q, pos, ref, value, spatial_shapes):
        q = self.norm1(q + self.self_attn(q + pos, ref, value, spatial_shapes))
        return self.norm2(q + self.linear2(self.act(self.linear1(q))))

    def forward(self, query: torch.Tensor, pos: torch.Tensor, reference_points: torch.Tensor,
                spatial_shapes: list[tuple[int, int]], active: Optional[torch.Tensor] = None,
                background: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Args:
            query, pos: (B, N, d).
            reference_points: (B, N, L, 2) per-level normalized token centers.
            active: (B, K) token indices to update; None updates every token.
            background: (N, d) or (B, N, d) embedding for unselected tokens.
        """
        if active is None:
            return self._update(query, pos, reference_points, query, spatial_shapes)
        B, N, d = query.shape
        if active.numel() and (int(active.min()) < 0 or int(active.max()) >= N):
            raise ContractError("active token index out of range")
        gidx = active[..., None].expand(-1, -1, d)
        q_sel = query.gather(1, gidx)
        pos_sel = pos.gather(1, gidx)
        L = reference_points.shape[2]
        ref_sel = reference_points.gather(
            1, active[..., None, None].expand(-1, -1, L, reference_points.shape[-1]))
        updated = self._update(q_sel, pos_sel, ref_sel, query, spatial_shapes)
        out = query
        if background is not None:
            unselected = torch.ones(B, N, dtype=torch.bool, device=query.device)
            unselected.scatter_(1, active, False)
            out = torch.where(unselected[..., None], query + background.expand(B, N, d), query)
        return out.scatter(1, gidx, updated)


class FilteredEncoder(nn.Module):
    def __init__(self, d_model: int, n_levels: int, n_heads: int, n_points: int, dim_feedforward: int,
                 schedule: FilterSchedule, background: bool = True, max_rows: int = 256, max_cols: int = 256):
        super().__init__()
        if len(schedule.beta) != n_levels:
            raise ConfigError(f"{len(schedule.beta)} level ratios for {n_levels} levels")
        self.schedule = schedule
        self.layers = nn.ModuleList(
            FilteredEncoderLayer(d_model, n_levels, n_heads, n_points, dim_feedforward)
            for _ in range(schedule.num_layers)
        )
        self.background = BackgroundEmbedding(d_model, max_rows, max_cols) if background else None

    def forward(self, src, pos, reference_points, spatial_shapes, scores: Optional[torch.Tensor] = None,
                filtering: bool = True):
        """Returns the encoded tokens and the active set used at every layer.

        ``scores`` rank tokens for selection and are detached; with
        ``filtering=False`` every layer updates all tokens.
        """
        sizes = [h * w for h, w in spatial_shapes]
        bg = self.background.for_grid(spatial_shapes) if self.background is not None else None
        out = src
        active_sets = []
        for l, layer in enumerate(self.layers):
            if filtering:
                if scores is None:
                    raise ContractError("filtering requires saliency scores")
                act = select_active(scores.detach(), sizes, self.schedule, l)
                active_sets.append(act)
                out = layer(out, pos, reference_points, spatial_shapes, act.phi, bg)
            else:
                out = layer(out, pos, reference_points, spatial_shapes)
        return out, active_sets


@dataclass
class AttentionBudget:
    N: int
    H: int
    K: int
    sites_baseline: int
    sites_filtered: int
    sites_layer_only: int
    sites_scale_only: int
    per_layer_filtered: list[int] = field(default_factory=list)

    @property
    def joint_ratio(self) -> float:
        return self.sites_filtered / self.sites_baseline if self.sites_baseline else 1.0

    def rows(self) -> dict[str, int]:
        return {
            "no_filtering": self.sites_baseline,
            "layer_filtering": self.sites_layer_only,
            "scale_filtering": self.sites_scale_only,
            "joint_filtering": self.sites_filtered,
        }


def attention_site_count(schedule: FilterSchedule, token_counts: Sequence[int], layers: Optional[int] = None,
                         heads: int = 8, points: int = 4) -> AttentionBudget:
    """Exact attention-site totals for no / layer-only / scale-only / joint filtering."""
    if layers is None:
        layers = schedule.num_layers
    if layers != schedule.num_layers:
        raise ConfigError(f"{layers} layers but {schedule.num_layers} layer ratios")
    if len(token_counts) != len(schedule.beta):
        raise ConfigError(f"{len(token_counts)} levels but {len(schedule.beta)} level ratios")
    hk = heads * points
    n = sum(token_counts)

    def total(use_beta: bool, use_gamma: bool) -> list[int]:
        return [
            sum(budget(nt, bt if use_beta else 1.0, g if use_gamma else 1.0)
                for nt, bt in zip(token_counts, schedule.beta)) * hk
            for g in schedule.gamma
        ]

    joint = total(True, True)
    return AttentionBudget(
        N=n, H=heads, K=points,
        sites_baseline=n * hk * layers,
        sites_filtered=sum(joint),
        sites_layer_only=sum(total(False, True)),
        sites_scale_only=sum(total(True, False)),
        per_layer_filtered=joint,
    )
