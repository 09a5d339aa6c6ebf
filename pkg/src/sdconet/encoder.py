"""Four-stage shifted-window attention encoder shared by the SR and detection branches."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig
from .errors import ConfigError, ShapeError

# large negative additive mask; keeps softmax rows finite and normalized
MASK_VALUE = -100.0


def init_weights(m: nn.Module) -> None:
    if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


@dataclass
class FeaturePyramid:
    """Encoder outputs ``F_1..F_4`` as channel-last tensors (B, H_s, W_s, C_s)."""

    levels: list[torch.Tensor]
    source_dims: tuple[int, int]
    # F_0: the input image itself, used by the SR decoder at full LR resolution
    image: Optional[torch.Tensor] = None
    pad: tuple[int, int] = (0, 0)
    strides: list[int] = field(default_factory=lambda: [4, 8, 16, 32])

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def spatial_shapes(self) -> list[tuple[int, int]]:
        return [tuple(f.shape[1:3]) for f in self.levels]


def expected_level_dims(h: int, w: int, num_levels: int = 4) -> list[tuple[int, int]]:
    return [(math.ceil(h / 2 ** (s + 1)), math.ceil(w / 2 ** (s + 1))) for s in range(1, num_levels + 1)]


def window_partition(x: torch.Tensor, window_size: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * num_windows, window_size**2, C).

    H and W must already be multiples of ``window_size``.
    """
    B, H, W, C = x.shape
    if window_size > H or window_size > W:
        raise ConfigError(f"window size {window_size} exceeds grid {H}x{W}")
    if H % window_size or W % window_size:
        raise ConfigError(f"grid {H}x{W} not padded to a multiple of window size {window_size}")
    x = x.view(B, H // window_size, window_size, W // window_size, window_size, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window_size * window_size, C)


def window_reverse(windows: torch.Tensor, window_size: int, H: int, W: int) -> torch.Tensor:
    C = windows.shape[-1]
    x = windows.view(-1, H // window_size, W // window_size, window_size, window_size, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, H, W, C)


def relative_position_index(window: int, table_window: int) -> torch.Tensor:
    # indexes a (2*table_window-1)^2 bias table; window <= table_window
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")).flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel + (table_window - 1)
    return rel[0] * (2 * table_window - 1) + rel[1]


class WindowAttention(nn.Module):
    """Multi-head self attention inside square windows, with relative position bias."""

    def __init__(self, dim: int, num_heads: int, window_size: int, qkv_bias: bool = True):
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.window_size = window_size
        self.scale = (dim // num_heads) ** -0.5
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * window_size - 1) ** 2, num_heads))
        self.qkv = nn.Linear(dim, 3 * dim, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
        self._index_cache: dict[int, torch.Tensor] = {}

    def _bias(self, window: int) -> torch.Tensor:
        idx = self._index_cache.get(window)
        if idx is None:
            idx = relative_position_index(window, self.window_size)
            self._index_cache[window] = idx
        n = window * window
        bias = self.relative_position_bias_table[idx.view(-1).to(self.relative_position_bias_table.device)]
        return bias.view(n, n, -1).permute(2, 0, 1)

    def forward(self, x: torch.Tensor, window: int, mask: Optional[torch.Tensor] = None, return_attn: bool = False):
        """
        Args:
            x: windows of shape (num_windows*B, window**2, C).
            window: side of the (possibly clamped) window.
            mask: additive mask (num_windows, N, N) or None.
        """
        B_, N, C = x.shape
        qkv = self.qkv(x).reshape(B_, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn + self._bias(window).unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(B_ // nw, nw, self.num_heads, N, N) + mask[None, :, None]
            attn = attn.view(B_, self.num_heads, N, N)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B_, N, C)
        out = self.proj(out)
        if return_attn:
            return out, attn
        return out


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


def _shift_pad_mask(Hp: int, Wp: int, H: int, W: int, window: int, shift: int, device) -> Optional[torch.Tensor]:
    if shift == 0 and Hp == H and Wp == W:
        return None
    region = torch.zeros(Hp, Wp, device=device)
    if shift:
        cnt = 0
        for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
                region[hs, ws] = cnt
                cnt += 1
    valid = torch.zeros(Hp, Wp, device=device)
    valid[:H, :W] = 1.0
    if shift:
        valid = torch.roll(valid, shifts=(-shift, -shift), dims=(0, 1))
    region_w = window_partition(region[None, :, :, None], window).squeeze(-1)
    valid_w = window_partition(valid[None, :, :, None], window).squeeze(-1)
    mask = (region_w[:, :, None] != region_w[:, None, :]) | (valid_w[:, None, :] == 0)
    return mask.float() * MASK_VALUE


class SwinLayer(nn.Module):
    """Windowed attention layer in the single-outer-residual form

        T_out = T_in + MLP(LN(T_in + Attn(LN(T_in))))

    used both by the encoder stages and by the SR decoder's residual blocks.
    With ``shift`` the grid is cyclically rolled by half a window first.
    """

    def __init__(self, dim: int, num_heads: int, window_size: int, shift: bool = False, mlp_ratio: float = 4.0):
        super().__init__()
        self.dim = dim
        self.window_size = window_size
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window_size)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def geometry(self, H: int, W: int) -> tuple[int, int]:
        window = min(self.window_size, H, W)
        shift = window // 2 if self.shift and min(H, W) > window else 0
        return window, shift

    def window_process(self, h: torch.Tensor, fn: Callable, return_attn: bool = False):
        """Pad, shift, partition, apply ``fn(windows, window, mask)``, then undo every step."""
        B, H, W, C = h.shape
        window, shift = self.geometry(H, W)
        Hp = math.ceil(H / window) * window
        Wp = math.ceil(W / window) * window
        if Hp != H or Wp != W:
            h = F.pad(h, (0, 0, 0, Wp - W, 0, Hp - H))
        if shift:
            h = torch.roll(h, shifts=(-shift, -shift), dims=(1, 2))
        mask = _shift_pad_mask(Hp, Wp, H, W, window, shift, h.device)
        if mask is not None:
            mask = mask.to(h.dtype)
        windows = window_partition(h, window)
        res = fn(windows, window, mask)
        attn = None
        if isinstance(res, tuple):
            res, attn = res
        h = window_reverse(res, window, Hp, Wp)
        if shift:
            h = torch.roll(h, shifts=(shift, shift), dims=(1, 2))
        h = h[:, :H, :W, :]
        if return_attn:
            return h, attn
        return h

    def forward(self, x: torch.Tensor, return_attn: bool = False):
        if x.dim() != 4 or x.shape[-1] != self.dim:
            raise ShapeError(f"expected (B, H, W, {self.dim}), got {tuple(x.shape)}")
        a = self.window_process(
            self.norm1(x),
            lambda w, ws, m: self.attn(w, ws, m, return_attn=return_attn),
            return_attn=return_attn,
        )
        attn = None
        if return_attn:
            a, attn = a
        out = x + self.mlp(self.norm2(x + a))
        if return_attn:
            return out, attn
        return out


class PatchEmbed(nn.Module):
    """Stem: non-overlapping ``patch_size`` convolution to C_1 channels, with bottom/right zero padding."""

    def __init__(self, patch_size: int, dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(3, dim, kernel_size=patch_size, stride=patch_size)
        self.norm = nn.LayerNorm(dim)

    def padding_for(self, H: int, W: int) -> tuple[int, int]:
        p = self.patch_size
        return (-H) % p, (-W) % p

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if image.dim() != 4 or image.shape[-1] != 3:
            raise ShapeError(f"expected (B, H, W, 3) image, got {tuple(image.shape)}")
        ph, pw = self.padding_for(image.shape[1], image.shape[2])
        x = image.permute(0, 3, 1, 2)
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph))
        x = self.proj(x).permute(0, 2, 3, 1)
        return self.norm(x)


class PatchMerging(nn.Module):
    """2x2 neighbourhood concat -> LayerNorm -> linear reduction 4C -> 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, C = x.shape
        if H < 1 or W < 1:
            raise ShapeError(f"cannot merge an empty {H}x{W} grid")
        if H % 2 or W % 2:
            x = F.pad(x, (0, 0, 0, W % 2, 0, H % 2))
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        return self.reduction(self.norm(x))


class SwinStage(nn.Module):
    def __init__(self, in_dim: int, dim: int, depth: int, num_heads: int, window_size: int,
                 mlp_ratio: float = 4.0, downsample: bool = True):
        super().__init__()
        if downsample and dim != 2 * in_dim:
            raise ConfigError("merging stage must double channels")
        self.downsample = PatchMerging(in_dim) if downsample else None
        self.layers = nn.ModuleList(
            SwinLayer(dim, num_heads, window_size, shift=(i % 2 == 1), mlp_ratio=mlp_ratio) for i in range(depth)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.downsample is not None:
            x = self.downsample(x)
        for layer in self.layers:
            x = layer(x)
        return x


class SharedEncoder(nn.Module):
    """Stem + four stages; stage 1 works on the stem output, stages 2-4 merge first."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        problems = cfg.problems()
        if problems:
            raise ConfigError("; ".join(problems))
        self.cfg = cfg
        ch = cfg.stage_channels
        self.patch_embed = PatchEmbed(cfg.patch_size, ch[0])
        self.stages = nn.ModuleList()
        for s in range(4):
            self.stages.append(SwinStage(
                ch[s - 1] if s else ch[0], ch[s], cfg.stage_depths[s], cfg.num_heads[s],
                cfg.window_size, cfg.mlp_ratio, downsample=s > 0,
            ))
        self.out_norms = nn.ModuleList(nn.LayerNorm(c) for c in ch)
        self.apply(init_weights)

    @property
    def channels(self) -> list[int]:
        return list(self.cfg.stage_channels)

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        H, W = image.shape[1:3]
        pad = self.patch_embed.padding_for(H, W)
        x = self.patch_embed(image)
        levels = []
        for stage, norm in zip(self.stages, self.out_norms):
            x = stage(x)
            levels.append(norm(x))
        p = self.cfg.patch_size
        return FeaturePyramid(levels=levels, source_dims=(H, W), image=image, pad=pad,
                              strides=[p * 2 ** s for s in range(4)])
