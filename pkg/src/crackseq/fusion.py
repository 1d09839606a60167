"""Triple-domain fusion: merge spatial, temporal, and frequency maps.

The dataflow, with all intermediates exposed in :class:`FusedFeature`:

1. spatial + temporal  -> concat + conv            -> ``spatial_temporal``
2. frequency + temporal -> concat + conv           -> ``frequency_local``
                        -> windowed attention + conv -> ``frequency_global``
3. three pairwise refinement units, each a channel-reducing concat
   followed by residual attention blocks:
     ``compensated_local``  = refine(frequency_local,  spatial_temporal)
     ``compensated_global`` = refine(frequency_global, frequency_local)
     ``fused``              = refine(compensated_local, compensated_global)

Each residual attention block computes conv -> channel gate -> spatial
gate and adds the input back, so a zeroed inner path is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import ConvNormAct, ensure_batch
from .temporal import SelfAttention2d
from .wavelet import _pad_br


@dataclass
class FusedFeature:
    """All intermediates of the fusion dataflow; `fused` is the output."""

    spatial_temporal: torch.Tensor
    frequency_local: torch.Tensor
    frequency_global: torch.Tensor
    compensated_local: torch.Tensor
    compensated_global: torch.Tensor
    fused: torch.Tensor


class WindowAttention(nn.Module):
    """Self-attention within non-overlapping square windows, residual.

    The map is tiled into window_size x window_size patches (edge-padded
    when the size does not divide, cropped after) and each patch runs
    plain multi-head attention.  A single-window input reduces exactly to
    full attention over all positions.
    """

    def __init__(self, channels: int, window_size: int = 4, heads: int = 4):
        super().__init__()
        if window_size < 1:
            raise ValueError(f"window size must be >= 1, got {window_size}")
        self.window_size = window_size
        self.attn = SelfAttention2d(channels, heads)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x, squeeze = ensure_batch(x, 3)
        b, c, h, w = x.shape
        s = self.window_size
        padded = _pad_br(x, (-h) % s, (-w) % s)
        hp, wp = padded.shape[-2:]
        nh, nw = hp // s, wp // s
        tiles = (
            padded.reshape(b, c, nh, s, nw, s)
            .permute(0, 2, 4, 1, 3, 5)
            .reshape(b * nh * nw, c, s, s)
        )
        tiles = self.attn(tiles)
        out = (
            tiles.reshape(b, nh, nw, c, s, s)
            .permute(0, 3, 1, 4, 2, 5)
            .reshape(b, c, hp, wp)[..., :h, :w]
        )
        return out.squeeze(0) if squeeze else out


class ChannelGate(nn.Module):
    """Per-channel logistic gate from globally pooled statistics."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=(-2, -1), keepdim=True)
        return torch.sigmoid(self.fc2(F.silu(self.fc1(pooled))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.gate(x) * x


class SpatialGate(nn.Module):
    """Per-position logistic gate from channel max/mean maps."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat(
            [x.max(dim=-3, keepdim=True).values, x.mean(dim=-3, keepdim=True)],
            dim=-3,
        )
        return torch.sigmoid(self.conv(pooled))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.gate(x) * x


class ResidualRefineBlock(nn.Module):
    """conv -> channel gate -> spatial gate, plus an identity path."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = ConvNormAct(channels, channels)
        self.channel_gate = ChannelGate(channels)
        self.spatial_gate = SpatialGate()

    def inner(self, x: torch.Tensor) -> torch.Tensor:
        return self.spatial_gate(self.channel_gate(self.conv(x)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.inner(x) + x


class PairFuse(nn.Module):
    """Concat two maps, reduce to one width, refine with n residual blocks."""

    def __init__(self, channels: int, blocks: int = 2):
        super().__init__()
        if blocks < 1:
            raise ValueError(f"need at least one refine block, got {blocks}")
        self.reduce = nn.Conv2d(2 * channels, channels, 1)
        self.blocks = nn.Sequential(
            *(ResidualRefineBlock(channels) for _ in range(blocks))
        )

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape != b.shape:
            raise ValueError(
                f"cannot fuse maps of shapes {tuple(a.shape)} and "
                f"{tuple(b.shape)}"
            )
        a, squeeze = ensure_batch(a, 3)
        b, _ = ensure_batch(b, 3)
        out = self.blocks(self.reduce(torch.cat([a, b], dim=1)))
        return out.squeeze(0) if squeeze else out


class TripleFusion(nn.Module):
    """Fuse the three branch outputs into one map of the working width."""

    def __init__(self, channels: int, blocks: int = 2, window_size: int = 4,
                 heads: int = 4):
        super().__init__()
        self.st_merge = ConvNormAct(2 * channels, channels)
        self.ft_local = ConvNormAct(2 * channels, channels)
        self.ft_attn = WindowAttention(2 * channels, window_size, heads)
        self.ft_global = ConvNormAct(2 * channels, channels)
        self.refine_local = PairFuse(channels, blocks)
        self.refine_global = PairFuse(channels, blocks)
        self.refine_final = PairFuse(channels, blocks)

    @staticmethod
    def _pair(a: torch.Tensor, b: torch.Tensor):
        if a.shape != b.shape:
            raise ValueError(
                f"cannot fuse maps of shapes {tuple(a.shape)} and "
                f"{tuple(b.shape)}"
            )
        a, squeeze = ensure_batch(a, 3)
        b, _ = ensure_batch(b, 3)
        return torch.cat([a, b], dim=1), squeeze

    def fuse_st(self, spatial: torch.Tensor, temporal: torch.Tensor):
        """Spatial-temporal merge: concat + conv back to one width."""
        cat, squeeze = self._pair(spatial, temporal)
        out = self.st_merge(cat)
        return out.squeeze(0) if squeeze else out

    def fuse_ft(self, frequency: torch.Tensor, temporal: torch.Tensor):
        """Frequency-temporal merge -> (local conv path, windowed
        attention path)."""
        cat, squeeze = self._pair(frequency, temporal)
        local = self.ft_local(cat)
        global_ = self.ft_global(self.ft_attn(cat))
        if squeeze:
            return local.squeeze(0), global_.squeeze(0)
        return local, global_

    def forward(self, spatial: torch.Tensor, temporal: torch.Tensor,
                frequency: torch.Tensor) -> FusedFeature:
        f_st = self.fuse_st(spatial, temporal)
        f_local, f_global = self.fuse_ft(frequency, temporal)
        comp_local = self.refine_local(f_local, f_st)
        comp_global = self.refine_global(f_global, f_local)
        fused = self.refine_final(comp_local, comp_global)
        return FusedFeature(
            spatial_temporal=f_st,
            frequency_local=f_local,
            frequency_global=f_global,
            compensated_local=comp_local,
            compensated_global=comp_global,
            fused=fused,
        )
