"""Temporal branch: affinity-weighted frame aggregation plus an
hourglass refiner with attention at the bottleneck.

The keyframe is the LAST slice of the stack.  Per spatial position, each
frame receives a scalar weight: the keyframe weighs itself by its own
channel dot product, and every other frame by how much its alignment
with the keyframe differs from the keyframe's self-affinity.  The
weighted sum of frames is then refined by a small encoder-decoder whose
output convolution starts at zero, so the refiner is exactly the
identity at initialization.

Functions accept single maps/stacks or a leading batch axis.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import ConvNormAct, norm_groups
from .wavelet import _pad_br


def affinity(feat_a: torch.Tensor, feat_b: torch.Tensor) -> torch.Tensor:
    """Per-position channel dot product: (c, h, w) x2 -> (h, w)."""
    if feat_a.shape != feat_b.shape:
        raise ValueError(
            f"affinity needs matching shapes, got {tuple(feat_a.shape)} vs "
            f"{tuple(feat_b.shape)}"
        )
    return (feat_a * feat_b).sum(dim=-3)


def difference_maps(stack: torch.Tensor) -> torch.Tensor:
    """Per-frame weight maps aligned with the stack's frame order.

    The keyframe slot holds its self-affinity; every other slot holds the
    signed difference between that frame's keyframe-affinity and the
    self-affinity, i.e. ((F_j - F_key) . F_key) per position.
    """
    keyframe = stack[..., -1, :, :, :]
    self_aff = affinity(keyframe, keyframe)               # (..., h, w)
    cross = (stack * keyframe.unsqueeze(-4)).sum(dim=-3)  # (..., t, h, w)
    diffs = cross - self_aff.unsqueeze(-3)
    return torch.cat([diffs[..., :-1, :, :], self_aff.unsqueeze(-3)], dim=-3)


def aggregate(stack: torch.Tensor) -> torch.Tensor:
    """Weighted frame sum: (t, c, h, w) -> (c, h, w), batch axis optional."""
    diffs = difference_maps(stack)
    return (diffs.unsqueeze(-3) * stack).sum(dim=-4)


class SelfAttention2d(nn.Module):
    """Multi-head softmax attention over spatial positions, residual.

    The output projection is bias-free, so zeroing it (or the value part
    of the joint projection) makes the block the identity.
    """

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.heads = norm_groups(channels, heads)
        self.head_dim = channels // self.heads
        self.qkv = nn.Conv2d(channels, 3 * channels, 1, bias=False)
        self.proj = nn.Conv2d(channels, channels, 1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = (
            self.qkv(x)
            .reshape(b, 3, self.heads, self.head_dim, h * w)
            .unbind(dim=1)
        )
        logits = q.transpose(-2, -1) @ k / math.sqrt(self.head_dim)
        attn = logits.softmax(dim=-1)                     # (b, heads, n, n)
        out = (attn @ v.transpose(-2, -1)).transpose(-2, -1)
        return x + self.proj(out.reshape(b, c, h, w))


class Hourglass(nn.Module):
    """Two stride-2 stages down, attention at the bottom, two stages up
    with additive skips; the final conv is zero-initialized so the whole
    module starts as the identity.  Sizes not divisible by 4 are padded
    internally and cropped on the way out.
    """

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.down1 = ConvNormAct(channels, channels, stride=2)
        self.down2 = ConvNormAct(channels, channels, stride=2)
        self.bottleneck = SelfAttention2d(channels, heads)
        self.up2 = ConvNormAct(channels, channels)
        self.up1 = ConvNormAct(channels, channels)
        self.out_conv = nn.Conv2d(channels, channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        h, w = x.shape[-2:]
        padded = _pad_br(x, (-h) % 4, (-w) % 4)
        d1 = self.down1(padded)
        d2 = self.down2(d1)
        bottom = self.bottleneck(d2)
        u2 = self.up2(F.interpolate(bottom, size=d1.shape[-2:], mode="nearest"))
        u2 = u2 + d1
        u1 = self.up1(F.interpolate(u2, size=padded.shape[-2:], mode="nearest"))
        u1 = u1 + padded
        out = x + self.out_conv(u1)[..., :h, :w]
        return out.squeeze(0) if squeeze else out


class TemporalBranch(nn.Module):
    """Aggregate frames by affinity weights, then refine.

    The aggregation is cubic in the feature values, so a GroupNorm
    rescales it before the hourglass to keep activations in a trainable
    range.
    """

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.norm = nn.GroupNorm(norm_groups(channels), channels)
        self.hourglass = Hourglass(channels, heads)

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        squeeze = stack.dim() == 4
        agg = aggregate(stack)
        if squeeze:
            agg = agg.unsqueeze(0)
        out = self.hourglass(self.norm(agg))
        return out.squeeze(0) if squeeze else out
