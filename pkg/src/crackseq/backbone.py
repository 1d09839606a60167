"""Shared-weight per-frame feature extractor.

Every frame of a window goes through the same convolutional stack, so the
output is a stack of per-frame feature maps with no mixing across frames.
Normalization is GroupNorm throughout: statistics are computed per sample,
which keeps identical input frames mapping to identical feature slices
regardless of what else is in the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


def norm_groups(channels: int, preferred: int = 8) -> int:
    """Largest divisor of `channels` <= `preferred` keeping groups of >= 2.

    Single-channel groups have no within-group statistics on a 1x1 map,
    which normalization layers reject, so those divisors are skipped.
    """
    for g in range(min(preferred, channels // 2), 0, -1):
        if channels % g == 0:
            return g
    return 1


def ensure_batch(x: torch.Tensor, dims: int) -> tuple[torch.Tensor, bool]:
    """Add a leading batch axis when `x` has exactly `dims` dimensions.

    Returns the (possibly unsqueezed) tensor and whether the caller
    should squeeze the batch axis back out of its result.
    """
    if x.dim() == dims:
        return x.unsqueeze(0), True
    if x.dim() == dims + 1:
        return x, False
    raise ValueError(
        f"expected a {dims}- or {dims + 1}-dimensional tensor, got shape "
        f"{tuple(x.shape)}"
    )


class ConvNormAct(nn.Module):
    """3x3 (or kxk) convolution + GroupNorm + SiLU."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int = 3,
                 stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, kernel_size, stride,
                              kernel_size // 2, bias=False)
        self.norm = nn.GroupNorm(norm_groups(c_out), c_out)
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(x)))


class SplitStage(nn.Module):
    """Stride-2 downsampling followed by a cross-stage partial block.

    The downsampled map is split into two halves by 1x1 convs; one half
    passes through a residual bottleneck, then both are re-merged.  This
    keeps a direct gradient path through every stage.
    """

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        half = max(c_out // 2, 1)
        self.down = ConvNormAct(c_in, c_out, stride=2)
        self.lane_a = ConvNormAct(c_out, half, kernel_size=1)
        self.lane_b = ConvNormAct(c_out, half, kernel_size=1)
        self.block = ConvNormAct(half, half)
        self.merge = ConvNormAct(2 * half, c_out, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.down(x)
        a = self.lane_a(x)
        b = self.lane_b(x)
        b = b + self.block(b)
        return self.merge(torch.cat([a, b], dim=1))


@dataclass
class FeatureStack:
    """Per-frame feature maps for one window: data is (t, c, h, w)."""

    data: torch.Tensor
    stride: int

    def __post_init__(self):
        if self.data.dim() != 4:
            raise ValueError(
                f"feature stack must be (t, c, h, w), got {tuple(self.data.shape)}"
            )
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def keyframe(self) -> torch.Tensor:
        """The last slice: the frame whose boxes are predicted."""
        return self.data[-1]


class Backbone(nn.Module):
    """Strided convolutional stack; total downsampling equals `stride`.

    Channel widths ramp up to `channels` over log2(stride) stages.  Inputs
    are expected in [0, 1]; a fixed 0.5 shift/scale recenters them.
    """

    def __init__(self, channels: int = 64, stride: int = 16,
                 in_channels: int = 3):
        super().__init__()
        n_stages = int(math.log2(stride))
        if 2 ** n_stages != stride or n_stages < 1:
            raise ValueError(f"stride must be a power of two >= 2, got {stride}")
        if channels < 2:
            raise ValueError(f"channels must be >= 2, got {channels}")
        widths = [max(channels // 2 ** (n_stages - 1 - i), 2)
                  for i in range(n_stages)]
        widths[-1] = channels
        self.stride = stride
        self.channels = channels
        self.register_buffer("mean", torch.full((1, in_channels, 1, 1), 0.5))
        self.register_buffer("std", torch.full((1, in_channels, 1, 1), 0.5))
        self.stem = ConvNormAct(in_channels, widths[0])
        stages = []
        prev = widths[0]
        for w in widths:
            stages.append(SplitStage(prev, w))
            prev = w
        self.stages = nn.ModuleList(stages)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(n, 3, H, W) in [0,1] -> (n, c, H/stride, W/stride)."""
        x = (frames - self.mean) / self.std
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        return x

    def extract(self, frames: torch.Tensor) -> FeatureStack:
        """Run one window of frames (t, 3, H, W) through the shared stack."""
        if frames.dim() != 4:
            raise ValueError(
                f"expected (t, 3, H, W) frames, got {tuple(frames.shape)}"
            )
        h, w = frames.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(
                f"frame size {h}x{w} not divisible by stride {self.stride}"
            )
        return FeatureStack(data=self.forward(frames), stride=self.stride)
