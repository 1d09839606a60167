"""Spatial branch: fuse reference frames into the keyframe.

Three stages, each exposed separately for testing:

1. ``gate_reference_frames`` — a logistic gate computed from the reference
   frames reweights the keyframe map, then a conv mixes gated and raw
   keyframe features into a local relation map.
2. ``NonLocalAttention`` — full self-attention over spatial positions with
   a residual path, lifting the local map to global context.
3. ``MemoryReadout`` — key/value pairs from the global map act as a
   memory that the keyframe queries; the read result and the query values
   are merged back to the working width.

Modules accept a leading batch axis or operate on a single window:
stacks are ``(t, c, h, w)`` or ``(b, t, c, h, w)``, maps are ``(c, h, w)``
or ``(b, c, h, w)``.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .backbone import ensure_batch as _batched


class NonLocalAttention(nn.Module):
    """Softmax attention over all spatial positions with residual output.

    The value projection is bias-free and its output is added straight to
    the input, so zeroing the value weights makes this block the identity.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.key_channels = max(channels // 2, 1)
        self.query = nn.Conv2d(channels, self.key_channels, 1, bias=False)
        self.key = nn.Conv2d(channels, self.key_channels, 1, bias=False)
        self.value = nn.Conv2d(channels, channels, 1, bias=False)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """(b, c, h, w) -> (b, hw, hw) row-stochastic attention matrix."""
        q = self.query(x).flatten(2).transpose(1, 2)  # (b, hw, d)
        k = self.key(x).flatten(2)                    # (b, d, hw)
        logits = q @ k / math.sqrt(self.key_channels)
        return logits.softmax(dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x, squeeze = _batched(x, 3)
        b, c, h, w = x.shape
        attn = self.attention_weights(x)
        v = self.value(x).flatten(2).transpose(1, 2)  # (b, hw, c)
        out = (attn @ v).transpose(1, 2).reshape(b, c, h, w)
        out = out + x
        return out.squeeze(0) if squeeze else out


class MemoryReadout(nn.Module):
    """Query a key/value memory built from a second feature map.

    Keys and values use half the working width each.  The softmax runs
    over memory positions, so every query row is a convex combination of
    memory values; the read is concatenated with the query's own values
    and merged back to `channels` by a 1x1 conv.
    """

    def __init__(self, channels: int):
        super().__init__()
        half = max(channels // 2, 1)
        self.key_channels = half
        self.memory_key = nn.Conv2d(channels, half, 1, bias=False)
        self.memory_value = nn.Conv2d(channels, half, 1, bias=False)
        self.query_key = nn.Conv2d(channels, half, 1, bias=False)
        self.query_value = nn.Conv2d(channels, half, 1, bias=False)
        self.merge = nn.Conv2d(2 * half, channels, 1)

    def attention_weights(self, memory: torch.Tensor,
                          query: torch.Tensor) -> torch.Tensor:
        """(b, c, h, w) x2 -> (b, hw_q, hw_m) row-stochastic read weights."""
        k_q = self.query_key(query).flatten(2).transpose(1, 2)  # (b, n_q, d)
        k_m = self.memory_key(memory).flatten(2)                # (b, d, n_m)
        logits = k_q @ k_m / math.sqrt(self.key_channels)
        return logits.softmax(dim=-1)

    def forward(self, memory: torch.Tensor, query: torch.Tensor) -> torch.Tensor:
        if memory.shape != query.shape:
            raise ValueError(
                f"memory/query shape mismatch: {tuple(memory.shape)} vs "
                f"{tuple(query.shape)}"
            )
        memory, squeeze = _batched(memory, 3)
        query, _ = _batched(query, 3)
        b, _, h, w = memory.shape
        attn = self.attention_weights(memory, query)
        v_m = self.memory_value(memory).flatten(2).transpose(1, 2)  # (b, n_m, d)
        read = (attn @ v_m).transpose(1, 2).reshape(b, -1, h, w)
        v_q = self.query_value(query)
        out = self.merge(torch.cat([read, v_q], dim=1))
        return out.squeeze(0) if squeeze else out


class SpatialBranch(nn.Module):
    """Gate + non-local attention + memory read over one feature stack."""

    def __init__(self, channels: int, t_window: int):
        super().__init__()
        if t_window < 1:
            raise ValueError(f"window length must be >= 1, got {t_window}")
        self.channels = channels
        self.t_window = t_window
        n_refs = t_window - 1
        self.gate_conv = (
            nn.Conv2d(n_refs * channels, channels, 3, padding=1)
            if n_refs else None
        )
        self.local_conv = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.attention = NonLocalAttention(channels)
        self.readout = MemoryReadout(channels)

    def gate_reference_frames(self, stack: torch.Tensor):
        """Stack -> (gated keyframe, local relation map).

        With a single frame there are no references; the gate degenerates
        to the logistic function of zero, a flat 0.5.
        """
        stack, squeeze = _batched(stack, 4)
        if stack.shape[1] != self.t_window:
            raise ValueError(
                f"expected {self.t_window}-frame stacks, got "
                f"{stack.shape[1]} frames"
            )
        b, t, c, h, w = stack.shape
        keyframe = stack[:, -1]
        if self.gate_conv is None:
            gate = torch.full_like(keyframe, 0.5)
        else:
            refs = stack[:, :-1].reshape(b, (t - 1) * c, h, w)
            gate = torch.sigmoid(self.gate_conv(refs))
        gated = gate * keyframe
        local = self.local_conv(torch.cat([gated, keyframe], dim=1))
        if squeeze:
            return gated.squeeze(0), local.squeeze(0)
        return gated, local

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        batched, squeeze = _batched(stack, 4)
        _, local = self.gate_reference_frames(batched)
        global_map = self.attention(local)
        out = self.readout(global_map, batched[:, -1])
        return out.squeeze(0) if squeeze else out
