"""Orthonormal 2D wavelet transform and the cascaded frequency branch.

The transform is a separable periodized filter bank.  Synthesis is the
exact adjoint of analysis, so for orthonormal filters iwt(wt(x)) == x to
dtype precision and energy is preserved across the four sub-bands.

Band layout: (LL, LH, HL, HH) where the first letter is the filter along
height and the second along width, i.e. LH carries detail along width
(vertical edges) and HL detail along height.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

_SQRT2 = math.sqrt(2.0)
_S3 = math.sqrt(3.0)

# Orthonormal scaling (low-pass) filters; high-pass follows by QMF.
_SCALING = {
    "haar": (1 / _SQRT2, 1 / _SQRT2),
    "db2": (
        (1 + _S3) / (4 * _SQRT2),
        (3 + _S3) / (4 * _SQRT2),
        (3 - _S3) / (4 * _SQRT2),
        (1 - _S3) / (4 * _SQRT2),
    ),
}


def supported_bases() -> tuple[str, ...]:
    return tuple(sorted(_SCALING))


def _filters(basis: str, dtype, device):
    if basis not in _SCALING:
        raise ValueError(
            f"unknown wavelet basis '{basis}'; supported: {', '.join(supported_bases())}"
        )
    lo = torch.tensor(_SCALING[basis], dtype=dtype, device=device)
    taps = len(lo)
    signs = torch.tensor([(-1.0) ** m for m in range(taps)], dtype=dtype, device=device)
    hi = signs * lo.flip(0)
    return lo, hi


def _pad_br(x: torch.Tensor, pad_h: int, pad_w: int) -> torch.Tensor:
    """Reflect-pad bottom/right, falling back to edge repetition when the
    input is too small for reflection."""
    if pad_w:
        if x.shape[-1] > pad_w:
            x = F.pad(x, (0, pad_w, 0, 0), mode="reflect")
        else:
            last = x[..., -1:].expand(*x.shape[:-1], pad_w)
            x = torch.cat([x, last], dim=-1)
    if pad_h:
        if x.shape[-2] > pad_h:
            x = F.pad(x, (0, 0, 0, pad_h), mode="reflect")
        else:
            last = x[..., -1:, :].expand(*x.shape[:-2], pad_h, x.shape[-1])
            x = torch.cat([x, last], dim=-2)
    return x


def _pad_to_even(x: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int]]:
    """Reflect-pad one row/column when height or width is odd."""
    pad_h = x.shape[-2] % 2
    pad_w = x.shape[-1] % 2
    if pad_h or pad_w:
        x = _pad_br(x, pad_h, pad_w)
    return x, (pad_h, pad_w)


def _analysis_1d(x: torch.Tensor, lo, hi, axis: int):
    """Correlate with each filter and downsample by 2, periodized."""
    taps = lo.numel()
    n = x.shape[-1] if axis == -1 else x.shape[-2]
    if n < taps:
        raise ValueError(f"axis length {n} shorter than the {taps}-tap filter")
    wrap = taps - 2
    if axis == -1:
        if wrap:
            x = torch.cat([x, x[..., :wrap]], dim=-1)
        weight = torch.stack([lo, hi]).view(2, 1, 1, taps)
        out = F.conv2d(x, weight, stride=(1, 2))
    else:
        if wrap:
            x = torch.cat([x, x[..., :wrap, :]], dim=-2)
        weight = torch.stack([lo, hi]).view(2, 1, taps, 1)
        out = F.conv2d(x, weight, stride=(2, 1))
    return out[:, :1], out[:, 1:]


def _synthesis_1d(lo_band, hi_band, lo, hi, axis: int):
    """Adjoint of `_analysis_1d`: upsample, convolve, wrap the overhang back."""
    taps = lo.numel()
    wrap = taps - 2
    if axis == -1:
        w_lo = lo.view(1, 1, 1, taps)
        w_hi = hi.view(1, 1, 1, taps)
        y = F.conv_transpose2d(lo_band, w_lo, stride=(1, 2)) + F.conv_transpose2d(
            hi_band, w_hi, stride=(1, 2)
        )
        if wrap:
            head = y[..., :wrap] + y[..., -wrap:]
            y = torch.cat([head, y[..., wrap:-wrap]], dim=-1)
    else:
        w_lo = lo.view(1, 1, taps, 1)
        w_hi = hi.view(1, 1, taps, 1)
        y = F.conv_transpose2d(lo_band, w_lo, stride=(2, 1)) + F.conv_transpose2d(
            hi_band, w_hi, stride=(2, 1)
        )
        if wrap:
            head = y[..., :wrap, :] + y[..., -wrap:, :]
            y = torch.cat([head, y[..., wrap:-wrap, :]], dim=-2)
    return y


def _flatten_channels(x: torch.Tensor):
    if x.dim() == 3:
        shape = x.shape
        return x.reshape(-1, 1, *x.shape[-2:]), shape, True
    if x.dim() == 4:
        shape = x.shape
        return x.reshape(-1, 1, *x.shape[-2:]), shape, False
    raise ValueError(f"expected (c,h,w) or (b,c,h,w), got shape {tuple(x.shape)}")


def wt(x: torch.Tensor, basis: str = "haar"):
    """Single-level 2D transform per channel -> (LL, LH, HL, HH).

    Odd heights/widths are reflect-padded by one row/column first, so the
    bands have ceil(h/2) x ceil(w/2) spatial size.
    """
    flat, shape, _ = _flatten_channels(x)
    lo, hi = _filters(basis, x.dtype, x.device)
    flat, _ = _pad_to_even(flat)
    lo_w, hi_w = _analysis_1d(flat, lo, hi, axis=-1)
    ll, hl = _analysis_1d(lo_w, lo, hi, axis=-2)
    lh, hh = _analysis_1d(hi_w, lo, hi, axis=-2)
    bands = []
    for band in (ll, lh, hl, hh):
        out = band.reshape(*shape[:-2], *band.shape[-2:])
        bands.append(out)
    return tuple(bands)


def iwt(ll, lh, hl, hh, basis: str = "haar") -> torch.Tensor:
    """Exact inverse of `wt` on even-sized inputs (caller crops any pad)."""
    shapes = {tuple(b.shape) for b in (ll, lh, hl, hh)}
    if len(shapes) != 1:
        raise ValueError(f"sub-band shape mismatch: {sorted(shapes)}")
    lo, hi = _filters(basis, ll.dtype, ll.device)
    fll, shape, _ = _flatten_channels(ll)
    flh, _, _ = _flatten_channels(lh)
    fhl, _, _ = _flatten_channels(hl)
    fhh, _, _ = _flatten_channels(hh)
    lo_w = _synthesis_1d(fll, fhl, lo, hi, axis=-2)
    hi_w = _synthesis_1d(flh, fhh, lo, hi, axis=-2)
    y = _synthesis_1d(lo_w, hi_w, lo, hi, axis=-1)
    return y.reshape(*shape[:-2], *y.shape[-2:])


def _delta_kernel(channels: int, kernel_size: int, **kw) -> torch.Tensor:
    w = torch.zeros(channels, kernel_size, kernel_size, **kw)
    w[:, kernel_size // 2, kernel_size // 2] = 1.0
    return w


def _depthwise(band: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    # weight: (c, k, k); each channel convolved independently, bias-free.
    c = band.shape[-3]
    k = weight.shape[-1]
    batched = band if band.dim() == 4 else band.unsqueeze(0)
    out = F.conv2d(batched, weight.unsqueeze(1), padding=k // 2, groups=c)
    return out if band.dim() == 4 else out.squeeze(0)


class WaveletCascade(nn.Module):
    """Recursive decomposition with per-level depthwise sub-band kernels.

    Each level transforms the running low band, convolves all four
    sub-bands depthwise (bias-free), and the convolved low band descends
    to the next level.  Reconstruction inverts bottom-up, so kernels
    initialized to discrete deltas make the whole cascade the identity
    and the map stays linear in its input end to end.
    """

    def __init__(self, channels: int, levels: int = 2, kernel_size: int = 3,
                 basis: str = "haar"):
        super().__init__()
        if levels < 1:
            raise ValueError(f"need at least one level, got {levels}")
        if kernel_size % 2 != 1:
            raise ValueError("kernel size must be odd")
        _filters(basis, torch.float32, "cpu")  # validate the name eagerly
        self.channels = channels
        self.levels = levels
        self.basis = basis
        self.kernels = nn.ParameterList(
            nn.Parameter(torch.stack([_delta_kernel(channels, kernel_size) for _ in range(4)]))
            for _ in range(levels)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        h, w = x.shape[-2:]
        factor = 2 ** self.levels
        pad_h = (-h) % factor
        pad_w = (-w) % factor
        if pad_h or pad_w:
            x = _pad_br(x, pad_h, pad_w)

        highs = []
        ll = x
        for level in self.kernels:
            ll, lh, hl, hh = wt(ll, self.basis)
            highs.append(
                (
                    _depthwise(lh, level[1]),
                    _depthwise(hl, level[2]),
                    _depthwise(hh, level[3]),
                )
            )
            ll = _depthwise(ll, level[0])

        z = ll
        for lh, hl, hh in reversed(highs):
            z = iwt(z, lh, hl, hh, self.basis)
        z = z[..., :h, :w]
        return z.squeeze(0) if squeeze else z


class FrequencyBranch(nn.Module):
    """Apply the cascade to every frame (shared kernels), sum, project 1x1."""

    def __init__(self, channels: int, levels: int = 2, kernel_size: int = 3,
                 basis: str = "haar"):
        super().__init__()
        self.cascade = WaveletCascade(channels, levels, kernel_size, basis)
        self.merge = nn.Conv2d(channels, channels, 1)

    def merged(self, stack: torch.Tensor) -> torch.Tensor:
        """Sum of per-frame cascade outputs, before the 1x1 projection."""
        squeeze = stack.dim() == 4
        if squeeze:
            stack = stack.unsqueeze(0)
        b, t, c, h, w = stack.shape
        out = self.cascade(stack.reshape(b * t, c, h, w))
        out = out.reshape(b, t, c, h, w).sum(dim=1)
        return out.squeeze(0) if squeeze else out

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        merged = self.merged(stack)
        squeeze = merged.dim() == 3
        if squeeze:
            merged = merged.unsqueeze(0)
        out = self.merge(merged)
        return out.squeeze(0) if squeeze else out
