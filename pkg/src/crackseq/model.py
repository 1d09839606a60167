"""Full detector: shared backbone -> three branches -> fusion -> head.

A window of T frames enters as (t, 3, H, W) (or batched with a leading
axis); the backbone runs each frame independently, the spatial, temporal
and frequency branches each condense the stack into one map, fusion
merges the three maps, and the detection head emits per-cell predictions
for the window's last frame.
"""

from __future__ import annotations

import time
from typing import Callable

import torch
from torch import nn

from .backbone import Backbone
from .fusion import TripleFusion
from .head import DetectionHead, HeadOutput
from .spatial import NonLocalAttention, MemoryReadout, SpatialBranch
from .temporal import SelfAttention2d, TemporalBranch
from .wavelet import FrequencyBranch, WaveletCascade, _SCALING

CHECKPOINT_VERSION = 1


class CrackDetector(nn.Module):
    def __init__(self, channels: int = 64, stride: int = 16,
                 t_window: int = 5, num_classes: int = 1,
                 wavelet_levels: int = 2, wavelet_basis: str = "haar",
                 wavelet_kernel: int = 3, window_size: int = 4,
                 heads: int = 4, refine_blocks: int = 2):
        super().__init__()
        self.hyperparameters = {
            "channels": channels, "stride": stride, "t_window": t_window,
            "num_classes": num_classes, "wavelet_levels": wavelet_levels,
            "wavelet_basis": wavelet_basis, "wavelet_kernel": wavelet_kernel,
            "window_size": window_size, "heads": heads,
            "refine_blocks": refine_blocks,
        }
        self.t_window = t_window
        self.stride = stride
        self.backbone = Backbone(channels, stride)
        self.spatial = SpatialBranch(channels, t_window)
        self.temporal = TemporalBranch(channels, heads)
        self.frequency = FrequencyBranch(channels, wavelet_levels,
                                         wavelet_kernel, wavelet_basis)
        self.fusion = TripleFusion(channels, refine_blocks, window_size, heads)
        self.head = DetectionHead(channels, stride, num_classes)

    def _check_frames(self, frames: torch.Tensor) -> tuple[torch.Tensor, bool]:
        if frames.dim() == 4:
            frames, squeeze = frames.unsqueeze(0), True
        elif frames.dim() == 5:
            squeeze = False
        else:
            raise ValueError(
                f"expected (t, 3, H, W) or (b, t, 3, H, W) frames, got shape "
                f"{tuple(frames.shape)}"
            )
        if frames.shape[1] != self.t_window:
            raise ValueError(
                f"model expects {self.t_window}-frame windows, got "
                f"{frames.shape[1]}"
            )
        h, w = frames.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(
                f"frame size {h}x{w} not divisible by stride {self.stride}"
            )
        return frames, squeeze

    def features(self, frames: torch.Tensor) -> torch.Tensor:
        """(b, t, 3, H, W) -> per-frame feature stack (b, t, c, h, w)."""
        frames, squeeze = self._check_frames(frames)
        b, t = frames.shape[:2]
        flat = frames.reshape(b * t, *frames.shape[2:])
        feats = self.backbone(flat)
        feats = feats.reshape(b, t, *feats.shape[1:])
        return feats.squeeze(0) if squeeze else feats

    def forward(self, frames: torch.Tensor) -> HeadOutput:
        frames, squeeze = self._check_frames(frames)
        feats = self.features(frames)
        f_spatial = self.spatial(feats)
        f_temporal = self.temporal(feats)
        f_frequency = self.frequency(feats)
        fused = self.fusion(f_spatial, f_temporal, f_frequency).fused
        out = self.head(fused)
        if squeeze:
            return out.sample(0)
        return out


def save_checkpoint(model: CrackDetector, path, extra: dict | None = None):
    payload = {
        "version": CHECKPOINT_VERSION,
        "hyperparameters": model.hyperparameters,
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, map_location="cpu") -> tuple[CrackDetector, dict]:
    payload = torch.load(path, map_location=map_location, weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version {version!r} not supported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    model = CrackDetector(**payload["hyperparameters"])
    state = payload["state_dict"]
    sample = next(iter(state.values()))
    if sample.dtype == torch.float64:
        model.double()
    model.load_state_dict(state)
    model.eval()
    return model, payload.get("extra", {})


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def count_macs(model: CrackDetector, input_size: int,
               batch: int = 1) -> tuple[int, dict[str, int]]:
    """Analytic multiply-add count per layer for one forward pass.

    Convolution and linear layers are counted from their shapes; the
    attention blocks additionally count their two position-mixing matrix
    products.  Returns (total, per-layer breakdown by module name).
    """
    counts: dict[str, int] = {}
    handles = []

    def add(name: str, macs: int):
        counts[name] = counts.get(name, 0) + macs

    def conv_hook(name: str) -> Callable:
        def hook(module, inputs, output):
            kh, kw = module.kernel_size
            per_out = (module.in_channels // module.groups) * kh * kw
            add(name, output.numel() * per_out)
        return hook

    def linear_hook(name: str) -> Callable:
        def hook(module, inputs, output):
            add(name, output.numel() * module.in_features)
        return hook

    def attention_hook(name: str) -> Callable:
        def hook(module, inputs, output):
            x = inputs[0]
            n = x.shape[-2] * x.shape[-1]
            b = x.shape[0] if x.dim() == 4 else 1
            if isinstance(module, SelfAttention2d):
                c = x.shape[-3]
                add(name, b * 2 * n * n * c)
            elif isinstance(module, NonLocalAttention):
                c = x.shape[-3]
                add(name, b * (n * n * module.key_channels + n * n * c))
            elif isinstance(module, MemoryReadout):
                d = module.key_channels
                add(name, b * (n * n * d + n * n * d))
        return hook

    def cascade_hook(name: str) -> Callable:
        # The transforms and depthwise band convs inside the cascade are
        # functional, so they are counted analytically here: per level,
        # one separable analysis pass, four k x k depthwise convs, and
        # one separable synthesis pass at that level's resolution.
        def hook(module, inputs, output):
            x = inputs[0]
            b = x.shape[0] if x.dim() == 4 else 1
            c = x.shape[-3]
            taps = len(_SCALING[module.basis])
            k = module.kernels[0].shape[-1]
            factor = 2 ** module.levels
            h = -(-x.shape[-2] // factor) * factor
            w = -(-x.shape[-1] // factor) * factor
            total = 0
            for _ in range(module.levels):
                area = b * c * h * w
                total += 2 * area * taps      # analysis, both axes
                total += area * k * k         # 4 depthwise convs at h/2 x w/2
                total += 2 * area * taps      # synthesis, both axes
                h //= 2
                w //= 2
            add(name, total)
        return hook

    for name, module in model.named_modules():
        if isinstance(module, nn.Conv2d):
            handles.append(module.register_forward_hook(conv_hook(name)))
        elif isinstance(module, nn.ConvTranspose2d):
            handles.append(module.register_forward_hook(conv_hook(name)))
        elif isinstance(module, nn.Linear):
            handles.append(module.register_forward_hook(linear_hook(name)))
        elif isinstance(module, (SelfAttention2d, NonLocalAttention,
                                 MemoryReadout)):
            handles.append(module.register_forward_hook(attention_hook(name)))
        elif isinstance(module, WaveletCascade):
            handles.append(module.register_forward_hook(cascade_hook(name)))
    try:
        dummy = torch.zeros(batch, model.t_window, 3, input_size, input_size)
        dummy = dummy.to(next(model.parameters()).dtype)
        with torch.no_grad():
            model(dummy)
    finally:
        for h in handles:
            h.remove()
    return sum(counts.values()), counts


def measure_fps(model: CrackDetector, input_size: int, iterations: int = 10,
                warmup: int = 2) -> float:
    """Keyframe windows processed per second on a dummy input."""
    dummy = torch.zeros(1, model.t_window, 3, input_size, input_size)
    dummy = dummy.to(next(model.parameters()).dtype)
    with torch.no_grad():
        for _ in range(warmup):
            model(dummy)
        start = time.perf_counter()
        for _ in range(iterations):
            model(dummy)
        elapsed = time.perf_counter() - start
    return iterations / elapsed if elapsed > 0 else float("inf")
