"""Shared test utilities: finite differences, record factories, oracles."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from crackseq.data import FrameRecord, GroundTruthBox


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """Scale-free distance ||a - b|| / max(||a||, ||b||, tiny)."""
    a = a.detach().double().reshape(-1)
    b = b.detach().double().reshape(-1)
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def central_difference_grad(fn, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Gradient of scalar fn(x) by central differences, one coordinate at a time."""
    flat = x.detach().clone().reshape(-1)
    grad = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(fn(flat.reshape(x.shape)))
            flat[i] = orig - eps
            down = float(fn(flat.reshape(x.shape)))
            flat[i] = orig
            grad[i] = (up - down) / (2.0 * eps)
    return grad.reshape(x.shape)


def autograd_input_grad(fn, x: torch.Tensor) -> torch.Tensor:
    """Gradient of scalar fn(x) with respect to x via autograd."""
    leaf = x.detach().clone().requires_grad_(True)
    value = fn(leaf)
    value.backward()
    return leaf.grad.detach().clone()


def check_input_gradient(fn, x: torch.Tensor, eps: float = 1e-5,
                         tol: float = 1e-3) -> float:
    """Compare autograd and finite-difference input gradients; return error."""
    got = autograd_input_grad(fn, x)
    want = central_difference_grad(fn, x, eps=eps)
    err = relative_error(got, want)
    assert err < tol, f"gradient mismatch: relative error {err:.3e} >= {tol}"
    return err


def scalar_probe(module, shape, generator=None, dtype=torch.float64):
    """Build fn(x) = sum(module(x) * fixed random probe) for gradient checks."""
    out_shape = module(torch.zeros(shape, dtype=dtype)).shape
    probe = torch.randn(out_shape, generator=generator, dtype=dtype)

    def fn(x):
        return (module(x) * probe).sum()

    return fn


def make_records(num_frames: int, sequence_id: str = "seq",
                 width: int = 64, height: int = 64,
                 boxes_per_frame=None) -> list[FrameRecord]:
    """Frame records with fake image paths, for windowing logic tests."""
    records = []
    for i in range(num_frames):
        boxes = ()
        if boxes_per_frame is not None:
            boxes = tuple(GroundTruthBox(*b) for b in boxes_per_frame[i])
        records.append(FrameRecord(
            sequence_id=sequence_id,
            frame_index=i,
            image_path=Path(f"/nonexistent/{sequence_id}_{i}.png"),
            width=width,
            height=height,
            boxes=boxes,
        ))
    return records


def iou_xyxy(a, b) -> float:
    """Plain intersection-over-union of two corner-format boxes."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def grid_iou_oracle(a, b, scale: int = 10) -> float:
    """IoU by rasterizing both boxes onto an integer grid and counting cells.

    Boxes must have coordinates that land on the 1/scale lattice.
    """
    xs = [int(round(v * scale)) for v in (a[0], a[2], b[0], b[2])]
    ys = [int(round(v * scale)) for v in (a[1], a[3], b[1], b[3])]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 <= x0 or y1 <= y0:
        return 0.0
    grid_a = np.zeros((y1 - y0, x1 - x0), dtype=bool)
    grid_b = np.zeros_like(grid_a)
    ax0, ay0, ax1, ay1 = [int(round(v * scale)) for v in a]
    bx0, by0, bx1, by1 = [int(round(v * scale)) for v in b]
    grid_a[ay0 - y0:ay1 - y0, ax0 - x0:ax1 - x0] = True
    grid_b[by0 - y0:by1 - y0, bx0 - x0:bx1 - x0] = True
    inter = np.logical_and(grid_a, grid_b).sum()
    union = np.logical_or(grid_a, grid_b).sum()
    return float(inter) / float(union) if union else 0.0
