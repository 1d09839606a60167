"""Wavelet transform and cascade: hand arithmetic, round trips, identity."""

import numpy as np
import pytest
import torch

from crackseq.wavelet import (FrequencyBranch, WaveletCascade,
                              supported_bases, iwt, wt)

# ---------------------------------------------------------------------------
# Independent numpy oracle for the single-level Haar transform: block sums
# and differences, plus an explicit inverse written from the block formulas.


def haar_forward_np(x: np.ndarray):
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + c + d) / 2
    lh = (a - b + c - d) / 2
    hl = (a + b - c - d) / 2
    hh = (a - b - c + d) / 2
    return ll, lh, hl, hh


def haar_inverse_np(ll, lh, hl, hh):
    out = np.zeros((*ll.shape[:-2], ll.shape[-2] * 2, ll.shape[-1] * 2))
    out[..., 0::2, 0::2] = (ll + lh + hl + hh) / 2
    out[..., 0::2, 1::2] = (ll - lh + hl - hh) / 2
    out[..., 1::2, 0::2] = (ll + lh - hl - hh) / 2
    out[..., 1::2, 1::2] = (ll - lh - hl + hh) / 2
    return out


def conv_same_np(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' cross-correlation of one 2D map, by plain loops."""
    kh, kw = kernel.shape
    padded = np.pad(img, ((kh // 2, kh // 2), (kw // 2, kw // 2)))
    out = np.zeros_like(img)
    for i in range(img.shape[0]):
        for j in range(img.shape[1]):
            out[i, j] = (padded[i:i + kh, j:j + kw] * kernel).sum()
    return out


# ---------------------------------------------------------------------------


def test_haar_2x2_hand_arithmetic():
    x = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]], dtype=torch.float64)
    ll, lh, hl, hh = wt(x, "haar")
    assert ll.item() == pytest.approx(5.0)  # (1+2+3+4)/2
    assert lh.item() == pytest.approx(-1.0)  # (1-2+3-4)/2
    assert hl.item() == pytest.approx(-2.0)  # (1+2-3-4)/2
    assert hh.item() == pytest.approx(0.0)  # (1-2-3+4)/2


def test_haar_matches_numpy_block_oracle(rng):
    x = rng.standard_normal((2, 8, 12))
    bands = wt(torch.from_numpy(x), "haar")
    want = haar_forward_np(x)
    for got, ref in zip(bands, want):
        np.testing.assert_allclose(got.numpy(), ref, atol=1e-12)


@pytest.mark.parametrize("basis", supported_bases())
def test_energy_preserved(rng, basis):
    x = torch.from_numpy(rng.standard_normal((3, 16, 16)))
    bands = wt(x, basis)
    total = sum(float((b ** 2).sum()) for b in bands)
    assert total == pytest.approx(float((x ** 2).sum()), rel=1e-12)


@pytest.mark.parametrize("basis", supported_bases())
@pytest.mark.parametrize("size", [(8, 8), (16, 12), (9, 13), (7, 10)])
def test_round_trip(rng, basis, size):
    x = torch.from_numpy(rng.standard_normal((2, *size)))
    bands = wt(x, basis)
    back = iwt(*bands, basis=basis)[..., :size[0], :size[1]]
    assert float((back - x).abs().max()) < 1e-12


def test_round_trip_float32(rng):
    x = torch.from_numpy(rng.standard_normal((2, 16, 16)).astype(np.float32))
    back = iwt(*wt(x, "db2"), basis="db2")
    assert float((back - x).abs().max()) < 1e-5


@pytest.mark.parametrize("basis", supported_bases())
def test_shift_two_pixels_shifts_bands_by_one(rng, basis):
    x = torch.from_numpy(rng.standard_normal((1, 16, 16)))
    base = wt(x, basis)
    shifted = wt(torch.roll(x, shifts=2, dims=-1), basis)
    for ref, got in zip(base, shifted):
        assert float((got - torch.roll(ref, 1, dims=-1)).abs().max()) < 1e-12
    shifted = wt(torch.roll(x, shifts=2, dims=-2), basis)
    for ref, got in zip(base, shifted):
        assert float((got - torch.roll(ref, 1, dims=-2)).abs().max()) < 1e-12


def test_zero_high_bands_give_constant_blocks():
    ll = torch.tensor([[[4.0]]], dtype=torch.float64)
    zero = torch.zeros_like(ll)
    out = iwt(ll, zero, zero, zero, basis="haar")
    assert torch.allclose(out, torch.full((1, 2, 2), 2.0, dtype=torch.float64))


def test_unknown_basis_rejected():
    with pytest.raises(ValueError, match="unknown wavelet basis"):
        wt(torch.zeros(1, 4, 4), "sym9")


def test_axis_shorter_than_filter_rejected():
    with pytest.raises(ValueError, match="shorter"):
        wt(torch.zeros(1, 2, 2), "db2")


def test_batched_matches_stacked(rng):
    x = torch.from_numpy(rng.standard_normal((2, 3, 8, 8)))
    batched = wt(x, "haar")
    for i in range(2):
        single = wt(x[i], "haar")
        for bb, ss in zip(batched, single):
            assert torch.equal(bb[i], ss)


class TestCascade:
    @pytest.mark.parametrize("levels", [1, 2, 3])
    @pytest.mark.parametrize("size", [(16, 16), (13, 10)])
    def test_delta_kernels_are_identity(self, rng, levels, size):
        cascade = WaveletCascade(channels=2, levels=levels).double()
        x = torch.from_numpy(rng.standard_normal((2, *size)))
        with torch.no_grad():
            out = cascade(x)
        assert out.shape == x.shape
        assert float((out - x).abs().max()) < 1e-10

    def test_zero_kernels_give_zero(self, rng):
        cascade = WaveletCascade(channels=2, levels=2).double()
        with torch.no_grad():
            for kernel in cascade.kernels:
                kernel.zero_()
        x = torch.from_numpy(rng.standard_normal((2, 8, 8)))
        with torch.no_grad():
            assert float(cascade(x).abs().max()) == 0.0

    def test_linear_in_input(self, rng):
        cascade = WaveletCascade(channels=2, levels=2).double()
        with torch.no_grad():
            for kernel in cascade.kernels:
                kernel.add_(torch.from_numpy(
                    rng.standard_normal(tuple(kernel.shape)) * 0.2))
        x = torch.from_numpy(rng.standard_normal((2, 8, 8)))
        y = torch.from_numpy(rng.standard_normal((2, 8, 8)))
        with torch.no_grad():
            combined = cascade(2.5 * x - 1.5 * y)
            parts = 2.5 * cascade(x) - 1.5 * cascade(y)
        assert float((combined - parts).abs().max()) < 1e-10

    def test_single_level_matches_numpy_loop_oracle(self, rng):
        channels = 2
        cascade = WaveletCascade(channels=channels, levels=1).double()
        with torch.no_grad():
            cascade.kernels[0].add_(torch.from_numpy(
                rng.standard_normal((4, channels, 3, 3)) * 0.3))
        kernels = cascade.kernels[0].detach().numpy()
        x = rng.standard_normal((channels, 8, 8))

        bands = haar_forward_np(x)
        filtered = []
        for band, kernel in zip(bands, kernels):
            filtered.append(np.stack([
                conv_same_np(band[ch], kernel[ch]) for ch in range(channels)
            ]))
        want = haar_inverse_np(*filtered)

        got = cascade(torch.from_numpy(x)).detach().numpy()
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_batched_matches_single(self, rng):
        cascade = WaveletCascade(channels=2, levels=2).double()
        x = torch.from_numpy(rng.standard_normal((3, 2, 8, 8)))
        with torch.no_grad():
            batched = cascade(x)
            for i in range(3):
                assert torch.allclose(batched[i], cascade(x[i]), atol=1e-12)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            WaveletCascade(channels=2, levels=0)
        with pytest.raises(ValueError):
            WaveletCascade(channels=2, kernel_size=4)
        with pytest.raises(ValueError):
            WaveletCascade(channels=2, basis="nope")


class TestFrequencyBranch:
    def test_merged_sums_per_frame_outputs(self, rng):
        branch = FrequencyBranch(channels=2, levels=2).double()
        stack = torch.from_numpy(rng.standard_normal((4, 2, 8, 8)))
        with torch.no_grad():
            merged = branch.merged(stack)
            want = sum(branch.cascade(stack[t]) for t in range(4))
        assert torch.allclose(merged, want, atol=1e-10)

    def test_identical_frames_scale_linearly(self, rng):
        branch = FrequencyBranch(channels=2, levels=1).double()
        frame = torch.from_numpy(rng.standard_normal((2, 8, 8)))
        stack = frame.unsqueeze(0).repeat(5, 1, 1, 1)
        with torch.no_grad():
            merged = branch.merged(stack)
            assert torch.allclose(merged, 5 * branch.cascade(frame), atol=1e-10)

    def test_output_shape(self, rng):
        branch = FrequencyBranch(channels=3, levels=2)
        stack = torch.randn(2, 4, 3, 8, 8)
        with torch.no_grad():
            out = branch(stack)
        assert out.shape == (2, 3, 8, 8)
