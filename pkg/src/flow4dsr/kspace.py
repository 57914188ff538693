"""k-space truncation with calibrated complex Gaussian noise, and sinc upsampling.

Transform convention: forward DFT unnormalised, inverse scaled by 1/N.
Truncation keeps the DC-centred half-size block and rescales it by the
product of per-axis size ratios so that a constant image keeps its value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .flowfield import Grid3, VelocityField


@dataclass(frozen=True)
class NoiseSpec:
    target_snr_db: float
    seed: int = 0

    def __post_init__(self):
        if math.isnan(self.target_snr_db) or self.target_snr_db == -math.inf:
            raise ValidationError("target_snr_db must be finite (or +inf to disable noise)")

    @property
    def enabled(self) -> bool:
        return math.isfinite(self.target_snr_db)


def fft3(vol: np.ndarray) -> np.ndarray:
    return np.fft.fftn(vol, axes=(-3, -2, -1))


def ifft3(ks: np.ndarray) -> np.ndarray:
    return np.fft.ifftn(ks, axes=(-3, -2, -1))


def noise_sigma(px: float, target_snr_db: float) -> float:
    """sigma such that sigma**2 = px / 10**(snr/10), i.e. the complex noise power."""
    if not px > 0:
        raise ValidationError(f"signal power must be positive, got {px}")
    return math.sqrt(px / 10.0 ** (target_snr_db / 10.0))


def signal_power(ks: np.ndarray) -> float:
    return float(np.mean(np.abs(ks) ** 2))


def _centre_slices(big: tuple[int, ...], small: tuple[int, ...]) -> tuple[slice, ...]:
    # fftshift puts DC at n // 2 for any n, so aligning DC aligns the blocks
    return tuple(slice(n // 2 - m // 2, n // 2 - m // 2 + m) for n, m in zip(big, small))


def truncate_kspace(hr: np.ndarray) -> np.ndarray:
    """Low-pass, half-size k-space of the image ``hr`` in standard DFT order."""
    hr = np.asarray(hr)
    if hr.ndim != 3:
        raise ValidationError(f"expected a 3D volume, got shape {hr.shape}")
    if any(n % 2 for n in hr.shape):
        raise ValidationError(f"downsampling needs even dims, got {hr.shape}")
    lr_shape = tuple(n // 2 for n in hr.shape)
    centred = np.fft.fftshift(fft3(hr))
    block = centred[_centre_slices(hr.shape, lr_shape)]
    ratio = np.prod([m / n for m, n in zip(lr_shape, hr.shape)])
    return np.fft.ifftshift(block) * ratio


def add_kspace_noise(ks: np.ndarray, noise: NoiseSpec | None) -> tuple[np.ndarray, float]:
    """Add zero-mean complex white noise at the target SNR; returns (noisy, sigma).

    Real and imaginary parts each get variance sigma**2 / 2.  The real parts
    are drawn first, then the imaginary parts, both in C order.
    """
    if noise is None or not noise.enabled:
        return ks.copy(), 0.0
    sigma = noise_sigma(signal_power(ks), noise.target_snr_db)
    rng = np.random.default_rng(noise.seed)
    std = sigma / math.sqrt(2.0)
    re = rng.normal(0.0, std, size=ks.shape)
    im = rng.normal(0.0, std, size=ks.shape)
    return ks + (re + 1j * im), sigma


def downsample_with_noise(hr: np.ndarray, noise: NoiseSpec | None = None) -> np.ndarray:
    """Half-resolution complex image from k-space truncation plus acquisition noise."""
    lr_ks = truncate_kspace(hr)
    noisy, _ = add_kspace_noise(lr_ks, noise)
    return ifft3(noisy)


def measure_snr_db(signal_ks: np.ndarray, noisy_ks: np.ndarray) -> float:
    signal_ks = np.asarray(signal_ks)
    noisy_ks = np.asarray(noisy_ks)
    if signal_ks.shape != noisy_ks.shape:
        raise ValidationError("signal and noisy k-space shapes differ")
    p_res = signal_power(noisy_ks - signal_ks)
    if p_res == 0:
        return math.inf
    return 10.0 * math.log10(signal_power(signal_ks) / p_res)


def _zero_pad_upsample(lr: np.ndarray, factor: int) -> np.ndarray:
    lr = np.asarray(lr)
    hr_shape = tuple(n * factor for n in lr.shape)
    centred = np.fft.fftshift(fft3(lr))
    padded = np.zeros(hr_shape, dtype=np.complex128)
    padded[_centre_slices(hr_shape, lr.shape)] = centred
    return ifft3(np.fft.ifftshift(padded)) * factor**3


def sinc_upsample(lr, factor: int = 2):
    """Band-limited (zero-padded k-space) upsampling of a complex or real volume.

    Real inputs and VelocityField components come back real.
    """
    if factor != 2:
        raise ValidationError(f"only factor 2 is supported, got {factor}")
    if isinstance(lr, VelocityField):
        comps = [_zero_pad_upsample(c, factor).real for c in (lr.vx, lr.vy, lr.vz)]
        return VelocityField(lr.grid.refined(factor), *comps)
    lr = np.asarray(lr)
    if lr.ndim == 4:
        return np.stack([sinc_upsample(c, factor) for c in lr])
    if lr.ndim != 3:
        raise ValidationError(f"expected a 3D volume, got shape {lr.shape}")
    out = _zero_pad_upsample(lr, factor)
    return out if np.iscomplexobj(lr) else out.real


def downsample_grid(grid: Grid3) -> Grid3:
    if any(d % 2 for d in grid.dims):
        raise ValidationError(f"downsampling needs even dims, got {grid.dims}")
    return grid.coarsened(2)
