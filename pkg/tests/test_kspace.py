import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flow4dsr.errors import ValidationError
from flow4dsr.flowfield import Grid3, VelocityField
from flow4dsr.kspace import (
    NoiseSpec,
    add_kspace_noise,
    downsample_grid,
    downsample_with_noise,
    measure_snr_db,
    noise_sigma,
    signal_power,
    sinc_upsample,
    truncate_kspace,
)


def band_limited(n: int, rng, terms: int = 6) -> np.ndarray:
    """Real field whose spectrum lies strictly inside the half-size band."""
    idx = np.arange(n)
    out = np.zeros((n, n, n))
    for _ in range(terms):
        k = rng.integers(-(n // 4) + 1, n // 4, size=3)
        phase = rng.uniform(0, 2 * np.pi)
        arg = 2 * np.pi * (k[0] * idx[:, None, None] + k[1] * idx[None, :, None] + k[2] * idx[None, None, :]) / n
        out += rng.normal() * np.cos(arg + phase)
    return out


def dirichlet_1d(m: int, factor: int = 2) -> np.ndarray:
    """Zero-padded band-limited interpolant of a unit impulse, by direct summation."""
    n = m * factor
    j = np.arange(n)
    k = np.arange(-(m // 2), m - m // 2)
    return np.exp(2j * np.pi * np.outer(j, k) / n).sum(axis=1) / m


def test_constant_preserved_both_ways():
    c = 3.25
    lr = downsample_with_noise(np.full((16, 16, 16), c))
    assert lr.shape == (8, 8, 8)
    assert np.allclose(lr, c, atol=1e-12)
    hr = sinc_upsample(np.full((8, 8, 8), c))
    assert np.allclose(hr, c, atol=1e-12)
    assert not np.iscomplexobj(hr)


def test_band_limited_roundtrip(rng):
    hr = band_limited(24, rng)
    rec = sinc_upsample(downsample_with_noise(hr).real)
    assert np.max(np.abs(rec - hr)) / np.max(np.abs(hr)) < 1e-10


def test_sinc_upsample_matches_direct_dirichlet_sum():
    m = 6
    lr = np.zeros((m, m, m))
    lr[0, 0, 0] = 1.0
    d = dirichlet_1d(m)
    oracle = (d[:, None, None] * d[None, :, None] * d[None, None, :]).real
    assert np.allclose(sinc_upsample(lr), oracle, atol=1e-12)


def test_sinc_upsample_interpolates_samples(rng):
    lr = rng.normal(size=(8, 8, 8))
    # for odd-free band (Nyquist dropped) even HR samples reproduce LR samples
    spec = np.fft.fftn(lr)
    spec[4, :, :] = spec[:, 4, :] = spec[:, :, 4] = 0
    lr = np.fft.ifftn(spec).real
    assert np.allclose(sinc_upsample(lr)[::2, ::2, ::2], lr, atol=1e-12)


def test_truncation_rejects_odd_dims():
    with pytest.raises(ValidationError):
        truncate_kspace(np.zeros((9, 8, 8)))
    with pytest.raises(ValidationError):
        truncate_kspace(np.zeros((8, 8)))
    with pytest.raises(ValidationError):
        downsample_grid(Grid3((9, 8, 8)))


def test_noise_sigma_formula():
    assert noise_sigma(10.0, 10.0) == pytest.approx(1.0)
    assert noise_sigma(4.0, 0.0) == pytest.approx(2.0)
    with pytest.raises(ValidationError):
        noise_sigma(0.0, 15.0)


def test_noise_disabled_at_infinite_snr(rng):
    ks = rng.normal(size=(4, 4, 4)) + 0j
    out, sigma = add_kspace_noise(ks, NoiseSpec(math.inf))
    assert sigma == 0.0 and np.array_equal(out, ks)
    assert measure_snr_db(ks, out) == math.inf
    with pytest.raises(ValidationError):
        NoiseSpec(math.nan)


def test_noise_is_seeded(rng):
    ks = rng.normal(size=(6, 6, 6)) + 0j
    a, _ = add_kspace_noise(ks, NoiseSpec(15.0, 7))
    b, _ = add_kspace_noise(ks, NoiseSpec(15.0, 7))
    c, _ = add_kspace_noise(ks, NoiseSpec(15.0, 8))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


@given(st.floats(5.0, 25.0), st.integers(0, 10_000))
def test_measured_snr_near_target(snr, seed):
    ks = np.random.default_rng(seed).normal(size=(16, 16, 16)) * (1 + 1j)
    noisy, sigma = add_kspace_noise(ks, NoiseSpec(snr, seed))
    assert sigma**2 == pytest.approx(signal_power(ks) / 10 ** (snr / 10))
    assert abs(measure_snr_db(ks, noisy) - snr) < 0.2


def test_sinc_upsample_of_velocity_field(rng):
    g = Grid3((8, 8, 8), (2.0, 2.0, 2.0))
    v = VelocityField.from_stack(g, rng.normal(size=(3, 8, 8, 8)))
    up = sinc_upsample(v)
    assert up.grid == Grid3((16, 16, 16), (1.0, 1.0, 1.0))
    assert np.allclose(up.vy, sinc_upsample(v.vy))
    assert sinc_upsample(v.stack()).shape == (3, 16, 16, 16)
    with pytest.raises(ValidationError):
        sinc_upsample(v.vx, factor=3)


def test_sinc_upsample_keeps_complex():
    z = np.ones((4, 4, 4)) * (1 + 2j)
    assert np.allclose(sinc_upsample(z), 1 + 2j)
