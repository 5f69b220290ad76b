import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ephyslab.ndcore import (ConfigError, DataError, beta31_subset_size, make_rng, n_cutoff_bins,
                             rfft_log_mag, stft_log_mag, stft_shape)

FS = 500.0


def test_constant_patch_is_dc_only():
    out = rfft_log_mag(np.ones(500))
    assert out.shape == (201,)
    assert out[0] == pytest.approx(math.log(501.0), rel=1e-12)
    assert np.max(np.abs(out[1:])) < 1e-12


def test_zero_patch():
    assert np.array_equal(rfft_log_mag(np.zeros(500)), np.zeros(201))


def test_sinusoid_lands_in_one_bin():
    t = np.arange(500) / FS
    x = np.sin(2 * np.pi * 10 * t)
    mag = np.expm1(rfft_log_mag(x))
    assert mag[10] == pytest.approx(250.0, rel=1e-10)
    others = np.delete(mag, [9, 10, 11])
    assert others.max() < 1e-9


def test_bin_count_convention():
    assert n_cutoff_bins(500, FS, 200.0) == 201
    assert n_cutoff_bins(50, FS, 200.0) == 21
    assert n_cutoff_bins(200, FS, 200.0) == 81
    assert n_cutoff_bins(100, FS, 200.0) == 41


@given(st.integers(2, 600), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_parseval(p, seed):
    x = make_rng(seed).standard_normal(p)
    spec = np.abs(np.fft.rfft(x)) ** 2
    # interior bins appear twice in the two-sided spectrum
    w = np.full(spec.size, 2.0)
    w[0] = 1.0
    if p % 2 == 0:
        w[-1] = 1.0
    assert np.sum(w * spec) / p == pytest.approx(np.sum(x ** 2), rel=1e-10)


def test_rejects_nonfinite_and_bad_cutoff():
    x = np.zeros(500)
    x[3] = np.nan
    with pytest.raises(DataError):
        rfft_log_mag(x)
    with pytest.raises(ConfigError):
        rfft_log_mag(np.zeros(500), cutoff_hz=300.0)
    with pytest.raises(ConfigError):
        rfft_log_mag(np.zeros(1))


@pytest.mark.parametrize("window,frames", [(200, 4), (100, 9)])
def test_stft_frame_counts(window, frames):
    out = stft_log_mag(np.random.default_rng(0).standard_normal(500), window)
    assert out.shape == (n_cutoff_bins(window, FS, 200.0), frames)
    assert stft_shape(500, window) == out.shape


def test_stft_zero_and_errors():
    assert not np.any(stft_log_mag(np.zeros(500), 200))
    with pytest.raises(ConfigError):
        stft_log_mag(np.zeros(50), 100)
    with pytest.raises(ConfigError):
        stft_log_mag(np.zeros(500), 200, hop=50)


def test_stft_frame_matches_manual_hann():
    x = np.random.default_rng(1).standard_normal(500)
    out = stft_log_mag(x, 100)
    n = np.arange(100)
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * n / 100)
    frame = x[150:250] * hann
    manual = np.log1p(np.abs(np.fft.rfft(frame)))[:41]
    assert np.allclose(out[:, 3], manual, atol=1e-13)


def test_spectra_deterministic():
    x = np.random.default_rng(2).standard_normal((3, 500))
    assert np.array_equal(rfft_log_mag(x), rfft_log_mag(x))
    assert np.array_equal(stft_log_mag(x, 200), stft_log_mag(x, 200))


def test_beta31_mean():
    # E[ceil(32 X)] = sum_{j<32} P(32 X > j) = 32 - sum_j j^3 / 32^3 for X ~ Beta(3, 1)
    exact = 32 - sum(j ** 3 for j in range(32)) / 32 ** 3
    assert abs(exact - 0.75 * 32) <= 0.5
    rng = make_rng(0)
    draws = np.array([beta31_subset_size(32, rng) for _ in range(100_000)])
    stderr = draws.std() / np.sqrt(draws.size)
    assert abs(draws.mean() - exact) < 4 * stderr
    assert draws.min() >= 1 and draws.max() <= 32


def test_beta31_edge_cases():
    rng = make_rng(1)
    assert {beta31_subset_size(1, rng) for _ in range(100)} == {1}
    assert all(1 <= beta31_subset_size(30, rng) <= 30 for _ in range(1000))
    with pytest.raises(ConfigError):
        beta31_subset_size(0, rng)


@given(st.integers(0, 2**63 - 1), st.integers(1, 64))
@settings(max_examples=50, deadline=None)
def test_beta31_reproducible(seed, max_count):
    a = [beta31_subset_size(max_count, make_rng(seed)) for _ in range(3)]
    assert len(set(a)) == 1
