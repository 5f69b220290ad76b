"""Shared numeric primitives: spectral features and the subset-size sampler.

All arrays are float64 numpy arrays. Randomness flows through
``numpy.random.Generator`` objects built by :func:`make_rng`.
"""

from __future__ import annotations

import math

import numpy as np

RNG_ALGORITHM = "PCG64"


class DataError(ValueError):
    """Input data is malformed (non-finite values, wrong shape)."""


class ConfigError(ValueError):
    """A configuration value violates an operation's preconditions."""


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def n_cutoff_bins(n_fft: int, sample_rate_hz: float, cutoff_hz: float) -> int:
    """Number of rFFT bins with frequency <= ``cutoff_hz``."""
    k = int(math.floor(cutoff_hz * n_fft / sample_rate_hz + 1e-9)) + 1
    return min(k, n_fft // 2 + 1)


def _check_finite(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError("input contains non-finite values")
    return x


def rfft_log_mag(patch, sample_rate_hz: float = 500.0, cutoff_hz: float = 200.0) -> np.ndarray:
    """log(1 + |rFFT(patch)|) over bins at or below ``cutoff_hz``.

    Works on the last axis, so a (..., P) stack of patches is accepted.
    """
    x = _check_finite(patch)
    p = x.shape[-1]
    if p < 2:
        raise ConfigError(f"patch length must be >= 2, got {p}")
    if not 0 < cutoff_hz <= sample_rate_hz / 2:
        raise ConfigError(f"cutoff {cutoff_hz} Hz outside (0, {sample_rate_hz / 2}]")
    k = n_cutoff_bins(p, sample_rate_hz, cutoff_hz)
    mag = np.abs(np.fft.rfft(x, axis=-1))[..., :k]
    return np.log1p(mag)


def stft_shape(patch_len: int, window_len: int, sample_rate_hz: float = 500.0,
               cutoff_hz: float = 200.0) -> tuple[int, int]:
    """(frequency bins, frames) produced by :func:`stft_log_mag` at 50% overlap."""
    if window_len > patch_len:
        raise ConfigError(f"window {window_len} longer than patch {patch_len}")
    hop = window_len // 2
    frames = (patch_len - window_len) // hop + 1
    return n_cutoff_bins(window_len, sample_rate_hz, cutoff_hz), frames


def stft_log_mag(patch, window_len: int, hop: int | None = None,
                 sample_rate_hz: float = 500.0, cutoff_hz: float = 200.0) -> np.ndarray:
    """Hann-windowed STFT magnitude, log(1+x) compressed, shape (..., F, T_s).

    Frames start at 0, hop, 2*hop, ... and never run past the patch end.
    """
    x = _check_finite(patch)
    p = x.shape[-1]
    if hop is None:
        hop = window_len // 2
    if window_len > p:
        raise ConfigError(f"window {window_len} longer than patch {p}")
    if hop != window_len // 2 or hop < 1:
        raise ConfigError(f"hop must be window_len/2 ({window_len // 2}), got {hop}")
    n_frames = (p - window_len) // hop + 1
    # periodic Hann, the usual STFT taper
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(window_len) / window_len)
    idx = np.arange(n_frames)[:, None] * hop + np.arange(window_len)[None, :]
    frames = x[..., idx] * window
    k = n_cutoff_bins(window_len, sample_rate_hz, cutoff_hz)
    mag = np.abs(np.fft.rfft(frames, axis=-1))[..., :k]
    return np.log1p(np.swapaxes(mag, -1, -2))


def beta31_subset_size(max_count: int, rng: np.random.Generator) -> int:
    """Draw a subset size in [1, max_count] from a scaled Beta(3, 1).

    Beta(3, 1) has CDF x**3, so U**(1/3) is an exact inverse-CDF draw.
    """
    if max_count < 1:
        raise ConfigError(f"max_count must be >= 1, got {max_count}")
    u = rng.random()
    x = (1.0 - u) ** (1.0 / 3.0)  # 1 - u lies in (0, 1]
    return int(min(max_count, max(1, math.ceil(x * max_count))))
