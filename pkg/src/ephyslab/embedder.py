"""Patch encoding and embedding enhancement.

X = Y_cnn + E_spectral + [E_position, E_modality] + E_stcpe, where the
position/modality block is per channel and broadcast over patches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .ingest import ChannelMeta, CleanSegment
from .moirai import MoiraiBlock
from .ndcore import ConfigError, DataError, rfft_log_mag

MODALITY_TYPES = ("EEG", "iEEG")
MODALITY_SUBTYPES = ("scalp", "grid", "strip", "depth")


@dataclass
class PatchGrid:
    patches: np.ndarray  # (C, N, P)
    channels: list[ChannelMeta]

    @property
    def C(self) -> int:
        return self.patches.shape[0]

    @property
    def N(self) -> int:
        return self.patches.shape[1]

    @property
    def P(self) -> int:
        return self.patches.shape[2]


def patchify(segment: CleanSegment | np.ndarray, P: int, channels=None) -> PatchGrid:
    """Split each channel into non-overlapping length-P patches."""
    data = segment.data if isinstance(segment, CleanSegment) else np.asarray(segment, dtype=np.float64)
    channels = segment.channels if isinstance(segment, CleanSegment) else channels
    c, t = data.shape
    if t % P:
        raise DataError(f"segment length {t} not divisible by patch size {P}")
    return PatchGrid(data.reshape(c, t // P, P).copy(), list(channels or []))


def sample_mask(C: int, N: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean (C, N) mask with exactly round(ratio*C*N) entries set, chosen uniformly."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio {ratio} outside [0, 1]")
    k = int(math.floor(ratio * C * N + 0.5))
    flat = np.zeros(C * N, dtype=bool)
    flat[rng.choice(C * N, size=k, replace=False)] = True
    return flat.reshape(C, N)


def conv_out_len(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


class PatchCNN(nn.Module):
    """Three strided 1-D convolutions per patch, SiLU in between, then flatten + project."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ci = cfg.cnn_inter_channels
        self.convs = nn.ModuleList()
        in_ch = 1
        for k, s, p in zip(cfg.cnn_kernels, cfg.cnn_strides, cfg.cnn_paddings):
            self.convs.append(nn.Conv1d(in_ch, ci, k, stride=s, padding=p))
            in_ch = ci
        self.proj = nn.Linear(ci * cfg.cnn_out_len(), cfg.d_model)
        self.patch_size = cfg.patch_size

    def forward(self, patches):
        lead = patches.shape[:-1]
        if patches.shape[-1] != self.patch_size:
            raise ConfigError(f"expected patches of length {self.patch_size}, got {patches.shape[-1]}")
        h = patches.reshape(-1, 1, self.patch_size)
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.silu(h)
        return self.proj(h.flatten(1)).reshape(*lead, -1)


def patch_cnn(patches, mask, cnn: PatchCNN):
    return cnn(zero_masked(patches, mask))


def zero_masked(patches, mask):
    if mask is None:
        return patches
    keep = 1.0 - torch.as_tensor(mask, dtype=patches.dtype)
    return patches * keep[..., None]


def spectral_features(patches: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Log-magnitude rFFT bins that feed the spectral embedding."""
    if cfg.spectral_bins == "cutoff":
        return rfft_log_mag(patches, cfg.sample_rate_hz, cfg.cutoff_hz)
    return np.log1p(np.abs(np.fft.rfft(patches, axis=-1)))[..., :cfg.spectral_in_bins]


class SpectralEmbed(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Linear(cfg.spectral_in_bins, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, patches):
        feats = spectral_features(patches.detach().cpu().numpy(), self.cfg)
        return self.drop(self.proj(torch.from_numpy(feats).to(patches)))


def spectral_embed(patches, mask, spec: SpectralEmbed):
    return spec(zero_masked(patches, mask))


def channel_pos_embed(meta: ChannelMeta, d_model: int, temperature: float = 2000.0,
                      scale: float = 1.0 / 256.0) -> np.ndarray:
    """Sinusoidal embedding of (x, y, z) in cm, d_model/4 lanes per axis; zeros if coords unknown."""
    if d_model % 8:
        raise ConfigError("d_model must be divisible by 8 for the position embedding")
    dj = d_model // 4
    if meta.coords_cm is None:
        return np.zeros(3 * dj)
    i = np.arange(dj // 2)
    out = np.empty((3, dj))
    for a, coord in enumerate(meta.coords_cm):
        arg = coord * scale / temperature ** (2 * i / dj)
        out[a, 0::2] = np.sin(arg)
        out[a, 1::2] = np.cos(arg)
    return out.reshape(-1)


class ModalityEmbed(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.type_table = nn.Embedding(len(MODALITY_TYPES), d_model // 4)
        self.subtype_table = nn.Embedding(len(MODALITY_SUBTYPES), d_model // 4)

    def forward(self, channels: list[ChannelMeta]):
        t = torch.tensor([MODALITY_TYPES.index(c.modality_type) for c in channels])
        s = torch.tensor([MODALITY_SUBTYPES.index(c.subtype) for c in channels])
        return self.type_table(t) + self.subtype_table(s)


def modality_embed(meta: ChannelMeta, mod: ModalityEmbed):
    return mod([meta])[0]


class STCPE(nn.Module):
    """Sliding-window conditional positional encoding.

    Each window of ``w`` patches (all channels) goes through one encoder block
    at reduced width; every window output is added back at the absolute
    position it came from. Windows are truncated at the sequence edges, so a
    boundary position only gathers from the windows that contain it.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.w = cfg.stcpe_window
        self.down = nn.Linear(cfg.d_model, cfg.stcpe_dim)
        self.block = MoiraiBlock(cfg.stcpe_dim, cfg.stcpe_heads, cfg.stcpe_ffn_dim, cfg.rope_base,
                                 cfg.dropout)
        self.up = nn.Linear(cfg.stcpe_dim, cfg.d_model)

    def forward(self, x):
        n = x.shape[-2]
        if n < 1:
            raise DataError("STCPE needs at least one patch")
        m = (self.w - 1) // 2
        z = self.down(x)
        acc = torch.zeros_like(z)
        w_idx = torch.arange(self.w)
        # full-width windows in one batch
        centers = list(range(m, n - m))
        if centers:
            idx = torch.tensor(centers)[:, None] - m + w_idx  # (W, w)
            windows = z[..., idx, :].movedim(-3, 0)  # (W, ..., C, w, d)
            h = self.block(windows, w_idx)
            for j, t in enumerate(centers):
                acc[..., t - m:t + m + 1, :] = acc[..., t - m:t + m + 1, :] + h[j]
        for t in range(n):
            if m <= t < n - m:
                continue
            lo, hi = max(0, t - m), min(n, t + m + 1)
            h = self.block(z[..., lo:hi, :], torch.arange(hi - lo))
            acc[..., lo:hi, :] = acc[..., lo:hi, :] + h
        return self.up(acc)


def stcpe(x, module: STCPE):
    return module(x)


def enhance(y_cnn, e_spectral, e_position, e_modality, e_stcpe):
    """Sum the patch-level terms and the per-channel [position, modality] block.

    ``e_position`` is (C, 3d/4) and ``e_modality`` is (C, d/4); both broadcast over N.
    """
    d = y_cnn.shape[-1]
    if e_position.shape[-1] + e_modality.shape[-1] != d:
        raise ConfigError(
            f"position ({e_position.shape[-1]}) + modality ({e_modality.shape[-1]}) widths != {d}")
    chan = torch.cat([torch.as_tensor(e_position, dtype=y_cnn.dtype), e_modality], dim=-1)
    return y_cnn + e_spectral + chan[..., :, None, :] + e_stcpe


class Embedder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.cnn = PatchCNN(cfg)
        self.spectral = SpectralEmbed(cfg)
        self.modality = ModalityEmbed(cfg.d_model)
        self.stcpe = STCPE(cfg)

    def position(self, channels: list[ChannelMeta]):
        cfg = self.cfg
        pe = np.stack([channel_pos_embed(c, cfg.d_model, cfg.pe_temperature, cfg.pe_scale)
                       for c in channels])
        return torch.from_numpy(pe)

    def forward(self, patches, channels: list[ChannelMeta], mask=None):
        """patches: (C, N, P) tensor; mask: optional (C, N) bool, True = masked."""
        if patches.shape[-3] != len(channels):
            raise ConfigError(f"{patches.shape[-3]} channels of data but {len(channels)} metadata entries")
        x = zero_masked(patches, mask)
        y_cnn = self.cnn(x)
        e_pos = self.position(channels).to(y_cnn)
        e_mod = self.modality(channels)
        base = enhance(y_cnn, self.spectral(x), e_pos, e_mod, 0.0)
        # STCPE conditions on the enhanced tokens: masked patches are never all-zero here
        return base + self.stcpe(base)
