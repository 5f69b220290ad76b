"""Encoder backbone: any-variate attention with RoPE, GLU feed-forward, register tokens.

Token tensors are laid out as (..., C, N, d): channel (variate) axis, then
patch (time) axis. Attention runs jointly over all C*N tokens.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .ndcore import ConfigError


def rope_rotate(v, t, base: float = 10000.0, broken: bool = False):
    """Rotate consecutive pairs (v[2k], v[2k+1]) by angle t * base**(-2k/d_h).

    ``v`` has the head dim last; ``t`` broadcasts against ``v.shape[:-1]``.
    ``broken=True`` uses a deliberately wrong, non-relative angle (negative
    control for the verification suite).
    """
    as_numpy = isinstance(v, np.ndarray)
    v = torch.as_tensor(v, dtype=torch.float64) if as_numpy else v
    dh = v.shape[-1]
    if dh % 2:
        raise ConfigError(f"RoPE needs an even head dim, got {dh}")
    t = torch.as_tensor(t, dtype=v.dtype, device=v.device)
    theta = base ** (-torch.arange(0, dh, 2, dtype=v.dtype, device=v.device) / dh)
    if broken:
        t = t * t + 1.0
    ang = t[..., None] * theta
    cos, sin = torch.cos(ang), torch.sin(ang)
    x1, x2 = v[..., 0::2], v[..., 1::2]
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1).flatten(-2)
    return out.numpy() if as_numpy else out


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.eps = eps

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class AnyVariateAttention(nn.Module):
    """Full spatio-temporal attention with RoPE over time and a same/different-variate bias."""

    def __init__(self, d_model: int, n_heads: int, rope_base: float = 10000.0, dropout: float = 0.0):
        super().__init__()
        if d_model % n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        self.n_heads, self.head_dim = n_heads, d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model, bias=False)
        self.k_proj = nn.Linear(d_model, d_model, bias=False)
        self.v_proj = nn.Linear(d_model, d_model, bias=False)
        self.o_proj = nn.Linear(d_model, d_model, bias=False)
        self.u1 = nn.Parameter(torch.zeros(n_heads))  # same variate
        self.u2 = nn.Parameter(torch.zeros(n_heads))  # different variate
        self.rope_base = rope_base
        self.drop = nn.Dropout(dropout)
        self.break_rope = False

    def _split(self, x):
        return x.unflatten(-1, (self.n_heads, self.head_dim))  # (..., C, N, H, dh)

    def attention_weights(self, x, time_index):
        """Softmax weights of shape (..., H, C*N, C*N); token order is channel-major."""
        c, n = x.shape[-3], x.shape[-2]
        t = time_index.to(x.dtype)[:, None]  # broadcast over heads
        q = rope_rotate(self._split(self.q_proj(x)), t, self.rope_base, self.break_rope)
        k = rope_rotate(self._split(self.k_proj(x)), t, self.rope_base, self.break_rope)
        q = q.flatten(-4, -3).transpose(-3, -2)  # (..., H, C*N, dh)
        k = k.flatten(-4, -3).transpose(-3, -2)
        energy = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        chan = torch.arange(c, device=x.device).repeat_interleave(n)
        same = (chan[:, None] == chan[None, :]).to(x.dtype)
        bias = self.u1[:, None, None] * same + self.u2[:, None, None] * (1.0 - same)
        return torch.softmax(energy + bias, dim=-1)

    def forward(self, x, time_index):
        c, n = x.shape[-3], x.shape[-2]
        attn = self.drop(self.attention_weights(x, time_index))
        v = self._split(self.v_proj(x)).flatten(-4, -3).transpose(-3, -2)
        out = (attn @ v).transpose(-3, -2)  # (..., C*N, H, dh)
        out = out.flatten(-2).unflatten(-2, (c, n))
        return self.o_proj(out)


class GLUFeedForward(nn.Module):
    def __init__(self, d_model: int, ffn_dim: int):
        super().__init__()
        self.gate = nn.Linear(d_model, ffn_dim, bias=False)
        self.up = nn.Linear(d_model, ffn_dim, bias=False)
        self.down = nn.Linear(ffn_dim, d_model, bias=False)

    def forward(self, x):
        return self.down(F.silu(self.gate(x)) * self.up(x))


def glu_ffn(x, ffn: GLUFeedForward):
    return ffn(x)


class MoiraiBlock(nn.Module):
    """Pre-norm residual block: attention then GLU feed-forward."""

    def __init__(self, d_model: int, n_heads: int, ffn_dim: int, rope_base: float = 10000.0,
                 dropout: float = 0.0):
        super().__init__()
        self.attn_norm = RMSNorm(d_model)
        self.attn = AnyVariateAttention(d_model, n_heads, rope_base, dropout)
        self.ffn_norm = RMSNorm(d_model)
        self.ffn = GLUFeedForward(d_model, ffn_dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, time_index):
        x = x + self.drop(self.attn(self.attn_norm(x), time_index))
        return x + self.drop(self.ffn(self.ffn_norm(x)))


class Registers(nn.Module):
    """Channel, temporal and corner register vectors."""

    def __init__(self, d_model: int):
        super().__init__()
        self.channel = nn.Parameter(torch.zeros(d_model))
        self.temporal = nn.Parameter(torch.zeros(d_model))
        self.corner = nn.Parameter(torch.zeros(d_model))


def add_registers(x, regs: Registers):
    """(..., C, N, d) -> (..., C+1, N+1, d).

    The new last channel row carries the temporal register, the new last time
    column carries the channel register, and the corner holds the combined one.
    """
    *lead, c, n, d = x.shape
    row = regs.temporal.expand(*lead, 1, n, d)
    body = torch.cat([x, row], dim=-3)
    col = regs.channel.expand(*lead, c, 1, d)
    corner = regs.corner.expand(*lead, 1, 1, d)
    col = torch.cat([col, corner], dim=-3)
    return torch.cat([body, col], dim=-2)


def strip_registers(x):
    return x[..., :-1, :-1, :]


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            MoiraiBlock(cfg.d_model, cfg.n_heads, cfg.ffn_dim, cfg.rope_base, cfg.dropout)
            for _ in range(cfg.n_layers))

    def forward(self, x, time_index=None, record=None):
        """Run every block. ``record`` (a list) collects each block's output."""
        if time_index is None:
            time_index = torch.arange(x.shape[-2], device=x.device)
        for block in self.blocks:
            x = block(x, time_index)
            if record is not None:
                record.append(x)
        return x


def encoder_forward(x, encoder: Encoder, regs: Registers | None = None):
    """Register-augment (if ``regs`` given), encode, and strip registers again.

    Register tokens sit at time index N, one past the last data patch.
    """
    n = x.shape[-2]
    if regs is not None:
        x = add_registers(x, regs)
    h = encoder(x, torch.arange(x.shape[-2], device=x.device))
    return strip_registers(h) if regs is not None else h[..., :, :n, :]
