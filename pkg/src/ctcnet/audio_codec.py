"""Learnable filter-bank codec: waveform encoder, mask head, decoder.

"Same-mode" lengths: the encoder pads L-1 total (L//2 left, (L-1)//2 right) so
the embedding has T_e = ceil(T_a / stride) columns for every input length; the
decoder runs the transposed convolution unpadded and slices [L//2, L//2 + T_a).
Encoder and decoder carry no bias, keeping both maps linear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class EncoderConfig:
    num_filters: int = 512
    kernel_len: int = 21

    def __post_init__(self):
        if self.num_filters < 1:
            raise ConfigError(f"num_filters must be >= 1, got {self.num_filters}")
        if self.kernel_len < 2:
            raise ConfigError(f"kernel_len must be >= 2, got {self.kernel_len}")

    @property
    def stride(self) -> int:
        return self.kernel_len // 2

    def embedding_len(self, num_samples: int) -> int:
        return math.ceil(num_samples / self.stride)


def _pad_amounts(kernel_len: int) -> tuple[int, int]:
    return kernel_len // 2, (kernel_len - 1) // 2


class WaveEncoder(nn.Module):
    """FB: 1-D convolution with N kernels of length L, stride floor(L/2)."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.conv = nn.Conv1d(1, cfg.num_filters, cfg.kernel_len,
                              stride=cfg.stride, bias=False)
        bound = 1.0 / math.sqrt(cfg.kernel_len)
        nn.init.uniform_(self.conv.weight, -bound, bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: B x T_a (or T_a) -> B x N x T_e (or N x T_e)
        squeeze = x.dim() == 1
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[-1] < self.cfg.kernel_len:
            raise DataError(
                f"input length {x.shape[-1]} shorter than one kernel "
                f"({self.cfg.kernel_len})")
        left, right = _pad_amounts(self.cfg.kernel_len)
        out = self.conv(F.pad(x.unsqueeze(1), (left, right)))
        return out.squeeze(0) if squeeze else out


class MaskHead(nn.Module):
    """Per-timestep fully connected map N -> N followed by ReLU."""

    def __init__(self, num_filters: int):
        super().__init__()
        self.num_filters = num_filters
        self.proj = nn.Conv1d(num_filters, num_filters, 1)

    def forward(self, g: torch.Tensor) -> torch.Tensor:
        # g: (B x) N x T_e -> nonnegative mask of the same shape
        if g.shape[-2] != self.num_filters:
            raise DataError(
                f"expected {self.num_filters} channels, got {g.shape[-2]}")
        squeeze = g.dim() == 2
        if squeeze:
            g = g.unsqueeze(0)
        out = F.relu(self.proj(g))
        return out.squeeze(0) if squeeze else out


def apply_mask(e: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Q = E * M, elementwise."""
    if e.shape != m.shape:
        raise DataError(f"shape mismatch: {tuple(e.shape)} vs {tuple(m.shape)}")
    return e * m


class WaveDecoder(nn.Module):
    """FB^-1: transposed convolution back to the waveform domain."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.deconv = nn.ConvTranspose1d(cfg.num_filters, 1, cfg.kernel_len,
                                         stride=cfg.stride, bias=False)
        bound = 1.0 / math.sqrt(cfg.kernel_len)
        nn.init.uniform_(self.deconv.weight, -bound, bound)

    def forward(self, q: torch.Tensor, length: int) -> torch.Tensor:
        # q: (B x) N x T_e -> waveform of exactly `length` samples
        if q.shape[-2] != self.cfg.num_filters:
            raise DataError(
                f"expected {self.cfg.num_filters} channels, got {q.shape[-2]}")
        squeeze = q.dim() == 2
        if squeeze:
            q = q.unsqueeze(0)
        raw = self.deconv(q).squeeze(1)
        left = self.cfg.kernel_len // 2
        out = raw[:, left:left + length]
        if out.shape[-1] < length:
            out = F.pad(out, (0, length - out.shape[-1]))
        return out.squeeze(0) if squeeze else out
