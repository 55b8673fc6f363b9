"""Hierarchical unimodal subnetwork block.

One block owns up to four stages over an S-level feature pyramid:
bottom_up (multi-resolution extraction), fuse_adjacent (bottom-up/top-down/
lateral exchange between neighboring levels), collapse (project every level to
full temporal resolution and merge), and an optional downward pass (top-to-
bottom refresh used by the top-fusion variant). Temporal lengths halve with a
ceiling down the stack; kernels must be odd so stride-2 convolutions land on
ceil(T/2) exactly.

Pointwise (1x1) convolutions are dense; temporal convolutions are depthwise,
except the level-1 entry convolution which stays dense: fully dense temporal
convolutions at 512 channels would more than double the parameter count the
variants are sized for.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError

NORM_KINDS = ("global_layer_norm", "batch_norm")


@dataclass(frozen=True)
class PyramidConfig:
    depth: int = 5
    channels: int = 512
    kernel: int = 5
    norm: str = "global_layer_norm"
    downsample_stride: int = 2

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"pyramid depth must be >= 1, got {self.depth}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.norm not in NORM_KINDS:
            raise ConfigError(f"norm must be one of {NORM_KINDS}, got {self.norm!r}")
        if self.downsample_stride != 2:
            raise ConfigError("downsample_stride is fixed at 2")


class GlobalLayerNorm(nn.Module):
    """Layer norm over (channel, time) jointly, per sample."""

    def __init__(self, channels: int, eps: float = 1e-8):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels, 1))
        self.bias = nn.Parameter(torch.zeros(channels, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: B x C x T
        mean = x.mean(dim=(1, 2), keepdim=True)
        var = x.var(dim=(1, 2), keepdim=True, unbiased=False)
        return (x - mean) / torch.sqrt(var + self.eps) * self.weight + self.bias


def make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "global_layer_norm":
        return GlobalLayerNorm(channels)
    if kind == "batch_norm":
        return nn.BatchNorm1d(channels)
    raise ConfigError(f"unknown norm kind {kind!r}")


def resize_time(x: torch.Tensor, target_len: int) -> torch.Tensor:
    """Nearest-neighbor resize along the last (time) axis.

    Source index map is i -> floor(i * T1 / T2), matching torch's "nearest".
    """
    if target_len < 1:
        raise DataError(f"target_len must be >= 1, got {target_len}")
    if x.shape[-1] == target_len:
        return x
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    out = F.interpolate(x, size=target_len, mode="nearest")
    return out.squeeze(0) if squeeze else out


class ConvNormAct(nn.Module):
    """Conv1d (odd kernel, ceil-length stride semantics) + norm + PReLU."""

    def __init__(self, cin: int, cout: int, kernel: int, norm: str,
                 stride: int = 1, groups: int = 1):
        super().__init__()
        self.conv = nn.Conv1d(cin, cout, kernel, stride=stride,
                              padding=kernel // 2, groups=groups)
        self.norm = make_norm(norm, cout)
        self.act = nn.PReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(x)))


class SeparableDown(nn.Module):
    """Dense pointwise mix followed by a depthwise stride-2 temporal conv."""

    def __init__(self, channels: int, kernel: int, norm: str):
        super().__init__()
        self.pw = nn.Conv1d(channels, channels, 1)
        self.dw = nn.Conv1d(channels, channels, kernel, stride=2,
                            padding=kernel // 2, groups=channels)
        self.norm = make_norm(norm, channels)
        self.act = nn.PReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.dw(self.pw(x))))


class PyramidBlock(nn.Module):
    """One unimodal subnetwork block over an S-level feature pyramid.

    Stage submodules are only instantiated for the variants that use them, so
    trainable-parameter counts reflect the active architecture.
    """

    def __init__(self, cfg: PyramidConfig, with_adjacent_fuse: bool = True,
                 with_collapse: bool = True, with_downward: bool = False):
        super().__init__()
        self.cfg = cfg
        C, K, S = cfg.channels, cfg.kernel, cfg.depth

        self.entry = ConvNormAct(C, C, K, cfg.norm)
        self.downs = nn.ModuleList(
            [SeparableDown(C, K, cfg.norm) for _ in range(S - 1)])

        if with_adjacent_fuse:
            # One depthwise stride-2 conv per receiving level d >= 2 (from d-1),
            # one merge conv per level over the concatenated neighbor maps.
            self.fuse_down = nn.ModuleList(
                [nn.Conv1d(C, C, K, stride=2, padding=K // 2, groups=C)
                 for _ in range(S - 1)])
            self.fuse_merge = nn.ModuleList(
                [ConvNormAct(self._fan_in(d, S) * C, C, 1, cfg.norm)
                 for d in range(S)])
        if with_collapse:
            self.collapse_merge = ConvNormAct(C, C, 1, cfg.norm)
        if with_downward and S > 1:
            # Downward refresh: level d merges [downsampled d-1, lateral d,
            # resized refreshed d+1]; the bottom level has no d-1 arm.
            self.downward_down = nn.ModuleList(
                [nn.Conv1d(C, C, K, stride=2, padding=K // 2, groups=C)
                 for _ in range(max(S - 2, 0))])
            self.downward_merge = nn.ModuleList(
                [ConvNormAct((2 if d == 0 else 3) * C, C, 1, cfg.norm)
                 for d in range(S - 1)])

    @staticmethod
    def _fan_in(d: int, S: int) -> int:
        n = 1  # lateral
        if d > 0:
            n += 1
        if d < S - 1:
            n += 1
        return n

    def bottom_up(self, x: torch.Tensor) -> list[torch.Tensor]:
        # x: B x C x T, T >= 2^(S-1)
        S = self.cfg.depth
        if x.shape[-1] < 2 ** (S - 1):
            raise DataError(
                f"temporal length {x.shape[-1]} too short for {S} halvings")
        levels = [self.entry(x)]
        for down in self.downs:
            levels.append(down(levels[-1]))
        return levels

    def fuse_adjacent(self, levels: list[torch.Tensor]) -> list[torch.Tensor]:
        S = self.cfg.depth
        out = []
        for d in range(S):
            parts = []
            if d > 0:
                parts.append(self.fuse_down[d - 1](levels[d - 1]))
            parts.append(levels[d])
            if d < S - 1:
                parts.append(resize_time(levels[d + 1], levels[d].shape[-1]))
            out.append(self.fuse_merge[d](torch.cat(parts, dim=1)))
        return out

    def collapse(self, levels: list[torch.Tensor]) -> torch.Tensor:
        top_len = levels[0].shape[-1]
        total = levels[0]
        for lvl in levels[1:]:
            total = total + resize_time(lvl, top_len)
        return self.collapse_merge(total)

    def downward(self, levels: list[torch.Tensor],
                 top: torch.Tensor | None = None) -> torch.Tensor:
        """Refresh levels top-to-bottom and return the full-resolution bottom.

        `top` optionally replaces the coarsest level (the fused association
        output); without it the raw top level seeds the pass.
        """
        S = self.cfg.depth
        current = top if top is not None else levels[-1]
        if S == 1:
            return current
        for d in range(S - 2, -1, -1):
            parts = []
            if d > 0:
                parts.append(self.downward_down[d - 1](levels[d - 1]))
            parts.append(levels[d])
            parts.append(resize_time(current, levels[d].shape[-1]))
            current = self.downward_merge[d](torch.cat(parts, dim=1))
        return current

    def cycle(self, x: torch.Tensor, fuse: bool = True) -> torch.Tensor:
        """bottom_up -> (fuse_adjacent) -> collapse, preserving C x T shape."""
        levels = self.bottom_up(x)
        if fuse:
            levels = self.fuse_adjacent(levels)
        return self.collapse(levels)
