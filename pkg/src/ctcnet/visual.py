"""Lip-reading visual frontend.

A 3D convolution (P kernels, 5x5 spatial, temporally size-1, spatial stride 2)
followed by a per-frame 2D residual network produces one C_v-dim embedding
column per input frame. A pyramid-structured classification head (same shape
family as the separation model's visual subnetwork) sits on top for word
pretraining only; after pretraining the backbone is frozen and the head is
discarded.

Backbone weights travel as a plain named parameter map (the module's
state_dict); `load_backbone_weights` accepts either a map or a file path.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError
from .pyramid import PyramidBlock, PyramidConfig

KERNEL_3D = (1, 5, 5)   # temporal x spatial, fixed by contract
STRIDE_3D = (1, 2, 2)


@dataclass(frozen=True)
class VisualFrontendConfig:
    num_3d_kernels: int = 64
    backbone_out_dim: int = 512
    num_classes: int = 500
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    stage_blocks: tuple[int, ...] = (2, 2, 2, 2)

    def __post_init__(self):
        if self.num_3d_kernels < 1 or self.backbone_out_dim < 1:
            raise ConfigError("num_3d_kernels and backbone_out_dim must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.stage_channels) != len(self.stage_blocks) or not self.stage_channels:
            raise ConfigError("stage_channels and stage_blocks must be equal-length, nonempty")
        if self.stage_channels[-1] != self.backbone_out_dim:
            raise ConfigError("last stage width must equal backbone_out_dim")

    @property
    def min_spatial(self) -> int:
        # one stride-2 in the 3D conv plus one per stage after the first
        return 2 ** len(self.stage_channels)


def tiny_frontend_config(num_classes: int = 4) -> VisualFrontendConfig:
    """Small backbone for desk-scale tests: P=4, two residual blocks, C_v=64."""
    return VisualFrontendConfig(num_3d_kernels=4, backbone_out_dim=64,
                                num_classes=num_classes,
                                stage_channels=(16, 64), stage_blocks=(1, 1))


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout))
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.skip(x))


class VisualBackbone(nn.Module):
    """3D conv stem + per-frame residual stages + global average pooling."""

    def __init__(self, cfg: VisualFrontendConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Conv3d(1, cfg.num_3d_kernels, KERNEL_3D,
                              stride=STRIDE_3D,
                              padding=(0, KERNEL_3D[1] // 2, KERNEL_3D[2] // 2),
                              bias=False)
        self.stem_bn = nn.BatchNorm3d(cfg.num_3d_kernels)
        stages = []
        cin = cfg.num_3d_kernels
        for i, (cout, blocks) in enumerate(zip(cfg.stage_channels, cfg.stage_blocks)):
            for b in range(blocks):
                stride = 2 if (i > 0 and b == 0) else 1
                stages.append(BasicBlock(cin, cout, stride))
                cin = cout
        self.stages = nn.Sequential(*stages)

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        # clip: (B x) T x H x W grayscale in [0,1] -> (B x) C_v x T
        squeeze = clip.dim() == 3
        if squeeze:
            clip = clip.unsqueeze(0)
        if clip.dim() == 5:
            if clip.shape[1] != 1:
                raise DataError("clips must be grayscale (single channel)")
            clip = clip.squeeze(1)
        if clip.dim() != 4:
            raise DataError(f"expected T x H x W frames, got shape {tuple(clip.shape)}")
        b, t, h, w = clip.shape
        if min(h, w) < self.cfg.min_spatial:
            raise DataError(
                f"spatial size {h}x{w} below backbone minimum "
                f"{self.cfg.min_spatial}")
        x = F.relu(self.stem_bn(self.stem(clip.unsqueeze(1))))  # B x P x T x H' x W'
        x = x.permute(0, 2, 1, 3, 4).reshape(b * t, x.shape[1], x.shape[3], x.shape[4])
        x = self.stages(x)
        x = x.mean(dim=(2, 3))                                   # (B*T) x C_v
        out = x.reshape(b, t, -1).transpose(1, 2)                # B x C_v x T
        return out.squeeze(0) if squeeze else out


def default_head_config(channels: int = 64) -> PyramidConfig:
    return PyramidConfig(depth=5, channels=channels, kernel=3, norm="batch_norm")


def degenerate_head_config(channels: int = 64) -> PyramidConfig:
    """Depth-1, kernel-1 head: every op is per-timestep, so the time average
    makes classification frame-permutation invariant."""
    return PyramidConfig(depth=1, channels=channels, kernel=1, norm="batch_norm")


class LipReadingModel(nn.Module):
    """Backbone plus word-classification head (pretraining only)."""

    def __init__(self, cfg: VisualFrontendConfig,
                 head_cfg: PyramidConfig | None = None):
        super().__init__()
        self.cfg = cfg
        self.head_cfg = head_cfg or default_head_config()
        self.backbone = VisualBackbone(cfg)
        cv = cfg.backbone_out_dim
        self.head_in = nn.Conv1d(cv, self.head_cfg.channels, 1)
        self.head_block = PyramidBlock(self.head_cfg, with_adjacent_fuse=True)
        self.head_out = nn.Conv1d(self.head_cfg.channels, cv, 1)
        self.classifier = nn.Linear(cv, cfg.num_classes)

    def head_logits(self, k: torch.Tensor) -> torch.Tensor:
        # k: (B x) C_v x T_v
        if k.shape[-2] != self.cfg.backbone_out_dim:
            raise DataError(
                f"expected {self.cfg.backbone_out_dim} embedding channels, "
                f"got {k.shape[-2]}")
        squeeze = k.dim() == 2
        if squeeze:
            k = k.unsqueeze(0)
        z = self.head_out(self.head_block.cycle(self.head_in(k)))
        logits = self.classifier(z.mean(dim=-1))
        return logits.squeeze(0) if squeeze else logits

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        return self.head_logits(self.backbone(clip))

    def predict_proba(self, k: torch.Tensor) -> torch.Tensor:
        """Class probabilities from a visual embedding (sums to 1)."""
        return torch.softmax(self.head_logits(k), dim=-1)


class FrozenBackbone(nn.Module):
    """Backbone with gradients and training-mode switches disabled.

    There is deliberately no unfreeze: the separation trainer never fine-tunes
    the visual frontend, and frozen parameters stay out of trainable counts.
    """

    def __init__(self, backbone: VisualBackbone):
        super().__init__()
        self.net = backbone
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.net.eval()

    def train(self, mode: bool = True):
        # Batch statistics stay frozen regardless of the parent's mode.
        return super().train(False)

    @property
    def out_dim(self) -> int:
        return self.net.cfg.backbone_out_dim

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.net(clip)


def freeze_backbone(backbone: VisualBackbone) -> FrozenBackbone:
    return FrozenBackbone(backbone)


def load_backbone_weights(cfg: VisualFrontendConfig, source) -> VisualBackbone:
    """Build a backbone and load weights from a state-dict map or a .pt path."""
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        source = torch.load(source, map_location="cpu", weights_only=True)
    if not isinstance(source, dict):
        raise DataError("backbone weights must be a named parameter map")
    if "backbone_state" in source:
        source = source["backbone_state"]
    backbone = VisualBackbone(cfg)
    try:
        backbone.load_state_dict(source)
    except RuntimeError as exc:
        raise DataError(f"backbone weight layout mismatch: {exc}") from exc
    return backbone
