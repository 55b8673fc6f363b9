"""Separation model variants and their recurrent fusion workflows.

Five variants share one parameter pool per subnetwork (weight sharing across
all unrolled cycles unless disabled):

- ctcnet: per AV cycle, both pyramids run bottom_up -> fuse_adjacent ->
  collapse; the collapsed full-resolution maps meet in a single fusion hub
  (the thalamic stage) whose outputs seed the next cycle; then m audio-only
  cycles.
- dftnet: ctcnet without fuse_adjacent in either subnetwork.
- ccnet: bottom_up runs once; each AV cycle repeats fuse_adjacent plus
  per-depth fusion with depth-specific maps (no hub); audio-only cycles repeat
  fuse_adjacent alone; a single final collapse emits G. The visual pyramid
  runs at the audio width here so the depth-specific fusion maps see matched
  channel counts at every level.
- cacnet: fusion happens only between the coarsest-level features via the hub
  machinery, then propagates to full resolution through a downward pass with
  per-level lateral concatenation; output is the refreshed bottom level.
- audio_only: the ctcnet audio subnetwork cycled alone (n forced to 0).

Cycle state follows the recurrent-refinement convention: cycle input is the
projected embedding plus the previous cycle's output (zero at cycle 0), so a
zero-parameterized block leaves the state constant.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .audio_codec import EncoderConfig, MaskHead, WaveDecoder, WaveEncoder, apply_mask
from .errors import ConfigError, DataError
from .pyramid import PyramidBlock, PyramidConfig, resize_time
from .visual import FrozenBackbone

VARIANTS = ("ctcnet", "dftnet", "ccnet", "cacnet", "audio_only")
FUSION_OPS = ("sum", "concat")

CHECKPOINT_VERSION = 1


def _audio_pyramid_default() -> PyramidConfig:
    return PyramidConfig(depth=5, channels=512, kernel=5, norm="global_layer_norm")


def _visual_pyramid_default() -> PyramidConfig:
    return PyramidConfig(depth=5, channels=64, kernel=3, norm="batch_norm")


@dataclass(frozen=True)
class FusionConfig:
    variant: str = "ctcnet"
    n: int = 3
    m: int = 5
    fusion_op: str = "sum"
    audio_shared: bool = True
    visual_shared: bool = True
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    audio_pyramid: PyramidConfig = field(default_factory=_audio_pyramid_default)
    visual_pyramid: PyramidConfig = field(default_factory=_visual_pyramid_default)
    visual_embed_dim: int = 512

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.fusion_op not in FUSION_OPS:
            raise ConfigError(f"fusion_op must be one of {FUSION_OPS}")
        if self.n < 0 or self.m < 1:
            raise ConfigError("need n >= 0 and m >= 1")
        if self.variant == "audio_only" and self.n != 0:
            raise ConfigError("audio_only forces n = 0")
        if self.variant == "ccnet" and self.audio_pyramid.depth != self.visual_pyramid.depth:
            raise ConfigError("ccnet needs equal pyramid depths for per-depth fusion")

    @property
    def thalamic_channels(self) -> int:
        """Fusion-hub merge input width under concat (audio + visual channels)."""
        return self.audio_pyramid.channels + self.visual_pyramid.channels


def default_config(variant: str, *, n: int | None = None, m: int | None = None,
                   fusion_op: str = "sum", audio_channels: int = 512) -> FusionConfig:
    """Published default settings per variant.

    ccnet runs its visual pyramid at the audio width (per-level fusion
    dimensions); audio_only defaults to m=8 so total cycles match n+m of the
    AV models. dftnet-large is dftnet with audio_channels=768.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    audio = PyramidConfig(depth=5, channels=audio_channels, kernel=5,
                          norm="global_layer_norm")
    visual_channels = audio_channels if variant == "ccnet" else 64
    visual = PyramidConfig(depth=5, channels=visual_channels, kernel=3,
                           norm="batch_norm")
    if variant == "audio_only":
        n = 0 if n is None else n
        m = 8 if m is None else m
    else:
        n = 3 if n is None else n
        m = 5 if m is None else m
    return FusionConfig(variant=variant, n=n, m=m, fusion_op=fusion_op,
                        audio_pyramid=audio, visual_pyramid=visual)


class ThalamicFusion(nn.Module):
    """Fusion hub: each stream is resized to the other's length, combined,
    and merged back to its own width by a per-timestep fully connected map
    (1x1 convolution). Under sum with mismatched widths the smaller stream is
    linearly lifted to the larger width at each site before addition.
    """

    def __init__(self, ca: int, cv: int, fusion_op: str):
        super().__init__()
        if fusion_op not in FUSION_OPS:
            raise ConfigError(f"fusion_op must be one of {FUSION_OPS}")
        self.ca, self.cv, self.fusion_op = ca, cv, fusion_op
        if fusion_op == "concat":
            self.merge_a = nn.Conv1d(ca + cv, ca, 1)
            self.merge_v = nn.Conv1d(ca + cv, cv, 1)
        else:
            wide = max(ca, cv)
            if ca != cv:
                small = min(ca, cv)
                self.lift_a_site = nn.Conv1d(small, wide, 1)
                self.lift_v_site = nn.Conv1d(small, wide, 1)
            self.merge_a = nn.Conv1d(wide, ca, 1)
            self.merge_v = nn.Conv1d(wide, cv, 1)

    def forward(self, a: torch.Tensor, v: torch.Tensor):
        # a: B x ca x Ta, v: B x cv x Tv
        va = resize_time(v, a.shape[-1])
        av = resize_time(a, v.shape[-1])
        if self.fusion_op == "concat":
            sa = torch.cat([a, va], dim=1)
            sv = torch.cat([v, av], dim=1)
        elif self.ca == self.cv:
            sa = a + va
            sv = v + av
        elif self.ca > self.cv:
            sa = a + self.lift_a_site(va)
            sv = self.lift_v_site(v) + av
        else:
            sa = self.lift_a_site(a) + va
            sv = v + self.lift_v_site(av)
        return self.merge_a(sa), self.merge_v(sv)


class SeparationModel(nn.Module):
    """Encoder, recurrent fusion core, mask head, decoder for one variant."""

    def __init__(self, cfg: FusionConfig, backbone: FrozenBackbone | None = None):
        super().__init__()
        self.cfg = cfg
        variant = cfg.variant
        enc = cfg.encoder
        ca = cfg.audio_pyramid.channels
        cv = cfg.visual_pyramid.channels

        self.encoder = WaveEncoder(enc)
        self.mask_head = MaskHead(enc.num_filters)
        self.decoder = WaveDecoder(enc)
        self.audio_in = nn.Conv1d(enc.num_filters, ca, 1)
        self.audio_out = nn.Conv1d(ca, enc.num_filters, 1)

        adjacent = variant in ("ctcnet", "ccnet", "audio_only")
        downward = variant == "cacnet"
        collapse = variant != "cacnet"
        audio_copies = 1 if cfg.audio_shared else max(cfg.n + cfg.m, 1)
        self.audio_blocks = nn.ModuleList(
            [PyramidBlock(cfg.audio_pyramid, with_adjacent_fuse=adjacent,
                          with_collapse=collapse, with_downward=downward)
             for _ in range(audio_copies)])

        if variant != "audio_only":
            self.visual_in = nn.Conv1d(cfg.visual_embed_dim, cv, 1)
            visual_copies = 1 if cfg.visual_shared else max(cfg.n, 1)
            self.visual_blocks = nn.ModuleList(
                [PyramidBlock(cfg.visual_pyramid,
                              with_adjacent_fuse=adjacent and variant != "cacnet",
                              with_collapse=collapse and variant != "ccnet",
                              with_downward=downward)
                 for _ in range(visual_copies)])
            if variant == "ccnet":
                self.depth_fusion = nn.ModuleList(
                    [ThalamicFusion(ca, cv, cfg.fusion_op)
                     for _ in range(cfg.audio_pyramid.depth)])
            else:
                self.fusion = ThalamicFusion(ca, cv, cfg.fusion_op)

        if backbone is not None:
            if backbone.out_dim != cfg.visual_embed_dim:
                raise ConfigError(
                    f"backbone emits {backbone.out_dim} channels, config "
                    f"expects {cfg.visual_embed_dim}")
            self.backbone = backbone
        else:
            self.backbone = None

    # -- cycle plumbing ----------------------------------------------------

    def _audio_block(self, t: int) -> PyramidBlock:
        blocks = self.audio_blocks
        return blocks[0] if len(blocks) == 1 else blocks[t]

    def _visual_block(self, t: int) -> PyramidBlock:
        blocks = self.visual_blocks
        return blocks[0] if len(blocks) == 1 else blocks[t]

    def _hub_cycles(self, e: torch.Tensor, k: torch.Tensor | None,
                    fuse: bool) -> torch.Tensor:
        """ctcnet / dftnet / audio_only recurrence on collapsed maps."""
        cfg = self.cfg
        a = torch.zeros_like(e)
        if cfg.n > 0:
            v = torch.zeros_like(k)
            for t in range(cfg.n):
                p = self._audio_block(t).cycle(e + a, fuse=fuse)
                q = self._visual_block(t).cycle(k + v, fuse=fuse)
                a, v = self.fusion(p, q)
        for t in range(cfg.n, cfg.n + cfg.m):
            a = self._audio_block(t).cycle(e + a, fuse=fuse)
        return a

    def _cacnet_cycles(self, e: torch.Tensor, k: torch.Tensor | None) -> torch.Tensor:
        cfg = self.cfg
        a = torch.zeros_like(e)
        if cfg.n > 0:
            v = torch.zeros_like(k)
            for t in range(cfg.n):
                levels_a = self._audio_block(t).bottom_up(e + a)
                levels_v = self._visual_block(t).bottom_up(k + v)
                top_a, top_v = self.fusion(levels_a[-1], levels_v[-1])
                a = self._audio_block(t).downward(levels_a, top_a)
                v = self._visual_block(t).downward(levels_v, top_v)
        for t in range(cfg.n, cfg.n + cfg.m):
            levels = self._audio_block(t).bottom_up(e + a)
            a = self._audio_block(t).downward(levels)
        return a

    def _ccnet_cycles(self, e: torch.Tensor, k: torch.Tensor | None) -> torch.Tensor:
        cfg = self.cfg
        base_a = self._audio_block(0).bottom_up(e)
        state_a = [torch.zeros_like(x) for x in base_a]
        if cfg.n > 0:
            base_v = self._visual_block(0).bottom_up(k)
            state_v = [torch.zeros_like(x) for x in base_v]
            for t in range(cfg.n):
                fused_a = self._audio_block(t).fuse_adjacent(
                    [s + b for s, b in zip(state_a, base_a)])
                fused_v = self._visual_block(t).fuse_adjacent(
                    [s + b for s, b in zip(state_v, base_v)])
                pairs = [self.depth_fusion[d](fused_a[d], fused_v[d])
                         for d in range(cfg.audio_pyramid.depth)]
                state_a = [p[0] for p in pairs]
                state_v = [p[1] for p in pairs]
        for t in range(cfg.n, cfg.n + cfg.m):
            state_a = self._audio_block(t).fuse_adjacent(
                [s + b for s, b in zip(state_a, base_a)])
        return self._audio_block(cfg.n + cfg.m - 1).collapse(state_a)

    # -- public forward ----------------------------------------------------

    def forward_embedding(self, e_emb: torch.Tensor,
                          k_emb: torch.Tensor | None = None) -> torch.Tensor:
        """Fusion core: mixture embedding (and visual embedding) to G."""
        cfg = self.cfg
        if cfg.variant != "audio_only" and cfg.n > 0:
            if k_emb is None:
                raise DataError(f"variant {cfg.variant} needs a visual embedding")
            if k_emb.shape[-2] != cfg.visual_embed_dim:
                raise DataError(
                    f"expected {cfg.visual_embed_dim} visual channels, "
                    f"got {k_emb.shape[-2]}")
        squeeze = e_emb.dim() == 2
        if squeeze:
            e_emb = e_emb.unsqueeze(0)
            if k_emb is not None and k_emb.dim() == 2:
                k_emb = k_emb.unsqueeze(0)
        e = self.audio_in(e_emb)
        k = None
        if cfg.variant != "audio_only" and cfg.n > 0:
            k = self.visual_in(k_emb)
        if cfg.variant in ("ctcnet", "dftnet", "audio_only"):
            a = self._hub_cycles(e, k, fuse=cfg.variant != "dftnet")
        elif cfg.variant == "cacnet":
            a = self._cacnet_cycles(e, k)
        else:
            a = self._ccnet_cycles(e, k)
        out = self.audio_out(a)
        return out.squeeze(0) if squeeze else out

    def forward(self, mixture: torch.Tensor, clip: torch.Tensor | None = None,
                visual: torch.Tensor | None = None) -> torch.Tensor:
        """Waveform(s) in, one estimated waveform per batch row out.

        `visual` takes a precomputed embedding (C_v x T_v); otherwise `clip`
        frames are run through the frozen backbone.
        """
        e_emb = self.encoder(mixture)
        k_emb = None
        if self.cfg.variant != "audio_only" and self.cfg.n > 0:
            if visual is not None:
                k_emb = visual
            elif clip is not None:
                if self.backbone is None:
                    raise ConfigError("no visual backbone attached; pass visual=")
                k_emb = self.backbone(clip)
            else:
                raise DataError(f"variant {self.cfg.variant} needs clip or visual input")
        g = self.forward_embedding(e_emb, k_emb)
        mask = self.mask_head(g)
        q = apply_mask(e_emb, mask)
        return self.decoder(q, mixture.shape[-1])


def build_model(cfg: FusionConfig, seed: int,
                backbone: FrozenBackbone | None = None) -> SeparationModel:
    """Seed-deterministic model construction."""
    torch.manual_seed(seed)
    return SeparationModel(cfg, backbone)


def param_count(obj) -> int:
    """Trainable parameters only; the frozen visual backbone never counts."""
    if isinstance(obj, FusionConfig):
        obj = build_model(obj, seed=0)
    return sum(p.numel() for p in obj.parameters() if p.requires_grad)


def param_breakdown(model: nn.Module) -> dict[str, int]:
    """Trainable parameters grouped by top-level submodule."""
    out: dict[str, int] = {}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        top = name.split(".")[0]
        out[top] = out.get(top, 0) + p.numel()
    return out


# -- checkpoint container -------------------------------------------------


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(d: dict) -> FusionConfig:
    d = dict(d)
    d["encoder"] = EncoderConfig(**d["encoder"])
    d["audio_pyramid"] = PyramidConfig(**d["audio_pyramid"])
    d["visual_pyramid"] = PyramidConfig(**d["visual_pyramid"])
    return FusionConfig(**d)


def config_hash(cfg) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_model_checkpoint(path, model: SeparationModel,
                          backbone_cfg=None, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": config_to_dict(model.cfg),
        "config_hash": config_hash(model.cfg),
        "backbone_config": dataclasses.asdict(backbone_cfg) if backbone_cfg else None,
        "model_state": model.state_dict(),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def load_model_checkpoint(path, expected_cfg: FusionConfig | None = None):
    """Rebuild (model, payload) from disk; refuses hash mismatches."""
    from .visual import VisualBackbone, VisualFrontendConfig, freeze_backbone

    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise DataError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint format in {path}")
    cfg = config_from_dict(payload["config"])
    if config_hash(cfg) != payload["config_hash"]:
        raise ConfigError("checkpoint config hash mismatch (corrupt or edited)")
    if expected_cfg is not None and config_hash(expected_cfg) != payload["config_hash"]:
        raise ConfigError("checkpoint was built from a different config")
    backbone = None
    if payload.get("backbone_config"):
        bcfg = VisualFrontendConfig(**{
            k: tuple(v) if isinstance(v, list) else v
            for k, v in payload["backbone_config"].items()})
        backbone = freeze_backbone(VisualBackbone(bcfg))
    model = SeparationModel(cfg, backbone)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, payload
