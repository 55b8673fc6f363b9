import numpy as np
import pytest
import torch

from ctcnet import EncoderConfig, FusionConfig, PyramidConfig

torch.set_num_threads(1)


def micro_fusion_config(variant: str = "ctcnet", *, n: int = 1, m: int = 1,
                        depth: int = 2, audio_ch: int = 8, visual_ch: int = 8,
                        enc_filters: int = 16, kernel_len: int = 21,
                        visual_embed_dim: int = 8, fusion_op: str = "sum",
                        audio_shared: bool = True,
                        visual_shared: bool = True) -> FusionConfig:
    """Desk-scale model settings used across the unit tests."""
    return FusionConfig(
        variant=variant,
        n=0 if variant == "audio_only" else n,
        m=m,
        fusion_op=fusion_op,
        audio_shared=audio_shared,
        visual_shared=visual_shared,
        encoder=EncoderConfig(num_filters=enc_filters, kernel_len=kernel_len),
        audio_pyramid=PyramidConfig(depth=depth, channels=audio_ch, kernel=5,
                                    norm="global_layer_norm"),
        visual_pyramid=PyramidConfig(depth=depth, channels=visual_ch, kernel=3,
                                     norm="batch_norm"),
        visual_embed_dim=visual_embed_dim,
    )


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """12-sample 1 s corpus with train/val/test rows, 32 px clips."""
    from ctcnet import generate_synthetic_corpus

    root = tmp_path_factory.mktemp("corpus")
    manifest = generate_synthetic_corpus(
        12, 7, root, duration_s=1.0, num_speakers=8, clip_hw=32)
    return manifest


@pytest.fixture(scope="session")
def tiny_backbone():
    """Random frozen tiny backbone (64-dim embeddings)."""
    from ctcnet import freeze_backbone, tiny_frontend_config
    from ctcnet.visual import VisualBackbone

    torch.manual_seed(11)
    return freeze_backbone(VisualBackbone(tiny_frontend_config()))


def rand_wave(rng: np.random.Generator, t: int, scale: float = 0.1) -> np.ndarray:
    return (rng.standard_normal(t) * scale).astype(np.float32)
