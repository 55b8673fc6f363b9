"""Audio-visual speech separation with cyclic thalamus-style fusion."""

from .errors import ConfigError, DataError, NumericError
from .audio_codec import EncoderConfig, MaskHead, WaveDecoder, WaveEncoder, apply_mask
from .pyramid import GlobalLayerNorm, PyramidBlock, PyramidConfig, resize_time
from .visual import (
    FrozenBackbone,
    LipReadingModel,
    VisualBackbone,
    VisualFrontendConfig,
    default_head_config,
    degenerate_head_config,
    freeze_backbone,
    load_backbone_weights,
    tiny_frontend_config,
)
from .models import (
    FusionConfig,
    SeparationModel,
    ThalamicFusion,
    build_model,
    config_hash,
    default_config,
    load_model_checkpoint,
    param_breakdown,
    param_count,
    save_model_checkpoint,
)
from .metrics import (
    MetricReport,
    pairwise_spectrogram_correlation,
    sdr,
    sdri,
    si_snr,
    si_snr_loss,
    si_snri,
)
from .data import (
    MixtureSample,
    Utterance,
    VideoClip,
    generate_lip_corpus,
    generate_synthetic_corpus,
    generate_visual_benefit_corpus,
    load_sample,
    mix,
    read_manifest,
    read_wav,
    write_wav,
)
from .training import (
    PlateauHalver,
    TrainConfig,
    clip_grad_l2_,
    evaluate_manifest,
    load_pretrained_backbone,
    pretrain_lip,
    separate,
    train_separation,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "NumericError",
    "EncoderConfig", "WaveEncoder", "MaskHead", "WaveDecoder", "apply_mask",
    "PyramidConfig", "PyramidBlock", "GlobalLayerNorm", "resize_time",
    "VisualFrontendConfig", "VisualBackbone", "LipReadingModel",
    "FrozenBackbone", "freeze_backbone", "tiny_frontend_config",
    "default_head_config", "degenerate_head_config", "load_backbone_weights",
    "FusionConfig", "SeparationModel", "ThalamicFusion", "build_model",
    "default_config", "param_count", "param_breakdown", "config_hash",
    "save_model_checkpoint", "load_model_checkpoint",
    "si_snr", "sdr", "si_snri", "sdri", "si_snr_loss",
    "pairwise_spectrogram_correlation", "MetricReport",
    "Utterance", "VideoClip", "MixtureSample", "mix",
    "generate_synthetic_corpus", "generate_visual_benefit_corpus",
    "generate_lip_corpus", "load_sample", "read_manifest",
    "read_wav", "write_wav",
    "TrainConfig", "PlateauHalver", "clip_grad_l2_", "train_separation",
    "pretrain_lip", "separate", "evaluate_manifest", "load_pretrained_backbone",
    "__version__",
]
