"""Command-line entry point.

One binary with subcommands: mix, pretrain-lip, train, separate, evaluate,
params. Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure. Errors go to stderr as `ctcnet: error [<kind>] <message>`.

The env var CTCNET_DATA_ROOT supplies a default corpus root wherever a
manifest or output directory flag is omitted.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericError

DATA_ROOT_ENV = "CTCNET_DATA_ROOT"

VARIANT_CHOICES = ("ctcnet", "dftnet", "ccnet", "cacnet", "audio-only")


def _err(kind: str, message: str) -> None:
    print(f"ctcnet: error [{kind}] {message}", file=sys.stderr)


class _Parser(argparse.ArgumentParser):
    """argparse maps usage errors to exit 2 by default; this tool uses 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        _err("usage", message)
        raise SystemExit(1)


def _variant_key(name: str) -> str:
    return name.replace("-", "_")


def _data_root() -> Path | None:
    root = os.environ.get(DATA_ROOT_ENV)
    return Path(root) if root else None


def _require_out(arg, flag: str) -> Path:
    if arg is not None:
        return Path(arg)
    root = _data_root()
    if root is not None:
        return root
    raise ConfigError(f"{flag} is required (or set {DATA_ROOT_ENV})")


def _resolve_manifest(arg) -> Path:
    if arg is not None:
        return Path(arg)
    root = _data_root()
    if root is not None:
        return root / "manifest.jsonl"
    raise ConfigError(f"--manifest is required (or set {DATA_ROOT_ENV})")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train-config", metavar="JSON", default=None,
                   help="JSON file of training settings; explicit flags win (default: none)")
    p.add_argument("--lr", type=float, default=None,
                   help="learning rate (default: 0.001)")
    p.add_argument("--weight-decay", type=float, default=None,
                   help="decoupled weight decay (default: 0.1)")
    p.add_argument("--plateau-patience", type=int, default=None,
                   help="non-improving validation epochs before halving the lr (default: 5)")
    p.add_argument("--lr-factor", type=float, default=None,
                   help="lr multiplier at each plateau (default: 0.5)")
    p.add_argument("--grad-clip", type=float, default=None,
                   help="global l2 gradient clip threshold (default: 5.0)")
    p.add_argument("--max-epochs", type=int, default=None,
                   help="epoch budget (default: 200)")
    p.add_argument("--early-stop", type=int, default=None,
                   help="non-improving validation epochs before stopping (default: 10)")
    p.add_argument("--batch-size", type=int, default=None,
                   help="rows per optimizer step (default: 2)")


def _train_config(args) -> "TrainConfig":
    from .training import TrainConfig

    base = TrainConfig.from_file(args.train_config) if args.train_config \
        else TrainConfig()
    overrides = {
        "lr": args.lr,
        "weight_decay": args.weight_decay,
        "plateau_patience": args.plateau_patience,
        "lr_factor": args.lr_factor,
        "grad_clip_l2": args.grad_clip,
        "max_epochs": args.max_epochs,
        "early_stop_patience": args.early_stop,
        "batch_size": args.batch_size,
        "seed": args.seed,
    }
    kwargs = {k: v for k, v in overrides.items() if v is not None}
    import dataclasses
    return dataclasses.replace(base, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctcnet",
                     description="Audio-visual speech separation toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND",
                            parser_class=_Parser)

    p = sub.add_parser("mix",
                       help="synthesize a paired audio/video corpus",
                       description="Write a deterministic synthetic separation corpus.")
    p.add_argument("--out", metavar="DIR", default=None,
                   help=f"corpus directory (default: ${DATA_ROOT_ENV})")
    p.add_argument("--num", type=int, default=16,
                   help="number of mixture samples (default: 16)")
    p.add_argument("--seed", type=int, required=True,
                   help="RNG seed, required (corpus is a pure function of it)")
    p.add_argument("--duration-s", type=float, default=2.0,
                   help="utterance length in seconds (default: 2.0)")
    p.add_argument("--snr-min", type=float, default=-5.0,
                   help="lower mixing SNR bound in dB (default: -5.0)")
    p.add_argument("--snr-max", type=float, default=5.0,
                   help="upper mixing SNR bound in dB (default: 5.0)")
    p.add_argument("--num-speakers", type=int, default=12,
                   help="procedural speaker count (default: 12)")
    p.add_argument("--env-style", choices=("syllabic", "bursty"), default="syllabic",
                   help="amplitude envelope family (default: syllabic)")
    p.add_argument("--shared-texture", action="store_true",
                   help="both sources in a pair share one carrier texture "
                        "(visual-benefit corpus; default: off)")
    p.add_argument("--clip-size", type=int, default=88,
                   help="clip height and width in pixels (default: 88)")

    p = sub.add_parser("pretrain-lip",
                       help="pretrain the lip-reading backbone",
                       description="Cross-entropy word-classification pretraining; "
                                   "exports backbone weights only.")
    p.add_argument("--out", metavar="FILE", required=True,
                   help="backbone checkpoint path to write")
    p.add_argument("--labels", metavar="FILE", default=None,
                   help="labels.jsonl of an existing clip corpus "
                        "(default: synthesize one under --corpus-out)")
    p.add_argument("--corpus-out", metavar="DIR", default=None,
                   help="where to synthesize the clip corpus when --labels is "
                        "omitted (default: <out dir>/lip_corpus)")
    p.add_argument("--num-classes", type=int, default=8,
                   help="word classes when synthesizing (default: 8)")
    p.add_argument("--samples-per-class", type=int, default=12,
                   help="clips per class when synthesizing (default: 12)")
    p.add_argument("--backbone-size", choices=("tiny", "full"), default="tiny",
                   help="frontend size: tiny desk-scale or full lip-reader "
                        "(default: tiny)")
    p.add_argument("--seed", type=int, required=True,
                   help="RNG seed, required")
    p.add_argument("--max-steps", type=int, default=None,
                   help="optimizer step cap (default: none)")
    _add_train_flags(p)

    p = sub.add_parser("train",
                       help="train a separation model",
                       description="Train one separation variant on a corpus manifest.")
    p.add_argument("--manifest", metavar="FILE", default=None,
                   help=f"corpus manifest (default: ${DATA_ROOT_ENV}/manifest.jsonl)")
    p.add_argument("--out", metavar="DIR", required=True,
                   help="run directory for checkpoints and history.csv")
    p.add_argument("--variant", choices=VARIANT_CHOICES, default="ctcnet",
                   help="model variant (default: ctcnet)")
    p.add_argument("--audio-channels", type=int, default=512,
                   help="audio pyramid width (default: 512)")
    p.add_argument("--n", type=int, default=None,
                   help="audio-visual fusion cycles (default: per variant)")
    p.add_argument("--m", type=int, default=None,
                   help="audio-only cycles (default: per variant)")
    p.add_argument("--fusion-op", choices=("sum", "concat"), default="sum",
                   help="thalamic fusion operator (default: sum)")
    p.add_argument("--backbone", metavar="FILE", default=None,
                   help="pretrained backbone checkpoint from pretrain-lip "
                        "(default: none)")
    p.add_argument("--no-pretrain", action="store_true",
                   help="use a randomly initialized frozen backbone instead of "
                        "a pretrained one (default: off)")
    p.add_argument("--backbone-size", choices=("tiny", "full"), default="tiny",
                   help="frontend size when --no-pretrain builds one (default: tiny)")
    p.add_argument("--micro", action="store_true",
                   help="shrink the model to desk scale (encoder 64, pyramid "
                        "depth 3, width 64; default: off)")
    p.add_argument("--seed", type=int, required=True,
                   help="RNG seed, required")
    p.add_argument("--max-steps", type=int, default=None,
                   help="optimizer step cap (default: none)")
    p.add_argument("--resume", metavar="FILE", default=None,
                   help="resume from a last.pt checkpoint (default: none)")
    _add_train_flags(p)

    p = sub.add_parser("separate",
                       help="separate one mixture",
                       description="Run a trained checkpoint on a mixture WAV; one "
                                   "output WAV per clip.")
    p.add_argument("--checkpoint", metavar="FILE", required=True,
                   help="model checkpoint (best.pt or last.pt)")
    p.add_argument("--mixture", metavar="WAV", required=True,
                   help="16 kHz mono 16-bit PCM mixture")
    p.add_argument("--clips", metavar="NPY", nargs="*", default=[],
                   help="per-speaker clip files (default: none, audio-only)")
    p.add_argument("--out", metavar="DIR", required=True,
                   help="directory for the estimated WAVs")

    p = sub.add_parser("evaluate",
                       help="score a manifest split",
                       description="Separate and score every sample in one split; "
                                   "writes per-sample JSONL and a JSON summary.")
    p.add_argument("--manifest", metavar="FILE", default=None,
                   help=f"corpus manifest (default: ${DATA_ROOT_ENV}/manifest.jsonl)")
    p.add_argument("--checkpoint", metavar="FILE", default=None,
                   help="model checkpoint (default: none; see --passthrough)")
    p.add_argument("--passthrough", action="store_true",
                   help="score the mixture as its own estimate (default: off)")
    p.add_argument("--split", choices=("train", "val", "test"), default="test",
                   help="manifest split to score (default: test)")
    p.add_argument("--out", metavar="DIR", required=True,
                   help="directory for report.jsonl and summary.json")

    p = sub.add_parser("params",
                       help="audit trainable parameter counts",
                       description="Print total and per-module trainable parameters "
                                   "for one variant at its reference defaults.")
    p.add_argument("--variant", choices=VARIANT_CHOICES, default="ctcnet",
                   help="model variant (default: ctcnet)")
    p.add_argument("--audio-channels", type=int, default=512,
                   help="audio pyramid width (default: 512)")
    p.add_argument("--n", type=int, default=None,
                   help="audio-visual fusion cycles (default: per variant)")
    p.add_argument("--m", type=int, default=None,
                   help="audio-only cycles (default: per variant)")
    p.add_argument("--fusion-op", choices=("sum", "concat"), default="sum",
                   help="thalamic fusion operator (default: sum)")

    return parser


# -- subcommand bodies --------------------------------------------------------


def _cmd_mix(args) -> int:
    from .data import generate_synthetic_corpus

    out = _require_out(args.out, "--out")
    if args.snr_min > args.snr_max:
        raise ConfigError("--snr-min must not exceed --snr-max")
    manifest = generate_synthetic_corpus(
        args.num, args.seed, out,
        duration_s=args.duration_s,
        snr_range=(args.snr_min, args.snr_max),
        num_speakers=args.num_speakers,
        clip_hw=args.clip_size,
        env_style=args.env_style,
        shared_texture=args.shared_texture,
    )
    print(f"manifest {manifest}")
    print(f"manifest_sha256 {_sha256(manifest)}")
    return 0


def _frontend_config(size: str):
    from .visual import VisualFrontendConfig, tiny_frontend_config

    if size == "tiny":
        return tiny_frontend_config()
    return VisualFrontendConfig()


def _cmd_pretrain_lip(args) -> int:
    from .data import generate_lip_corpus
    from .training import pretrain_lip
    from .visual import default_head_config

    cfg = _frontend_config(args.backbone_size)
    labels = args.labels
    if labels is None:
        corpus_dir = Path(args.corpus_out) if args.corpus_out \
            else Path(args.out).parent / "lip_corpus"
        labels = generate_lip_corpus(args.num_classes, args.samples_per_class,
                                     args.seed, corpus_dir)
        print(f"labels {labels}")
    if args.num_classes != cfg.num_classes:
        import dataclasses
        cfg = dataclasses.replace(cfg, num_classes=args.num_classes)
    tc = _train_config(args)
    head = default_head_config(min(cfg.backbone_out_dim, 64))
    result = pretrain_lip(cfg, labels, tc, args.out, head_cfg=head,
                          max_steps=args.max_steps, log=print)
    print(f"backbone {result['checkpoint']}")
    print(f"train_accuracy {result['train_accuracy']:.4f}")
    return 0


def _micro_overrides(variant_key: str, audio_channels: int):
    from .audio_codec import EncoderConfig
    from .pyramid import PyramidConfig

    audio = PyramidConfig(depth=3, channels=min(audio_channels, 64), kernel=5,
                          norm="global_layer_norm")
    visual_ch = audio.channels if variant_key == "ccnet" else 16
    visual = PyramidConfig(depth=3, channels=visual_ch, kernel=3, norm="batch_norm")
    return EncoderConfig(num_filters=64, kernel_len=21), audio, visual


def _cmd_train(args) -> int:
    import dataclasses

    from .models import default_config
    from .training import TrainConfig, load_pretrained_backbone, train_separation
    from .visual import VisualBackbone, freeze_backbone

    variant = _variant_key(args.variant)
    cfg = default_config(variant, n=args.n, m=args.m, fusion_op=args.fusion_op,
                         audio_channels=args.audio_channels)

    backbone = None
    if variant != "audio_only" and cfg.n > 0:
        if args.backbone is not None:
            backbone = load_pretrained_backbone(args.backbone)
        elif args.no_pretrain:
            import torch
            torch.manual_seed(args.seed)
            backbone = freeze_backbone(VisualBackbone(_frontend_config(args.backbone_size)))
        else:
            raise ConfigError(
                "audio-visual variants need --backbone FILE (from pretrain-lip) "
                "or --no-pretrain")
        cfg = dataclasses.replace(cfg, visual_embed_dim=backbone.out_dim)

    if args.micro:
        enc, audio, visual = _micro_overrides(variant, args.audio_channels)
        cfg = dataclasses.replace(cfg, encoder=enc, audio_pyramid=audio,
                                  visual_pyramid=visual)

    tc = _train_config(args)
    manifest = _resolve_manifest(args.manifest)
    result = train_separation(cfg, manifest, tc, args.out, backbone=backbone,
                              resume_from=args.resume, max_steps=args.max_steps,
                              log=print)
    print(f"checkpoint {result['checkpoint']}")
    print(f"best_val_loss {result['best_val_loss']:.6f}")
    print(f"stop_reason {result['stop_reason']}")
    return 0


def _cmd_separate(args) -> int:
    from .data import read_clip, read_wav, write_wav
    from .models import load_model_checkpoint
    from .training import separate

    model, _ = load_model_checkpoint(args.checkpoint)
    mixture = read_wav(args.mixture)
    clips = [read_clip(p) for p in args.clips]
    ests = separate(model, mixture, clips)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.mixture).stem
    for i, est in enumerate(ests, 1):
        path = out / f"{stem}_est{i}.wav"
        write_wav(path, est)
        print(f"wrote {path}")
    return 0


def _cmd_evaluate(args) -> int:
    from .models import load_model_checkpoint
    from .training import evaluate_manifest

    model = None
    if args.checkpoint is not None:
        model, _ = load_model_checkpoint(args.checkpoint)
    elif not args.passthrough:
        raise ConfigError("evaluate needs --checkpoint or --passthrough")
    manifest = _resolve_manifest(args.manifest)
    report = evaluate_manifest(manifest, model=model, split=args.split,
                               passthrough=args.passthrough)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_jsonl(out / "report.jsonl")
    report.write_summary(out / "summary.json")
    print(json.dumps(report.summary(), sort_keys=True))
    return 0


def _cmd_params(args) -> int:
    from .models import build_model, default_config, param_breakdown, param_count

    cfg = default_config(_variant_key(args.variant), n=args.n, m=args.m,
                         fusion_op=args.fusion_op,
                         audio_channels=args.audio_channels)
    model = build_model(cfg, seed=0)
    print(f"total {param_count(model)}")
    for name, count in sorted(param_breakdown(model).items()):
        print(f"module.{name} {count}")
    return 0


_COMMANDS = {
    "mix": _cmd_mix,
    "pretrain-lip": _cmd_pretrain_lip,
    "train": _cmd_train,
    "separate": _cmd_separate,
    "evaluate": _cmd_evaluate,
    "params": _cmd_params,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        _err("config", str(exc))
        return 1
    except DataError as exc:
        _err("data", str(exc))
        return 2
    except NumericError as exc:
        _err("numeric", str(exc))
        return 3
    except OSError as exc:
        _err("data", str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
