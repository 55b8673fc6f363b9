"""Optimization loops: separation training, lip-reading pretraining, inference.

Recipe: AdamW (decoupled weight decay), global l2 gradient clipping with no
epsilon fudge (a clipped gradient's norm equals the threshold), plateau LR
halving driven by validation loss, early stopping, per-epoch checkpointing
with optimizer and RNG state so a resumed run is bit-identical to an
uninterrupted one.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import (
    SAMPLES_PER_FRAME,
    MixtureSample,
    VideoClip,
    load_sample,
    read_manifest,
    split_rows,
)
from .errors import ConfigError, DataError, NumericError
from .metrics import si_snr_loss
from .models import (
    FusionConfig,
    SeparationModel,
    build_model,
    load_model_checkpoint,
    save_model_checkpoint,
)
from .visual import (
    FrozenBackbone,
    LipReadingModel,
    VisualBackbone,
    VisualFrontendConfig,
    freeze_backbone,
)

LAST_CHECKPOINT = "last.pt"
BEST_CHECKPOINT = "best.pt"
HISTORY_FILE = "history.csv"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.1
    plateau_patience: int = 5
    lr_factor: float = 0.5
    grad_clip_l2: float = 5.0
    max_epochs: int = 200
    early_stop_patience: int = 10
    batch_size: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0 or self.grad_clip_l2 <= 0:
            raise ConfigError("lr and grad_clip_l2 must be positive, weight_decay >= 0")
        if not (0.0 < self.lr_factor < 1.0):
            raise ConfigError("lr_factor must lie in (0, 1)")
        if min(self.plateau_patience, self.max_epochs,
               self.early_stop_patience, self.batch_size) < 1:
            raise ConfigError("patience, epoch, and batch settings must be >= 1")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """JSON object whose keys are TrainConfig field names."""
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"missing train config file: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad train config JSON in {path}: {exc}") from exc
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**raw)


def clip_grad_l2_(parameters, max_norm: float) -> float:
    """Scale gradients in place so their global l2 norm is at most max_norm.

    Returns the pre-clip norm. Norms are accumulated in float64 and no
    epsilon enters the scale, so a clipped gradient's norm lands on max_norm
    to float precision and its direction is untouched.
    """
    grads = [p.grad for p in parameters if p.grad is not None]
    if not grads:
        return 0.0
    total_sq = sum(float(g.detach().double().pow(2).sum()) for g in grads)
    total = math.sqrt(total_sq)
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g.detach().mul_(scale)
    return total


class PlateauHalver:
    """Multiply group LRs by `factor` once `patience` consecutive validation
    epochs fail to improve on the best seen loss; the stall counter resets
    after each halving."""

    def __init__(self, optimizer, patience: int = 5, factor: float = 0.5):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.stall = 0

    def step(self, loss: float) -> bool:
        if loss < self.best:
            self.best = loss
            self.stall = 0
            return False
        self.stall += 1
        if self.stall >= self.patience:
            for group in self.optimizer.param_groups:
                group["lr"] *= self.factor
            self.stall = 0
            return True
        return False

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def state_dict(self) -> dict:
        return {"best": self.best, "stall": self.stall}

    def load_state_dict(self, state: dict) -> None:
        self.best = state["best"]
        self.stall = state["stall"]


# -- data plumbing ----------------------------------------------------------


def clip_to_tensor(clip: VideoClip) -> torch.Tensor:
    # VideoClip frames are H x W x T; the backbone eats T x H x W
    return torch.from_numpy(np.ascontiguousarray(clip.frames.transpose(2, 0, 1)))


@dataclass
class _Row:
    sample_id: str
    speaker_index: int
    mixture: torch.Tensor           # T_a
    target: torch.Tensor            # T_a
    visual: torch.Tensor | None    # C_v x T_v, precomputed embedding


def _prepare_rows(samples: list[MixtureSample],
                  backbone: FrozenBackbone | None) -> list[_Row]:
    """One training row per (mixture, clip_i, source_i); the frozen backbone
    runs once per clip here so epochs never recompute embeddings."""
    rows = []
    for s in samples:
        mixture = torch.from_numpy(s.mixture)
        for i, src in enumerate(s.sources):
            visual = None
            if backbone is not None:
                visual = backbone(clip_to_tensor(s.clips[i]))
            rows.append(_Row(s.sample_id, i, mixture,
                             torch.from_numpy(src.waveform), visual))
    return rows


def _batches(rows: list[_Row], batch_size: int, shuffle: bool):
    order = torch.randperm(len(rows)).tolist() if shuffle else range(len(rows))
    chunk: list[_Row] = []
    for idx in order:
        chunk.append(rows[idx])
        if len(chunk) == batch_size:
            yield chunk
            chunk = []
    if chunk:
        yield chunk


def _forward_batch(model: SeparationModel, chunk: list[_Row]) -> torch.Tensor:
    mix = torch.stack([r.mixture for r in chunk])
    if chunk[0].visual is not None:
        vis = torch.stack([r.visual for r in chunk])
        est = model(mix, visual=vis)
    else:
        est = model(mix)
    ref = torch.stack([r.target for r in chunk])
    return si_snr_loss(est, ref)


def _load_split_samples(manifest_path, split: str) -> list[MixtureSample]:
    root = Path(manifest_path).parent
    rows = split_rows(read_manifest(manifest_path), split)
    return [load_sample(r, root) for r in rows]


# -- separation training ------------------------------------------------------


def train_separation(cfg: FusionConfig, manifest_path, tc: TrainConfig,
                     out_dir, *, backbone: FrozenBackbone | None = None,
                     resume_from=None, max_steps: int | None = None,
                     log=None) -> dict:
    """Train a separation model; returns a summary dict.

    Writes last.pt every epoch, best.pt on validation improvement, and
    history.csv with one (epoch, train_loss, val_loss, lr) line per epoch.
    If the manifest has no val split, the train split doubles as validation.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    say = log if log is not None else (lambda msg: None)

    if cfg.variant != "audio_only" and cfg.n > 0 and backbone is None:
        raise ConfigError(f"variant {cfg.variant} needs a frozen visual backbone")

    train_samples = _load_split_samples(manifest_path, "train")
    if not train_samples:
        raise DataError(f"no train samples in {manifest_path}")
    val_samples = _load_split_samples(manifest_path, "val")

    torch.manual_seed(tc.seed)
    model = SeparationModel(cfg, backbone)
    emb = backbone if cfg.variant != "audio_only" and cfg.n > 0 else None
    train_rows = _prepare_rows(train_samples, emb)
    val_rows = _prepare_rows(val_samples, emb) if val_samples else train_rows

    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(trainable, lr=tc.lr, weight_decay=tc.weight_decay)
    scheduler = PlateauHalver(optimizer, tc.plateau_patience, tc.lr_factor)

    start_epoch = 1
    best_val = math.inf
    history: list[dict] = []
    if resume_from is not None:
        model, payload = load_model_checkpoint(resume_from, expected_cfg=cfg)
        trainable = [p for p in model.parameters() if p.requires_grad]
        optimizer = torch.optim.AdamW(trainable, lr=tc.lr,
                                      weight_decay=tc.weight_decay)
        optimizer.load_state_dict(payload["optimizer_state"])
        scheduler = PlateauHalver(optimizer, tc.plateau_patience, tc.lr_factor)
        scheduler.load_state_dict(payload["scheduler_state"])
        torch.set_rng_state(payload["rng_state"])
        start_epoch = payload["epoch"] + 1
        best_val = payload["best_val_loss"]
        history = list(payload.get("history", []))

    backbone_cfg = backbone.net.cfg if backbone is not None else None
    step = 0
    bad_epochs = 0
    stop_reason = "max_epochs"

    for epoch in range(start_epoch, tc.max_epochs + 1):
        model.train()
        epoch_losses = []
        for b, chunk in enumerate(_batches(train_rows, tc.batch_size, shuffle=True)):
            loss = _forward_batch(model, chunk)
            if not torch.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {b} "
                    f"(samples {[r.sample_id for r in chunk]})")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            clip_grad_l2_(trainable, tc.grad_clip_l2)
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
            step += 1
            if max_steps is not None and step >= max_steps:
                break

        model.eval()
        with torch.no_grad():
            val_losses = [float(_forward_batch(model, chunk))
                          for chunk in _batches(val_rows, tc.batch_size, shuffle=False)]
        val_loss = float(np.mean(val_losses))
        train_loss = float(np.mean(epoch_losses)) if epoch_losses else math.nan
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": val_loss, "lr": scheduler.lr})
        say(f"epoch {epoch}: train {train_loss:.4f} val {val_loss:.4f} "
            f"lr {scheduler.lr:.2e}")

        improved = val_loss < best_val
        if improved:
            best_val = val_loss
            bad_epochs = 0
            save_model_checkpoint(out / BEST_CHECKPOINT, model, backbone_cfg,
                                  extra={"epoch": epoch, "best_val_loss": best_val})
        else:
            bad_epochs += 1

        scheduler.step(val_loss)
        save_model_checkpoint(
            out / LAST_CHECKPOINT, model, backbone_cfg,
            extra={"optimizer_state": optimizer.state_dict(),
                   "scheduler_state": scheduler.state_dict(),
                   "rng_state": torch.get_rng_state(),
                   "epoch": epoch, "best_val_loss": best_val,
                   "history": history})
        _write_history(out / HISTORY_FILE, history)

        if max_steps is not None and step >= max_steps:
            stop_reason = "max_steps"
            break
        if bad_epochs >= tc.early_stop_patience:
            stop_reason = "early_stop"
            break

    return {"best_val_loss": best_val, "epochs_run": history[-1]["epoch"] if history else 0,
            "steps": step, "stop_reason": stop_reason, "history": history,
            "checkpoint": str(out / LAST_CHECKPOINT),
            "best_checkpoint": str(out / BEST_CHECKPOINT)}


def _write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "lr"])
        writer.writeheader()
        for row in history:
            writer.writerow(row)


# -- lip-reading pretraining ---------------------------------------------------


def pretrain_lip(cfg: VisualFrontendConfig, labels_manifest, tc: TrainConfig,
                 out_path, *, head_cfg=None, max_steps: int | None = None,
                 log=None) -> dict:
    """Cross-entropy pretraining of the visual backbone through a pyramid
    classification head; exports backbone weights only (the head is discarded).
    """
    say = log if log is not None else (lambda msg: None)
    root = Path(labels_manifest).parent
    rows = read_manifest(labels_manifest)
    if not rows:
        raise DataError(f"empty labels manifest: {labels_manifest}")
    labels = [int(r["label"]) for r in rows]
    if max(labels) >= cfg.num_classes or min(labels) < 0:
        raise DataError(
            f"labels span [{min(labels)}, {max(labels)}] but the head has "
            f"{cfg.num_classes} classes")

    from .data import read_clip

    clips, targets = [], []
    for r in rows:
        if r.get("split", "train") != "train":
            continue
        clips.append(clip_to_tensor(read_clip(root / r["clip_path"])))
        targets.append(int(r["label"]))
    if not clips:
        raise DataError("labels manifest has no train rows")

    torch.manual_seed(tc.seed)
    model = LipReadingModel(cfg, head_cfg)
    optimizer = torch.optim.AdamW(model.parameters(), lr=tc.lr,
                                  weight_decay=tc.weight_decay)
    idx = list(range(len(clips)))
    step = 0
    accuracy = 0.0
    for epoch in range(1, tc.max_epochs + 1):
        order = torch.randperm(len(idx)).tolist()
        for start in range(0, len(order), tc.batch_size):
            pick = order[start:start + tc.batch_size]
            batch = torch.stack([clips[i] for i in pick])
            target = torch.tensor([targets[i] for i in pick])
            logits = model(batch)
            loss = F.cross_entropy(logits, target)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at pretrain step {step}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            clip_grad_l2_(list(model.parameters()), tc.grad_clip_l2)
            optimizer.step()
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        model.eval()
        with torch.no_grad():
            preds = []
            for start in range(0, len(clips), 16):
                batch = torch.stack(clips[start:start + 16])
                preds.append(model(batch).argmax(dim=1))
            accuracy = float((torch.cat(preds) ==
                              torch.tensor(targets)).float().mean())
        model.train()
        say(f"pretrain epoch {epoch}: loss {float(loss.detach()):.4f} "
            f"train acc {accuracy:.3f} ({step} steps)")
        if max_steps is not None and step >= max_steps:
            break
        if accuracy >= 0.999:
            break

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": 1,
        "backbone_config": dataclasses.asdict(cfg),
        "backbone_state": model.backbone.state_dict(),
    }, out_path)
    return {"steps": step, "train_accuracy": accuracy, "checkpoint": str(out_path)}


def load_pretrained_backbone(path) -> FrozenBackbone:
    """Rebuild the exported backbone, frozen and pinned to eval."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise DataError(f"unreadable backbone checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "backbone_state" not in payload:
        raise DataError(f"{path} is not a backbone checkpoint")
    cfg = VisualFrontendConfig(**{
        k: tuple(v) if isinstance(v, list) else v
        for k, v in payload["backbone_config"].items()})
    backbone = VisualBackbone(cfg)
    backbone.load_state_dict(payload["backbone_state"])
    return freeze_backbone(backbone)


# -- inference ----------------------------------------------------------------


def separate(model: SeparationModel, mixture: np.ndarray,
             clips: list[VideoClip] | None = None) -> list[np.ndarray]:
    """One estimated waveform per clip (one total for audio_only)."""
    model.eval()
    mix = torch.from_numpy(np.asarray(mixture, dtype=np.float32))
    outs = []
    with torch.no_grad():
        if model.cfg.variant == "audio_only" or model.cfg.n == 0:
            outs.append(model(mix).numpy())
        else:
            if not clips:
                raise DataError(f"variant {model.cfg.variant} needs clips")
            want = math.ceil(mix.shape[-1] / SAMPLES_PER_FRAME)
            for clip in clips:
                if clip.num_frames != want:
                    raise DataError(
                        f"clip has {clip.num_frames} frames, a "
                        f"{mix.shape[-1]}-sample mixture needs {want}")
                outs.append(model(mix, clip=clip_to_tensor(clip)).numpy())
    return outs


def evaluate_manifest(manifest_path, *, model: SeparationModel | None = None,
                      split: str = "test", passthrough: bool = False,
                      log=None):
    """Score a manifest split; passthrough scores the mixture as its own
    estimate (the 0 dB improvement reference). Returns a MetricReport."""
    from .metrics import MetricReport

    say = log if log is not None else (lambda msg: None)
    samples = _load_split_samples(manifest_path, split)
    if not samples:
        raise DataError(f"no {split} samples in {manifest_path}")
    if model is None and not passthrough:
        raise ConfigError("evaluate needs a model or passthrough=True")

    report = MetricReport()
    for s in samples:
        if passthrough:
            ests = [s.mixture for _ in s.sources]
        else:
            ests = separate(model, s.mixture, s.clips)
            if len(ests) == 1 and len(s.sources) > 1:
                ests = [ests[0] for _ in s.sources]
        for i, (est, src) in enumerate(zip(ests, s.sources)):
            report.add(s.sample_id, est, src.waveform, s.mixture, i)
        say(f"scored {s.sample_id}")
    return report
