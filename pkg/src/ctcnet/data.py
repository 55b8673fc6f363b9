"""Synthesis, storage, and validation of paired audio/video separation data.

A synthetic "speaker" is a procedural audio process: a harmonic carrier with a
per-speaker spectral decay, amplitude-modulated by a 25 Hz envelope. The
matching video clip is a fixed spatial template, circularly shifted over time,
whose brightness is scaled by the same envelope, so per-frame mean intensity
tracks the speaker's loudness and the visual stream identifies which source to
extract.

All audio is 16 kHz 16-bit PCM mono WAV. Corpus files are written on the
int16 grid (k/32768) and mixtures are the exact sum of their written sources,
so reconstruction from disk is bit-exact. Clips are uint8 stacks of shape
(T_v, H, W) in .npy files; in memory they are float32 (H, W, T_v) in [0, 1].
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.ndimage import uniform_filter

from .errors import DataError

logger = logging.getLogger("ctcnet.data")

SAMPLE_RATE = 16000
FRAME_RATE = 25
SAMPLES_PER_FRAME = SAMPLE_RATE // FRAME_RATE  # 640
CLIP_HW = 88
PCM_SCALE = 32768.0
SPLITS = ("train", "val", "test")

MANIFEST_NAME = "manifest.jsonl"


# -- domain types -----------------------------------------------------------


@dataclass
class Utterance:
    waveform: np.ndarray  # float32, T_a
    speaker_id: str = ""
    sample_rate: int = SAMPLE_RATE

    @property
    def duration_samples(self) -> int:
        return int(self.waveform.shape[-1])

    def validate(self) -> "Utterance":
        if self.sample_rate != SAMPLE_RATE:
            raise DataError(f"sample rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        if self.waveform.ndim != 1:
            raise DataError("utterance waveform must be 1-D")
        if not np.isfinite(self.waveform).all():
            raise DataError("utterance contains non-finite samples")
        return self


@dataclass
class VideoClip:
    frames: np.ndarray  # float32, H x W x T_v, values in [0, 1]
    frame_rate: int = FRAME_RATE

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[-1])

    def validate(self) -> "VideoClip":
        if self.frame_rate != FRAME_RATE:
            raise DataError(f"frame rate must be {FRAME_RATE}, got {self.frame_rate}")
        if self.frames.ndim != 3:
            raise DataError("clip frames must be H x W x T_v")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise DataError("clip intensities must lie in [0, 1]")
        return self


@dataclass
class MixtureSample:
    sample_id: str
    mixture: np.ndarray
    sources: list[Utterance]
    clips: list[VideoClip]
    snr_db: float
    gains: tuple[float, ...] = ()
    noise: np.ndarray | None = None
    split: str = "train"

    def validate(self) -> "MixtureSample":
        if len(self.sources) < 2:
            raise DataError("separation samples need at least two sources")
        t_a = self.mixture.shape[-1]
        for s in self.sources:
            s.validate()
            if s.duration_samples != t_a:
                raise DataError("source/mixture length mismatch")
        if not np.isfinite(self.mixture).all():
            raise DataError("mixture contains non-finite samples")
        total = sum(s.waveform for s in self.sources)
        if self.noise is not None:
            total = total + self.noise
        if np.abs(self.mixture - total).max() > 1e-6:
            raise DataError("mixture does not equal the sum of its sources")
        if self.clips:
            if len(self.clips) != len(self.sources):
                raise DataError("clip count must match source count")
            t_v = self.clips[0].num_frames
            for c in self.clips:
                c.validate()
                if c.num_frames != t_v:
                    raise DataError("clips disagree on frame count")
            if t_v * SAMPLES_PER_FRAME != t_a:
                raise DataError(
                    f"A/V length mismatch: {t_v} frames covers "
                    f"{t_v * SAMPLES_PER_FRAME} samples, audio has {t_a}")
        return self


# -- mixing -------------------------------------------------------------------


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x, dtype=np.float64))))


def mix(s1: Utterance, s2: Utterance, snr_db: float) -> MixtureSample:
    """Superimpose two utterances at a requested SNR.

    s1 keeps unit gain; s2 is scaled so 20*log10(rms(s1)/rms(g*s2)) equals
    snr_db. No peak renormalization happens here: the sum may exceed [-1, 1]
    in memory and is saturated only when written to PCM.
    """
    if s1.duration_samples != s2.duration_samples:
        raise DataError(
            f"length mismatch: {s1.duration_samples} vs {s2.duration_samples}")
    if s1.sample_rate != s2.sample_rate:
        raise DataError("sample rate mismatch between sources")
    r1, r2 = _rms(s1.waveform), _rms(s2.waveform)
    if r1 == 0.0 or r2 == 0.0:
        raise DataError("zero-RMS source: SNR is undefined")
    g = (r1 / r2) * 10.0 ** (-snr_db / 20.0)
    scaled = (s2.waveform * g).astype(np.float32)
    mixture = (s1.waveform + scaled).astype(np.float32)
    return MixtureSample(
        sample_id="",
        mixture=mixture,
        sources=[Utterance(s1.waveform.astype(np.float32), s1.speaker_id),
                 Utterance(scaled, s2.speaker_id)],
        clips=[],
        snr_db=float(snr_db),
        gains=(1.0, float(g)),
    )


# -- PCM and clip file I/O ----------------------------------------------------


def _pcm_codes(x: np.ndarray) -> np.ndarray:
    codes = np.round(np.asarray(x, dtype=np.float64) * PCM_SCALE)
    if codes.max() > 32767 or codes.min() < -32768:
        logger.warning("saturating %d samples outside [-1, 1] at PCM write",
                       int(((codes > 32767) | (codes < -32768)).sum()))
    return np.clip(codes, -32768, 32767).astype(np.int16)


def quantize_pcm(x: np.ndarray) -> np.ndarray:
    """Snap a float waveform onto the int16 grid (k/32768) losslessly held in float32."""
    return (_pcm_codes(x).astype(np.float32)) / np.float32(PCM_SCALE)


def write_wav(path, x: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), SAMPLE_RATE, _pcm_codes(x))


def read_wav(path) -> np.ndarray:
    try:
        sr, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise DataError(f"missing audio file: {path}") from None
    except Exception as exc:
        raise DataError(f"unreadable audio file {path}: {exc}") from exc
    if sr != SAMPLE_RATE:
        raise DataError(f"{path}: sample rate {sr}, expected {SAMPLE_RATE}")
    if data.dtype != np.int16:
        raise DataError(f"{path}: expected 16-bit PCM, got dtype {data.dtype}")
    if data.ndim != 1:
        raise DataError(f"{path}: expected mono audio, got shape {data.shape}")
    return data.astype(np.float32) / np.float32(PCM_SCALE)


def write_clip(path, clip: VideoClip) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    stack = np.round(clip.frames * 255.0).astype(np.uint8).transpose(2, 0, 1)
    np.save(str(path), stack)


def read_clip(path) -> VideoClip:
    try:
        stack = np.load(str(path))
    except FileNotFoundError:
        raise DataError(f"missing clip file: {path}") from None
    except Exception as exc:
        raise DataError(f"unreadable clip file {path}: {exc}") from exc
    if stack.dtype != np.uint8 or stack.ndim != 3:
        raise DataError(f"{path}: expected uint8 (T, H, W) stack")
    frames = stack.transpose(1, 2, 0).astype(np.float32) / np.float32(255.0)
    return VideoClip(frames=frames)


# -- procedural speakers ------------------------------------------------------


@dataclass(frozen=True)
class SpeakerSpec:
    speaker_id: str
    f0: float
    decay: float
    num_harmonics: int
    env_rate_hz: float
    env_style: str  # "syllabic" | "bursty"
    template_seed: int
    shift_speed: float


def _make_speaker(speaker_id: str, rng: np.random.Generator,
                  env_style: str = "syllabic") -> SpeakerSpec:
    f0 = float(rng.uniform(90.0, 250.0))
    decay = float(rng.uniform(0.55, 0.85))
    max_harm = int(0.45 * SAMPLE_RATE / f0)
    num_harmonics = int(min(rng.integers(6, 11), max_harm))
    return SpeakerSpec(
        speaker_id=speaker_id,
        f0=f0,
        decay=decay,
        num_harmonics=num_harmonics,
        env_rate_hz=float(rng.uniform(2.0, 5.0)),
        env_style=env_style,
        template_seed=int(rng.integers(0, 2**31 - 1)),
        shift_speed=float(rng.uniform(0.5, 3.0)),
    )


def _envelope25(spec: SpeakerSpec, num_frames: int,
                rng: np.random.Generator) -> np.ndarray:
    """Per-frame amplitude envelope at 25 Hz, values in (0, 1]."""
    t = np.arange(num_frames) / FRAME_RATE
    if spec.env_style == "bursty":
        state = np.empty(num_frames)
        on = bool(rng.integers(0, 2))
        for i in range(num_frames):
            if rng.random() > 0.82:
                on = not on
            state[i] = 1.0 if on else 0.0
        kernel = np.ones(3) / 3.0
        smoothed = np.convolve(state, kernel, mode="same")
        env = 0.05 + 0.95 * smoothed
    else:
        phase = rng.uniform(0.0, 2.0 * np.pi)
        env = 0.12 + 0.88 * (0.5 + 0.5 * np.sin(2 * np.pi * spec.env_rate_hz * t + phase)) ** 2
    return env.astype(np.float64)


def _render_audio(spec: SpeakerSpec, env25: np.ndarray,
                  rng: np.random.Generator, target_rms: float = 0.08) -> np.ndarray:
    num_samples = env25.shape[0] * SAMPLES_PER_FRAME
    t = np.arange(num_samples) / SAMPLE_RATE
    carrier = np.zeros(num_samples)
    for k in range(1, spec.num_harmonics + 1):
        amp = spec.decay ** (k - 1)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        carrier += amp * np.sin(2.0 * np.pi * spec.f0 * k * t + phase)
    # frame t spans samples [640t, 640t+640); align the ramp to frame centers
    # so per-frame RMS tracks env25[t]
    frame_pos = (np.arange(num_samples) - (SAMPLES_PER_FRAME - 1) / 2) / SAMPLES_PER_FRAME
    env = np.interp(frame_pos, np.arange(env25.shape[0]), env25)
    w = carrier * env
    w *= target_rms / max(_rms(w), 1e-12)
    return w.astype(np.float32)


def _make_template(seed: int, hw: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    raw = uniform_filter(rng.random((hw, hw)), size=max(3, hw // 10))
    lo, hi = raw.min(), raw.max()
    return (0.15 + 0.7 * (raw - lo) / max(hi - lo, 1e-12)).astype(np.float64)


def _render_clip(spec: SpeakerSpec, env25: np.ndarray, hw: int) -> VideoClip:
    template = _make_template(spec.template_seed, hw)
    num_frames = env25.shape[0]
    frames = np.empty((hw, hw, num_frames), dtype=np.float32)
    for i in range(num_frames):
        shift = int(round(spec.shift_speed * i)) % hw
        frames[:, :, i] = np.roll(template, shift, axis=1) * env25[i]
    return VideoClip(frames=frames)


# -- corpus generation --------------------------------------------------------


def _split_counts(num_samples: int, fracs: tuple[float, float, float]) -> dict[str, int]:
    raw = [f * num_samples for f in fracs]
    counts = [int(math.floor(r)) for r in raw]
    remainder = num_samples - sum(counts)
    order = sorted(range(3), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in range(remainder):
        counts[order[i % 3]] += 1
    return dict(zip(SPLITS, counts))


def generate_synthetic_corpus(num_samples: int, seed: int, out_dir,
                              *, duration_s: float = 2.0,
                              snr_range: tuple[float, float] = (-5.0, 5.0),
                              num_speakers: int = 12,
                              clip_hw: int = CLIP_HW,
                              env_style: str = "syllabic",
                              shared_texture: bool = False,
                              split_fracs: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> Path:
    """Write a deterministic two-speaker corpus; returns the manifest path.

    With shared_texture=True the two sources of every sample share one carrier
    texture (same f0, decay, harmonic count) and differ only in their
    envelopes, so audio alone cannot tell which source belongs to which output
    slot; the clips can. Pair it with env_style="bursty" and snr fixed at 0.
    """
    if num_samples < 1:
        raise DataError("need num_samples >= 1")
    if num_speakers < 6:
        raise DataError("need at least 6 speakers for disjoint splits")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    num_frames = int(round(duration_s * FRAME_RATE))
    if num_frames < 1:
        raise DataError("duration too short for a single video frame")

    speakers = [_make_speaker(f"sp{i:03d}", rng, env_style) for i in range(num_speakers)]
    n_test = max(2, num_speakers // 6)
    n_val = max(2, num_speakers // 6)
    pools = {
        "test": speakers[:n_test],
        "val": speakers[n_test:n_test + n_val],
        "train": speakers[n_test + n_val:],
    }
    counts = _split_counts(num_samples, split_fracs)
    schedule = [s for s in SPLITS for _ in range(counts[s])]

    rows = []
    for idx, split in enumerate(schedule):
        pool = pools[split]
        i1, i2 = rng.choice(len(pool), size=2, replace=False)
        sp1, sp2 = pool[int(i1)], pool[int(i2)]
        if shared_texture:
            f0 = float(rng.uniform(90.0, 250.0))
            decay = float(rng.uniform(0.55, 0.85))
            nh = int(min(rng.integers(6, 11), int(0.45 * SAMPLE_RATE / f0)))
            sp1 = replace(sp1, f0=f0, decay=decay, num_harmonics=nh)
            sp2 = replace(sp2, f0=f0, decay=decay, num_harmonics=nh)

        env1 = _envelope25(sp1, num_frames, rng)
        env2 = _envelope25(sp2, num_frames, rng)
        u1 = Utterance(_render_audio(sp1, env1, rng), sp1.speaker_id)
        u2 = Utterance(_render_audio(sp2, env2, rng), sp2.speaker_id)
        snr = float(rng.uniform(*snr_range))

        # keep the analytic sum inside PCM range so the file writer never saturates
        g = (_rms(u1.waveform) / _rms(u2.waveform)) * 10.0 ** (-snr / 20.0)
        peak = float(np.abs(u1.waveform + g * u2.waveform).max())
        if peak > 0.95:
            c = np.float32(0.95 / peak)
            u1.waveform *= c
            u2.waveform *= c

        ms = mix(u1, u2, snr)
        s1q = quantize_pcm(ms.sources[0].waveform)
        s2q = quantize_pcm(ms.sources[1].waveform)
        mixture = s1q + s2q

        sid = f"{split}_{idx:05d}"
        wav_dir, clip_dir = out / "wav", out / "clips"
        mix_path = wav_dir / f"{sid}_mix.wav"
        s_paths = [wav_dir / f"{sid}_s1.wav", wav_dir / f"{sid}_s2.wav"]
        c_paths = [clip_dir / f"{sid}_v1.npy", clip_dir / f"{sid}_v2.npy"]
        write_wav(mix_path, mixture)
        write_wav(s_paths[0], s1q)
        write_wav(s_paths[1], s2q)
        write_clip(c_paths[0], _render_clip(sp1, env1, clip_hw))
        write_clip(c_paths[1], _render_clip(sp2, env2, clip_hw))

        rows.append({
            "id": sid,
            "mixture_path": str(mix_path.relative_to(out)),
            "source_paths": [str(p.relative_to(out)) for p in s_paths],
            "clip_paths": [str(p.relative_to(out)) for p in c_paths],
            "snr_db": snr,
            "split": split,
            "speaker_ids": [sp1.speaker_id, sp2.speaker_id],
            "gains": list(ms.gains),
        })

    manifest = out / MANIFEST_NAME
    with open(manifest, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return manifest


def generate_visual_benefit_corpus(num_samples: int, seed: int, out_dir,
                                   *, duration_s: float = 1.0,
                                   clip_hw: int = CLIP_HW,
                                   split_fracs: tuple[float, float, float] = (0.75, 0.0, 0.25)) -> Path:
    """Corpus where only the video identifies the target: shared carrier
    texture per pair, independent bursty envelopes, 0 dB mixing."""
    return generate_synthetic_corpus(
        num_samples, seed, out_dir, duration_s=duration_s,
        snr_range=(0.0, 0.0), clip_hw=clip_hw, env_style="bursty",
        shared_texture=True, split_fracs=split_fracs)


def generate_lip_corpus(num_classes: int, samples_per_class: int, seed: int,
                        out_dir, *, duration_s: float = 1.0,
                        clip_hw: int = CLIP_HW,
                        val_frac: float = 0.2) -> Path:
    """Word-classification clip corpus for lip-reading pretraining.

    Each class is a distinct visual process (its own template, drift speed,
    and envelope rate); samples within a class vary by phase and start
    offset. Returns the labels manifest path.
    """
    if num_classes < 2 or samples_per_class < 1:
        raise DataError("need num_classes >= 2 and samples_per_class >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    num_frames = int(round(duration_s * FRAME_RATE))

    class_specs = []
    for c in range(num_classes):
        class_specs.append(SpeakerSpec(
            speaker_id=f"word{c:03d}",
            f0=100.0, decay=0.7, num_harmonics=6,
            env_rate_hz=float(rng.uniform(1.5, 6.0)),
            env_style="syllabic",
            template_seed=int(rng.integers(0, 2**31 - 1)),
            shift_speed=float(rng.uniform(0.5, 4.0)),
        ))

    rows = []
    for c, spec in enumerate(class_specs):
        for j in range(samples_per_class):
            env = _envelope25(spec, num_frames, rng)
            clip = _render_clip(spec, env, clip_hw)
            sid = f"cls{c:03d}_{j:04d}"
            path = out / "clips" / f"{sid}.npy"
            write_clip(path, clip)
            split = "val" if rng.random() < val_frac else "train"
            rows.append({"id": sid, "clip_path": str(path.relative_to(out)),
                         "label": c, "split": split})

    manifest = out / "labels.jsonl"
    with open(manifest, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return manifest


# -- manifest loading ---------------------------------------------------------


def read_manifest(path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing manifest: {p}")
    rows = []
    with open(p) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{p}:{lineno}: bad JSON: {exc}") from exc
    return rows


def load_sample(entry: dict, root) -> MixtureSample:
    """Read, decode, and fully validate one manifest entry."""
    root = Path(root)
    for key in ("id", "mixture_path", "source_paths", "clip_paths", "snr_db", "split"):
        if key not in entry:
            raise DataError(f"manifest entry missing field {key!r}")
    if entry["split"] not in SPLITS:
        raise DataError(f"unknown split tag {entry['split']!r}")
    mixture = read_wav(root / entry["mixture_path"])
    speaker_ids = entry.get("speaker_ids") or [""] * len(entry["source_paths"])
    sources = [Utterance(read_wav(root / p), spk)
               for p, spk in zip(entry["source_paths"], speaker_ids)]
    clips = [read_clip(root / p) for p in entry["clip_paths"]]
    if len(clips) != len(sources):
        raise DataError("manifest entry has mismatched source/clip counts")
    for arr in [mixture] + [s.waveform for s in sources]:
        if np.abs(arr).max() > 1.0:
            raise DataError("decoded audio escapes [-1, 1]")
    sample = MixtureSample(
        sample_id=str(entry["id"]),
        mixture=mixture,
        sources=sources,
        clips=clips,
        snr_db=float(entry["snr_db"]),
        gains=tuple(entry.get("gains", ())),
        split=entry["split"],
    )
    return sample.validate()


def split_rows(rows: list[dict], split: str) -> list[dict]:
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}")
    return [r for r in rows if r.get("split") == split]


def check_split_disjointness(rows: list[dict]) -> None:
    seen: dict[str, set] = {s: set() for s in SPLITS}
    for r in rows:
        seen[r["split"]].update(r.get("speaker_ids", []))
    overlap = seen["test"] & (seen["train"] | seen["val"])
    if overlap:
        raise DataError(f"test-split speakers leak into train/val: {sorted(overlap)}")
