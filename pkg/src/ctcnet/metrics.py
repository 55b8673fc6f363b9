"""Separation metrics: SI-SNR, SDR, their improvements, and spectrogram correlation.

si_snr guards only the residual norm with EPS = 1e-8, so a perfect
reconstruction caps near +160 dB instead of overflowing while the ratio stays
scale-invariant to well under 1e-6 dB. sdr additionally guards the projection
norm (an exactly orthogonal estimate caps near -160 dB instead of diverging).
si_snr mean-centers both signals first; sdr is the scalar-projection form on
the raw signals, so the two differ on non-zero-mean inputs.

Outputs map to references by index. There is no permutation-invariant
assignment: each estimate is conditioned on a specific speaker's video, so the
pairing is known.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DataError

EPS = 1e-8

# Spectrogram reporting parameters: 32 ms window, 8 ms hop at 16 kHz, Hann taper.
SPEC_WIN = 512
SPEC_HOP = 128


def _as_pair(est, ref):
    est = np.asarray(est, dtype=np.float64).reshape(-1)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1)
    if est.shape != ref.shape:
        raise DataError(f"length mismatch: est {est.shape[0]} vs ref {ref.shape[0]}")
    return est, ref


def si_snr(est, ref) -> float:
    """Scale-invariant source-to-noise ratio in dB.

    Both signals are normalized to zero mean, the reference is scaled by
    alpha = <est, ref>/<ref, ref>, and the ratio of the scaled-reference norm
    to the residual norm is returned as 20*log10.
    """
    est, ref = _as_pair(est, ref)
    est = est - est.mean()
    ref = ref - ref.mean()
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise DataError("zero-energy reference after mean removal")
    alpha = float(np.dot(est, ref)) / ref_energy
    target = alpha * ref
    resid = est - target
    num = float(np.linalg.norm(target))
    den = float(np.linalg.norm(resid))
    return 20.0 * math.log10(num / (den + EPS))


def sdr(est, ref) -> float:
    """Single-source SDR in dB: scalar projection of ref onto est as target.

    No mean removal, otherwise the same ratio construction as si_snr.
    """
    est, ref = _as_pair(est, ref)
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise DataError("zero-energy reference")
    alpha = float(np.dot(est, ref)) / ref_energy
    target = alpha * ref
    resid = est - target
    num = float(np.linalg.norm(target))
    den = float(np.linalg.norm(resid))
    return 20.0 * math.log10((num + EPS) / (den + EPS))


def si_snri(est, ref, mixture) -> float:
    """SI-SNR improvement over the unprocessed mixture."""
    return si_snr(est, ref) - si_snr(mixture, ref)


def sdri(est, ref, mixture) -> float:
    """SDR improvement over the unprocessed mixture."""
    return sdr(est, ref) - sdr(mixture, ref)


def magnitude_spectrogram(x, win: int = SPEC_WIN, hop: int = SPEC_HOP) -> np.ndarray:
    """Hann-windowed magnitude spectrogram, frames x bins. Reporting only."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] < win:
        raise DataError(f"signal shorter than one {win}-sample window")
    window = np.hanning(win)
    n_frames = 1 + (x.shape[0] - win) // hop
    frames = np.stack([x[i * hop : i * hop + win] * window for i in range(n_frames)])
    return np.abs(np.fft.rfft(frames, axis=1))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a.reshape(-1) - a.mean()
    b = b.reshape(-1) - b.mean()
    denom = float(np.linalg.norm(a)) * float(np.linalg.norm(b))
    if denom == 0.0:
        raise DataError("degenerate constant spectrogram")
    return float(np.dot(a, b) / denom)


def pairwise_spectrogram_correlation(est_a, est_b, ref_a, ref_b) -> np.ndarray:
    """2x2 Pearson correlations between estimate and reference spectrograms.

    Rows are estimates (a, b), columns are references (a, b).
    """
    specs_est = [magnitude_spectrogram(est_a), magnitude_spectrogram(est_b)]
    specs_ref = [magnitude_spectrogram(ref_a), magnitude_spectrogram(ref_b)]
    out = np.empty((2, 2), dtype=np.float64)
    for i, se in enumerate(specs_est):
        for j, sr in enumerate(specs_ref):
            if se.shape != sr.shape:
                raise DataError("spectrogram shape mismatch")
            out[i, j] = _pearson(se, sr)
    return out


def si_snr_loss(est: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Negative mean SI-SNR over a batch, differentiable.

    est, ref: B x T. References must carry nonzero energy after mean removal
    (guaranteed by corpus validation).
    """
    if est.shape != ref.shape:
        raise DataError(f"length mismatch: est {tuple(est.shape)} vs ref {tuple(ref.shape)}")
    est = est - est.mean(dim=-1, keepdim=True)
    ref = ref - ref.mean(dim=-1, keepdim=True)
    alpha = (est * ref).sum(dim=-1, keepdim=True) / (ref * ref).sum(dim=-1, keepdim=True)
    target = alpha * ref
    resid = est - target
    num = target.norm(dim=-1)
    den = resid.norm(dim=-1)
    snr = 20.0 * torch.log10(num / (den + EPS))
    return -snr.mean()


@dataclass
class MetricReport:
    """Per-sample metric records plus corpus aggregates."""

    records: list[dict] = field(default_factory=list)

    def add(self, sample_id: str, est, ref, mixture, speaker_index: int = 0) -> dict:
        rec = {
            "id": sample_id,
            "speaker_index": speaker_index,
            "si_snr": si_snr(est, ref),
            "sdr": sdr(est, ref),
            "si_snri": si_snri(est, ref, mixture),
            "sdri": sdri(est, ref, mixture),
        }
        self.records.append(rec)
        return rec

    def summary(self) -> dict:
        if not self.records:
            return {"count": 0}
        keys = ("si_snr", "sdr", "si_snri", "sdri")
        out = {"count": len(self.records)}
        for k in keys:
            out[f"mean_{k}"] = float(np.mean([r[k] for r in self.records]))
        return out

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def write_summary(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
