"""Waveform and spectrogram primitives plus the Si-SNR metric/loss family.

All audio is mono 16 kHz. Metric functions are numpy-based and pure;
loss functions are torch-based and differentiable.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from itertools import permutations
from pathlib import Path

import numpy as np
import torch

SAMPLE_RATE = 16000
EPS = 1e-8
SI_SNR_CLAMP_DB = 30.0
MAX_PIT_SOURCES = 4


@dataclass
class Waveform:
    """Mono audio samples with their sampling rate."""

    samples: np.ndarray
    rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.rate <= 0:
            raise ValueError(f"rate must be positive, got {self.rate}")
        if self.samples.size < 1:
            raise ValueError("waveform must contain at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.rate


@dataclass
class ChunkSpec:
    """Chunking used for training: 2 s non-overlapping by default."""

    duration_seconds: float = 2.0
    hop_seconds: float = 2.0

    def __post_init__(self):
        if self.duration_seconds <= 0 or self.hop_seconds <= 0:
            raise ValueError("chunk duration and hop must be positive")

    def length(self, rate: int = SAMPLE_RATE) -> int:
        return int(round(self.duration_seconds * rate))

    def hop(self, rate: int = SAMPLE_RATE) -> int:
        return int(round(self.hop_seconds * rate))


@dataclass
class Spectrogram:
    """One-sided STFT frames, time major: shape (frames, window_len // 2 + 1)."""

    frames: np.ndarray
    window_len: int
    hop: int
    window: str = "hann"

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2:
            raise ValueError("spectrogram frames must be a 2-D matrix")
        expected_bins = self.window_len // 2 + 1
        if self.frames.shape[1] != expected_bins:
            raise ValueError(
                f"expected {expected_bins} bins for window {self.window_len}, "
                f"got {self.frames.shape[1]}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("spectrogram contains non-finite values")

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_bins(self) -> int:
        return self.frames.shape[1]


def as_samples(x) -> np.ndarray:
    """Coerce a Waveform or array-like into a 1-D float64 sample array."""
    if isinstance(x, Waveform):
        return x.samples
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    return arr


def si_snr(estimate, target) -> float:
    """Scale-invariant SNR in dB between an estimate and a target signal.

    Both signals are zero-meaned, the target is rescaled by the optimal
    factor alpha = <e, t> / <t, t>, and the ratio of projection energy to
    residual energy is reported in dB. The result is clamped to
    [-30, +30] dB so degenerate cases stay finite.

    Args:
        estimate: estimated signal, 1-D samples or Waveform.
        target: reference signal of the same length.

    Returns:
        Si-SNR in dB, clamped to +/-30.
    """
    e = as_samples(estimate)
    t = as_samples(target)
    if e.shape != t.shape:
        raise ValueError(f"length mismatch: {e.shape} vs {t.shape}")
    if e.size < 2:
        raise ValueError("si_snr needs signals of length >= 2")
    e = e - e.mean()
    t = t - t.mean()
    t_energy = float(np.dot(t, t))
    if t_energy == 0.0:
        raise ValueError("target has zero variance; Si-SNR is undefined")
    alpha = float(np.dot(e, t)) / t_energy
    projection = alpha * t
    residual = e - projection
    num = float(np.linalg.norm(projection))
    den = float(np.linalg.norm(residual))
    tiny = np.finfo(np.float64).tiny
    value = 20.0 * np.log10(max(num, tiny) / max(den, tiny))
    return float(np.clip(value, -SI_SNR_CLAMP_DB, SI_SNR_CLAMP_DB))


def si_snr_improvement(estimate, mixture, target) -> float:
    """Si-SNR gain of the estimate over the unprocessed mixture, in dB."""
    return si_snr(estimate, target) - si_snr(mixture, target)


def _si_snr_torch(estimate: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-row Si-SNR in dB with eps guards; differentiable, unclamped."""
    if estimate.shape != target.shape:
        raise ValueError(
            f"shape mismatch: {tuple(estimate.shape)} vs {tuple(target.shape)}")
    if estimate.shape[-1] < 2:
        raise ValueError("si_snr_loss needs signals of length >= 2")
    e = estimate - estimate.mean(dim=-1, keepdim=True)
    t = target - target.mean(dim=-1, keepdim=True)
    alpha = (e * t).sum(dim=-1, keepdim=True) / (
        (t * t).sum(dim=-1, keepdim=True) + EPS)
    projection = alpha * t
    residual = e - projection
    return 20.0 * torch.log10(
        EPS + projection.norm(dim=-1) / (residual.norm(dim=-1) + EPS))


def si_snr_loss(estimates, targets) -> torch.Tensor:
    """Negative mean Si-SNR over a batch, the training objective.

    Accepts (..., samples) tensors or arrays; the mean runs over all
    leading dimensions. No reporting clamp is applied; small eps terms
    inside the norms keep the value finite for degenerate inputs.
    """
    e = torch.as_tensor(estimates)
    t = torch.as_tensor(targets)
    return -_si_snr_torch(e, t).mean()


def pit_si_snr_loss(estimates, targets) -> tuple[torch.Tensor, tuple[int, ...]]:
    """Permutation-invariant Si-SNR loss over N sources.

    Evaluates the mean Si-SNR loss for every assignment of estimates to
    targets and returns the minimum together with the argmin permutation
    (ties go to the lexicographically smallest permutation).

    Args:
        estimates: (N, samples) tensor-like of separated signals.
        targets: (N, samples) tensor-like of references.

    Returns:
        (loss, permutation) where permutation[i] is the target index
        assigned to estimate i.
    """
    e = torch.as_tensor(estimates)
    t = torch.as_tensor(targets)
    if e.shape != t.shape:
        raise ValueError(
            f"shape mismatch: {tuple(e.shape)} vs {tuple(t.shape)}")
    n = e.shape[0]
    if n < 2:
        raise ValueError("PIT needs at least two sources")
    if n > MAX_PIT_SOURCES:
        raise ValueError(f"refusing PIT over {n}! permutations (N > {MAX_PIT_SOURCES})")
    # (N, N) matrix of pairwise Si-SNR values; row = estimate, col = target.
    pair = torch.stack(
        [_si_snr_torch(e[i].expand(n, -1), t) for i in range(n)])
    best_loss = None
    best_perm = None
    for perm in permutations(range(n)):
        loss = -torch.stack([pair[i, j] for i, j in enumerate(perm)]).mean()
        if best_loss is None or loss.item() < best_loss.item():
            best_loss = loss
            best_perm = perm
    return best_loss, best_perm


def _hann(window_len: int) -> np.ndarray:
    # Periodic Hann: exact COLA at hop = window_len / 2^k.
    n = np.arange(window_len)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / window_len)


def stft(w, window_len: int, hop: int) -> Spectrogram:
    """Short-time Fourier transform with Hann window and no padding.

    Frames lie fully inside the signal: the frame count is
    floor((len - window_len) / hop) + 1.

    Args:
        w: input samples or Waveform, length >= window_len.
        window_len: even analysis window length in samples.
        hop: frame shift in samples, <= window_len.

    Returns:
        Spectrogram with one-sided complex frames (time x bins).
    """
    x = as_samples(w)
    if window_len % 2 != 0:
        raise ValueError("window_len must be even")
    if hop <= 0 or hop > window_len:
        raise ValueError("hop must satisfy 0 < hop <= window_len")
    if x.size < window_len:
        raise ValueError(
            f"waveform of {x.size} samples is shorter than one window ({window_len})")
    n_frames = (x.size - window_len) // hop + 1
    window = _hann(window_len)
    idx = hop * np.arange(n_frames)[:, None] + np.arange(window_len)[None, :]
    frames = np.fft.rfft(x[idx] * window[None, :], axis=1)
    return Spectrogram(frames, window_len, hop)


def istft(s: Spectrogram, phase_source: Spectrogram | None = None) -> np.ndarray:
    """Overlap-add inverse STFT with synthesis-window normalization.

    When phase_source is given, the magnitude of ``s`` is combined with
    the phase of ``phase_source`` before inversion; otherwise the complex
    frames of ``s`` are inverted directly.

    Returns:
        Reconstructed samples of length (frames - 1) * hop + window_len.
        Interior samples (one window in from each edge) match the original
        signal of an stft round trip; the tapered edges are approximate.
    """
    if phase_source is not None:
        if phase_source.frames.shape != s.frames.shape:
            raise ValueError(
                f"phase source shape {phase_source.frames.shape} does not match "
                f"spectrogram shape {s.frames.shape}")
        frames = np.abs(s.frames) * np.exp(1j * np.angle(phase_source.frames))
        s = Spectrogram(frames, s.window_len, s.hop, s.window)
    window = _hann(s.window_len)
    time_frames = np.fft.irfft(s.frames, n=s.window_len, axis=1)
    out_len = (s.num_frames - 1) * s.hop + s.window_len
    out = np.zeros(out_len)
    norm = np.zeros(out_len)
    for i in range(s.num_frames):
        start = i * s.hop
        out[start:start + s.window_len] += time_frames[i] * window
        norm[start:start + s.window_len] += window ** 2
    return out / np.maximum(norm, EPS)


def read_wav(path) -> Waveform:
    """Read a 16-bit PCM mono WAV file into a [-1, 1) float waveform."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio")
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, w, scale: float | None = None) -> None:
    """Write a waveform as 16-bit PCM mono WAV.

    Args:
        path: destination file.
        w: samples or Waveform; values outside [-1, 1) are clipped unless
            a scale is supplied.
        scale: optional common gain applied before quantization, used to
            keep a group of related files (mixture plus sources) on one scale.
    """
    if isinstance(w, Waveform):
        samples, rate = w.samples, w.rate
    else:
        samples, rate = as_samples(w), SAMPLE_RATE
    if scale is not None:
        samples = samples * scale
    quantized = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(rate)
        f.writeframes(quantized.tobytes())
