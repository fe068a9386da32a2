"""Waveforms, WAV I/O and log-magnitude spectrograms."""

from __future__ import annotations

import logging
import math
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

LOG_OFFSET = 1e-6


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.clip(np.asarray(self.samples, dtype=np.float64), -1.0, 1.0)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    bins: np.ndarray  # (F, T)
    n_fft: int
    hop: int
    window: str = "hann"
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.bins.shape


def hann(n: int) -> np.ndarray:
    """Periodic Hann window (the DFT-even variant)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(n_samples: int, n_fft: int, hop: int) -> int:
    return 1 + (n_samples - n_fft) // hop


def stft_log_magnitude(w: Waveform, n_fft: int = 128, hop: int = 64) -> Spectrogram:
    """Hann-windowed STFT magnitude in log scale, shape (n_fft // 2 + 1, T).

    Frame ``t`` covers samples ``[t * hop, t * hop + n_fft)``; no centering or padding.
    """
    if n_fft < 2 or n_fft & (n_fft - 1):
        raise ValueError(f"n_fft must be a power of two, got {n_fft}")
    if hop < 1:
        raise ValueError("hop must be >= 1")
    x = w.samples
    if len(x) < n_fft:
        raise ValueError(f"waveform has {len(x)} samples, shorter than one frame ({n_fft})")
    n_frames = frame_count(len(x), n_fft, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop][:n_frames]
    mag = np.abs(np.fft.rfft(frames * hann(n_fft), axis=1)).T
    return Spectrogram(np.log(mag + LOG_OFFSET), n_fft, hop)


def crop_audio(w: Waveform, seconds: float, center: float) -> Waveform:
    """Cut a ``seconds``-long window centred at ``center`` seconds.

    Windows reaching outside the clip are zero-padded; a warning is logged.
    """
    sr = w.sample_rate
    n = int(round(seconds * sr))
    start = int(round(center * sr)) - n // 2
    stop = start + n
    src = w.samples
    if start < 0 or stop > len(src):
        logger.warning(
            "crop window [%d, %d) exceeds clip of %d samples; zero-padding", start, stop, len(src)
        )
    out = np.zeros(n)
    lo, hi = max(start, 0), min(stop, len(src))
    if hi > lo:
        out[lo - start : hi - start] = src[lo:hi]
    return Waveform(out, sr)


def bin_frequency(k: int, sample_rate: int, n_fft: int) -> float:
    return k * sample_rate / n_fft


def tone(freq: float, seconds: float, sample_rate: int, amplitude: float = 0.5, phase: float = 0.0):
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return amplitude * np.sin(2.0 * math.pi * freq * t + phase)


def write_wav(path, w: Waveform) -> None:
    """Mono 16-bit little-endian PCM with the canonical 44-byte header."""
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(w.sample_rate))
        f.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    with wave.open(str(Path(path)), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        sr = f.getframerate()
        raw = f.readframes(f.getnframes())
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0, sr)
