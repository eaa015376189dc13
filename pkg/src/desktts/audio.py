"""Mel/STFT front-end, container types and 16-bit PCM WAV I/O."""

from __future__ import annotations

import io
import math
import wave
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
HOP = 160
N_FFT = 512
N_MELS = 32
MEL_FRAME_RATE = SAMPLE_RATE // HOP  # 100 Hz
MAG_FLOOR = 1e-5
LOG_FLOOR = math.log(MAG_FLOOR)


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # [T, n_mels], natural-log magnitude
    frame_rate_hz: int = MEL_FRAME_RATE
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"mel must be [T>=1, n_mels], got shape {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.frame_rate_hz

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.frames)):
            bad = np.argwhere(~np.isfinite(self.frames))[0]
            raise ValueError(f"non-finite mel value at frame {bad[0]}, bin {bad[1]}")


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE
    meta: dict = field(default_factory=dict)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


def n_frames_for_duration(duration_s: float, frame_rate_hz: int = MEL_FRAME_RATE) -> int:
    # round first so 4.0 s does not become 401 frames through float error
    return max(1, math.ceil(round(duration_s * frame_rate_hz, 9)))


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(
    sample_rate: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS
) -> np.ndarray:
    """Triangular HTK-scale filterbank, shape [n_mels, n_fft // 2 + 1]."""
    n_bins = n_fft // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2, n_bins)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    # area normalisation keeps filters comparable across widths
    fb *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=8)
def _window(n_fft: int) -> np.ndarray:
    w = np.hanning(n_fft + 1)[:-1]
    w.setflags(write=False)
    return w


def stft(x: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Centered STFT with one frame per ``hop`` samples; returns [T, n_fft//2+1]."""
    x = np.asarray(x, dtype=np.float64)
    n_frames = max(1, math.ceil(len(x) / hop))
    pad = n_fft // 2
    total = (n_frames - 1) * hop + n_fft
    buf = np.zeros(total)
    buf[pad : pad + len(x)] = x
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return np.fft.rfft(buf[idx] * _window(n_fft), axis=1)


def istft(spec: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Least-squares inverse of :func:`stft`; output has ``T * hop`` samples."""
    n_frames = spec.shape[0]
    win = _window(n_fft)
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * win
    total = (n_frames - 1) * hop + n_fft
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(n_frames):
        out[i * hop : i * hop + n_fft] += frames[i]
        norm[i * hop : i * hop + n_fft] += win**2
    out /= np.maximum(norm, 1e-8)
    pad = n_fft // 2
    return out[pad : pad + n_frames * hop]


def wave_to_mel(x: np.ndarray | Waveform) -> MelSpectrogram:
    if isinstance(x, Waveform):
        if x.sample_rate_hz != SAMPLE_RATE:
            raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {x.sample_rate_hz}")
        x = x.samples
    mag = np.abs(stft(x))
    mel = mag @ mel_filterbank().T
    return MelSpectrogram(np.log(np.maximum(mel, MAG_FLOOR)))


def write_wav(path: str | Path, wav: Waveform) -> None:
    """16-bit PCM, mono, little-endian."""
    pcm = np.clip(np.round(np.asarray(wav.samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wav.sample_rate_hz)
        fh.writeframes(pcm.tobytes())


def read_wav(path: str | Path | io.BytesIO) -> Waveform:
    with wave.open(path if isinstance(path, io.BytesIO) else str(path), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise ValueError("only 16-bit PCM WAV is supported")
        n_ch = fh.getnchannels()
        sr = fh.getframerate()
        data = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    data = data.reshape(-1, n_ch).mean(axis=1) / 32767.0
    return Waveform(data.astype(np.float64), sr)
