"""Griffin-Lim mel inversion; deterministic stand-in for a neural vocoder."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .audio import HOP, N_FFT, SAMPLE_RATE, MelSpectrogram, Waveform, istft, mel_filterbank, stft

DEFAULT_ITERS = 32


@lru_cache(maxsize=4)
def _pinv_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    inv = np.linalg.pinv(mel_filterbank(sample_rate, n_fft, n_mels))
    inv.setflags(write=False)
    return inv


def mel_to_linear(mel: MelSpectrogram) -> np.ndarray:
    """Linear STFT magnitude [T, n_fft//2+1] via the filterbank pseudo-inverse."""
    mag = np.exp(mel.frames.astype(np.float64))
    return np.maximum(mag @ _pinv_filterbank(mel.sample_rate_hz, N_FFT, mel.n_mels).T, 0.0)


def spectral_convergence(target_mag: np.ndarray, x: np.ndarray) -> float:
    est = np.abs(stft(x))[: target_mag.shape[0]]
    return float(np.linalg.norm(target_mag - est) / max(np.linalg.norm(target_mag), 1e-12))


def griffin_lim(mag: np.ndarray, iters: int = DEFAULT_ITERS, track: bool = False) -> tuple[np.ndarray, list[float]]:
    if iters < 1:
        raise ValueError("iters must be >= 1")
    spec = mag.astype(np.complex128)  # zero-phase init
    history = []
    for _ in range(iters):
        x = istft(spec)
        est = stft(x)
        if track:
            history.append(float(np.linalg.norm(mag - np.abs(est)) / max(np.linalg.norm(mag), 1e-12)))
        spec = mag * np.exp(1j * np.angle(est))
    return istft(spec), history


def mel_to_wave(mel: MelSpectrogram, iters: int = DEFAULT_ITERS, track: bool = False) -> Waveform:
    """Invert a log-mel spectrogram to audio; output length is ``T_mel * hop`` samples.

    Samples are scaled down only if the peak exceeds 1, so quiet input stays quiet.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    mel.check_finite()
    if mel.sample_rate_hz != SAMPLE_RATE or mel.sample_rate_hz // mel.frame_rate_hz != HOP:
        raise ValueError("mel parameters do not match the STFT front-end")
    mag = mel_to_linear(mel)
    x, history = griffin_lim(mag, iters, track)
    peak = float(np.max(np.abs(x))) if len(x) else 0.0
    if peak > 1.0:
        x = x / peak
    meta = {"iters": iters}
    if track:
        meta["spectral_convergence"] = history
    return Waveform(x, mel.sample_rate_hz, meta)
