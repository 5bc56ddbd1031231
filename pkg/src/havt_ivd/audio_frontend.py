"""Multi-channel log-mel spectrograms.

Framing is centered with reflect padding and a periodic Hann window, which
gives ``S // hop + 1`` frames (469 for 5 s at 48 kHz with hop 512). Mel
filters are triangles on the HTK mel scale, integrated over each FFT bin's
frequency interval rather than point-sampled at the bin center so that
narrow low-frequency filters never come out empty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_model import AudioSegment

N_FFT = 1024
HOP = 512
N_MELS = 128
LOG_EPS = 1e-10


@dataclass
class MelSpectrogram:
    """Log-mel values of shape (M_mics, N_mels, T_frames)."""

    values: np.ndarray
    n_fft: int
    hop: int
    n_mels: int
    sample_rate: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def hann_window(n: int) -> np.ndarray:
    # periodic form: the standard choice for spectral analysis
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def n_stft_frames(n_samples: int, hop: int = HOP) -> int:
    return n_samples // hop + 1


def stft(signal: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Centered STFT of a 1-D signal; returns complex (n_fft // 2 + 1, T_frames)."""
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"stft expects a 1-D signal, got shape {x.shape}")
    if x.size == 0:
        raise ValueError("stft of an empty signal")
    if not np.all(np.isfinite(x)):
        raise ValueError("stft input contains NaN or inf")
    pad = n_fft // 2
    if x.size <= pad:
        raise ValueError(f"signal of {x.size} samples too short for reflect padding of {pad}")
    x = np.pad(x, pad, mode="reflect")
    n_frames = 1 + (x.size - n_fft) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop][:n_frames]
    return np.fft.rfft(frames * hann_window(n_fft), axis=1).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_edges(n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    """The n_mels + 2 triangle edge frequencies in Hz."""
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))


def mel_center_frequencies(n_mels: int = N_MELS, sample_rate: int = 48000, f_min: float = 0.0, f_max: float | None = None) -> np.ndarray:
    f_max = sample_rate / 2 if f_max is None else f_max
    return mel_edges(n_mels, f_min, f_max)[1:-1]


def _triangle_cdf(f: np.ndarray, lo: np.ndarray, peak: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Integral from -inf to f of the unit-height triangle (lo, peak, hi)."""
    rise = np.clip(f, lo, peak) - lo
    up = rise ** 2 / (2.0 * (peak - lo))
    fall = hi - np.clip(f, peak, hi)
    down = ((hi - peak) ** 2 - fall ** 2) / (2.0 * (hi - peak))
    return up + down


def mel_filterbank(
    n_fft: int = N_FFT,
    n_mels: int = N_MELS,
    sample_rate: int = 48000,
    f_min: float = 0.0,
    f_max: float | None = None,
    norm: str | None = "area",
) -> np.ndarray:
    """Mel filterbank matrix of shape (n_mels, n_fft // 2 + 1).

    Entry (k, b) is the mean of triangle k over bin b's frequency interval
    ``[(b - 1/2) df, (b + 1/2) df]``. With ``norm="area"`` each row sums to
    one, so a flat spectrum maps to a constant; with ``norm=None`` triangles
    have unit peak and a flat spectrum maps to ``area_k / df``.
    """
    nyquist = sample_rate / 2
    f_max = nyquist if f_max is None else f_max
    n_bins = n_fft // 2 + 1
    if f_max > nyquist:
        raise ValueError(f"f_max={f_max} exceeds the Nyquist frequency {nyquist}")
    if not 0 <= f_min < f_max:
        raise ValueError(f"need 0 <= f_min < f_max, got {f_min}, {f_max}")
    if n_mels >= n_bins:
        raise ValueError(f"n_mels={n_mels} must be smaller than the {n_bins} FFT bins")
    if norm not in ("area", None):
        raise ValueError(f"unknown norm {norm!r}")

    edges = mel_edges(n_mels, f_min, f_max)
    lo, peak, hi = (e[:, None] for e in (edges[:-2], edges[1:-1], edges[2:]))
    df = sample_rate / n_fft
    bin_edges = (np.arange(n_bins + 1) - 0.5) * df
    cdf = _triangle_cdf(bin_edges[None, :], lo, peak, hi)
    weights = np.diff(cdf, axis=1) / df
    if norm == "area":
        weights /= weights.sum(axis=1, keepdims=True)
    return weights


def standardize_pooled(values: np.ndarray) -> np.ndarray:
    """Subtract one mean and divide by one std taken over all channels.

    Zero-variance input is returned unchanged.
    """
    std = values.std()
    if std > 1e-12:
        return (values - values.mean()) / std
    return values


def compute_melspec(
    audio: AudioSegment,
    n_fft: int = N_FFT,
    hop: int = HOP,
    n_mels: int = N_MELS,
    eps: float = LOG_EPS,
    standardize: bool = True,
) -> MelSpectrogram:
    """Log-mel spectrogram of every channel of ``audio``.

    Standardization uses one mean and one standard deviation pooled over all
    channels, which keeps the inter-microphone level differences that carry
    source-proximity cues. A zero-variance spectrogram (silence) is returned
    unstandardized, i.e. ``log(eps)`` everywhere.
    """
    fb = mel_filterbank(n_fft, n_mels, audio.sample_rate)
    channels = []
    for channel in audio.samples:
        power = np.abs(stft(channel, n_fft, hop)) ** 2
        channels.append(np.log(fb @ power + eps))
    values = np.stack(channels)
    if standardize:
        values = standardize_pooled(values)
    return MelSpectrogram(values.astype(np.float32), n_fft, hop, n_mels, audio.sample_rate)
