"""Audio frontend: 16 kHz resampling, 20 s length cap and normalized log-mel features."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import gcd

import numpy as np
from scipy.signal import resample_poly

SAMPLE_RATE = 16000
MAX_SAMPLES = 320_000
SUPPORTED_RATES = (8000, 16000, 22050, 44100, 48000)

WIN_S = 0.025
HOP_S = 0.010
N_FFT = int(SAMPLE_RATE * WIN_S)  # 400
HOP = int(SAMPLE_RATE * HOP_S)  # 160
LOG_FLOOR = 1e-10
DYNAMIC_RANGE = 8.0  # decades kept below the maximum


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64).reshape(-1))
        if self.sample_rate <= 0:
            raise FeatureError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise FeatureError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class LogMelSpectrogram:
    frames: np.ndarray  # (time, n_mels)
    hop_s: float = HOP_S
    win_s: float = WIN_S

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]

    @property
    def time(self) -> int:
        return self.frames.shape[0]


def resample(w: Waveform, target_hz: int = SAMPLE_RATE) -> Waveform:
    if w.sample_rate not in SUPPORTED_RATES:
        raise FeatureError(f"unsupported sample rate {w.sample_rate}; expected one of {SUPPORTED_RATES}")
    if w.sample_rate == target_hz:
        return w
    g = gcd(w.sample_rate, target_hz)
    up, down = target_hz // g, w.sample_rate // g
    out = resample_poly(w.samples, up, down)
    return Waveform(out, target_hz)


def cap_length(w: Waveform, max_samples: int = MAX_SAMPLES) -> Waveform:
    if w.sample_rate != SAMPLE_RATE:
        raise FeatureError(f"cap_length expects {SAMPLE_RATE} Hz audio, got {w.sample_rate}")
    if len(w) <= max_samples:
        return w
    return Waveform(w.samples[:max_samples], w.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, fmax: float = SAMPLE_RATE / 2) -> np.ndarray:
    points = mel_to_hz(np.linspace(0.0, hz_to_mel(fmax), n_mels + 2))
    return points[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """HTK-scale triangular filters, shape ``(n_mels, n_fft // 2 + 1)``, peak weight 1."""
    fft_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    points = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    lower, center, upper = points[:-2, None], points[1:-1, None], points[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def power_spectrogram(samples: np.ndarray) -> np.ndarray:
    """Hann-windowed STFT power with reflect center padding; the trailing frame is dropped
    so that the frame count is ``len(samples) // HOP``."""
    pad = N_FFT // 2
    padded = np.pad(samples, pad, mode="reflect")
    n_frames = len(samples) // HOP
    frames = np.lib.stride_tricks.sliding_window_view(padded, N_FFT)[::HOP][:n_frames]
    window = np.hanning(N_FFT + 1)[:-1]  # periodic Hann
    spec = np.fft.rfft(frames * window, axis=-1)
    return spec.real**2 + spec.imag**2


def log_mel_power(w: Waveform, n_mels: int = 80) -> np.ndarray:
    """Un-normalized ``log10`` mel power, floored at ``LOG_FLOOR``."""
    if w.sample_rate != SAMPLE_RATE:
        raise FeatureError(f"log_mel expects {SAMPLE_RATE} Hz audio, got {w.sample_rate}")
    if len(w) == 0:
        raise FeatureError("cannot compute features of an empty waveform")
    if len(w) < HOP:
        raise FeatureError(f"waveform shorter than one hop ({HOP} samples)")
    mel = power_spectrogram(w.samples) @ mel_filterbank(n_mels).T
    return np.log10(np.maximum(mel, LOG_FLOOR))


def normalize_log_mel(logmel: np.ndarray) -> np.ndarray:
    """Clamp to ``DYNAMIC_RANGE`` decades below the reference and map to ``[-1, 1]``.

    The reference is the maximum, but never less than ``DYNAMIC_RANGE`` decades above
    the floor, so that all-floor input (silence) maps to -1 rather than +1.
    """
    ref = max(float(logmel.max()), np.log10(LOG_FLOOR) + DYNAMIC_RANGE)
    clamped = np.maximum(logmel, ref - DYNAMIC_RANGE)
    return (clamped - ref + DYNAMIC_RANGE / 2) / (DYNAMIC_RANGE / 2)


def log_mel(w: Waveform, n_mels: int = 80) -> LogMelSpectrogram:
    return LogMelSpectrogram(normalize_log_mel(log_mel_power(w, n_mels)).astype(np.float32))


def load_wav(path) -> Waveform:
    """Read a WAV file as mono float samples in [-1, 1]."""
    from scipy.io import wavfile

    rate, data = wavfile.read(path)
    data = np.asarray(data)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return Waveform(data, int(rate))


def save_wav(path, w: Waveform) -> None:
    from scipy.io import wavfile

    wavfile.write(path, w.sample_rate, w.samples.astype(np.float32))


def audio_frontend(w: Waveform, n_mels: int = 80) -> LogMelSpectrogram:
    """Resample to 16 kHz, cap at 20 s, and extract log-mel features."""
    return log_mel(cap_length(resample(w)), n_mels)
