"""Audio front end: band-limited resampling to 16 kHz and 80-bin log-mel frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .media import AudioClip

TARGET_RATE = 16000
N_FFT = 400
HOP = 160
N_MELS = 80
LOG_FLOOR = 1e-10
MEL_RATE = TARGET_RATE // HOP  # frames per second

KAISER_BETA = 8.0
ZERO_CROSSINGS = 32


class AudioError(ValueError):
    pass


def _kaiser(x: np.ndarray, half_width: float, beta: float) -> np.ndarray:
    r = np.clip(1.0 - (x / half_width) ** 2, 0.0, None)
    return np.where(np.abs(x) < half_width, np.i0(beta * np.sqrt(r)) / np.i0(beta), 0.0)


def resample_audio(clip: AudioClip, target: int = TARGET_RATE, chunk: int = 8192) -> AudioClip:
    """Windowed-sinc resampling (Kaiser window, 32 zero crossings per side)."""
    if len(clip) == 0:
        raise AudioError("cannot resample an empty clip")
    if clip.sample_rate == target:
        return clip
    src = clip.samples.astype(np.float64)
    ratio = clip.sample_rate / target
    cutoff = min(1.0, target / clip.sample_rate)
    half = ZERO_CROSSINGS / cutoff
    n_out = int(np.floor(len(src) * target / clip.sample_rate + 0.5))
    taps = np.arange(-int(np.ceil(half)), int(np.ceil(half)) + 1)
    padded = np.concatenate([np.zeros(len(taps)), src, np.zeros(len(taps))])
    out = np.empty(n_out)
    for start in range(0, n_out, chunk):
        n = np.arange(start, min(start + chunk, n_out))
        t = n * ratio
        base = np.floor(t).astype(np.int64)
        idx = base[:, None] + taps[None, :]
        x = t[:, None] - idx
        h = cutoff * np.sinc(cutoff * x) * _kaiser(x, half, KAISER_BETA)
        out[n] = (h * padded[idx + len(taps)]).sum(axis=1)
    q = np.clip(np.floor(out + 0.5), -32768, 32767).astype(np.int16)
    return AudioClip(q, target)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sr: int = TARGET_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """(n_mels, n_fft//2 + 1) triangular HTK-mel filters, unit peak."""
    fmax = sr / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def mel_centers(sr: int = TARGET_RATE, n_mels: int = N_MELS) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(0), hz_to_mel(sr / 2), n_mels + 2))[1:-1]


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    frames: np.ndarray  # (t_mel, 80)
    frame_rate: int = MEL_RATE

    def __len__(self):
        return self.frames.shape[0]


def normalize_mel(mel: MelSpectrogram) -> MelSpectrogram:
    """Subtract the per-bin mean over time (removes a global gain)."""
    return MelSpectrogram(mel.frames - mel.frames.mean(axis=0, keepdims=True), mel.frame_rate)


def log_mel(clip: AudioClip) -> MelSpectrogram:
    if clip.sample_rate != TARGET_RATE:
        raise AudioError(f"log_mel expects {TARGET_RATE} Hz input, got {clip.sample_rate}")
    if len(clip) < HOP:
        raise AudioError(f"clip of {len(clip)} samples is shorter than one hop ({HOP})")
    x = clip.samples.astype(np.float64) / 32768.0
    x = np.pad(x, N_FFT // 2, mode="reflect")
    n_frames = 1 + (len(x) - N_FFT) // HOP
    idx = np.arange(N_FFT)[None, :] + HOP * np.arange(n_frames)[:, None]
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(N_FFT) / N_FFT)
    spec = np.abs(np.fft.rfft(x[idx] * window, axis=1)) ** 2
    mel = spec @ mel_filterbank().T
    return MelSpectrogram(np.log(mel + LOG_FLOOR))
