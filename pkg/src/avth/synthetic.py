"""Deterministic synthetic talking-head clips (video + matching audio) for tests and demos."""

from __future__ import annotations

import numpy as np

from .media import AudioClip, Frame, FrameSequence, rgb_to_yuv


def speech_envelope(t: np.ndarray, seed: int = 0) -> np.ndarray:
    """Syllable-rate amplitude envelope in [0, 1]."""
    rng = np.random.default_rng(seed)
    rates = rng.uniform(2.5, 4.5, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    env = sum(np.sin(2 * np.pi * r * t + p) for r, p in zip(rates, phases)) / 3.0
    return np.clip(env * 1.6, 0.0, 1.0) ** 1.5


def synthetic_audio(duration: float, sample_rate: int = 16000, seed: int = 0) -> AudioClip:
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    env = speech_envelope(t, seed)
    f0 = 140.0 * (1 + 0.05 * np.sin(2 * np.pi * 0.7 * t))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    voiced = sum(np.sin(k * phase) / k for k in range(1, 12))
    rng = np.random.default_rng(seed + 1)
    sig = env * (0.6 * voiced + 0.05 * rng.standard_normal(n))
    sig = sig / (np.abs(sig).max() + 1e-9) * 0.5 * 32767
    # background noise floor: no digital silence, so log-mel never hits its floor
    sig = sig + 40.0 * rng.standard_normal(n)
    return AudioClip(np.round(sig).astype(np.int16), sample_rate)


def render_head(width: int, height: int, cx: float, cy: float, yaw: float, mouth_open: float) -> np.ndarray:
    """One RGB frame: textured background, head ellipse, eyes and a mouth."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    u, v = xx / width, yy / height
    img = np.empty((height, width, 3))
    img[..., 0] = 40 + 60 * u + 10 * np.sin(9 * v)
    img[..., 1] = 60 + 50 * v
    img[..., 2] = 110 + 40 * (1 - u)

    def ellipse(x0, y0, rx, ry):
        return ((xx - x0) / rx) ** 2 + ((yy - y0) / ry) ** 2

    rx, ry = 0.28 * width * (0.8 + 0.2 * np.cos(yaw)), 0.36 * height
    head = np.clip(1.5 - ellipse(cx, cy, rx, ry) * 1.5, 0, 1)[..., None] ** 0.5
    skin = np.array([220.0, 175.0, 140.0]) - 25 * ((yy - cy) / height)[..., None]
    img = img * (1 - head) + skin * head

    shift = 0.25 * rx * np.sin(yaw)
    for side in (-1, 1):
        eye = ellipse(cx + side * 0.38 * rx + shift, cy - 0.25 * ry, 0.09 * width, 0.05 * height) < 1
        img[eye] = (30, 30, 40)
    mouth_h = 0.02 * height + 0.10 * height * mouth_open
    mouth = np.clip(1.2 - ellipse(cx + shift, cy + 0.45 * ry, 0.18 * width, mouth_h) * 1.2, 0, 1)[..., None]
    img = img * (1 - mouth) + np.array([90.0, 20.0, 30.0]) * mouth
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def synthetic_talking_head(n_frames: int = 60, width: int = 128, height: int = 128, fps: int = 25,
                           sample_rate: int = 16000, seed: int = 0, motion: float = 1.0):
    """Return (FrameSequence in yuv420, AudioClip) whose mouth opening follows the audio envelope."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_frames) / fps
    env = speech_envelope(t, seed)
    ph = rng.uniform(0, 2 * np.pi, size=3)
    frames = []
    for k in range(n_frames):
        cx = width * (0.5 + motion * 0.06 * np.sin(2 * np.pi * 0.4 * t[k] + ph[0]))
        cy = height * (0.5 + motion * 0.04 * np.sin(2 * np.pi * 0.3 * t[k] + ph[1]))
        yaw = motion * 0.6 * np.sin(2 * np.pi * 0.25 * t[k] + ph[2])
        rgb = render_head(width, height, cx, cy, yaw, env[k])
        frames.append(rgb_to_yuv(Frame.from_rgb(rgb)))
    clip = synthetic_audio(n_frames / fps, sample_rate, seed)
    return FrameSequence(frames, fps), clip
