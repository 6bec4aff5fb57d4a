"""Stage II: audio-conditioned repainting of the mouth region of TR frames."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .audio import MEL_RATE, N_MELS, AudioError, MelSpectrogram, log_mel, normalize_mel, resample_audio
from .media import AudioClip, ColorTag, Frame, FrameSequence
from .nets import DTYPE, ShapeError, ToyNetwork, check_frame_dims, conv, frame_to_tensor, tensor_to_frame, up

WINDOW_BEFORE = 4
WINDOW_AFTER = 5
WINDOW_LEN = WINDOW_BEFORE + WINDOW_AFTER + 1
FEATURE_RATE = MEL_RATE // 2


@dataclass(frozen=True)
class LipSyncConfig:
    frame_width: int = 512
    frame_height: int = 512
    latent_channels: int = 8
    latent_stride: int = 8
    feature_dim: int = 16
    unet_width: int = 32
    attn_dim: int = 32
    vae_width: int = 16
    seed: int = 100

    @property
    def frame_dims(self) -> tuple[int, int]:
        return self.frame_width, self.frame_height

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        s = self.latent_stride
        return self.latent_channels, self.frame_height // s, self.frame_width // s


@dataclass(eq=False)
class AudioFeatureSequence:
    features: torch.Tensor  # (t, d)
    rate: int = FEATURE_RATE

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(eq=False)
class AudioWindow:
    features: torch.Tensor  # (10, d)
    rows: tuple[int, ...]


class AudioEncoder(ToyNetwork):
    """Per-frame projection 80 -> d, then stride-2 average pooling in time."""

    def __init__(self, feature_dim: int, seed: int):
        super().__init__(seed)
        self.proj = nn.Linear(N_MELS, feature_dim, dtype=DTYPE)
        self.reset_parameters()

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        h = self.proj(mel)  # (t, d)
        return F.avg_pool1d(h.T[None], kernel_size=2, stride=2)[0].T


def audio_encode(mel: MelSpectrogram, net: AudioEncoder) -> AudioFeatureSequence:
    if len(mel) < 2:
        raise AudioError(f"audio encoder needs at least 2 mel frames, got {len(mel)}")
    x = torch.as_tensor(mel.frames, dtype=DTYPE)
    with torch.no_grad():
        return AudioFeatureSequence(net(x), FEATURE_RATE)


def clip_features(clip: AudioClip, net: AudioEncoder, normalize: bool = False) -> AudioFeatureSequence:
    """Resample, log-mel and encode a whole clip."""
    mel = log_mel(resample_audio(clip))
    if normalize:
        mel = normalize_mel(mel)
    return audio_encode(mel, net)


def window_rows(i: int, fps: float = 25.0, rate: int = FEATURE_RATE) -> list[int]:
    """Unclamped feature rows for video frame ``i``: centre-4 .. centre+5 (centre = 2i at 25 fps)."""
    if i < 0:
        raise ValueError(f"frame index must be >= 0, got {i}")
    centre = i * 2 if fps == 25 and rate == FEATURE_RATE else int(math.floor(i * rate / fps + 0.5))
    return list(range(centre - WINDOW_BEFORE, centre + WINDOW_AFTER + 1))


def window_for_frame(a: AudioFeatureSequence, i: int, fps: float = 25.0) -> AudioWindow:
    if len(a) == 0:
        raise AudioError("empty audio feature sequence")
    rows = tuple(min(max(r, 0), len(a) - 1) for r in window_rows(i, fps, a.rate))
    return AudioWindow(a.features[list(rows)], rows)


def mask_lower_half(frame: Frame) -> Frame:
    """Zero rows [h - ceil(h/2), h) of every plane (chroma rows scaled accordingly)."""
    keep = frame.height // 2
    planes = []
    for p in frame.planes:
        scale = p.shape[0] / frame.height
        q = np.array(p)
        q[int(math.floor(keep * scale + 0.5)) :] = 0
        planes.append(q)
    return Frame(frame.width, frame.height, tuple(planes), frame.color)


def mask_lower_half_tensor(x: torch.Tensor) -> torch.Tensor:
    keep = x.shape[-2] // 2
    out = x.clone()
    out[..., keep:, :] = 0
    return out


class VAE(ToyNetwork):
    """Mean-path autoencoder: stride-8 encoder, transposed-conv decoder with sigmoid output."""

    def __init__(self, cfg: LipSyncConfig, seed: int):
        super().__init__(seed)
        w, c = cfg.vae_width, cfg.latent_channels
        n = int(math.log2(cfg.latent_stride))
        enc, cin = [], 3
        for _ in range(n):
            enc += [conv(cin, w, 3, stride=2), nn.SiLU()]
            cin = w
        self.encoder = nn.Sequential(*enc, conv(w, c, 1))
        dec = [conv(c, w, 1), nn.SiLU()]
        for j in range(n):
            dec += [up(w, w), nn.SiLU()]
        self.decoder = nn.Sequential(*dec, conv(w, 3))
        self.cfg = cfg
        self.reset_parameters()

    def encode(self, x):
        return self.encoder(x * 2 - 1)

    def decode(self, z):
        return torch.sigmoid(self.decoder(z))


class PositionalEncoding(nn.Module):
    def __init__(self, length: int, dim: int):
        super().__init__()
        pos = torch.arange(length, dtype=DTYPE)[:, None]
        freq = torch.exp(-math.log(100.0) * torch.arange(0, dim, 2, dtype=DTYPE) / dim)
        pe = torch.zeros(length, dim, dtype=DTYPE)
        pe[:, 0::2] = torch.sin(pos * freq)
        pe[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
        self.register_buffer("pe", pe)

    def forward(self, x):
        return x + self.pe[: x.shape[-2]]


class CrossAttention(nn.Module):
    def __init__(self, query_dim: int, context_dim: int, attn_dim: int):
        super().__init__()
        self.to_q = nn.Linear(query_dim, attn_dim, dtype=DTYPE)
        self.to_k = nn.Linear(context_dim, attn_dim, dtype=DTYPE)
        self.to_v = nn.Linear(context_dim, attn_dim, dtype=DTYPE)
        self.to_out = nn.Linear(attn_dim, query_dim, dtype=DTYPE)
        self.scale = 1.0 / math.sqrt(attn_dim)

    def forward(self, tokens, context, return_weights: bool = False):
        q, k, v = self.to_q(tokens), self.to_k(context), self.to_v(context)
        weights = torch.softmax(q @ k.transpose(-1, -2) * self.scale, dim=-1)
        out = self.to_out(weights @ v)
        return (out, weights) if return_weights else out


class UNetFuse(ToyNetwork):
    """Two-level encoder-decoder over (v_ref, v_mask) with audio cross-attention at the bottleneck."""

    def __init__(self, cfg: LipSyncConfig, seed: int):
        super().__init__(seed)
        c, w = cfg.latent_channels, cfg.unet_width
        self.enc1 = conv(2 * c, w)
        self.down = conv(w, w, 3, stride=2)
        self.pos = PositionalEncoding(WINDOW_LEN, cfg.feature_dim)
        self.attn = CrossAttention(w, cfg.feature_dim, cfg.attn_dim)
        self.up = up(w, w)
        self.dec = conv(2 * w, c)
        self.reset_parameters()
        self.scale_(self.dec, 0.02)

    def forward(self, v_ref, v_mask, audio, return_weights: bool = False):
        x = torch.cat([v_ref, v_mask], dim=1)
        e1 = F.silu(self.enc1(x))
        e2 = F.silu(self.down(e1))
        b, ch, h, w = e2.shape
        tokens = e2.flatten(2).transpose(1, 2)
        ctx = self.pos(audio)
        att, weights = self.attn(tokens, ctx, return_weights=True)
        e2 = (tokens + att).transpose(1, 2).reshape(b, ch, h, w)
        d1 = F.silu(self.up(e2))
        if d1.shape[-2:] != e1.shape[-2:]:
            d1 = F.interpolate(d1, size=e1.shape[-2:], mode="nearest")
        out = v_ref + self.dec(torch.cat([d1, e1], dim=1))
        return (out, weights) if return_weights else out


@dataclass(eq=False)
class LipSyncNets:
    cfg: LipSyncConfig
    audio_encoder: AudioEncoder = field(init=False)
    vae: VAE = field(init=False)
    unet: UNetFuse = field(init=False)

    def __post_init__(self):
        s = self.cfg.seed
        self.audio_encoder = AudioEncoder(self.cfg.feature_dim, s + 1)
        self.vae = VAE(self.cfg, s + 2)
        self.unet = UNetFuse(self.cfg, s + 3)
        for net in self.all():
            net.eval()
            net.requires_grad_(False)

    def all(self):
        return [self.audio_encoder, self.vae, self.unet]

    def state_dict(self) -> dict:
        return {f"{i}.{k}": v for i, net in enumerate(self.all()) for k, v in net.state_dict().items()}

    def load_state_dict(self, state: dict) -> None:
        for i, net in enumerate(self.all()):
            prefix = f"{i}."
            net.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})


# --- operations --------------------------------------------------------------------


@dataclass(eq=False)
class LatentFeature:
    data: torch.Tensor  # (C, h, w)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.data.shape)


def vae_encode(frame: Frame, net: VAE) -> LatentFeature:
    x = frame_to_tensor(frame)
    check_frame_dims(x, net.cfg.frame_dims, "VAE encoder")
    with torch.no_grad():
        return LatentFeature(net.encode(x[None])[0])


def vae_decode(latent: LatentFeature, net: VAE) -> Frame:
    if latent.dims != net.cfg.latent_shape:
        raise ShapeError(f"VAE decoder expects latent {net.cfg.latent_shape}, got {latent.dims}")
    with torch.no_grad():
        return tensor_to_frame(net.decode(latent.data[None])[0])


def unet_fuse(v_ref: LatentFeature, v_mask: LatentFeature, audio: AudioWindow, net: UNetFuse) -> LatentFeature:
    if v_ref.dims != v_mask.dims:
        raise ShapeError(f"latent dims differ: {v_ref.dims} vs {v_mask.dims}")
    a = audio.features if isinstance(audio, AudioWindow) else audio
    with torch.no_grad():
        return LatentFeature(net(v_ref.data[None], v_mask.data[None], a[None])[0])


def stage2_batch(tr: torch.Tensor, windows: torch.Tensor, nets: LipSyncNets) -> torch.Tensor:
    """Differentiable Stage II on tensors: (B,3,H,W) in [0,1], (B,10,d) -> (B,3,H,W)."""
    v_ref = nets.vae.encode(tr)
    v_mask = nets.vae.encode(mask_lower_half_tensor(tr))
    return nets.vae.decode(nets.unet(v_ref, v_mask, windows))


def stage2_reconstruct(tr_frames, audio, nets: LipSyncNets, frame_indices=None, fps: float = 25.0) -> FrameSequence:
    """Final frames for TR frames at ``frame_indices`` (default 0..n-1).

    ``audio`` is an AudioClip or precomputed AudioFeatureSequence.
    """
    frames = list(tr_frames)
    if isinstance(tr_frames, FrameSequence):
        fps = float(tr_frames.fps)
    if frame_indices is None:
        frame_indices = range(len(frames))
    frame_indices = list(frame_indices)
    if len(frame_indices) != len(frames):
        raise ValueError("frame_indices must match the number of TR frames")
    feats = audio if isinstance(audio, AudioFeatureSequence) else clip_features(audio, nets.audio_encoder)
    if len(feats) == 0:
        raise AudioError("audio too short: no feature rows")
    out = []
    with torch.no_grad():
        for f, i in zip(frames, frame_indices):
            x = frame_to_tensor(f)
            check_frame_dims(x, nets.cfg.frame_dims, "Stage II")
            win = window_for_frame(feats, i, fps).features
            y = stage2_batch(x[None], win[None], nets)[0]
            out.append(tensor_to_frame(y))
    return FrameSequence(out, fps)
