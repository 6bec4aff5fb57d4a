"""Fine-tuning objective for the Stage II networks and its numerical checks.

total = rec + lambda_p * perceptual + mu_sync * sync, with pixels in [0, 1].
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .lipsync import AudioEncoder, LipSyncNets, clip_features, mask_lower_half_tensor, window_for_frame
from .media import AudioClip, Frame, FrameSequence
from .nets import DTYPE, ToyNetwork, conv, frames_to_batch

P_SYNC_FLOOR = 1e-6


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became {value} at step {step}")
        self.step = step


@dataclass(frozen=True)
class LossWeights:
    lambda_p: float = 0.01
    mu_sync: float = 0.03

    def __post_init__(self):
        if self.lambda_p < 0 or self.mu_sync < 0:
            raise ValueError("loss weights must be non-negative")


def as_batch(x) -> torch.Tensor:
    """FrameSequence / list of Frames -> (N, 3, H, W) in [0, 1]; tensors pass through."""
    if isinstance(x, torch.Tensor):
        return x if x.dim() == 4 else x[None]
    if isinstance(x, Frame):
        x = [x]
    return frames_to_batch(list(x))


def _paired(recon, gt):
    a, b = as_batch(recon), as_batch(gt)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def loss_rec(recon, gt) -> torch.Tensor:
    a, b = _paired(recon, gt)
    return (a - b).abs().flatten(1).mean(1).mean()


class PerceptualExtractor(ToyNetwork):
    """Fixed 4-level strided conv pyramid; features of every level are compared."""

    def __init__(self, seed: int = 7, widths: Sequence[int] = (8, 16, 32, 32)):
        super().__init__(seed)
        layers, cin = [], 3
        for w in widths:
            layers.append(conv(cin, w, 3, stride=2))
            cin = w
        self.levels = nn.ModuleList(layers)
        self.reset_parameters()
        self.requires_grad_(False)

    def forward(self, x):
        feats = []
        h = x * 2 - 1
        for layer in self.levels:
            h = F.silu(layer(h))
            feats.append(h.flatten(1))
        return torch.cat(feats, dim=1)


def loss_perceptual(recon, gt, extractor: PerceptualExtractor) -> torch.Tensor:
    a, b = _paired(recon, gt)
    diff = extractor(a) - extractor(b)
    sq = (diff**2).sum(1)
    # sqrt'(0) is undefined; identical pairs contribute exactly zero
    safe = torch.where(sq > 0, sq, torch.ones_like(sq))
    return torch.where(sq > 0, safe.sqrt(), torch.zeros_like(sq)).mean()


def _unit(x):
    return x / x.norm(dim=-1, keepdim=True).clamp_min(1e-12)


class SyncScorer(ToyNetwork):
    """Audio-window and mouth-crop embedders emitting unit vectors (cosine = dot product)."""

    def __init__(self, feature_dim: int = 16, embed_dim: int = 16, crop: tuple[int, int] = (8, 16),
                 hidden: int = 64, seed: int = 11):
        super().__init__(seed)
        self.crop = crop
        self.audio_encoder = AudioEncoder(feature_dim, seed + 1)
        self.audio_mlp = nn.Sequential(nn.Linear(10 * feature_dim, hidden, dtype=DTYPE), nn.Tanh(),
                                       nn.Linear(hidden, embed_dim, dtype=DTYPE))
        self.mouth_mlp = nn.Sequential(nn.Linear(3 * crop[0] * crop[1], hidden, dtype=DTYPE), nn.Tanh(),
                                       nn.Linear(hidden, embed_dim, dtype=DTYPE))
        self.reset_parameters()
        self.audio_encoder.reset_parameters()
        self.requires_grad_(False)

    def embed_audio(self, windows: torch.Tensor) -> torch.Tensor:
        return _unit(self.audio_mlp(windows.flatten(-2)))

    def mouth_crop(self, frames: torch.Tensor) -> torch.Tensor:
        lower = frames[..., frames.shape[-2] // 2 :, :]
        return F.adaptive_avg_pool2d(lower, self.crop)

    def embed_mouth(self, frames: torch.Tensor) -> torch.Tensor:
        return _unit(self.mouth_mlp(self.mouth_crop(frames).flatten(1) * 2 - 1))

    def similarity(self, windows: torch.Tensor, frames: torch.Tensor) -> torch.Tensor:
        return (self.embed_audio(windows) * self.embed_mouth(frames)).sum(-1)

    def audio_windows(self, clip: AudioClip, indices, fps: float = 25.0) -> torch.Tensor:
        feats = clip_features(clip, self.audio_encoder, normalize=True)
        return torch.stack([window_for_frame(feats, i, fps).features for i in indices])


def fit_scorer(scorer: SyncScorer, pairs, steps: int = 300, lr: float = 3e-3, temperature: float = 0.1,
               fps: float = 25.0) -> list[float]:
    """Contrastive (InfoNCE) calibration of both embedders on aligned (frames, clip) pairs.

    Negatives are the other frames of the same clip. Returns the loss per step.
    """
    windows, mouths = [], []
    for frames, clip in pairs:
        frames = list(frames)
        windows.append(scorer.audio_windows(clip, range(len(frames)), fps))
        mouths.append(frames_to_batch(frames))
    params = [p for m in (scorer.audio_mlp, scorer.mouth_mlp) for p in m.parameters()]
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=lr)
    losses = []
    try:
        for _ in range(steps):
            opt.zero_grad()
            loss = 0.0
            for win, img in zip(windows, mouths):
                logits = scorer.embed_audio(win) @ scorer.embed_mouth(img).T / temperature
                target = torch.arange(logits.shape[0])
                loss = loss + (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)) / 2
            loss = loss / len(windows)
            loss.backward()
            opt.step()
            losses.append(loss.item())
    finally:
        for p in params:
            p.requires_grad_(False)
    return losses


def sync_loss_from_similarity(s: torch.Tensor) -> torch.Tensor:
    if not isinstance(s, torch.Tensor):
        s = torch.as_tensor(s, dtype=torch.float64)
    p = ((s + 1) / 2).clamp(P_SYNC_FLOOR, 1.0)
    return (-torch.log(p)).mean()


def loss_sync(recon, windows, scorer: SyncScorer) -> torch.Tensor:
    frames = as_batch(recon)
    if isinstance(windows, (list, tuple)):
        windows = torch.stack([getattr(w, "features", w) for w in windows])
    if windows.shape[0] != frames.shape[0]:
        raise ValueError(f"{frames.shape[0]} frames but {windows.shape[0]} audio windows")
    return sync_loss_from_similarity(scorer.similarity(windows, frames))


def loss_total(rec, p, sync, w: LossWeights = LossWeights()):
    return rec + w.lambda_p * p + w.mu_sync * sync


# --- gradient verification ---------------------------------------------------------------


def grad_check(scalar_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], h: float = 1e-5,
               n_samples: int = 64, seed: int = 0, coords=None) -> float:
    """Max relative error between autograd and central-difference gradients.

    ``params`` are tensors read by ``scalar_fn``; they are perturbed in place
    and restored. ``coords`` optionally fixes (param index, flat index) pairs.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    params = list(params)
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(True)
        p.grad = None
    try:
        value = scalar_fn()
        if not torch.isfinite(value):
            raise FloatingPointError(f"function value is not finite: {value}")
        grads = torch.autograd.grad(value, params, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
        if coords is None:
            sizes = np.array([p.numel() for p in params])
            rng = np.random.default_rng(seed)
            flat = rng.choice(sizes.sum(), size=min(n_samples, int(sizes.sum())), replace=False)
            offsets = np.concatenate([[0], np.cumsum(sizes)])
            coords = [(int(np.searchsorted(offsets, f, side="right") - 1), int(f - offsets[np.searchsorted(offsets, f, side="right") - 1])) for f in flat]
        worst = 0.0
        with torch.no_grad():
            for pi, fi in coords:
                p = params[pi].view(-1)
                orig = p[fi].item()
                p[fi] = orig + h
                f_plus = scalar_fn().item()
                p[fi] = orig - h
                f_minus = scalar_fn().item()
                p[fi] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise FloatingPointError("function value is not finite during finite differences")
                g_fd = (f_plus - f_minus) / (2 * h)
                g = grads[pi].reshape(-1)[fi].item()
                worst = max(worst, abs(g_fd - g) / max(abs(g_fd), abs(g), 1e-8))
        return worst
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad_(flag)


# --- fine-tuning --------------------------------------------------------------------------


@dataclass(eq=False)
class TrainingSample:
    tr: torch.Tensor  # (3, H, W) in [0, 1]
    gt: torch.Tensor
    window: torch.Tensor  # (10, d) Stage II audio window
    sync_window: torch.Tensor  # (10, d) scorer audio window


def build_dataset(tr_frames, gt_frames, clip: AudioClip, nets: LipSyncNets, scorer: SyncScorer,
                  indices=None, fps: float = 25.0) -> list[TrainingSample]:
    tr, gt = _paired(tr_frames, gt_frames)
    indices = list(range(tr.shape[0])) if indices is None else list(indices)
    feats = clip_features(clip, nets.audio_encoder)
    sync = scorer.audio_windows(clip, indices, fps)
    return [TrainingSample(tr[k], gt[k], window_for_frame(feats, i, fps).features, sync[k])
            for k, i in enumerate(indices)]


@dataclass
class LossRecord:
    step: int
    rec: float
    p: float
    sync: float
    total: float


@dataclass(eq=False)
class Objective:
    """Weighted fine-tuning objective over a fixed batch; the frozen VAE encoder runs once."""

    nets: LipSyncNets
    samples: list[TrainingSample]
    extractor: PerceptualExtractor
    scorer: SyncScorer
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if not self.samples:
            raise ValueError("dataset is empty")
        tr = torch.stack([s.tr for s in self.samples])
        with torch.no_grad():
            self.v_ref = self.nets.vae.encode(tr)
            self.v_mask = self.nets.vae.encode(mask_lower_half_tensor(tr))
        self.gt = torch.stack([s.gt for s in self.samples])
        self.windows = torch.stack([s.window for s in self.samples])
        self.sync_windows = torch.stack([s.sync_window for s in self.samples])

    def reconstruct(self, windows=None):
        w = self.windows if windows is None else windows
        return self.nets.vae.decode(self.nets.unet(self.v_ref, self.v_mask, w))

    def terms(self, windows=None):
        recon = self.reconstruct(windows)
        rec = loss_rec(recon, self.gt)
        p = loss_perceptual(recon, self.gt, self.extractor)
        sync = loss_sync(recon, self.sync_windows, self.scorer)
        return rec, p, sync, loss_total(rec, p, sync, self.weights)

    def __call__(self, windows=None):
        return self.terms(windows)[3]


def finetune(nets: LipSyncNets, dataset: Sequence[TrainingSample], steps: int, lr: float,
             w: LossWeights = LossWeights(), extractor: PerceptualExtractor | None = None,
             scorer: SyncScorer | None = None) -> list[LossRecord]:
    """Full-batch plain gradient descent on the UNet parameters.

    Returns one record per step, measured before that step's update.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    extractor = extractor or PerceptualExtractor()
    scorer = scorer or SyncScorer(feature_dim=nets.cfg.feature_dim)
    obj = Objective(nets, list(dataset), extractor, scorer, w)
    params = list(nets.unet.parameters())
    for p in params:
        p.requires_grad_(True)
    trace = []
    try:
        for step in range(steps):
            rec, p_loss, sync, total = obj.terms()
            value = total.item()
            if not math.isfinite(value):
                raise TrainingDivergence(step, value)
            trace.append(LossRecord(step, rec.item(), p_loss.item(), sync.item(), value))
            grads = torch.autograd.grad(total, params)
            with torch.no_grad():
                for prm, g in zip(params, grads):
                    prm.sub_(lr * g)
    finally:
        for p in params:
            p.requires_grad_(False)
    return trace


def write_trace_csv(path, trace: Sequence[LossRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "rec", "p", "sync", "total"])
        for r in trace:
            writer.writerow([r.step, repr(r.rec), repr(r.p), repr(r.sync), repr(r.total)])


def train_autoencoder(vae, frames, steps: int = 300, lr: float = 3e-3) -> list[float]:
    """Fit the toy VAE to reconstruct ``frames`` (Adam, fixed order). Returns L1 per step."""
    x = as_batch(frames)
    params = list(vae.parameters())
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=lr)
    losses = []
    try:
        for _ in range(steps):
            opt.zero_grad()
            loss = (vae.decode(vae.encode(x)) - x).abs().mean()
            loss.backward()
            opt.step()
            losses.append(loss.item())
    finally:
        for p in params:
            p.requires_grad_(False)
    return losses
