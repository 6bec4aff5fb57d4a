"""Stage I: keyframe appearance + auxiliary-frame motion -> temporary reconstructions.

The dense flow is a softmax-weighted blend of keypoint displacements; the
feature volume is resampled with trilinear interpolation and zero padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import motion
from .basecodec import resize
from .media import Frame, FrameSequence
from .motion import MotionParams
from .nets import DTYPE, ShapeError, ToyNetwork, check_frame_dims, conv, frame_to_tensor, num_halvings, tensor_to_frame, up


@dataclass(frozen=True)
class AnimatorConfig:
    frame_width: int = 512
    frame_height: int = 512
    channels: int = 4
    depth: int = 4
    vol_height: int = 16
    vol_width: int = 16
    num_keypoints: int = motion.DEFAULT_NUM_KEYPOINTS
    mouth_indices: tuple[int, ...] = motion.DEFAULT_MOUTH_INDICES
    mouth_alpha: float = 1.0
    sigma: float = 0.3
    seed: int = 0

    @property
    def frame_dims(self) -> tuple[int, int]:
        return self.frame_width, self.frame_height

    @property
    def volume_shape(self) -> tuple[int, int, int, int]:
        return self.channels, self.depth, self.vol_height, self.vol_width


@dataclass(eq=False)
class FeatureVolume:
    data: torch.Tensor  # (C, D, H, W)

    def __post_init__(self):
        if self.data.dim() != 4:
            raise ShapeError(f"feature volume must be CxDxHxW, got {tuple(self.data.shape)}")

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.data.shape)


class EnhanceNet(ToyNetwork):
    """Residual 2-layer refinement applied after bicubic upscaling."""

    def __init__(self, seed: int, hidden: int = 8):
        super().__init__(seed)
        self.conv1 = conv(3, hidden)
        self.conv2 = conv(hidden, 3)
        self.reset_parameters()
        self.scale_(self.conv2, 0.05)

    def forward(self, x):
        return (x + self.conv2(F.relu(self.conv1(x)))).clamp(0.0, 1.0)

    def is_zero(self) -> bool:
        return all(not p.any() for p in self.conv2.parameters())


class AppearanceNet(ToyNetwork):
    def __init__(self, cfg: AnimatorConfig, seed: int, width: int = 16):
        super().__init__(seed)
        self.cfg = cfg
        n = num_halvings(min(cfg.frame_height, cfg.frame_width), max(cfg.vol_height, cfg.vol_width))
        layers, cin = [], 3
        for _ in range(n):
            layers += [conv(cin, width, 3, stride=2), nn.ReLU()]
            cin = width
        self.body = nn.Sequential(*layers)
        self.head = conv(cin, cfg.channels * cfg.depth, 1)
        self.reset_parameters()

    def forward(self, x):
        h = self.head(self.body(x * 2 - 1))
        h = F.adaptive_avg_pool2d(h, (self.cfg.vol_height, self.cfg.vol_width))
        c, d, hh, ww = self.cfg.volume_shape
        return h.reshape(h.shape[0], c, d, hh, ww)


class MotionNet(ToyNetwork):
    """Emits pose angles, log-scale, expression, translation and canonical keypoints."""

    def __init__(self, cfg: AnimatorConfig, seed: int, width: int = 16):
        super().__init__(seed)
        self.cfg = cfg
        k = cfg.num_keypoints
        n = num_halvings(min(cfg.frame_height, cfg.frame_width), 8)
        layers, cin = [], 3
        for _ in range(n):
            layers += [conv(cin, width, 3, stride=2), nn.ReLU()]
            cin = width
        self.body = nn.Sequential(*layers)
        self.pose = nn.Linear(cin, 3 + 1 + 3 * k + 3, dtype=DTYPE)
        self.canonical = nn.Linear(cin, 3 * k, dtype=DTYPE)
        self.reset_parameters()

    def features(self, x):
        return self.body(x * 2 - 1).mean(dim=(-2, -1))

    def forward(self, x):
        h = self.features(x)
        raw = self.pose(h)
        k = self.cfg.num_keypoints
        angles = 0.5 * torch.tanh(raw[..., :3])
        log_scale = 0.2 * torch.tanh(raw[..., 3])
        delta = 0.05 * raw[..., 4 : 4 + 3 * k].reshape(*raw.shape[:-1], k, 3)
        trans = 0.2 * torch.tanh(raw[..., 4 + 3 * k :])
        return angles, log_scale, delta, trans

    def canonical_points(self, x):
        k = self.cfg.num_keypoints
        return 0.8 * torch.tanh(self.canonical(self.features(x))).reshape(*x.shape[:-3], k, 3)


class GeneratorNet(ToyNetwork):
    def __init__(self, cfg: AnimatorConfig, seed: int, width: int = 16):
        super().__init__(seed)
        self.cfg = cfg
        self.n_up = num_halvings(min(cfg.frame_height, cfg.frame_width), max(cfg.vol_height, cfg.vol_width))
        self.inp = conv(cfg.channels * cfg.depth, width)
        self.ups = nn.ModuleList(up(width, width) for _ in range(self.n_up))
        self.out = conv(width, 3)
        self.reset_parameters()

    def forward(self, vol):
        b, c, d, h, w = vol.shape
        x = F.relu(self.inp(vol.reshape(b, c * d, h, w)))
        for layer in self.ups:
            x = F.relu(layer(x))
        x = self.out(x)
        if tuple(x.shape[-2:]) != (self.cfg.frame_height, self.cfg.frame_width):
            x = F.interpolate(x, size=(self.cfg.frame_height, self.cfg.frame_width), mode="bilinear", align_corners=False)
        return 255.0 * torch.sigmoid(x)


@dataclass(eq=False)
class AnimatorNets:
    cfg: AnimatorConfig
    enhance: EnhanceNet = field(init=False)
    appearance: AppearanceNet = field(init=False)
    motion: MotionNet = field(init=False)
    generator: GeneratorNet = field(init=False)

    def __post_init__(self):
        s = self.cfg.seed
        self.enhance = EnhanceNet(s + 1)
        self.appearance = AppearanceNet(self.cfg, s + 2)
        self.motion = MotionNet(self.cfg, s + 3)
        self.generator = GeneratorNet(self.cfg, s + 4)
        for net in self.all():
            net.eval()
            net.requires_grad_(False)

    def all(self):
        return [self.enhance, self.appearance, self.motion, self.generator]


# --- operations -------------------------------------------------------------------


def facial_sr(aux_low: Frame, target_dims: tuple[int, int], net: EnhanceNet) -> Frame:
    """Bicubic upscaling to the keyframe size, then residual enhancement (RGB output)."""
    w, h = target_dims
    if w < aux_low.width or h < aux_low.height:
        raise ShapeError(f"target {w}x{h} is smaller than input {aux_low.width}x{aux_low.height}")
    big = resize(aux_low, w, h)
    x = frame_to_tensor(big)
    if net.is_zero():
        return tensor_to_frame(x)
    with torch.no_grad():
        return tensor_to_frame(net(x[None])[0])


def extract_appearance(keyframe: Frame, net: AppearanceNet) -> FeatureVolume:
    x = frame_to_tensor(keyframe)
    check_frame_dims(x, net.cfg.frame_dims, "appearance extractor")
    with torch.no_grad():
        return FeatureVolume(net(x[None])[0])


def _motion_from_raw(angles, log_scale, delta, trans) -> MotionParams:
    rot = motion.rotation_from_euler(angles[0], angles[1], angles[2])
    return MotionParams(torch.exp(log_scale), rot, delta, trans)


def extract_motion(frame: Frame, net: MotionNet) -> MotionParams:
    x = frame_to_tensor(frame)
    check_frame_dims(x, net.cfg.frame_dims, "motion extractor")
    with torch.no_grad():
        angles, log_scale, delta, trans = net(x[None])
    return _motion_from_raw(angles[0], log_scale[0], delta[0], trans[0])


def extract_canonical(keyframe: Frame, net: MotionNet) -> torch.Tensor:
    x = frame_to_tensor(keyframe)
    check_frame_dims(x, net.cfg.frame_dims, "motion extractor")
    with torch.no_grad():
        return net.canonical_points(x[None])[0]


def grid_coords(depth: int, height: int, width: int, dtype=DTYPE) -> torch.Tensor:
    """(D, H, W, 3) voxel-center coordinates (x, y, z) in [-1, 1]."""
    def lin(n):
        return torch.linspace(-1, 1, n, dtype=dtype) if n > 1 else torch.zeros(1, dtype=dtype)

    z, y, x = torch.meshgrid(lin(depth), lin(height), lin(width), indexing="ij")
    return torch.stack([x, y, z], dim=-1)


def keypoint_flow(x_key, x_trg, grid: torch.Tensor, sigma: float) -> torch.Tensor:
    """Dense displacement u(p) = sum_k softmax_k(-|p - x_key,k|^2 / 2 sigma^2) (x_trg,k - x_key,k)."""
    pts = grid.reshape(-1, 3)
    d2 = ((pts[:, None, :] - x_key[None, :, :]) ** 2).sum(-1)
    w = torch.softmax(-d2 / (2.0 * sigma**2), dim=1)
    u = w @ (x_trg - x_key)
    return u.reshape(grid.shape)


def trilinear_sample(vol: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
    """Sample (C, D, H, W) at fractional voxel positions (..., 3) ordered (x, y, z).

    Out-of-volume neighbours contribute zero. Integer positions return the
    stored voxel exactly.
    """
    c, d, h, w = vol.shape
    flat = vol.reshape(c, -1)
    base = torch.floor(pos)
    frac = pos - base
    base = base.long()
    out = 0
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                ix, iy, iz = base[..., 0] + dx, base[..., 1] + dy, base[..., 2] + dz
                wx = frac[..., 0] if dx else 1 - frac[..., 0]
                wy = frac[..., 1] if dy else 1 - frac[..., 1]
                wz = frac[..., 2] if dz else 1 - frac[..., 2]
                valid = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h) & (iz >= 0) & (iz < d)
                lin = (iz.clamp(0, d - 1) * h + iy.clamp(0, h - 1)) * w + ix.clamp(0, w - 1)
                vals = flat[:, lin.reshape(-1)].reshape(c, *lin.shape)
                vals = torch.where(valid, vals, torch.zeros((), dtype=vals.dtype))
                out = out + vals * (wx * wy * wz)
    return out


def warp(f_key: FeatureVolume, x_key, x_trg, sigma: float = 0.3) -> FeatureVolume:
    """Resample ``f_key`` at p - u(p) for the keypoint-driven flow u."""
    dtype = f_key.data.dtype
    x_key = torch.as_tensor(x_key, dtype=dtype)
    x_trg = torch.as_tensor(x_trg, dtype=dtype)
    if x_key.shape != x_trg.shape or x_key.dim() != 2 or x_key.shape[1] != 3:
        raise ShapeError(f"keypoint sets must share a Kx3 shape, got {tuple(x_key.shape)} and {tuple(x_trg.shape)}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    c, d, h, w = f_key.data.shape
    grid = grid_coords(d, h, w, dtype)
    u = keypoint_flow(x_key, x_trg, grid, sigma)
    # normalized -> voxel units, per axis
    half = torch.tensor([(w - 1) / 2, (h - 1) / 2, (d - 1) / 2], dtype=dtype)
    idx = torch.stack(torch.meshgrid(torch.arange(d), torch.arange(h), torch.arange(w), indexing="ij")[::-1], dim=-1)
    pos = idx.to(dtype) - u * half
    return FeatureVolume(trilinear_sample(f_key.data, pos))


def generate(volume: FeatureVolume, net: GeneratorNet) -> Frame:
    if volume.dims != net.cfg.volume_shape:
        raise ShapeError(f"generator expects volume {net.cfg.volume_shape}, got {volume.dims}")
    with torch.no_grad():
        img = net(volume.data[None])[0]
    return tensor_to_frame(img / 255.0)


@dataclass(eq=False)
class Stage1Trace:
    x_key: torch.Tensor | None = None
    x_targets: list = field(default_factory=list)
    params: list = field(default_factory=list)


def stage1_reconstruct(keyframe: Frame, aux_frames, nets: AnimatorNets, trace: Stage1Trace | None = None) -> FrameSequence:
    """TR frames for every auxiliary (already super-resolved) frame of one GOP."""
    cfg = nets.cfg
    aux = list(aux_frames)
    fps = aux_frames.fps if isinstance(aux_frames, FrameSequence) else 25
    if not aux:
        return FrameSequence([], fps)
    for f in aux:
        if f.dims != keyframe.dims:
            raise ShapeError(f"auxiliary frame {f.dims} must be facial_sr'd to keyframe dims {keyframe.dims}")
    f_key = extract_appearance(keyframe, nets.appearance)
    x_c = extract_canonical(keyframe, nets.motion)
    p_key = extract_motion(keyframe, nets.motion)
    x_key = motion.compose_key(x_c, p_key)
    params = [extract_motion(f, nets.motion) for f in aux]
    p_trg0 = params[0]
    out = []
    for p_i in params:
        x_raw = motion.compose_target(x_c, p_key, p_trg0, p_i)
        mouth = motion.mouth_retarget(x_raw, cfg.mouth_indices, x_key, cfg.mouth_alpha)
        x_trg = motion.compose_target(x_c, p_key, p_trg0, p_i, mouth)
        out.append(generate(warp(f_key, x_key, x_trg, cfg.sigma), nets.generator))
        if trace is not None:
            trace.x_targets.append(x_trg)
    if trace is not None:
        trace.x_key = x_key
        trace.params = params
    return FrameSequence(out, fps)


def keypoint_sidecar(x_key, x_targets) -> bytes:
    """Debug dump: little-endian f32, keyframe points then each target's points."""
    arrays = [np.asarray(torch.as_tensor(x).detach(), dtype="<f4") for x in [x_key, *x_targets]]
    return b"".join(a.tobytes() for a in arrays)
