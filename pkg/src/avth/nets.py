"""Shared plumbing for the small seeded networks used by both decoder stages."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .media import ColorTag, Frame, to_rgb

# float64 is used only for gradient checks (call .double() on nets and inputs)
DTYPE = torch.float32


class ShapeError(ValueError):
    pass


class ToyNetwork(nn.Module):
    """Base class: parameters are a pure function of (architecture, seed)."""

    def __init__(self, seed: int):
        super().__init__()
        self.seed = int(seed)

    def reset_parameters(self, weight_gain: float = 1.0, bias_range: float = 0.1) -> "ToyNetwork":
        g = torch.Generator().manual_seed(self.seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.dim() > 1:
                    fan_in = p[0].numel() if not isinstance(self._owner(name), nn.ConvTranspose2d) else p.shape[0] * p[0, 0].numel() / 4
                    std = weight_gain / math.sqrt(max(fan_in, 1))
                    p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * std)
                else:
                    p.copy_((torch.rand(p.shape, generator=g, dtype=torch.float64) * 2 - 1) * bias_range)
        return self

    def _owner(self, param_name: str) -> nn.Module:
        mod = self
        for part in param_name.split(".")[:-1]:
            mod = getattr(mod, part)
        return mod

    def parameter_bytes(self) -> bytes:
        return b"".join(p.detach().numpy().tobytes() for p in self.parameters())

    def scale_(self, module: nn.Module, factor: float) -> None:
        with torch.no_grad():
            for p in module.parameters():
                p.mul_(factor)

    def zero_(self, module: nn.Module) -> None:
        self.scale_(module, 0.0)


def conv(cin: int, cout: int, k: int = 3, stride: int = 1) -> nn.Conv2d:
    # replicate padding keeps constant inputs mapping to constant outputs
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, padding_mode="replicate", dtype=DTYPE)


def up(cin: int, cout: int) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1, dtype=DTYPE)


def frame_to_tensor(frame: Frame) -> torch.Tensor:
    """RGB (3, H, W) in [0, 1] at the pipeline dtype."""
    rgb = to_rgb(frame).to_array()
    return torch.from_numpy(rgb.transpose(2, 0, 1).astype(np.float64) / 255.0).to(DTYPE)


def tensor_to_frame(t: torch.Tensor) -> Frame:
    """Inverse of :func:`frame_to_tensor`; values are clamped and rounded to 8 bits."""
    a = t.detach().cpu().numpy()
    q = np.clip(np.floor(a * 255.0 + 0.5), 0, 255).astype(np.uint8)
    return Frame(a.shape[2], a.shape[1], tuple(q), ColorTag.RGB)


def frames_to_batch(frames) -> torch.Tensor:
    return torch.stack([frame_to_tensor(f) for f in frames])


def check_frame_dims(x: torch.Tensor, dims: tuple[int, int], what: str) -> None:
    w, h = dims
    if tuple(x.shape[-2:]) != (h, w):
        raise ShapeError(f"{what}: expected {w}x{h} input, got {x.shape[-1]}x{x.shape[-2]}")


def num_halvings(size: int, target: int) -> int:
    n = 0
    while size > target and size % 2 == 0 and size // 2 >= target:
        size //= 2
        n += 1
    return n
