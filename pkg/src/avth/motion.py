"""Implicit 3D keypoint algebra.

Keypoints are row vectors multiplied on the right by rotations (``x @ R``).
Functions accept numpy arrays or torch tensors; torch inputs keep their
autograd graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_NUM_KEYPOINTS = 21
# Lower-face block of the default layout; only these receive mouth offsets.
DEFAULT_MOUTH_INDICES = (16, 17, 18, 19, 20)


class MotionError(ValueError):
    pass


def _xp(*arrays):
    return torch if any(isinstance(a, torch.Tensor) for a in arrays) else np


@dataclass(frozen=True, eq=False)
class MotionParams:
    scale: float
    rotation: np.ndarray
    expression: np.ndarray
    translation: np.ndarray

    @property
    def num_keypoints(self) -> int:
        return self.expression.shape[0]

    def validate(self, tol: float = 1e-6) -> None:
        r = _as_numpy(self.rotation)
        if r.shape != (3, 3):
            raise MotionError(f"rotation must be 3x3, got {r.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=tol) or abs(np.linalg.det(r) - 1.0) > tol:
            raise MotionError("rotation is not a proper orthonormal matrix")
        if not float(self.scale) > 0:
            raise MotionError(f"scale must be positive, got {self.scale}")

    def to_array(self) -> np.ndarray:
        """Flat f32 layout used by debug sidecars: S, R (row-major), T, delta."""
        parts = [np.atleast_1d(_as_numpy(self.scale)), _as_numpy(self.rotation).ravel(),
                 _as_numpy(self.translation).ravel(), _as_numpy(self.expression).ravel()]
        return np.concatenate(parts).astype("<f4")


def _as_numpy(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def rotation_from_euler(pitch, yaw, roll):
    """R = Rz(roll) @ Ry(yaw) @ Rx(pitch)."""
    xp = _xp(pitch, yaw, roll)
    if xp is torch:
        dt = next(a.dtype for a in (pitch, yaw, roll) if isinstance(a, torch.Tensor))
        pitch, yaw, roll = (torch.as_tensor(a, dtype=dt) for a in (pitch, yaw, roll))
    cx, sx = xp.cos(pitch), xp.sin(pitch)
    cy, sy = xp.cos(yaw), xp.sin(yaw)
    cz, sz = xp.cos(roll), xp.sin(roll)
    zero = cx * 0
    one = zero + 1

    def mat(rows):
        if xp is torch:
            return torch.stack([torch.stack(r) for r in rows])
        return np.array(rows, dtype=np.float64)

    rx = mat([[one, zero, zero], [zero, cx, -sx], [zero, sx, cx]])
    ry = mat([[cy, zero, sy], [zero, one, zero], [-sy, zero, cy]])
    rz = mat([[cz, -sz, zero], [sz, cz, zero], [zero, zero, one]])
    return rz @ ry @ rx


def _check_shapes(x_c, *params):
    if x_c.ndim != 2 or x_c.shape[1] != 3 or x_c.shape[0] < 1:
        raise MotionError(f"keypoints must be Kx3, got {tuple(x_c.shape)}")
    for p in params:
        if tuple(p.expression.shape) != tuple(x_c.shape):
            raise MotionError(f"expression shape {tuple(p.expression.shape)} does not match keypoints {tuple(x_c.shape)}")
        if tuple(p.rotation.shape) != (3, 3) or tuple(p.translation.shape) != (3,):
            raise MotionError("rotation must be 3x3 and translation a 3-vector")


def compose_key(x_c, p_key: MotionParams):
    """x_key = S * (x_c @ R + delta) + T."""
    _check_shapes(x_c, p_key)
    return p_key.scale * (x_c @ p_key.rotation + p_key.expression) + p_key.translation


def _inverse_rotation(r):
    return r.transpose(-1, -2) if isinstance(r, torch.Tensor) else r.T


def compose_target(x_c, p_key: MotionParams, p_trg0: MotionParams, p_trgi: MotionParams, mouth=None):
    """Target keypoints from the keyframe's canonical points and the motion of
    target i relative to the reference target 0.

    The expression and translation sums are added outside the scale product.
    """
    _check_shapes(x_c, p_key, p_trg0, p_trgi)
    if float(p_trg0.scale) == 0:
        raise MotionError("reference scale S_trg,0 is zero")
    scale = p_key.scale * (p_trgi.scale / p_trg0.scale)
    rot = p_trgi.rotation @ _inverse_rotation(p_trg0.rotation) @ p_key.rotation
    out = scale * (x_c @ rot)
    out = out + (p_key.expression + p_trgi.expression - p_trg0.expression)
    out = out + (p_key.translation + p_trgi.translation - p_trg0.translation)
    if mouth is not None:
        if tuple(mouth.shape) != tuple(x_c.shape):
            raise MotionError(f"mouth offset shape {tuple(mouth.shape)} does not match keypoints")
        out = out + mouth
    return out


def mouth_retarget(x_trg, mouth_indices, closed_template, alpha: float = 1.0):
    """Offset pulling the mouth keypoints toward ``closed_template``; zero elsewhere."""
    if not 0.0 <= alpha <= 1.0:
        raise MotionError(f"alpha must be in [0, 1], got {alpha}")
    k = x_trg.shape[0]
    idx = list(mouth_indices)
    if any(i < 0 or i >= k for i in idx):
        raise MotionError(f"mouth index out of range for K={k}: {idx}")
    if tuple(closed_template.shape) != tuple(x_trg.shape):
        raise MotionError("closed_template must match keypoint shape")
    xp = _xp(x_trg, closed_template)
    mask = np.zeros((k, 1))
    mask[idx] = 1.0
    if xp is torch:
        mask = torch.as_tensor(mask, dtype=x_trg.dtype)
    return alpha * (closed_template - x_trg) * mask
