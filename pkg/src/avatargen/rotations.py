"""Quaternion and rotation helpers. Quaternions are stored as (w, x, y, z)."""
from __future__ import annotations

import numpy as np
import torch


def quat_identity(n: int = 1) -> np.ndarray:
    q = np.zeros((n, 4))
    q[:, 0] = 1.0
    return q


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_to_matrix_np(q: np.ndarray) -> np.ndarray:
    """(..., 4) unit quaternions -> (..., 3, 3) rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
            2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
            2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat_np(m: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) -> unit quaternions with w >= 0.

    Picks the numerically safest branch per matrix; the identity maps to
    exactly (1, 0, 0, 0).
    """
    m = np.asarray(m, dtype=np.float64)
    r = m.reshape(-1, 3, 3)
    m00, m11, m22 = r[:, 0, 0], r[:, 1, 1], r[:, 2, 2]
    tr = m00 + m11 + m22
    q = np.empty((len(r), 4))
    with np.errstate(invalid="ignore", divide="ignore"):
        branches = [
            (tr > 0, np.sqrt(np.maximum(tr + 1.0, 0)) * 2.0,
             lambda s: [0.25 * s, (r[:, 2, 1] - r[:, 1, 2]) / s, (r[:, 0, 2] - r[:, 2, 0]) / s, (r[:, 1, 0] - r[:, 0, 1]) / s]),
            ((m00 > m11) & (m00 > m22), np.sqrt(np.maximum(1.0 + m00 - m11 - m22, 0)) * 2.0,
             lambda s: [(r[:, 2, 1] - r[:, 1, 2]) / s, 0.25 * s, (r[:, 0, 1] + r[:, 1, 0]) / s, (r[:, 0, 2] + r[:, 2, 0]) / s]),
            (m11 > m22, np.sqrt(np.maximum(1.0 + m11 - m00 - m22, 0)) * 2.0,
             lambda s: [(r[:, 0, 2] - r[:, 2, 0]) / s, (r[:, 0, 1] + r[:, 1, 0]) / s, 0.25 * s, (r[:, 1, 2] + r[:, 2, 1]) / s]),
            (np.ones(len(r), dtype=bool), np.sqrt(np.maximum(1.0 + m22 - m00 - m11, 0)) * 2.0,
             lambda s: [(r[:, 1, 0] - r[:, 0, 1]) / s, (r[:, 0, 2] + r[:, 2, 0]) / s, (r[:, 1, 2] + r[:, 2, 1]) / s, 0.25 * s]),
        ]
        taken = np.zeros(len(r), dtype=bool)
        for cond, s, fn in branches:
            sel = cond & ~taken
            if sel.any():
                q[sel] = np.stack(fn(s), axis=-1)[sel]
            taken |= sel
    q[q[:, 0] < 0] *= -1
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q.reshape(m.shape[:-2] + (4,))


def quat_multiply_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def polar_rotation(m: np.ndarray, iters: int = 30, tol: float = 1e-15) -> np.ndarray:
    """Rotation factor of the polar decomposition of (..., 3, 3) matrices.

    Newton iteration R <- (R + R^-T) / 2. An exact rotation (including the
    identity) is a fixed point, so rigid inputs come back unchanged.
    """
    r = np.array(m, dtype=np.float64, copy=True)
    for _ in range(iters):
        nxt = 0.5 * (r + np.swapaxes(np.linalg.inv(r), -1, -2))
        delta = np.max(np.abs(nxt - r)) if r.size else 0.0
        r = nxt
        if delta <= tol:
            break
    return r


# torch versions, used on the differentiable path


def quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = q.unbind(-1)
    m = torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
            2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
            2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def quat_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_exp(omega: torch.Tensor) -> torch.Tensor:
    """Rotation vector (..., 3) -> unit quaternion, smooth at zero."""
    theta = torch.sqrt((omega * omega).sum(-1, keepdim=True) + 1e-24)
    half = 0.5 * theta
    return torch.cat([torch.cos(half), torch.sin(half) / theta * omega], dim=-1)
