"""Axis-angle rotation helpers (vectorized over leading axes)."""

from __future__ import annotations

import numpy as np

_PI_TOL = 1e-12


def rotvec_to_quat(v: np.ndarray) -> np.ndarray:
    """Axis-angle (..., 3) to unit quaternion (..., 4) in (w, x, y, z) order."""
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(half)/angle -> 0.5 as angle -> 0
    small = angle < 1e-8
    safe = np.where(small, 1.0, angle)
    k = np.where(small, 0.5 - angle**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), k * v], axis=-1)


def quat_mul(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product q1 * q2 (rotation q2 applied first)."""
    w1, x1, y1, z1 = np.moveaxis(q1, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(q2, -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Unit quaternion to canonical axis-angle with angle in [0, pi].

    At angle pi the rotation is double-covered; the axis is signed so that its
    largest-magnitude component is positive.
    """
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    q = np.where(q[..., :1] < 0.0, -q, q)
    w = q[..., 0]
    xyz = q[..., 1:]
    s = np.linalg.norm(xyz, axis=-1)
    angle = 2.0 * np.arctan2(s, w)
    small = s < 1e-12
    scale = np.where(small, 2.0, angle / np.where(small, 1.0, s))
    v = scale[..., None] * xyz

    at_pi = w < _PI_TOL
    if np.any(at_pi):
        idx = np.argmax(np.abs(v), axis=-1)
        lead = np.take_along_axis(v, idx[..., None], axis=-1)
        flip = at_pi[..., None] & (lead < 0.0)
        v = np.where(flip, -v, v)
    return v


def canonicalize(v: np.ndarray) -> np.ndarray:
    return quat_to_rotvec(rotvec_to_quat(v))


def compose(delta: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Axis-angle of Rot(delta) @ Rot(q)."""
    return quat_to_rotvec(quat_mul(rotvec_to_quat(delta), rotvec_to_quat(q)))
