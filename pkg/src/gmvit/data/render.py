"""Orthographic depth-shaded point splatting."""

from __future__ import annotations

import numpy as np

_Z = np.array([0.0, 0.0, 1.0])
_X = np.array([1.0, 0.0, 0.0])


def camera_frame(cam: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(right, up, forward) with forward = -cam and up the rejection of +z from cam."""
    cam = np.asarray(cam, dtype=float)
    ref = _X if abs(cam @ _Z) > 0.999 else _Z
    up = ref - (ref @ cam) * cam
    up /= np.linalg.norm(up)
    forward = -cam
    right = np.cross(forward, up)
    return right, up, forward


def render_view(points: np.ndarray, cam: np.ndarray, H: int = 32, W: int = 32) -> np.ndarray:
    """Render points (inside the unit ball) seen from direction ``cam``.

    The image plane spans [-1, 1] on both axes. Each point lands in one pixel;
    the nearest point wins and the pixel value is 1 - depth, depth mapped from
    [-1, 1] to [0, 1]. Background stays 0.
    """
    cam = np.asarray(cam, dtype=float)
    if abs(np.linalg.norm(cam) - 1.0) > 1e-6:
        raise ValueError("camera direction must be unit length")
    img = np.zeros((H, W))
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return img
    right, up, forward = camera_frame(cam)
    x, y, depth = pts @ right, pts @ up, pts @ forward
    col = np.clip(np.floor((x + 1.0) * 0.5 * W), 0, W - 1).astype(np.int64)
    row = np.clip(np.floor((1.0 - y) * 0.5 * H), 0, H - 1).astype(np.int64)
    dn = np.clip((depth + 1.0) * 0.5, 0.0, 1.0)
    buf = np.full(H * W, np.inf)
    np.minimum.at(buf, row * W + col, dn)
    hit = np.isfinite(buf)
    img.reshape(-1)[hit] = 1.0 - buf[hit]
    return img


def render_views(points: np.ndarray, cams: np.ndarray, H: int = 32, W: int = 32) -> np.ndarray:
    return np.stack([render_view(points, c, H, W) for c in cams])
