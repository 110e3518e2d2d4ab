"""Pure-numpy twin of the compiled oriented-gradient field."""

from __future__ import annotations

import numpy as np


def orientation_field(img: np.ndarray, pool: int) -> np.ndarray:
    """Polarity-invariant oriented-gradient field, average-pooled by ``pool``.

    Per interior pixel, the Sobel gradient of the RGB channel with the largest
    magnitude is kept and encoded as ``(m, m cos 2t, m sin 2t)``; border pixels
    contribute zero. Returns float32 of shape ``(3, H // pool, W // pool)``.
    """
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an RGB image")
    H, W = img.shape[:2]
    if pool < 1 or H % pool or W % pool:
        raise ValueError(f"pool={pool} must divide image size {H}x{W}")
    p = img.astype(np.float64)
    gx = (p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:])
    m2 = gx * gx + gy * gy
    idx = m2.argmax(axis=-1)[..., None]
    gx = np.take_along_axis(gx, idx, -1)[..., 0] / (8.0 * 255.0)
    gy = np.take_along_axis(gy, idx, -1)[..., 0] / (8.0 * 255.0)
    m = np.sqrt(gx * gx + gy * gy)
    safe = np.where(m > 0, m, 1.0)
    field = np.zeros((3, H, W), dtype=np.float64)
    field[0, 1:-1, 1:-1] = m
    field[1, 1:-1, 1:-1] = np.where(m > 0, (gx * gx - gy * gy) / safe, 0.0)
    field[2, 1:-1, 1:-1] = np.where(m > 0, 2.0 * gx * gy / safe, 0.0)
    pooled = field.reshape(3, H // pool, pool, W // pool, pool).mean(axis=(2, 4))
    return pooled.astype(np.float32)
