# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled oriented-gradient field for the toy image encoder."""

import numpy as np
from libc.math cimport sqrt


def orientation_field(const unsigned char[:, :, ::1] img, int pool):
    cdef Py_ssize_t H = img.shape[0], W = img.shape[1]
    if img.shape[2] != 3:
        raise ValueError("expected an RGB image")
    if pool < 1 or H % pool or W % pool:
        raise ValueError(f"pool={pool} must divide image size {H}x{W}")
    out = np.zeros((3, H // pool, W // pool), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t y, x, c, cy, cx
    cdef double gx, gy, m2, best, bgx, bgy, m
    cdef double scale = 1.0 / (8.0 * 255.0)
    for y in range(1, H - 1):
        cy = y // pool
        for x in range(1, W - 1):
            cx = x // pool
            best = -1.0
            bgx = 0.0
            bgy = 0.0
            for c in range(3):
                gx = (<double>img[y - 1, x + 1, c] + 2.0 * img[y, x + 1, c] + img[y + 1, x + 1, c]
                      - img[y - 1, x - 1, c] - 2.0 * img[y, x - 1, c] - img[y + 1, x - 1, c])
                gy = (<double>img[y + 1, x - 1, c] + 2.0 * img[y + 1, x, c] + img[y + 1, x + 1, c]
                      - img[y - 1, x - 1, c] - 2.0 * img[y - 1, x, c] - img[y - 1, x + 1, c])
                m2 = gx * gx + gy * gy
                if m2 > best:
                    best = m2
                    bgx = gx
                    bgy = gy
            if best > 0.0:
                bgx = bgx * scale
                bgy = bgy * scale
                m = sqrt(bgx * bgx + bgy * bgy)
                o[0, cy, cx] += m
                o[1, cy, cx] += (bgx * bgx - bgy * bgy) / m
                o[2, cy, cx] += 2.0 * bgx * bgy / m
    out /= pool * pool
    return out.astype(np.float32)
