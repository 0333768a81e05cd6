"""Hot inner loops: bilinear sampling and its adjoint.

Each kernel has a numba ``@njit`` version and a vectorised numpy version with
identical semantics.  The numba path is used when numba imports cleanly and
``ATLASGAN_DISABLE_NUMBA`` is unset (or ``0``).
"""
import os

import numpy as np

_DISABLED = os.environ.get("ATLASGAN_DISABLE_NUMBA", "0") not in ("", "0", "false", "False")

try:
    if _DISABLED:
        raise ImportError("numba disabled by ATLASGAN_DISABLE_NUMBA")
    import numba
    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False


def backend():
    return "numba" if HAVE_NUMBA else "numpy"


def _clamp_coords(cy, cx, H, W):
    # coordinates outside the grid are clamped; the sample there is flat
    iny = (cy >= 0) & (cy <= H - 1)
    inx = (cx >= 0) & (cx <= W - 1)
    cy = np.clip(cy, 0, H - 1)
    cx = np.clip(cx, 0, W - 1)
    return cy, cx, iny, inx


def _corners(cy, cx, H, W):
    y0 = np.floor(cy).astype(np.int64)
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.minimum(y0, H - 2) if H > 1 else np.zeros_like(y0)
    x0 = np.minimum(x0, W - 2) if W > 1 else np.zeros_like(x0)
    wy = (cy - y0).astype(cy.dtype)
    wx = (cx - x0).astype(cx.dtype)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    return y0, x0, y1, x1, wy, wx


def bilinear_sample_np(img, cy, cx):
    """Sample ``img`` (B, C, H, W) at absolute coords ``cy, cx`` (B, H', W')."""
    B, C, H, W = img.shape
    cy, cx, _, _ = _clamp_coords(cy, cx, H, W)
    y0, x0, y1, x1, wy, wx = _corners(cy, cx, H, W)
    b = np.arange(B)[:, None, None]
    out = np.empty((B, C) + cy.shape[1:], dtype=img.dtype)
    for c in range(C):
        im = img[:, c]
        out[:, c] = ((1 - wy) * ((1 - wx) * im[b, y0, x0] + wx * im[b, y0, x1])
                     + wy * ((1 - wx) * im[b, y1, x0] + wx * im[b, y1, x1]))
    return out


def bilinear_sample_backward_np(g, img, cy, cx):
    """Adjoint of :func:`bilinear_sample_np` w.r.t. the image and both coords."""
    B, C, H, W = img.shape
    cy, cx, iny, inx = _clamp_coords(cy, cx, H, W)
    y0, x0, y1, x1, wy, wx = _corners(cy, cx, H, W)
    b = np.arange(B)[:, None, None]
    gimg = np.zeros((B, C, H * W), dtype=np.float64)
    gy = np.zeros(cy.shape, dtype=np.float64)
    gx = np.zeros(cx.shape, dtype=np.float64)
    base = (np.arange(B) * H * W)[:, None, None]
    for c in range(C):
        im = img[:, c]
        gc = g[:, c].astype(np.float64)
        v00, v01 = im[b, y0, x0], im[b, y0, x1]
        v10, v11 = im[b, y1, x0], im[b, y1, x1]
        gy += gc * ((1 - wx) * (v10 - v00) + wx * (v11 - v01))
        gx += gc * ((1 - wy) * (v01 - v00) + wy * (v11 - v10))
        flat = np.zeros(B * H * W, dtype=np.float64)
        for yy, xx, w in ((y0, x0, (1 - wy) * (1 - wx)), (y0, x1, (1 - wy) * wx),
                          (y1, x0, wy * (1 - wx)), (y1, x1, wy * wx)):
            idx = (base + yy * W + xx).ravel()
            flat += np.bincount(idx, weights=(gc * w).ravel(), minlength=B * H * W)
        gimg[:, c] = flat.reshape(B, H * W)
    gy *= iny
    gx *= inx
    dt = img.dtype
    return gimg.reshape(B, C, H, W).astype(dt), gy.astype(dt), gx.astype(dt)


if HAVE_NUMBA:

    @numba.njit(cache=True, fastmath=False)
    def _sample_nb(img, cy, cx, out):
        B, C, H, W = img.shape
        Ho, Wo = cy.shape[1], cy.shape[2]
        for b in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    y = min(max(cy[b, i, j], 0.0), H - 1.0)
                    x = min(max(cx[b, i, j], 0.0), W - 1.0)
                    y0 = min(int(np.floor(y)), max(H - 2, 0))
                    x0 = min(int(np.floor(x)), max(W - 2, 0))
                    y1 = min(y0 + 1, H - 1)
                    x1 = min(x0 + 1, W - 1)
                    wy = y - y0
                    wx = x - x0
                    for c in range(C):
                        out[b, c, i, j] = ((1 - wy) * ((1 - wx) * img[b, c, y0, x0] + wx * img[b, c, y0, x1])
                                           + wy * ((1 - wx) * img[b, c, y1, x0] + wx * img[b, c, y1, x1]))

    @numba.njit(cache=True, fastmath=False)
    def _sample_backward_nb(g, img, cy, cx, gimg, gy, gx):
        B, C, H, W = img.shape
        Ho, Wo = cy.shape[1], cy.shape[2]
        for b in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    ry = cy[b, i, j]
                    rx = cx[b, i, j]
                    iny = ry >= 0.0 and ry <= H - 1.0
                    inx = rx >= 0.0 and rx <= W - 1.0
                    y = min(max(ry, 0.0), H - 1.0)
                    x = min(max(rx, 0.0), W - 1.0)
                    y0 = min(int(np.floor(y)), max(H - 2, 0))
                    x0 = min(int(np.floor(x)), max(W - 2, 0))
                    y1 = min(y0 + 1, H - 1)
                    x1 = min(x0 + 1, W - 1)
                    wy = y - y0
                    wx = x - x0
                    sy = 0.0
                    sx = 0.0
                    for c in range(C):
                        gc = np.float64(g[b, c, i, j])
                        v00 = img[b, c, y0, x0]
                        v01 = img[b, c, y0, x1]
                        v10 = img[b, c, y1, x0]
                        v11 = img[b, c, y1, x1]
                        sy += gc * ((1 - wx) * (v10 - v00) + wx * (v11 - v01))
                        sx += gc * ((1 - wy) * (v01 - v00) + wy * (v11 - v10))
                        gimg[b, c, y0, x0] += gc * (1 - wy) * (1 - wx)
                        gimg[b, c, y0, x1] += gc * (1 - wy) * wx
                        gimg[b, c, y1, x0] += gc * wy * (1 - wx)
                        gimg[b, c, y1, x1] += gc * wy * wx
                    if iny:
                        gy[b, i, j] = sy
                    if inx:
                        gx[b, i, j] = sx

    def bilinear_sample(img, cy, cx):
        B, C = img.shape[:2]
        out = np.empty((B, C) + cy.shape[1:], dtype=img.dtype)
        _sample_nb(np.ascontiguousarray(img), np.ascontiguousarray(cy, dtype=img.dtype),
                   np.ascontiguousarray(cx, dtype=img.dtype), out)
        return out

    def bilinear_sample_backward(g, img, cy, cx):
        dt = img.dtype
        gimg = np.zeros(img.shape, dtype=np.float64)
        gy = np.zeros(cy.shape, dtype=np.float64)
        gx = np.zeros(cx.shape, dtype=np.float64)
        _sample_backward_nb(np.ascontiguousarray(g), np.ascontiguousarray(img),
                            np.ascontiguousarray(cy, dtype=dt), np.ascontiguousarray(cx, dtype=dt),
                            gimg, gy, gx)
        return gimg.astype(dt), gy.astype(dt), gx.astype(dt)

else:
    bilinear_sample = bilinear_sample_np
    bilinear_sample_backward = bilinear_sample_backward_np


def nearest_sample(labels, cy, cx):
    """Nearest-neighbour lookup of an integer map (B, H, W) with edge clamping."""
    B, H, W = labels.shape
    iy = np.clip(np.rint(cy), 0, H - 1).astype(np.int64)
    ix = np.clip(np.rint(cx), 0, W - 1).astype(np.int64)
    return labels[np.arange(B)[:, None, None], iy, ix]
