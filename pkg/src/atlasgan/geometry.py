"""Stationary-velocity-field integration, composition, warping and flow resizing.

Fields are (B, 2, H, W) tensors in pixel units; channel 0 displaces rows,
channel 1 displaces columns, and ``phi(x) = x + u(x)``.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from . import _kernels
from . import tensor as T
from .tensor import ShapeError, Tensor


class NonFiniteField(ValueError):
    pass

DEFAULT_STEPS = 5


def warp(image, u):
    """Resample ``image`` at ``x + u(x)`` (bilinear, clamp-to-edge)."""
    return T.warp(image, u)


def integrate_svf(v, steps: int = DEFAULT_STEPS):
    """Scaling and squaring: ``u = v / 2**steps``, then ``u <- u + u o (Id + u)``."""
    if steps < 1:
        raise ValueError(f"integrate_svf: steps must be >= 1, got {steps}")
    v = T.as_tensor(v)
    if not np.all(np.isfinite(v.data)):
        raise NonFiniteField("integrate_svf: velocity field contains non-finite values")
    u = T.mul(v, 1.0 / 2 ** steps)
    for _ in range(steps):
        u = T.add(u, T.warp(u, u))
    return u


def compose(u_outer, u_inner):
    """Displacement of ``(Id + u_outer) o (Id + u_inner)``."""
    u_outer, u_inner = T.as_tensor(u_outer), T.as_tensor(u_inner)
    if u_outer.shape != u_inner.shape:
        raise ShapeError(f"compose: shapes {u_outer.shape} and {u_inner.shape} differ")
    return T.add(u_inner, T.warp(u_outer, u_inner))


def upscale_flow(u_half, full_shape=None):
    """Bilinear 2x resize of a half-resolution displacement, values doubled."""
    u_half = T.as_tensor(u_half)
    H, W = u_half.shape[-2:]
    if full_shape is not None and tuple(full_shape) != (2 * H, 2 * W):
        raise ValueError(f"upscale_flow: field {u_half.shape} is not half of {tuple(full_shape)}")
    return T.mul(T.upsample2x(u_half), 2.0)


# -- numpy-side helpers (metrics, data synthesis) -----------------------------

def identity_grid(H, W, dtype=np.float64):
    return np.stack(np.meshgrid(np.arange(H, dtype=dtype), np.arange(W, dtype=dtype), indexing="ij"))


def warp_labels(labels, u):
    """Nearest-neighbour warp of integer label maps (B, H, W) by u (B, 2, H, W)."""
    labels = np.asarray(labels)
    u = np.asarray(u.data if isinstance(u, Tensor) else u)
    H, W = labels.shape[-2:]
    g = identity_grid(H, W)
    return _kernels.nearest_sample(labels, g[0] + u[:, 0], g[1] + u[:, 1])


def jacobian_determinant(u):
    """det(I + grad u) per pixel for u (2, H, W) or (B, 2, H, W).

    Central differences inside, one-sided at the border (``np.gradient``).
    """
    u = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=np.float64)
    squeeze = u.ndim == 3
    if squeeze:
        u = u[None]
    dy0, dx0 = np.gradient(u[:, 0], axis=(1, 2))
    dy1, dx1 = np.gradient(u[:, 1], axis=(1, 2))
    det = (1 + dy0) * (1 + dx1) - dx0 * dy1
    return det[0] if squeeze else det


def random_velocity(shape, sigma, max_mag, rng, batch=None):
    """Gaussian-smoothed white noise rescaled so max |v| equals ``max_mag``."""
    H, W = shape
    n = 1 if batch is None else batch
    noise = rng.standard_normal((n, 2, H, W))
    v = ndimage.gaussian_filter(noise, sigma=(0, 0, sigma, sigma), mode="reflect")
    mag = np.sqrt((v ** 2).sum(axis=1, keepdims=True)).max(axis=(1, 2, 3), keepdims=True)
    v = v * (max_mag / np.maximum(mag, 1e-12))
    v = v.astype(np.float32)
    return v[0] if batch is None else v
