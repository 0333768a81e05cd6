"""Composite layers: spectrally normalised convolutions, FiLM, residual blocks,
and the condition-embedding MLP."""
from __future__ import annotations

import warnings

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LEAKY_SLOPE = 0.2


def param(data, name=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)


class Module:
    """Minimal parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; non-trainable
    state (spectral-norm vectors) lives in ``_buffers``.  Traversal follows
    attribute insertion order so names are stable across runs.
    """

    training = True

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix=""):
        for k, v in getattr(self, "_buffers", {}).items():
            yield f"{prefix}{k}", v
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Module):
                yield from val.named_buffers(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        yield from m.named_buffers(f"{name}.{i}.")

    def modules(self):
        yield self
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for m in val:
                    if isinstance(m, Module):
                        yield from m.modules()

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def set_buffer(self, name, value):
        mod = self
        *path, leaf = name.split(".")
        for part in path:
            mod = mod[int(part)] if isinstance(mod, (list, tuple)) else getattr(mod, part)
        if leaf not in mod._buffers or mod._buffers[leaf].shape != value.shape:
            raise KeyError(f"no buffer {name!r} with shape {np.shape(value)}")
        mod._buffers[leaf] = np.array(value, dtype=mod._buffers[leaf].dtype)


def _unit(x, eps=1e-12):
    n = np.linalg.norm(x)
    return x / max(n, eps), n


class SpectralWeight(Module):
    """Kernel ``W`` plus a persistent left singular-vector estimate ``u``."""

    def __init__(self, W, rng, power_iters=1):
        super().__init__()
        self._W = W  # shared with the owning layer; not a separate parameter
        self.power_iters = power_iters
        u = rng.standard_normal(W.shape[0])
        self._buffers["u"] = (u / np.linalg.norm(u)).astype(np.float32)
        self.degenerate = False


def spectral_normalize(sw: SpectralWeight, update: bool = True, iters: int | None = None):
    """Return ``(W / sigma, u, sigma)`` from power iteration on the flattened kernel.

    ``u`` is advanced in place when ``update`` is true.  ``sigma`` is
    differentiable w.r.t. ``W`` (u and v are treated as constants).
    """
    W = sw._W
    Wm = W.data.reshape(W.shape[0], -1).astype(np.float64)
    u = sw._buffers["u"].astype(np.float64)
    n = sw.power_iters if iters is None else iters
    if update:
        for _ in range(max(n, 1)):
            v, _ = _unit(Wm.T @ u)
            u_new, nrm = _unit(Wm @ v)
            if nrm > 0:
                u = u_new
        sw._buffers["u"] = u.astype(np.float32)
    v, _ = _unit(Wm.T @ u)
    uv = Tensor((u[:, None] * v[None, :]).reshape(W.shape))
    sigma = T.sum_(T.mul(W, uv))
    if sigma.data <= 1e-12:
        if not sw.degenerate:
            warnings.warn("spectral_normalize: zero weight matrix, sigma clamped to 1e-12", RuntimeWarning)
        sw.degenerate = True
        sigma = Tensor(np.float32(1e-12))
    else:
        sw.degenerate = False
    return T.div(W, sigma), sw._buffers["u"], float(sigma.data)


def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / ((1 + LEAKY_SLOPE ** 2) * fan_in))
    return rng.uniform(-bound, bound, size=shape)


class Conv(Module):
    """3x3 convolution with reflection padding; ``sn`` enables spectral normalisation."""

    def __init__(self, cin, cout, rng, stride=1, k=3, sn=False, init_scale=None):
        super().__init__()
        shape = (cout, cin, k, k)
        if init_scale is None:
            w = _he_uniform(rng, shape, cin * k * k)
        else:
            w = rng.normal(0.0, init_scale, size=shape)
        self.weight = param(w)
        self.bias = param(np.zeros(cout))
        self.stride = stride
        self.k = k
        self.sn = SpectralWeight(self.weight, rng) if sn else None
        self.last_sigma = None

    def kernel(self):
        if self.sn is None:
            return self.weight
        w, _, sigma = spectral_normalize(self.sn, update=self.training and T._grad_enabled())
        self.last_sigma = sigma
        return w

    def __call__(self, x):
        y = T.conv2d(x, self.kernel(), stride=self.stride, pad=self.k > 1)
        return T.add(y, T.reshape(self.bias, (1, -1, 1, 1)))


class Dense(Module):
    def __init__(self, din, dout, rng, zero=False):
        super().__init__()
        w = np.zeros((din, dout)) if zero else _he_uniform(rng, (din, dout), din)
        self.weight = param(w)
        self.bias = param(np.zeros(dout))

    def __call__(self, x):
        return T.add(T.matmul(x, self.weight), T.reshape(self.bias, (1, -1)))


def film_modulate(h, gamma, beta):
    """Per-channel affine modulation: ``gamma[b, c] * h[b, c] + beta[b, c]``."""
    h = T.as_tensor(h)
    gamma, beta = T.as_tensor(gamma), T.as_tensor(beta)
    C = h.shape[1]
    if gamma.shape[-1] != C or beta.shape[-1] != C:
        raise ShapeError(f"film_modulate: {C} channels but gamma {gamma.shape}, beta {beta.shape}")
    bshape = (gamma.shape[0] if gamma.ndim == 2 else 1, C) + (1,) * (h.ndim - 2)
    return T.add(T.mul(T.reshape(gamma, bshape), h), T.reshape(beta, bshape))


class ResBlockSN(Module):
    def __init__(self, ch, rng):
        super().__init__()
        self.conv1 = Conv(ch, ch, rng, sn=True)
        self.conv2 = Conv(ch, ch, rng, sn=True)

    def __call__(self, h):
        if h.shape[1] != self.conv1.weight.shape[1]:
            raise ShapeError(f"resblock_sn: expected {self.conv1.weight.shape[1]} channels, got {h.shape[1]}")
        r = T.leaky_relu(self.conv1(h), LEAKY_SLOPE)
        r = T.leaky_relu(self.conv2(r), LEAKY_SLOPE)
        return T.add(h, r)


class ConditionEmbedding(Module):
    """Four Dense(64)+LeakyReLU layers shared by every FiLM site, plus one
    zero-initialised projection per site producing ``(1 + dgamma, beta)``."""

    def __init__(self, z_dim, site_channels, rng, width=64, proj_rng=None):
        super().__init__()
        self.mlp = [Dense(z_dim if i == 0 else width, width, rng) for i in range(4)]
        self.proj = [Dense(width, 2 * c, proj_rng or rng, zero=True) for c in site_channels]
        self.site_channels = list(site_channels)
        self.width = width

    def embed(self, z):
        h = T.as_tensor(z)
        for layer in self.mlp:
            h = T.leaky_relu(layer(h), LEAKY_SLOPE)
        return h

    def __call__(self, z):
        """List of ``(gamma, beta)`` per FiLM site, each (B, C)."""
        e = self.embed(z)
        out = []
        for proj, c in zip(self.proj, self.site_channels):
            gb = proj(e)
            dgamma = T.slice_axis(gb, 1, 0, c)
            beta = T.slice_axis(gb, 1, c, 2 * c)
            out.append((T.add(dgamma, 1.0), beta))
        return out
