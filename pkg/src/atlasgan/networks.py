"""Template generator, registration U-Net, projection discriminator, and
condition encoding."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import geometry
from . import tensor as T
from .layers import (LEAKY_SLOPE, ConditionEmbedding, Conv, Dense, Module, ResBlockSN,
                     film_modulate, param)
from .tensor import ShapeError, Tensor

FEATURE_DIM = 64
# four stride-2 stages must leave a map the 3x3 feature conv can reflect-pad
MIN_DISC_INPUT = 32


# -- condition encoding --------------------------------------------------------

@dataclass(frozen=True)
class Attribute:
    name: str
    kind: str  # "continuous" | "categorical"
    maximum: float | None = None
    categories: tuple = ()


@dataclass(frozen=True)
class ConditionSchema:
    attributes: tuple

    @property
    def continuous(self):
        return [a for a in self.attributes if a.kind == "continuous"]

    @property
    def categorical(self):
        return [a for a in self.attributes if a.kind == "categorical"]

    @property
    def n_con(self):
        return len(self.continuous)

    @property
    def n_cat(self):
        return sum(len(a.categories) for a in self.categorical)

    @property
    def dim(self):
        return self.n_con + self.n_cat


def age_cohort_schema(max_age, cohorts=("A", "B")):
    return ConditionSchema((Attribute("age", "continuous", maximum=float(max_age)),
                            Attribute("cohort", "categorical", categories=tuple(cohorts))))


@dataclass
class ConditionVector:
    y_con: np.ndarray  # (B, n_con)
    y_cat: np.ndarray  # (B, n_cat)
    schema: ConditionSchema = field(repr=False)

    @property
    def z(self):
        return np.concatenate([self.y_con, self.y_cat], axis=1).astype(np.float32)

    def __len__(self):
        return self.y_con.shape[0]

    def take(self, idx):
        return ConditionVector(self.y_con[idx], self.y_cat[idx], self.schema)


def encode_conditions(raw, schema: ConditionSchema, allow_extrapolation=False) -> ConditionVector:
    """Encode raw attribute dicts: continuous -> value / max, categorical -> one-hot.

    ``raw`` is one mapping or a sequence of mappings keyed by attribute name.
    ``allow_extrapolation`` lets continuous values leave [0, max] (sampling only).
    """
    if isinstance(raw, dict):
        raw = [raw]
    y_con = np.zeros((len(raw), schema.n_con), dtype=np.float32)
    y_cat = np.zeros((len(raw), schema.n_cat), dtype=np.float32)
    for i, rec in enumerate(raw):
        for j, a in enumerate(schema.continuous):
            if a.name not in rec:
                raise ValueError(f"missing attribute {a.name!r}")
            if not a.maximum or a.maximum <= 0:
                raise ValueError(f"attribute {a.name!r}: maximum must be positive")
            val = float(rec[a.name])
            if not np.isfinite(val) or (not allow_extrapolation and (val < 0 or val > a.maximum)):
                raise ValueError(f"attribute {a.name!r}: value {val} outside [0, {a.maximum}]")
            y_con[i, j] = val / a.maximum
        off = 0
        for a in schema.categorical:
            if a.name not in rec:
                raise ValueError(f"missing attribute {a.name!r}")
            try:
                k = a.categories.index(rec[a.name])
            except ValueError:
                raise ValueError(f"attribute {a.name!r}: unknown category {rec[a.name]!r}") from None
            y_cat[i, off + k] = 1.0
            off += len(a.categories)
    return ConditionVector(y_con, y_cat, schema)


# -- template generator ----------------------------------------------------------

class TemplateGenerator(Module):
    """Learned half-resolution array decoded to a residual on the linear average.

    template = mask * (average + tanh(decoder(P)))
    """

    def __init__(self, average, mask, rng, width=16, c0=8, n_res=5, z_dim=None, film_rng=None):
        super().__init__()
        H, W = average.shape[-2:]
        if H % 2 or W % 2:
            raise ShapeError(f"template generator needs even spatial size, got {(H, W)}")
        self.conditional = z_dim is not None
        self.P = param(rng.normal(0.0, 0.02, size=(1, c0, H // 2, W // 2)))
        self.conv_in = Conv(c0, width, rng, sn=True)
        self.res = [ResBlockSN(width, rng) for _ in range(n_res)]
        self.dec = [Conv(width, c0, rng, sn=True), Conv(c0, c0, rng, sn=True),
                    Conv(c0, c0, rng, sn=True), Conv(c0, 1, rng, sn=True)]
        # FiLM sites: parameter array, then after each post-upsample conv
        self.sites = [c0, c0, c0, c0, 1]
        if self.conditional:
            self.film = ConditionEmbedding(z_dim, self.sites, film_rng or rng)
        self._average = np.asarray(average, dtype=np.float32).reshape(1, 1, H, W)
        self._mask = np.asarray(mask, dtype=np.float32).reshape(1, 1, H, W)

    @property
    def average(self):
        return self._average

    @property
    def mask(self):
        return self._mask

    def set_background(self, average, mask):
        H, W = self._average.shape[-2:]
        self._average = np.asarray(average, dtype=np.float32).reshape(1, 1, H, W)
        self._mask = np.asarray(mask, dtype=np.float32).reshape(1, 1, H, W)

    def __call__(self, z=None, batch=None):
        if self.conditional and z is None:
            raise ValueError("conditional template generator requires a condition vector")
        if not self.conditional and z is not None:
            raise ValueError("unconditional template generator does not accept a condition vector")
        if self.conditional:
            z = z.z if isinstance(z, ConditionVector) else np.asarray(z, dtype=np.float32)
            B = z.shape[0]
            mods = self.film(Tensor(z))
        else:
            B = batch or 1
            mods = None

        def mod(h, i):
            return film_modulate(h, *mods[i]) if mods is not None else h

        h = self.P
        if mods is None:
            h = T.BroadcastTo.apply(h, shape=(B,) + h.shape[1:])
        h = mod(h, 0)
        h = self.conv_in(h)
        for blk in self.res:
            h = blk(h)
        h = T.upsample2x(h)
        h = T.leaky_relu(mod(self.dec[0](h), 1), LEAKY_SLOPE)
        h = T.leaky_relu(mod(self.dec[1](h), 2), LEAKY_SLOPE)
        h = mod(self.dec[2](h), 3)
        h = T.tanh(mod(self.dec[3](h), 4))
        return T.mul(T.add(h, Tensor(self._average)), Tensor(self._mask))


# -- registration network ----------------------------------------------------------

class RegistrationNet(Module):
    """U-Net producing a half-resolution stationary velocity field."""

    def __init__(self, rng, width=16, ndim=2, steps=geometry.DEFAULT_STEPS):
        super().__init__()
        w = width
        self.enc = [Conv(2, w, rng, stride=2), Conv(w, w, rng, stride=2),
                    Conv(w, w, rng, stride=2), Conv(w, w, rng, stride=2)]
        self.mid = Conv(w, w, rng)
        self.up = [Conv(w, w, rng), Conv(2 * w, w, rng), Conv(2 * w, w, rng)]
        self.tail = [Conv(2 * w, w, rng), Conv(w, w, rng)]
        self.head = Conv(w, w // 2, rng)
        self.flow = Conv(w // 2, ndim, rng, init_scale=1e-5)
        self.steps = steps

    def velocity(self, template, fixed):
        template, fixed = T.as_tensor(template), T.as_tensor(fixed)
        if template.shape != fixed.shape:
            raise ShapeError(f"registration: template {template.shape} vs fixed {fixed.shape}")
        H, W = fixed.shape[-2:]
        if H % 16 or W % 16 or min(H, W) < 32:
            raise ShapeError(f"registration: spatial size {(H, W)} must be a multiple of 16 and at least 32")
        h = T.concat([template, fixed], axis=1)
        skips = []
        for conv in self.enc:
            h = T.leaky_relu(conv(h), LEAKY_SLOPE)
            skips.append(h)
        h = T.leaky_relu(self.mid(h), LEAKY_SLOPE)
        for conv, skip in zip(self.up, (skips[2], skips[1], skips[0])):
            h = T.leaky_relu(conv(h), LEAKY_SLOPE)
            h = T.concat([T.upsample2x(h), skip], axis=1)
        for conv in self.tail:
            h = T.leaky_relu(conv(h), LEAKY_SLOPE)
        h = self.head(h)
        return self.flow(h)

    def __call__(self, template, fixed):
        """Return ``(v, u_full, moved)``."""
        v = self.velocity(template, fixed)
        u_half = geometry.integrate_svf(v, self.steps)
        u = geometry.upscale_flow(u_half, fixed.shape[-2:])
        moved = geometry.warp(template, u)
        return v, u, moved

    def inverse_displacement(self, v, full_shape):
        """Full-resolution displacement of the inverse map, from ``-v``."""
        u_half = geometry.integrate_svf(T.mul(v, -1.0), self.steps)
        return geometry.upscale_flow(u_half, full_shape)


def registration_forward(net: RegistrationNet, template, fixed):
    return net(template, fixed)


# -- discriminator ---------------------------------------------------------------

def projection_logits(features, heads: "ProjectionHead", y_cat=None, y_con=None):
    """Per-location logit: <V_cat y_cat + V_con y_con, D'(x)(s)> + psi(D'(x))(s)."""
    return heads(features, y_cat, y_con)


class ProjectionHead(Module):
    def __init__(self, rng, n_cat=0, n_con=0, channels=FEATURE_DIM):
        super().__init__()
        self.psi = Conv(channels, 1, rng, k=1, sn=True)
        self.n_cat, self.n_con = n_cat, n_con
        self.V_cat = param(np.zeros((n_cat, channels))) if n_cat else None
        self.V_con = param(np.zeros((n_con, channels))) if n_con else None
        self.channels = channels

    def init_embeddings(self, rng, scale=None):
        scale = scale if scale is not None else 1.0 / np.sqrt(self.channels)
        if self.V_cat is not None:
            self.V_cat.data[...] = rng.normal(0, scale, size=self.V_cat.shape)
        if self.V_con is not None:
            self.V_con.data[...] = rng.normal(0, scale, size=self.V_con.shape)

    def __call__(self, feat, y_cat=None, y_con=None):
        if feat.shape[1] != self.channels:
            raise ShapeError(f"projection: expected {self.channels} feature channels, got {feat.shape[1]}")
        out = self.psi(feat)
        embed = None
        for V, y, n, label in ((self.V_cat, y_cat, self.n_cat, "categorical"),
                               (self.V_con, y_con, self.n_con, "continuous")):
            if V is None:
                continue
            if y is None:
                raise ValueError(f"projection: missing {label} conditions")
            y = np.asarray(y, dtype=np.float32)
            if y.ndim != 2 or y.shape[1] != n:
                raise ShapeError(f"projection: {label} conditions {y.shape} do not match embedding ({n}, ...)")
            e = T.matmul(Tensor(y), V)
            embed = e if embed is None else T.add(embed, e)
        if embed is None:
            return out
        B = feat.shape[0]
        inner = T.sum_(T.mul(T.reshape(embed, (B, self.channels, 1, 1)), feat), axis=1, keepdims=True)
        return T.add(inner, out)


class Discriminator(Module):
    """PatchGAN trunk (4 stride-2 SN convs) + feature conv + projection head."""

    def __init__(self, rng, base=16, n_cat=0, n_con=0, in_ch=1, feature_sn=False):
        super().__init__()
        widths = [base, 2 * base, 4 * base, 8 * base]
        chans = [in_ch] + widths
        self.trunk = [Conv(chans[i], chans[i + 1], rng, stride=2, sn=True) for i in range(4)]
        self.feature = Conv(widths[-1], FEATURE_DIM, rng, sn=feature_sn)
        self.head = ProjectionHead(rng, n_cat, n_con)
        self.conditional = bool(n_cat or n_con)

    @staticmethod
    def receptive_field(n_stride2=4, k=3):
        rf, jump = 1, 1
        for _ in range(n_stride2):
            rf += (k - 1) * jump
            jump *= 2
        return rf + (k - 1) * jump

    def features(self, x):
        x = T.as_tensor(x)
        if min(x.shape[-2:]) < MIN_DISC_INPUT:
            raise ShapeError(f"discriminator: input {x.shape} smaller than one patch "
                             f"(need >= {MIN_DISC_INPUT} px per side)")
        h = x
        for conv in self.trunk:
            h = T.leaky_relu(conv(h), LEAKY_SLOPE)
        return self.feature(h)

    def __call__(self, x, cond: ConditionVector | None = None):
        feat = self.features(x)
        if self.conditional:
            if cond is None:
                raise ValueError("conditional discriminator requires conditions")
            return self.head(feat, cond.y_cat if self.head.n_cat else None,
                             cond.y_con if self.head.n_con else None)
        return self.head(feat)


def discriminator_forward(d: Discriminator, x, cond=None):
    return d(x, cond)
