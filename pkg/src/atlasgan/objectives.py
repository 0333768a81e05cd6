"""Training losses: squared LNCC, deformation regularizer with moving-average
centrality, least-squares GAN, R1, differentiable augmentation, symmetry."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LNCC_EPS = 1e-5
HISTORY_WINDOW = 100
R1_PRESETS = {"low": 5e-4, "mid": 1e-3, "high": 5e-3}


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.01
    lambda_gan: float = 0.1
    r1_gamma: float = 1e-3
    symmetry_weight: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f.name} must be a nonnegative number, got {v}")


# -- similarity ------------------------------------------------------------------

def lncc_loss(moved, fixed, window: int = 9, eps: float = LNCC_EPS):
    """1 - mean squared local correlation over clipped square windows."""
    I, J = T.as_tensor(moved), T.as_tensor(fixed)
    if I.shape != J.shape:
        raise ShapeError(f"lncc: shapes {I.shape} and {J.shape} differ")
    if window < 3 or window % 2 == 0:
        raise ValueError(f"lncc: window must be odd and >= 3, got {window}")
    if window > min(I.shape[-2:]):
        raise ValueError(f"lncc: window {window} larger than image {I.shape[-2:]}")
    r = window // 2
    n = T._box_axis(T._box_axis(np.ones(I.shape[-2:]), r, 0), r, 1)
    inv_n = Tensor(1.0 / n)
    box = lambda x: T.box_sum(x, window)  # noqa: E731
    Is, Js = box(I), box(J)
    cross = T.sub(box(T.mul(I, J)), T.mul(T.mul(Is, Js), inv_n))
    Ivar = T.sub(box(T.square(I)), T.mul(T.square(Is), inv_n))
    Jvar = T.sub(box(T.square(J)), T.mul(T.square(Js), inv_n))
    cc = T.div(T.square(cross), T.add(T.mul(Ivar, Jvar), eps))
    return T.sub(1.0, T.mean(cc))


def lncc_oracle(moved, fixed, window: int = 9, eps: float = LNCC_EPS) -> float:
    """Direct per-pixel double loop over the same clipped windows (test reference)."""
    I = np.asarray(moved, dtype=np.float64)
    J = np.asarray(fixed, dtype=np.float64)
    I = I.reshape(-1, *I.shape[-2:])
    J = J.reshape(-1, *J.shape[-2:])
    r = window // 2
    B, H, W = I.shape
    total = 0.0
    for b in range(B):
        for y in range(H):
            for x in range(W):
                a = I[b, max(0, y - r):y + r + 1, max(0, x - r):x + r + 1]
                c = J[b, max(0, y - r):y + r + 1, max(0, x - r):x + r + 1]
                da, dc = a - a.mean(), c - c.mean()
                total += (da * dc).sum() ** 2 / ((da * da).sum() * (dc * dc).sum() + eps)
    return 1.0 - total / (B * H * W)


# -- deformation regularizer ---------------------------------------------------------

class DeformationHistory:
    """Window of detached spatial-mean displacements plus a cumulative
    per-pixel mean field for reporting."""

    def __init__(self, ndim=2, capacity=HISTORY_WINDOW):
        self.ndim = ndim
        self.capacity = capacity
        self.entries: deque = deque(maxlen=capacity)
        self.mean_field: np.ndarray | None = None
        self.count = 0

    def __len__(self):
        return len(self.entries)

    def push(self, mean_vec):
        m = np.asarray(mean_vec.data if isinstance(mean_vec, Tensor) else mean_vec, dtype=np.float32)
        if m.shape != (self.ndim,) or not np.all(np.isfinite(m)):
            raise ValueError(f"history entry must be {self.ndim} finite values, got {m}")
        self.entries.append(m.copy())

    def accumulate(self, u_full):
        """Fold the batch of full fields into the cumulative per-pixel mean."""
        u = np.asarray(u_full.data if isinstance(u_full, Tensor) else u_full, dtype=np.float64)
        for field_ in u.reshape(-1, *u.shape[-3:]):
            self.count += 1
            if self.mean_field is None:
                self.mean_field = field_.copy()
            else:
                self.mean_field += (field_ - self.mean_field) / self.count

    def past(self, keep):
        """The most recent ``keep`` entries as an array (k, ndim)."""
        if keep <= 0 or not self.entries:
            return np.zeros((0, self.ndim), dtype=np.float32)
        items = list(self.entries)[-keep:]
        return np.stack(items)

    def state(self):
        return {"entries": self.past(self.capacity), "mean_field": self.mean_field, "count": self.count}

    def load(self, entries, mean_field, count):
        self.entries = deque((np.asarray(e, dtype=np.float32) for e in entries), maxlen=self.capacity)
        self.mean_field = None if mean_field is None else np.asarray(mean_field, dtype=np.float64)
        self.count = int(count)


def spatial_mean(u):
    """Mean displacement vector over batch and pixels, shape (ndim,)."""
    u = T.as_tensor(u)
    return T.mean(u, axis=(0, 2, 3))


def gradient_energy(u, reduction="sum"):
    """Sum (or per-pixel mean) of squared forward differences, all components."""
    u = T.as_tensor(u)
    B, _, H, W = u.shape
    dy = T.sub(T.slice_axis(u, 2, 1, H), T.slice_axis(u, 2, 0, H - 1))
    dx = T.sub(T.slice_axis(u, 3, 1, W), T.slice_axis(u, 3, 0, W - 1))
    e = T.add(T.sum_(T.square(dy)), T.sum_(T.square(dx)))
    return T.mul(e, 1.0 / (B * H * W) if reduction == "mean" else 1.0 / B)


def magnitude_energy(u, reduction="sum"):
    u = T.as_tensor(u)
    B, _, H, W = u.shape
    return T.mul(T.sum_(T.square(u)), 1.0 / (B * H * W) if reduction == "mean" else 1.0 / B)


def deformation_regularizer(u_full, hist: DeformationHistory, w: LossWeights, reduction="sum"):
    """lambda1 |u_bar|^2 + lambda2 sum |grad u|^2 + lambda3 sum |u|^2.

    ``u_bar`` averages the current spatial mean (differentiable) with up to
    ``capacity - 1`` detached past entries.  ``reduction='sum'`` sums over
    pixels (mean over the batch); ``'mean'`` averages over pixels as well.
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    u = T.as_tensor(u_full)
    cur = spatial_mean(u)
    past = hist.past(hist.capacity - 1)
    n = past.shape[0] + 1
    ubar = T.mul(T.add(cur, Tensor(past.sum(axis=0))), 1.0 / n) if n > 1 else cur
    central = T.sum_(T.square(ubar))
    reg = T.mul(central, w.lambda1)
    reg = T.add(reg, T.mul(gradient_energy(u, reduction), w.lambda2))
    reg = T.add(reg, T.mul(magnitude_energy(u, reduction), w.lambda3))
    return reg


# -- adversarial ---------------------------------------------------------------

def lsgan_losses(real_logits, fake_logits):
    """(loss_D, loss_G) with targets a=0, b=1, c=1; patch logits averaged."""
    real, fake = T.as_tensor(real_logits), T.as_tensor(fake_logits)
    loss_d = T.add(T.mul(T.mean(T.square(T.sub(real, 1.0))), 0.5), T.mul(T.mean(T.square(fake)), 0.5))
    loss_g = T.mul(T.mean(T.square(T.sub(fake, 1.0))), 0.5)
    return loss_d, loss_g


def lsgan_generator_loss(fake_logits):
    return T.mul(T.mean(T.square(T.sub(T.as_tensor(fake_logits), 1.0))), 0.5)


def r1_penalty(d, real_batch, cond, gamma):
    """(gamma / 2) * batch-mean of |d(sum D(x)) / dx|^2 at real inputs."""
    if isinstance(real_batch, Tensor) and real_batch._fn is not None:
        raise ValueError("r1_penalty: input carries a generator graph; R1 is defined on real samples only")
    data = real_batch.data if isinstance(real_batch, Tensor) else np.asarray(real_batch)
    x = Tensor(data, requires_grad=True)
    return r1_from_logits(d(x, cond), x, gamma)


def r1_from_logits(logits, x, gamma):
    """R1 from logits already computed on the leaf input ``x``."""
    (g,) = T.grad(T.sum_(logits), [x], create_graph=True)
    return T.mul(T.sum_(T.square(g)), 0.5 * gamma / x.shape[0])


# -- differentiable augmentation -------------------------------------------------

POLICIES = ("translate", "dihedral")


def dihedral_grid(k: int, H: int, W: int) -> np.ndarray:
    """Flat source indices for D4 element ``k``: rotate k%4 quarter turns, then
    mirror left-right when k >= 4."""
    if not 0 <= k < 8:
        raise ValueError(f"dihedral element must be in [0, 8), got {k}")
    if k % 2 and H != W:
        raise ShapeError(f"quarter-turn rotation needs a square image, got {(H, W)}")
    idx = np.rot90(np.arange(H * W).reshape(H, W), k % 4)
    if k >= 4:
        idx = idx[:, ::-1]
    return np.ascontiguousarray(idx).reshape(-1)


def dihedral_inverse(k: int) -> int:
    return k if k >= 4 else (4 - k) % 4


def translate_grid(ty: int, tx: int, H: int, W: int) -> np.ndarray:
    """out[i, j] = x[clamp(i - ty), clamp(j - tx)] as flat source indices."""
    rows = np.clip(np.arange(H) - ty, 0, H - 1)
    cols = np.clip(np.arange(W) - tx, 0, W - 1)
    return (rows[:, None] * W + cols[None, :]).reshape(-1)


def augment_index(B, H, W, policy, rng):
    policy = tuple(policy)
    for p in policy:
        if p not in POLICIES:
            raise ValueError(f"unknown augmentation {p!r}; choose from {POLICIES}")
    index = np.empty((B, H * W), dtype=np.int64)
    for b in range(B):
        src = np.arange(H * W)
        if "translate" in policy:
            my, mx = H // 8, W // 8
            ty, tx = rng.integers(-my, my + 1), rng.integers(-mx, mx + 1)
            src = translate_grid(ty, tx, H, W)
        if "dihedral" in policy:
            k = int(rng.integers(0, 8))
            src = src[dihedral_grid(k, H, W)]
        index[b] = src
    return index


def diffaug(x, policy, rng):
    """Random edge-clamped translation then a random D4 element, per image."""
    x = T.as_tensor(x)
    B, _, H, W = x.shape
    index = augment_index(B, H, W, policy, rng)
    if not policy:
        return x
    return T.gather(x, index)


def symmetry_penalty(template):
    """Mean squared difference to the left-right mirror image."""
    t = T.as_tensor(template)
    B, _, H, W = t.shape
    idx = np.broadcast_to(dihedral_grid(4, H, W), (B, H * W))
    return T.mean(T.square(T.sub(t, T.gather(t, idx))))


def total_generator_loss(lncc, reg, gan, w: LossWeights, symmetry=None):
    total = T.add(T.as_tensor(lncc), T.as_tensor(reg))
    if w.lambda_gan > 0 and gan is not None:
        total = T.add(total, T.mul(gan, w.lambda_gan))
    if w.symmetry_weight > 0 and symmetry is not None:
        total = T.add(total, T.mul(symmetry, w.symmetry_weight))
    return total
