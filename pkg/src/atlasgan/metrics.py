"""Template evaluation: EFC sharpness, Dice, Jacobian statistics, deformation
norms, majority-vote template segmentation and volume trends."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .tensor import Tensor, no_grad

EFC_EPS = 1e-16


def _np(x, dtype=np.float64):
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=dtype)


def efc(image, mask) -> float:
    """Entropy focus criterion normalised by its maximum-entropy value, in (0, 1]."""
    img = _np(image)
    m = np.asarray(mask).astype(bool)
    if img.shape != m.shape:
        img = img.reshape(m.shape)
    x = img[m]
    if x.size == 0:
        raise ValueError("efc: empty mask")
    if x.min() < 0:
        x = x - x.min()
    bmax = np.sqrt(np.sum(x * x))
    if bmax == 0:
        raise ValueError("efc: masked region is all zero")
    n = x.size
    if n == 1:
        return 0.0
    p = x / bmax
    e = -np.sum(p * np.log(p + EFC_EPS))
    emax = np.sqrt(n) * np.log(np.sqrt(n))
    return float(e / emax)


def dice(a, b, labels=None):
    """Per-label Dice (label 0 excluded) and the mean over labels present in either map."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"dice: shapes {a.shape} and {b.shape} differ")
    if labels is not None:
        vocab = set(int(v) for v in labels)
        extra = (set(np.unique(a).tolist()) | set(np.unique(b).tolist())) - vocab
        if extra:
            raise ValueError(f"dice: labels {sorted(extra)} not in vocabulary {sorted(vocab)}")
    else:
        vocab = set(np.unique(a).tolist()) | set(np.unique(b).tolist())
    per = {}
    for lab in sorted(vocab):
        if lab == 0:
            continue
        A, B = a == lab, b == lab
        s = A.sum() + B.sum()
        if s == 0:
            continue
        per[int(lab)] = 2.0 * np.logical_and(A, B).sum() / s
    mean = float(np.mean(list(per.values()))) if per else float("nan")
    return per, mean


def jacobian_stats(u_full, margin=1):
    """Mean det(I + grad u) and folding fraction (det <= 0) over interior pixels."""
    det = geometry.jacobian_determinant(u_full)
    if margin:
        det = det[..., margin:-margin, margin:-margin]
    return float(det.mean()), float(np.mean(det <= 0))


def deformation_norm(u_full) -> float:
    u = _np(u_full)
    return float(np.sqrt(np.sum(u * u)))


def moving_def_norm(hist) -> float:
    """Norm of the cumulative per-pixel mean displacement kept by the trainer."""
    mf = getattr(hist, "mean_field", hist)
    if mf is None or getattr(hist, "count", 1) == 0:
        raise ValueError("moving_def_norm: no iterations recorded")
    return deformation_norm(mf)


def majority_vote(label_maps):
    """Per-pixel mode over a stack (N, H, W); ties resolve to the lowest label."""
    L = np.asarray(label_maps)
    if L.shape[0] == 0:
        raise ValueError("majority_vote: no label maps")
    labels = np.unique(L)
    counts = np.stack([(L == lab).sum(axis=0) for lab in labels])
    return labels[np.argmax(counts, axis=0)]  # argmax returns the first maximum


def template_segmentation(template, images, labels, reg_net, batch=8):
    """Warp training label maps into template space along the inverse maps and vote."""
    images = _np(images, np.float32)
    labels = np.asarray(labels)
    if images.shape[0] == 0:
        raise ValueError("template_segmentation: empty image selection")
    t = _np(template, np.float32).reshape(1, 1, *images.shape[-2:])
    warped = []
    with no_grad():
        for s in range(0, images.shape[0], batch):
            fixed = images[s:s + batch].reshape(-1, 1, *images.shape[-2:])
            tb = np.repeat(t, fixed.shape[0], axis=0)
            v = reg_net.velocity(Tensor(tb), Tensor(fixed))
            u_inv = reg_net.inverse_displacement(v, fixed.shape[-2:])
            warped.append(geometry.warp_labels(labels[s:s + batch], u_inv))
    return majority_vote(np.concatenate(warped))


def label_areas(label_map, labels=(1, 2)):
    L = np.asarray(label_map)
    return {lab: int((L == lab).sum()) for lab in labels}


def volume_trend(conditions, segmentations, labels=(1, 2), path=None):
    """Rows of (condition..., per-label pixel count); optionally written as CSV."""
    rows = []
    for cond, seg in zip(conditions, segmentations):
        areas = label_areas(seg, labels)
        rows.append(tuple(cond) + tuple(areas[lab] for lab in labels))
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["age", "cohort"] + [f"label_{lab}" for lab in labels])
            w.writerows(rows)
    return rows


def fit_slope(x, y) -> float:
    """Least-squares slope of y against x."""
    return float(np.polyfit(np.asarray(x, float), np.asarray(y, float), 1)[0])


EVAL_HEADER = ("condition_age", "condition_cohort", "dice_mean", "efc", "mean_jac", "fold_frac", "def_norm")


@dataclass
class EvalRow:
    condition_age: float
    condition_cohort: str
    dice_mean: float
    efc: float
    mean_jac: float
    fold_frac: float
    def_norm: float

    def as_tuple(self):
        return tuple(getattr(self, k) for k in EVAL_HEADER)


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    dice_per_label: dict = field(default_factory=dict)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(EVAL_HEADER)
            for r in self.rows:
                w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in r.as_tuple()])

    def summary(self):
        if not self.rows:
            return {}
        keys = ("dice_mean", "efc", "mean_jac", "fold_frac", "def_norm")
        return {k: float(np.mean([getattr(r, k) for r in self.rows])) for k in keys}
