"""Synthetic conditional population with analytically known shape growth.

Each sample is a disc whose radius grows linearly with age; cohort B carries an
inner hole that also grows.  A random smooth diffeomorphic warp, noise and an
intensity jitter are applied per sample.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry
from .tensor import Tensor, no_grad

BACKGROUND, BODY, HOLE = 0, 1, 2
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SynthConfig:
    size: int = 64
    n_samples: int = 500
    age_min: float = 0.0
    age_max: float = 40.0
    cohorts: tuple = ("A", "B")
    r0: float = 10.0
    k: float = 0.25
    hole_r0: float = 3.0
    hole_k: float = 0.1
    warp_max: float = 2.0
    warp_sigma: float = 6.0
    noise: float = 0.02
    jitter: tuple = (0.9, 1.1)
    split_fractions: tuple = (0.8, 0.1, 0.1)
    mask_threshold: float = 0.05
    seed: int = 0

    def validate(self):
        if self.size < 16 or self.size % 16:
            raise ValueError(f"size must be a positive multiple of 16, got {self.size}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not self.age_max >= self.age_min >= 0:
            raise ValueError(f"bad age range [{self.age_min}, {self.age_max}]")
        if len(self.cohorts) < 1:
            raise ValueError("need at least one cohort")
        r_max = self.r0 + self.k * self.age_max
        if r_max + self.warp_max >= self.size / 2:
            raise ValueError(f"shape leaves the frame: r0 + k*age_max + warp_max = "
                             f"{r_max + self.warp_max:g} >= size/2 = {self.size / 2:g}")
        if min(self.r0, self.hole_r0) < 0 or min(self.k, self.hole_k) < 0:
            raise ValueError("radii and growth rates must be nonnegative")
        if self.hole_r0 + self.hole_k * self.age_max >= r_max and len(self.cohorts) > 1:
            raise ValueError("hole must stay inside the body")
        if self.noise < 0 or self.warp_max < 0 or self.jitter[0] <= 0 or self.jitter[1] < self.jitter[0]:
            raise ValueError("noise, warp magnitude and jitter must be nonnegative and ordered")
        if abs(sum(self.split_fractions) - 1) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        return self


@dataclass
class SampleRecord:
    image: np.ndarray  # (H, W) float32
    labels: np.ndarray  # (H, W) uint8
    age: float
    cohort: str
    split: str
    index: int = 0

    @property
    def attributes(self):
        return {"age": self.age, "cohort": self.cohort}


@dataclass
class Dataset:
    records: list
    average: np.ndarray
    mask: np.ndarray
    config: SynthConfig = field(repr=False)

    def split(self, name):
        return [r for r in self.records if r.split == name]


def radius(age, cfg):
    return cfg.r0 + cfg.k * age


def hole_radius(age, cfg):
    return cfg.hole_r0 + cfg.hole_k * age


def has_hole(cohort, cfg):
    return cfg.cohorts.index(cohort) > 0


def ground_truth_area(age, cohort, cfg: SynthConfig):
    """Expected pixel areas {BODY, HOLE} of the undeformed shape."""
    if not cfg.age_min <= age <= cfg.age_max:
        raise ValueError(f"age {age} outside [{cfg.age_min}, {cfg.age_max}]")
    if cohort not in cfg.cohorts:
        raise ValueError(f"unknown cohort {cohort!r}")
    hole = np.pi * hole_radius(age, cfg) ** 2 if has_hole(cohort, cfg) else 0.0
    return {BODY: np.pi * radius(age, cfg) ** 2 - hole, HOLE: hole}


def render(age, cohort, cfg: SynthConfig):
    """Undeformed (image, labels) for one condition."""
    n = cfg.size
    c = (n - 1) / 2.0
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    d = np.hypot(yy - c, xx - c)
    r = radius(age, cfg)
    body = np.clip(r - d + 0.5, 0.0, 1.0)
    # brighter core, darker rim
    img = body * (0.55 + 0.45 * np.clip(1 - (d / max(r, 1e-6)) ** 2, 0, 1))
    labels = np.where(d <= r, BODY, BACKGROUND).astype(np.uint8)
    if has_hole(cohort, cfg):
        rho = hole_radius(age, cfg)
        hole = np.clip(rho - d + 0.5, 0.0, 1.0)
        img = img * (1 - 0.85 * hole)
        labels[d <= rho] = HOLE
    return img.astype(np.float32), labels


def sample_ages(n, cfg, rng):
    """Triangular density peaked at age_min, falling to a third of the peak at
    age_max (draws beyond age_max are rejected)."""
    a0, a1 = cfg.age_min, cfg.age_max
    right = a1 + 0.5 * (a1 - a0)
    out = []
    while len(out) < n:
        a = rng.triangular(a0, a0, right) if right > a0 else a0
        if a <= a1:
            out.append(float(a))
    return np.array(out)


def _deform(img, labels, cfg, rng):
    if cfg.warp_max <= 0:
        return img, labels
    v = geometry.random_velocity(img.shape, cfg.warp_sigma, cfg.warp_max, rng)[None]
    with no_grad():
        u = geometry.integrate_svf(Tensor(v)).data
        moved = geometry.warp(Tensor(img[None, None]), Tensor(u)).data[0, 0]
    return moved, geometry.warp_labels(labels[None], u)[0].astype(np.uint8)


def generate_dataset(cfg: SynthConfig) -> Dataset:
    cfg.validate()
    root = np.random.default_rng([cfg.seed, 0])
    ages = sample_ages(cfg.n_samples, cfg, root)
    cohorts = root.integers(0, len(cfg.cohorts), size=cfg.n_samples)
    order = root.permutation(cfg.n_samples)
    n_train = int(round(cfg.split_fractions[0] * cfg.n_samples))
    n_val = int(round(cfg.split_fractions[1] * cfg.n_samples))
    split = np.empty(cfg.n_samples, dtype=object)
    split[order[:n_train]] = "train"
    split[order[n_train:n_train + n_val]] = "val"
    split[order[n_train + n_val:]] = "test"
    records = []
    for i in range(cfg.n_samples):
        rng = np.random.default_rng([cfg.seed, 1, i])
        coh = cfg.cohorts[cohorts[i]]
        img, lab = render(ages[i], coh, cfg)
        img, lab = _deform(img, lab, cfg, rng)
        gain = rng.uniform(*cfg.jitter)
        img = (gain * img + cfg.noise * rng.standard_normal(img.shape)).astype(np.float32)
        records.append(SampleRecord(img, lab, float(ages[i]), coh, str(split[i]), i))
    average, mask = linear_average(records, cfg.mask_threshold)
    return Dataset(records, average, mask, cfg)


def linear_average(records, threshold=0.05):
    train = [r.image for r in records if r.split == "train"] or [r.image for r in records]
    avg = np.mean(np.stack(train).astype(np.float64), axis=0).astype(np.float32)
    mask = (avg > threshold * avg.max()).astype(np.float32)
    return avg, mask


class Sampler:
    """Weighted sampling with replacement; weight of a record is 1 / (its bin count)."""

    def __init__(self, weights, bins):
        self.weights = weights
        self.bins = bins

    def draw(self, n, rng):
        return rng.choice(len(self.weights), size=n, replace=True, p=self.weights)


def make_sampler(records, bin_width: float) -> Sampler:
    ages = np.array([r.age if hasattr(r, "age") else float(r) for r in records], dtype=np.float64)
    if ages.size == 0:
        raise ValueError("make_sampler: empty dataset")
    if bin_width <= 0:
        raise ValueError("make_sampler: bin width must be positive")
    bins = np.floor((ages - ages.min()) / bin_width).astype(np.int64)
    _, inv, counts = np.unique(bins, return_inverse=True, return_counts=True)
    w = 1.0 / counts[inv]
    return Sampler(w / w.sum(), bins)


def with_overrides(cfg: SynthConfig, **kw) -> SynthConfig:
    return replace(cfg, **kw)


def write_dataset(ds: Dataset, out_dir):
    """Write image/label containers, the average and mask, and manifest.csv."""
    from . import io

    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for r in ds.records:
        name = f"sample_{r.index:04d}.atgt"
        io.write_tensor(os.path.join(out_dir, name), r.image)
        io.write_tensor(os.path.join(out_dir, f"sample_{r.index:04d}_labels.atgt"), r.labels.astype(np.float32))
        rows.append((name, f"{r.age:.6f}", r.cohort, r.split))
    io.write_tensor(os.path.join(out_dir, "average.atgt"), ds.average)
    io.write_tensor(os.path.join(out_dir, "mask.atgt"), ds.mask)
    path = os.path.join(out_dir, "manifest.csv")
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "age", "cohort", "split"])
        w.writerows(rows)
    os.replace(tmp, path)
    return path


def read_manifest(path, cfg: SynthConfig | None = None) -> Dataset:
    from . import io

    base = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.DictReader(fh)):
            img = io.read_tensor(os.path.join(base, row["path"]))
            stem = os.path.splitext(row["path"])[0]
            lab_path = os.path.join(base, stem + "_labels.atgt")
            lab = io.read_tensor(lab_path).astype(np.uint8) if os.path.exists(lab_path) else None
            records.append(SampleRecord(img, lab, float(row["age"]), row["cohort"], row["split"], i))
    avg_path, mask_path = os.path.join(base, "average.atgt"), os.path.join(base, "mask.atgt")
    if os.path.exists(avg_path) and os.path.exists(mask_path):
        average, mask = io.read_tensor(avg_path), io.read_tensor(mask_path)
    else:
        average, mask = linear_average(records)
    if cfg is None:
        cohorts = tuple(sorted({r.cohort for r in records}))
        cfg = SynthConfig(size=records[0].image.shape[-1], n_samples=len(records), cohorts=cohorts,
                          age_min=0.0, age_max=max(r.age for r in records))
    return Dataset(records, average, mask, cfg)
