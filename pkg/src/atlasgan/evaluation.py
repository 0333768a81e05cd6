"""Checkpoint-level evaluation: per-record reports and the condition-grid
trend study used to compare learned templates against the synthetic ground
truth."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry, metrics, synthdata
from .synthdata import BODY, HOLE

DEFAULT_AGES = tuple(np.linspace(2.0, 38.0, 9))
BIN_HALFWIDTH = 2.25


def _pool(train, cohort, age, halfwidth, conditional):
    if not conditional:
        return train
    sel = [r for r in train if r.cohort == cohort and abs(r.age - age) <= halfwidth]
    return sel or [r for r in train if r.cohort == cohort] or train


def template_labels(model, template, pool):
    return metrics.template_segmentation(template, np.stack([r.image for r in pool]),
                                         np.stack([r.labels for r in pool]), model.reg)


def evaluate_checkpoint(model, ds, split="test", bin_halfwidth=BIN_HALFWIDTH, max_records=None):
    """Per-record rows: Dice of the forward-warped template segmentation, EFC of
    the template inside the foreground mask, Jacobian statistics, |u|."""
    train = ds.split("train")
    recs = ds.split(split) or ds.records
    recs = recs[:max_records] if max_records else recs
    mask = model.gen.mask[0, 0] > 0
    report = metrics.EvalReport()
    seg_cache = {}
    for r in recs:
        key = (round(float(r.age), 1), r.cohort) if model.conditional else None
        t = model.sample_template(r.age, r.cohort) if model.conditional else model.sample_template()
        if key not in seg_cache:
            seg_cache[key] = template_labels(model, t, _pool(train, r.cohort, r.age, bin_halfwidth,
                                                             model.conditional))
        _, u, _ = model.register(t[None, None], r.image[None, None])
        warped = geometry.warp_labels(seg_cache[key][None], u.data)[0]
        dmean = metrics.dice(warped, r.labels)[1] if r.labels is not None else float("nan")
        mj, ff = metrics.jacobian_stats(u.data[0])
        report.rows.append(metrics.EvalRow(float(r.age), r.cohort, dmean, metrics.efc(t, mask), mj, ff,
                                           metrics.deformation_norm(u.data[0])))
    return report


@dataclass
class TrendStudy:
    rows: list = field(default_factory=list)  # dicts per (age, cohort)

    def column(self, name, cohort=None):
        return np.array([r[name] for r in self.rows if cohort is None or r["cohort"] == cohort])

    def slope(self, name, cohort):
        return metrics.fit_slope(self.column("age", cohort), self.column(name, cohort))


def trend_study(model, ds, ages=DEFAULT_AGES, cohorts=None, bin_halfwidth=BIN_HALFWIDTH, csv_path=None):
    """Sample templates on an age x cohort grid, segment each by majority vote
    over same-cohort training images within ``bin_halfwidth`` of the age, and
    tabulate label areas next to the analytic areas."""
    cfg = ds.config
    cohorts = tuple(cohorts or cfg.cohorts)
    train = ds.split("train")
    mask = model.gen.mask[0, 0] > 0
    study = TrendStudy()
    segs, conds = [], []
    for c in cohorts:
        for a in ages:
            t = model.sample_template(float(a), c)
            seg = template_labels(model, t, _pool(train, c, a, bin_halfwidth, model.conditional))
            gt = synthdata.ground_truth_area(float(a), c, cfg)
            areas = metrics.label_areas(seg, (BODY, HOLE))
            study.rows.append({"age": float(a), "cohort": c, "body": areas[BODY], "hole": areas[HOLE],
                               "foreground": areas[BODY] + areas[HOLE], "gt_body": gt[BODY],
                               "gt_hole": gt[HOLE], "gt_foreground": gt[BODY] + gt[HOLE],
                               "efc": metrics.efc(t, mask)})
            segs.append(seg)
            conds.append((float(a), c))
    if csv_path is not None:
        metrics.volume_trend(conds, segs, (BODY, HOLE), csv_path)
    return study


def heldout_registration(model, records):
    """Mean |J|, folding fraction and deformation norm per held-out record."""
    out = []
    for r in records:
        t = model.sample_template(r.age, r.cohort) if model.conditional else model.sample_template()
        _, u, _ = model.register(t[None, None], r.image[None, None])
        mj, ff = metrics.jacobian_stats(u.data[0])
        out.append((mj, ff, metrics.deformation_norm(u.data[0])))
    return np.array(out)
