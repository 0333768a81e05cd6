"""Alternating two-time-scale training of template generator + registration
network against the patch discriminator, with checkpointing and evaluation."""
from __future__ import annotations

import copy
import csv
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import geometry, io, metrics
from . import objectives as O
from . import tensor as T
from .io import RunConfig
from .networks import (ConditionVector, Discriminator, RegistrationNet, TemplateGenerator,
                       age_cohort_schema, encode_conditions)
from .synthdata import Dataset, make_sampler
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

FILM_DECAY = 1e-5
MAX_CONSECUTIVE_INCIDENTS = 10
SAMPLER_BIN_WIDTH = 4.5


class NumericFailure(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    def __init__(self, name, detail):
        super().__init__(f"checkpoint tensor {name!r}: {detail}")
        self.name = name


# -- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    eta: float
    beta1: float
    beta2: float
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    incidents: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, decay: dict | None = None) -> bool:
    """Bias-corrected Adam with decoupled weight decay for names in ``decay``.

    Returns False (and counts an incident) when any gradient is non-finite; no
    parameter or moment is touched in that case.
    """
    decay = decay or {}
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"adam_step: gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            state.incidents += 1
            return False
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        g = g.astype(p.data.dtype)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        upd = (m / c1) / (np.sqrt(v / c2) + state.eps)
        wd = decay.get(name, 0.0)
        if wd:
            upd = upd + wd * p.data
        p.data = (p.data - state.eta * upd).astype(p.data.dtype)
    return True


# -- model bundle ---------------------------------------------------------------

def _rng(seed, key):
    return np.random.default_rng([seed, 7919, key])


class AtlasModel:
    """Template generator, registration network and discriminator sharing one schema."""

    def __init__(self, cfg: RunConfig, average, mask, cohorts=("A", "B"), zero_embeddings=False):
        self.cfg = cfg
        self.conditional = cfg.mode == "conditional"
        self.schema = age_cohort_schema(cfg.age_max, cohorts)
        w, s = cfg.widths, cfg.seed
        z_dim = self.schema.dim if self.conditional else None
        self.gen = TemplateGenerator(average, mask, _rng(s, 1), width=w, c0=max(w // 2, 1), z_dim=z_dim,
                                     film_rng=_rng(s, 4))
        self.reg = RegistrationNet(_rng(s, 2), width=w, steps=cfg.integration_steps)
        n_cat = self.schema.n_cat if self.conditional else 0
        n_con = self.schema.n_con if self.conditional else 0
        self.disc = Discriminator(_rng(s, 3), base=w, n_cat=n_cat, n_con=n_con)
        if self.conditional and not zero_embeddings:
            self.disc.head.init_embeddings(_rng(s, 5))

    def networks(self):
        return {"gen": self.gen, "reg": self.reg, "disc": self.disc}

    def params(self, which):
        return {f"{which}.{n}": p for n, p in self.networks()[which].named_parameters()}

    def generator_params(self):
        return {**self.params("gen"), **self.params("reg")}

    def conditions(self, ages, cohorts) -> ConditionVector | None:
        if not self.conditional:
            return None
        return encode_conditions([{"age": a, "cohort": c} for a, c in zip(ages, cohorts)], self.schema)

    def template(self, cond: ConditionVector | None, batch=1):
        if self.conditional:
            return self.gen(cond)
        return self.gen(batch=batch)

    def sample_template(self, age=None, cohort=None) -> np.ndarray:
        with no_grad():
            cond = self.conditions([age], [cohort]) if self.conditional else None
            return self.template(cond).data[0, 0]

    def register(self, template, fixed):
        with no_grad():
            return self.reg(Tensor(template), Tensor(fixed))


def concat_conditions(a: ConditionVector | None, b: ConditionVector | None):
    if a is None:
        return None
    return ConditionVector(np.concatenate([a.y_con, b.y_con]), np.concatenate([a.y_cat, b.y_cat]), a.schema)


# -- trainer -------------------------------------------------------------------

def _rng_state(g: np.random.Generator) -> np.ndarray:
    st = g.bit_generator.state
    s, inc = st["state"]["state"], st["state"]["inc"]
    m = (1 << 64) - 1
    return np.array([s >> 64, s & m, inc >> 64, inc & m, st["has_uint32"], st["uinteger"]], dtype=np.uint64)


def _set_rng_state(g: np.random.Generator, arr):
    a = [int(x) for x in np.asarray(arr, dtype=np.uint64)]
    g.bit_generator.state = {"bit_generator": "PCG64",
                             "state": {"state": (a[0] << 64) | a[1], "inc": (a[2] << 64) | a[3]},
                             "has_uint32": a[4], "uinteger": a[5]}


class Trainer:
    """Owns all mutable training state for one run.

    ``freeze`` lists parameter-name prefixes (e.g. ``"disc."``) excluded from
    updates; ``zero_conditioning`` starts with zero projection embeddings.
    """

    def __init__(self, cfg: RunConfig, dataset: Dataset, freeze=(), zero_conditioning=False,
                 out_dir=None, write_logs=True):
        self.cfg = cfg
        self.data = dataset
        self.weights = O.LossWeights(cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.lambda_gan, cfg.r1_gamma,
                                     cfg.symmetry_weight)
        if cfg.mode == "conditional" and not cfg.eta_d > cfg.eta_g:
            log.warning("conditional mode expects eta_d > eta_g (got %g, %g)", cfg.eta_d, cfg.eta_g)
        cohorts = tuple(dataset.config.cohorts)
        self.model = AtlasModel(cfg, dataset.average, dataset.mask, cohorts, zero_embeddings=zero_conditioning)
        self.freeze = tuple(freeze)
        self.train_set = dataset.split("train")
        if not self.train_set:
            raise ValueError("training split is empty")
        self.val_set = dataset.split("val")
        self._images = np.stack([r.image for r in self.train_set])[:, None].astype(np.float32)
        self._ages = np.array([r.age for r in self.train_set])
        self._cohorts = [r.cohort for r in self.train_set]
        self.sampler = make_sampler(self.train_set, SAMPLER_BIN_WIDTH)
        self.rng_d = np.random.default_rng([cfg.seed, 101])
        self.rng_g = np.random.default_rng([cfg.seed, 202])
        self.opt_g = AdamState(cfg.eta_g, cfg.beta1, cfg.beta2)
        self.opt_d = AdamState(cfg.eta_d, cfg.beta1, cfg.beta2)
        self.history = O.DeformationHistory(2, cfg.history_window)
        self.iteration = 0
        self.incidents = 0
        self.consecutive = 0
        self.log_rows: list[dict] = []
        self.out_dir = out_dir
        self.write_logs = write_logs and out_dir is not None
        if self.write_logs:
            os.makedirs(out_dir, exist_ok=True)

    # -- parameter groups --------------------------------------------------------
    def _trainable(self, params):
        return {n: p for n, p in params.items() if not n.startswith(self.freeze)}

    def _decay_map(self, params):
        return {n: FILM_DECAY for n in params if n.startswith("gen.film.proj")}

    # -- one iteration ---------------------------------------------------------------
    def _batch(self, rng):
        idx = self.sampler.draw(self.cfg.batch, rng)
        cond = self.model.conditions(self._ages[idx], [self._cohorts[i] for i in idx])
        return self._images[idx], cond

    def _d_step(self):
        m, cfg, rng = self.model, self.cfg, self.rng_d
        real, cond_real = self._batch(rng)
        fixed, cond_fixed = self._batch(rng)
        m.disc.train()
        with no_grad():
            template = m.template(cond_fixed, batch=cfg.batch)
            _, _, moved = m.reg(template, Tensor(fixed))
        real_aug = O.diffaug(Tensor(real), cfg.policy, rng).data
        fake_aug = O.diffaug(moved, cfg.policy, rng)
        real_x = Tensor(real_aug, requires_grad=True)
        # one discriminator pass over [real; fake] so power iteration advances once per step
        both = m.disc(T.concat([real_x, fake_aug], axis=0), concat_conditions(cond_real, cond_fixed))
        B = real_aug.shape[0]
        real_logits = T.slice_axis(both, 0, 0, B)
        fake_logits = T.slice_axis(both, 0, B, 2 * B)
        loss_gan, _ = O.lsgan_losses(real_logits, fake_logits)
        r1 = O.r1_from_logits(real_logits, real_x, self.weights.r1_gamma)
        loss = T.add(loss_gan, r1)
        params = self._trainable(m.params("disc"))
        grads = T.backprop(loss, params) if params else {}
        return loss, grads, params, {"loss_d": float(loss_gan.data), "r1": float(r1.data)}

    def _g_step(self):
        m, cfg, w = self.model, self.cfg, self.weights
        fixed, cond = self._batch(self.rng_g)
        m.disc.eval()
        template = m.template(cond, batch=cfg.batch)
        v, u, moved = m.reg(template, Tensor(fixed))
        lncc = O.lncc_loss(moved, Tensor(fixed), cfg.lncc_window)
        reg = O.deformation_regularizer(u, self.history, w, cfg.reg_reduction)
        gan = None
        if w.lambda_gan > 0:
            logits = m.disc(O.diffaug(moved, cfg.policy, self.rng_g), cond)
            gan = O.lsgan_generator_loss(logits)
        sym = O.symmetry_penalty(template) if w.symmetry_weight > 0 else None
        total = O.total_generator_loss(lncc, reg, gan, w, sym)
        params = self._trainable(m.generator_params())
        grads = T.backprop(total, params)
        parts = {"loss_g": float(total.data), "lncc": float(lncc.data), "reg": float(reg.data),
                 "gan_g": float(gan.data) if gan is not None else 0.0}
        return total, grads, params, parts, u

    def _snapshot(self):
        m = self.model
        return ({n: p.data.copy() for n, p in {**m.generator_params(), **m.params("disc")}.items()},
                {k: dict(net.named_buffers()) for k, net in m.networks().items()},
                copy.deepcopy(self.opt_g), copy.deepcopy(self.opt_d))

    def _restore(self, snap):
        pdata, buffers, og, od = snap
        for n, p in {**self.model.generator_params(), **self.model.params("disc")}.items():
            p.data = pdata[n]
        for k, net in self.model.networks().items():
            for name, val in buffers[k].items():
                net.set_buffer(name, val)
        self.opt_g, self.opt_d = og, od

    def _incident(self, what):
        self.incidents += 1
        self.consecutive += 1
        log.warning("iteration %d: non-finite %s; state rolled back", self.iteration, what)
        if self.consecutive >= MAX_CONSECUTIVE_INCIDENTS:
            raise NumericFailure(f"{self.consecutive} consecutive non-finite iterations")

    def train_iteration(self) -> dict | None:
        snap = self._snapshot()
        row = {"iter": self.iteration}
        if self._trainable(self.model.params("disc")):
            try:
                loss_d, grads_d, params_d, parts_d = self._d_step()
            except geometry.NonFiniteField:
                loss_d = Tensor(np.nan)
            if not np.isfinite(loss_d.data) or not adam_step(params_d, grads_d, self.opt_d):
                self._restore(snap)
                self._incident("discriminator loss")
                self.iteration += 1
                return None
            row.update(parts_d)
        else:
            row.update(loss_d=0.0, r1=0.0)
        try:
            total, grads_g, params_g, parts_g, u = self._g_step()
        except geometry.NonFiniteField:
            total = Tensor(np.nan)
        if not np.isfinite(total.data) or not adam_step(params_g, grads_g, self.opt_g, self._decay_map(params_g)):
            self._restore(snap)
            self._incident("generator loss")
            self.iteration += 1
            return None
        self.history.push(O.spatial_mean(u).data)
        self.history.accumulate(u.data)
        self.consecutive = 0
        row.update(parts_g)
        self.iteration += 1
        self.log_rows.append(row)
        if self.write_logs:
            self._append_csv("losses.csv", row)
        return row

    def run(self, iters=None, callback=None):
        target = self.cfg.iters if iters is None else iters
        t0 = time.time()
        while self.iteration < target:
            row = self.train_iteration()
            if self.out_dir and self.cfg.eval_interval and self.iteration % self.cfg.eval_interval == 0:
                self.evaluate(write=True)
            if self.out_dir and self.cfg.checkpoint_interval and self.iteration % self.cfg.checkpoint_interval == 0:
                self.save(os.path.join(self.out_dir, "checkpoint.atgc"))
            if callback is not None:
                callback(self, row)
        log.info("trained to iteration %d in %.1fs", self.iteration, time.time() - t0)
        return self.log_rows

    # -- evaluation -----------------------------------------------------------------
    def evaluate(self, records=None, write=False, max_images=None) -> dict:
        records = self.val_set if records is None else records
        records = records[:max_images] if max_images else records
        out = {"iter": self.iteration}
        if records:
            lnccs, jacs, folds, norms = [], [], [], []
            for r in records:
                tmpl = self.model.sample_template(r.age, r.cohort)
                _, u, moved = self.model.register(tmpl[None, None], r.image[None, None])
                lnccs.append(float(O.lncc_loss(moved, Tensor(r.image[None, None]), self.cfg.lncc_window).data))
                mj, ff = metrics.jacobian_stats(u.data[0])
                jacs.append(mj)
                folds.append(ff)
                norms.append(metrics.deformation_norm(u.data[0]))
            out.update(val_lncc=float(np.mean(lnccs)), mean_jac=float(np.mean(jacs)),
                       fold_frac=float(np.mean(folds)), def_norm=float(np.mean(norms)))
        if self.history.count:
            out["mov_def_norm"] = metrics.moving_def_norm(self.history)
        if write and self.out_dir:
            self._append_csv("metrics.csv", out)
            snap_dir = os.path.join(self.out_dir, "snapshots")
            os.makedirs(snap_dir, exist_ok=True)
            for age, coh in self.snapshot_conditions():
                tag = f"age{age:g}_{coh}" if coh is not None else "template"
                io.export_pgm(self.model.sample_template(age, coh),
                              os.path.join(snap_dir, f"it{self.iteration:06d}_{tag}.pgm"))
        return out

    def snapshot_conditions(self):
        if not self.model.conditional:
            return [(None, None)]
        ages = (self.data.config.age_min, 0.5 * (self.data.config.age_min + self.cfg.age_max), self.cfg.age_max)
        return [(a, c) for c in self.model.schema.categorical[0].categories for a in ages]

    def _append_csv(self, name, row):
        path = os.path.join(self.out_dir, name)
        new = not os.path.exists(path)
        with open(path, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            if new:
                w.writeheader()
            w.writerow(row)

    # -- checkpointing ------------------------------------------------------------
    def state_entries(self) -> dict:
        m = self.model
        e = {}
        for k, net in m.networks().items():
            for n, p in net.named_parameters():
                e[f"param/{k}.{n}"] = p.data
            for n, b in net.named_buffers():
                e[f"buffer/{k}.{n}"] = b
        for tag, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            e[f"{tag}/step"] = io.pack_u32([opt.step, opt.incidents])
            e[f"{tag}/hyper"] = io.pack_f64([opt.eta, opt.beta1, opt.beta2, opt.eps])
            for n in sorted(opt.m):
                e[f"{tag}/m/{n}"] = opt.m[n]
                e[f"{tag}/v/{n}"] = opt.v[n]
        h = self.history
        e["history/entries"] = h.past(h.capacity).reshape(-1, h.ndim)
        e["history/count"] = io.pack_u64([h.count])
        if h.mean_field is not None:
            e["history/mean_field"] = io.pack_f64(h.mean_field)
        e["rng/d"] = io.pack_u64(_rng_state(self.rng_d))
        e["rng/g"] = io.pack_u64(_rng_state(self.rng_g))
        e["meta/counters"] = io.pack_u64([self.iteration, self.incidents, self.consecutive])
        e["meta/arch"] = io.pack_u32([self.cfg.widths, self.cfg.image_size, int(m.conditional),
                                      self.cfg.integration_steps])
        e["meta/age_max"] = io.pack_f64([self.cfg.age_max])
        e["data/average"] = m.gen.average[0, 0]
        e["data/mask"] = m.gen.mask[0, 0]
        return e

    def save(self, path):
        io.write_checkpoint(path, self.state_entries())

    def load_entries(self, e: dict):
        m = self.model
        for k, net in m.networks().items():
            for n, p in net.named_parameters():
                key = f"param/{k}.{n}"
                if key not in e:
                    raise CheckpointMismatch(key, "missing from checkpoint")
                if e[key].shape != p.shape:
                    raise CheckpointMismatch(key, f"shape {e[key].shape} does not match model {p.shape}")
            for n, b in net.named_buffers():
                key = f"buffer/{k}.{n}"
                if key not in e or e[key].shape != b.shape:
                    raise CheckpointMismatch(key, "missing or mismatched buffer")
        for k, net in m.networks().items():
            for n, p in net.named_parameters():
                p.data = e[f"param/{k}.{n}"].copy()
            for n, _ in list(net.named_buffers()):
                net.set_buffer(n, e[f"buffer/{k}.{n}"])
        for tag, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            opt.step, opt.incidents = (int(x) for x in io.unpack_u32(e[f"{tag}/step"]))
            opt.eta, opt.beta1, opt.beta2, opt.eps = (float(x) for x in io.unpack_f64(e[f"{tag}/hyper"]))
            opt.m, opt.v = {}, {}
            pre_m, pre_v = f"{tag}/m/", f"{tag}/v/"
            for key, val in e.items():
                if key.startswith(pre_m):
                    opt.m[key[len(pre_m):]] = val.copy()
                elif key.startswith(pre_v):
                    opt.v[key[len(pre_v):]] = val.copy()
        mf = io.unpack_f64(e["history/mean_field"]).reshape(2, *m.gen.average.shape[-2:]) \
            if "history/mean_field" in e else None
        self.history.load(list(e["history/entries"]), mf, int(io.unpack_u64(e["history/count"])[0]))
        _set_rng_state(self.rng_d, io.unpack_u64(e["rng/d"]))
        _set_rng_state(self.rng_g, io.unpack_u64(e["rng/g"]))
        self.iteration, self.incidents, self.consecutive = (int(x) for x in io.unpack_u64(e["meta/counters"]))

    def load(self, path):
        self.load_entries(io.read_checkpoint(path))


def load_model(path, cohorts=("A", "B")) -> AtlasModel:
    """Rebuild an ``AtlasModel`` for inference from a checkpoint alone."""
    e = io.read_checkpoint(path)
    widths, size, cond, steps = (int(x) for x in io.unpack_u32(e["meta/arch"]))
    age_max = float(io.unpack_f64(e["meta/age_max"])[0])
    cfg = RunConfig(mode="conditional" if cond else "unconditional", widths=widths, image_size=size,
                    integration_steps=steps, age_max=age_max)
    model = AtlasModel(cfg, e["data/average"], e["data/mask"], cohorts)
    for k, net in model.networks().items():
        for n, p in net.named_parameters():
            key = f"param/{k}.{n}"
            if key not in e or e[key].shape != p.shape:
                raise CheckpointMismatch(key, "missing or mismatched")
            p.data = e[key].copy()
        for n, _ in list(net.named_buffers()):
            net.set_buffer(n, e[f"buffer/{k}.{n}"])
    model.gen.eval()
    model.reg.eval()
    model.disc.eval()
    return model
