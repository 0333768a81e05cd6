"""Command line: synth, train, template, register, eval, gradcheck.

Exit status: 0 success, 1 usage, 2 I/O, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import evaluation, io, metrics, synthdata
from .gradcheck import run_suite

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("atlasgan")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _synth_config(cfg: io.RunConfig) -> synthdata.SynthConfig:
    # lengths are defined for 64x64 frames and scaled with the image size
    d = synthdata.SynthConfig()
    f = cfg.image_size / d.size
    return synthdata.SynthConfig(size=cfg.image_size, n_samples=cfg.n_samples, age_max=cfg.age_max,
                                 seed=cfg.seed, r0=d.r0 * f, k=d.k * f, hole_r0=d.hole_r0 * f,
                                 hole_k=d.hole_k * f, warp_max=d.warp_max * f, warp_sigma=d.warp_sigma * f)


def _load_dataset(cfg: io.RunConfig):
    if cfg.data_manifest:
        ds = synthdata.read_manifest(cfg.data_manifest)
        ds.config = synthdata.SynthConfig(size=ds.records[0].image.shape[-1], n_samples=len(ds.records),
                                          cohorts=tuple(sorted({r.cohort for r in ds.records})),
                                          age_max=cfg.age_max)
        return ds
    return synthdata.generate_dataset(_synth_config(cfg))


def _stem(path):
    root, ext = os.path.splitext(path)
    return root if ext in (".atgt", ".pgm") else path


def cmd_synth(a):
    cfg = io.read_config(a.config) if a.config else io.RunConfig()
    ds = synthdata.generate_dataset(_synth_config(cfg))
    path = synthdata.write_dataset(ds, a.out)
    print(f"wrote {len(ds.records)} samples and {path}")


def cmd_train(a):
    from .trainer import Trainer

    cfg = io.read_config(a.config)
    out = a.out or cfg.out_dir
    ds = _load_dataset(cfg)
    tr = Trainer(cfg, ds, out_dir=out)
    if a.resume:
        tr.load(a.resume)
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(io.format_config(cfg))
    tr.run()
    tr.save(os.path.join(out, "checkpoint.atgc"))
    ev = tr.evaluate(write=True)
    print(f"trained {tr.iteration} iterations; incidents={tr.incidents}; eval={ev}")


def _condition_args(model, age, cohort):
    if not model.conditional:
        return None, None
    if age is None or cohort is None:
        raise UsageError("conditional checkpoint needs --age and --cohort")
    cats = model.schema.categorical[0].categories
    if cohort not in cats:
        raise UsageError(f"unknown cohort {cohort!r}; expected one of {list(cats)}")
    amax = model.schema.continuous[0].maximum
    if not 0 <= age <= amax:
        print(f"warning: age {age} outside the training range [0, {amax:g}]; template is an extrapolation",
              file=sys.stderr)
    return age, cohort


def _template(model, age, cohort):
    from .networks import encode_conditions
    from .tensor import no_grad

    if not model.conditional:
        return model.sample_template()
    z = encode_conditions({"age": age, "cohort": cohort}, model.schema, allow_extrapolation=True)
    with no_grad():
        return model.gen(z).data[0, 0]


def cmd_template(a):
    from .trainer import load_model

    model = load_model(a.checkpoint)
    age, cohort = _condition_args(model, a.age, a.cohort)
    t = _template(model, age, cohort)
    stem = _stem(a.out)
    io.write_tensor(stem + ".atgt", t)
    io.export_pgm(t, stem + ".pgm")
    print(f"wrote {stem}.atgt and {stem}.pgm")


def cmd_register(a):
    from .trainer import load_model

    model = load_model(a.checkpoint)
    age, cohort = _condition_args(model, a.age, a.cohort)
    fixed = io.read_tensor(a.fixed)
    if fixed.ndim != 2:
        raise UsageError(f"--fixed must hold a 2D image, got shape {fixed.shape}")
    t = _template(model, age, cohort)
    _, u, moved = model.register(t[None, None], fixed[None, None])
    stem = _stem(a.out)
    io.write_tensor(stem + "_moved.atgt", moved.data[0, 0])
    io.write_tensor(stem + "_u.atgt", u.data[0])
    mj, ff = metrics.jacobian_stats(u.data[0])
    print(f"wrote {stem}_moved.atgt and {stem}_u.atgt; mean |J|={mj:.4f} folding={ff:.4%}")


def cmd_eval(a):
    from .trainer import load_model

    ds = synthdata.read_manifest(a.manifest)
    cohorts = tuple(sorted({r.cohort for r in ds.records}))
    model = load_model(a.checkpoint, cohorts)
    report = evaluation.evaluate_checkpoint(model, ds, a.split)
    report.write_csv(a.out)
    print(f"wrote {len(report.rows)} rows to {a.out}; means {report.summary()}")


def cmd_gradcheck(a):
    results = run_suite(seed=a.seed, verbose=True, stream=sys.stdout)
    bad = [r for r in results if not r.ok]
    print(f"{len(results) - len(bad)}/{len(results)} checks passed")
    if bad:
        raise FloatingPointError(f"{len(bad)} gradient checks failed: {', '.join(r.name for r in bad)}")


def build_parser():
    p = _Parser(prog="atlasgan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", parser_class=_Parser)
    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)
    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(fn=cmd_train)
    s = sub.add_parser("template", help="sample a template")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--age", type=float)
    s.add_argument("--cohort")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_template)
    s = sub.add_parser("register", help="register a template to an image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--fixed", required=True)
    s.add_argument("--age", type=float)
    s.add_argument("--cohort")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_register)
    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)
    s = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    from .io import ConfigError, FormatError
    from .trainer import CheckpointMismatch, NumericFailure

    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "fn", None):
            raise UsageError("missing subcommand")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.fn(args)
        return EXIT_OK
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, CheckpointMismatch) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NumericFailure, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
