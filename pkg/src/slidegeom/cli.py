"""Command-line entry point: synth / train / eval / heatmap / gradcheck.

Every command validates its full configuration before producing any output.
Exit codes are part of the interface: 0 success, 2 usage or validation
error, 3 I/O failure, 4 corrupt input data, 5 checkpoint/config
incompatibility (gradcheck returns 1 if any check fails).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import cohort as ch
from . import figures, gradcheck, heatmap, traineval
from .config import ConfigError, cohort_spec_from_config, config_hash, load_config
from .metrics import METRIC_NAMES, EvalReport, compute_metrics
from .model import AblationFlags, SubtypeModel

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_CORRUPT = 4
EXIT_INCOMPATIBLE = 5


def _add_config_args(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--slides-per-class", type=int, dest="slides_per_class")
    p.add_argument("--d", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--ablation", help="model letter A-F")


def _config_from_args(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    for key in ("seed", "classes", "slides_per_class", "d", "lr", "epochs",
                "folds", "batch_size", "ablation"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    return load_config(args.config, overrides)


def _load_cohort_checked(path, config):
    slides, info = ch.read_cohort(path)
    if info["d"] != config.d or info["classes"] != config.classes:
        raise ConfigError(
            f"cohort was generated with d={info['d']}, classes={info['classes']} "
            f"but the config says d={config.d}, classes={config.classes}")
    return slides


def _restore_model(config, ckpt_path):
    arrays, _ = ckpt.load_checkpoint(ckpt_path, expected_hash=config_hash(config))
    flags = AblationFlags.from_letter(config.ablation)
    model = SubtypeModel(config, flags, np.random.default_rng(0))
    model.load_state(arrays)
    return model, flags


def cmd_synth(args):
    config = _config_from_args(args)
    spec = cohort_spec_from_config(config)
    slides, manifest = ch.gen_cohort(spec)
    ch.write_cohort(args.out, slides, spec, manifest)
    size = os.path.getsize(args.out)
    digest = hashlib.sha256(open(args.out, "rb").read()).hexdigest()[:12]
    print(f"wrote {len(slides)} slides ({spec.classes} classes, d={spec.d}, seed {spec.seed}) "
          f"to {args.out} ({size} bytes, sha256 {digest})")
    return EXIT_OK


def cmd_train(args):
    config = _config_from_args(args)
    flags = AblationFlags.from_letter(config.ablation)
    slides = _load_cohort_checked(args.cohort, config)
    report = traineval.monte_carlo_cv(slides, config, flags, out_dir=args.out_dir)
    summary = report.summary()
    for i, fold in enumerate(report.folds):
        print("fold %d: %s" % (i, "  ".join(f"{m}={fold[m]:.4f}" for m in METRIC_NAMES)))
    print("mean:   " + "  ".join(
        f"{m}={summary[m]['mean']:.4f}±{summary[m]['std']:.4f}" for m in METRIC_NAMES))
    print(f"outputs in {args.out_dir}")
    return EXIT_OK


def cmd_eval(args):
    config = _config_from_args(args)
    slides = _load_cohort_checked(args.cohort, config)
    model, flags = _restore_model(config, args.checkpoint)
    prepared = traineval.prepare_cohort(slides, config, flags.use_geometry)
    scores, logits = traineval.predict(model, prepared)
    labels = [s.label for s in slides]
    result = compute_metrics(scores, labels, config.classes)
    print("  ".join(f"{m}={result[m]:.4f}" for m in METRIC_NAMES))
    if args.out:
        report = EvalReport(folds=[result],
                            per_slide_logits=[{str(s.slide_id): [float(v) for v in row]
                                               for s, row in zip(slides, logits)}],
                            flags=flags.to_dict(), config_hash=config_hash(config).hex(),
                            seed=config.seed)
        with open(args.out, "w") as fh:
            json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")
    return EXIT_OK


def cmd_heatmap(args):
    config = _config_from_args(args)
    sigma = args.sigma if args.sigma is not None else config.heatmap_sigma
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    slides = _load_cohort_checked(args.cohort, config)
    by_id = {s.slide_id: s for s in slides}
    if args.slide_id not in by_id:
        raise ConfigError(f"slide id {args.slide_id} not in cohort (have 0..{len(slides) - 1})")
    model, flags = _restore_model(config, args.checkpoint)

    record = by_id[args.slide_id]
    prepared = traineval.prepare_slide(record, config, flags.use_geometry)
    _, scores = model.forward(prepared, return_scores=True)

    os.makedirs(args.out_dir, exist_ok=True)
    stem = os.path.join(args.out_dir, f"slide{args.slide_id}")
    raster = heatmap.export_heatmap(record, scores, sigma, stem + ".pgm", stem + ".csv")
    figures.render_heatmap_figure(raster, stem + ".png", slide_id=args.slide_id)
    top = heatmap.top_decile([p.patch_id for p in record.patches], scores)
    print(f"wrote {stem}.pgm, {stem}.csv, {stem}.png")
    print("top-decile patches: " + " ".join(str(t) for t in top))
    return EXIT_OK


def cmd_gradcheck(args):
    reports = gradcheck.run_suite(h=args.h, tol=args.tol)
    width = max(len(r.name) for r in reports)
    for r in reports:
        print(f"{r.name:<{width}}  {r.max_rel_error:.3e}  ({r.checks:>5} partials)  "
              f"{'pass' if r.passed else 'FAIL'}")
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} gradient checks passed (tol {args.tol:g})")
    return EXIT_OK if not failed else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="slidegeom",
                                     description="synthetic whole-slide subtyping harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output cohort path")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train with repeated stratified cross-validation")
    _add_config_args(p)
    p.add_argument("--cohort", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a cohort")
    _add_config_args(p)
    p.add_argument("--cohort", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="optional report JSON path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("heatmap", help="export attention heatmap for one slide")
    _add_config_args(p)
    p.add_argument("--cohort", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--slide-id", type=int, required=True, dest="slide_id")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--sigma", type=float, help="Gaussian width in grid units")
    p.set_defaults(fn=cmd_heatmap)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return args.fn(args)
    except (ConfigError, ch.SpecError, traineval.SplitError, heatmap.HeatmapError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ckpt.CheckpointMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (ch.FormatError, ckpt.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
