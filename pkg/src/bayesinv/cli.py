"""Command line entry point ``invert``.

    invert run --config cfg.json [--method vba] [--out runs/x]
    invert sweep --config cfg.json --seeds 0..19 [--methods closed_form,laplace,vba]
    invert train-unrolled --config cfg.json [--out runs/net]
    invert report runs/x
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .exceptions import PipelineStageError
from .pipeline.engines import METHODS
from .pipeline.run import parse_seed_range, run_pipeline, sweep, train_unrolled


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _cmd_run(args):
    rep = run_pipeline(args.config, method=args.method, out=args.out)
    m = rep.metrics
    print(f"method {rep.method} -> {rep.directory}")
    print(f"  psnr observed {_fmt(m['psnr_observed'])} dB, reconstructed {_fmt(m['psnr_reconstructed'])} dB")
    print(f"  segmentation accuracy {_fmt(m['segmentation_accuracy'])} (observation {_fmt(m['segmentation_accuracy_observed'])})")
    return 0


def _cmd_sweep(args):
    try:
        seeds = parse_seed_range(args.seeds)
    except ValueError as exc:
        raise PipelineStageError("config", f"bad --seeds value: {exc}") from exc
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise PipelineStageError("config", f"unknown method {bad[0]!r}")
    s = sweep(args.config, seeds, methods, out=args.out)
    print(f"{len(seeds)} seeds x {len(methods)} methods in {s['elapsed_seconds']:.1f} s")
    print(f"  psnr improved on every run: {s['psnr_improved_all']}")
    print(f"  segmentation improved on every run: {s['segmentation_improved_all']}")
    print(f"  max relative engine disagreement: image {s['max_relative_disagreement_image']:.3e}, "
          f"std {s['max_relative_disagreement_std']:.3e}")
    return 0


def _cmd_train(args):
    r = train_unrolled(args.config, out=args.out)
    print(f"K={r['K']} tied={r['tied']}: train loss {_fmt(r['train_loss_initial'])} -> {_fmt(r['train_loss_final'])}")
    if "heldout_loss_trained" in r:
        print(f"  held-out loss: ISTA {_fmt(r['heldout_loss_ista'])}, trained {_fmt(r['heldout_loss_trained'])}")
    return 0


def _load(path):
    with open(path) as fh:
        return json.load(fh)


def _cmd_report(args):
    d = Path(args.run_dir)
    try:
        if (d / "sweep_summary.json").exists():
            s = _load(d / "sweep_summary.json")
            print(f"sweep over seeds {s['seeds'][0]}..{s['seeds'][-1]}, methods {', '.join(s['methods'])}")
            for key in ("psnr_improved_all", "segmentation_improved_all",
                        "max_relative_disagreement_image", "max_relative_disagreement_std"):
                print(f"  {key}: {_fmt(s[key])}")
            return 0
        if (d / "training.json").exists():
            for k, v in sorted(_load(d / "training.json").items()):
                print(f"  {k}: {_fmt(v)}")
            return 0
        metrics = _load(d / "metrics.json")
        manifest = _load(d / "manifest.json")
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise PipelineStageError("report", f"cannot read run directory {d}: {exc}") from exc
    cfg = manifest["config"]
    print(f"run {d}")
    print(f"  method: {metrics['method']}")
    print(f"  seeds: phantom {manifest['seeds']['phantom']}, degradation {manifest['seeds']['degradation']}")
    print(f"  image: {cfg['phantom']['size'][0]}x{cfg['phantom']['size'][1]}, noise sigma {cfg['degradation']['noise_sigma']}")
    for key in ("psnr_observed", "psnr_reconstructed", "rmse", "segmentation_accuracy", "segmentation_accuracy_observed"):
        if key in metrics:
            print(f"  {key}: {_fmt(metrics[key])}")
    per = ", ".join(f"{k}={_fmt(v)}" for k, v in sorted(metrics["per_class_accuracy"].items()))
    print(f"  per_class_accuracy: {per}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="invert", description="Bayesian reconstruction of blurred, noisy images.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one seeded experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--method", choices=METHODS, default=None, help="override method.name")
    r.add_argument("--out", default=None, help="override output.directory")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("sweep", help="run several seeds and methods")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", required=True, help="inclusive range a..b or comma list")
    s.add_argument("--methods", default="closed_form,laplace,vba")
    s.add_argument("--out", default=None)
    s.set_defaults(func=_cmd_sweep)

    t = sub.add_parser("train-unrolled", help="train an unrolled shrinkage net")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=None)
    t.set_defaults(func=_cmd_train)

    rp = sub.add_parser("report", help="summarize a run, sweep or training directory")
    rp.add_argument("run_dir")
    rp.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PipelineStageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
