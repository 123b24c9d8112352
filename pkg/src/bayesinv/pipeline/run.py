"""End-to-end runs: generate, degrade, reconstruct, segment, score, write.

Every artifact of a run lives in its own directory. Wall-clock timings go
to ``timings.txt`` and nowhere else, so all CSV, JSON and PGM files are
bit-identical across repeated runs with the same seeds.
"""

from __future__ import annotations

import contextlib
import copy
import csv
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from .. import __version__
from ..exceptions import BayesInvError, ConfigError, ConvergenceError, PipelineStageError
from ..forward_model import Convolution2D
from ..unrolled_net import TrainConfig, build_ista_net, loss, save_loss_trace, save_net, spectral_bound, train
from . import io
from .config import load_config, validate_config
from .engines import reconstruct
from .metrics import compute_metrics, midpoint_thresholds, quantile_thresholds, segment_levels
from .phantom import degrade, delta_psf, gaussian_psf, generate_phantom

__all__ = ["PipelineReport", "resolve_config", "run_pipeline", "sweep", "train_unrolled", "parse_seed_range"]


@dataclass(eq=False)
class PipelineReport:
    reconstruction: np.ndarray
    uncertainty: np.ndarray
    segmentation: np.ndarray
    metrics: dict
    method: str
    timings: dict = field(default_factory=dict)
    directory: Path | None = None
    thresholds: tuple = ()
    info: dict = field(default_factory=dict)


@contextlib.contextmanager
def _stage(name, timings=None):
    start = time.perf_counter()
    try:
        yield
    except PipelineStageError:
        raise
    except (BayesInvError, ValueError, OSError, ArithmeticError) as exc:
        raise PipelineStageError(name, str(exc)) from exc
    finally:
        if timings is not None:
            timings[name] = time.perf_counter() - start


def resolve_config(config, method=None, out=None) -> dict:
    """Load and validate ``config`` (path or dict), then apply CLI overrides."""
    try:
        cfg = load_config(config) if isinstance(config, (str, Path)) else validate_config(copy.deepcopy(config))
        if method is not None:
            raw = copy.deepcopy(cfg)
            raw["method"]["name"] = method
            cfg = validate_config(raw)
        if out is not None:
            cfg["output"]["directory"] = str(out)
    except ConfigError as exc:
        raise PipelineStageError("config", str(exc)) from exc
    return cfg


def make_psf(psf_cfg):
    if psf_cfg["kind"] == "delta":
        return delta_psf(psf_cfg["size"])
    return gaussian_psf(psf_cfg["size"], psf_cfg["sigma"])


def _simulate(cfg, timings=None):
    ph, dg = cfg["phantom"], cfg["degradation"]
    with _stage("phantom", timings):
        phantom = generate_phantom(ph["kind"], tuple(ph["size"]), tuple(ph["level_values"]), ph["seed"], ph["n_shapes"])
    with _stage("degrade", timings):
        obs = degrade(phantom, make_psf(dg["psf"]), dg["noise_sigma"], dg["seed"])
    return phantom, obs


def _thresholds(cfg, image):
    sg = cfg["segmentation"]
    if sg["mode"] == "quantile":
        return quantile_thresholds(image, sg["quantiles"])
    return midpoint_thresholds(cfg["phantom"]["level_values"])


def _versions():
    return {"bayesinv": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


def _write_run(d, cfg, phantom, obs, rec, seg, thresholds, metrics):
    d.mkdir(parents=True, exist_ok=True)
    arrays = d / "arrays"
    arrays.mkdir(exist_ok=True)
    lv = cfg["phantom"]["level_values"]
    quant = {
        "phantom": io.write_pgm16(d / "phantom.pgm", phantom.pixels, lv[0], lv[-1]),
        "observation": io.write_pgm16(d / "observation.pgm", obs.pixels),
        "reconstruction": io.write_pgm16(d / "reconstruction.pgm", rec.image),
        "uncertainty": io.write_pgm16(d / "uncertainty.pgm", rec.uncertainty),
        "segmentation": io.write_pgm16(d / "segmentation.pgm", seg, 0, 3),
    }
    io.write_array_csv(arrays / "phantom.csv", phantom.pixels)
    io.write_array_csv(arrays / "labels.csv", phantom.labels)
    io.write_array_csv(arrays / "observation.csv", obs.pixels)
    io.write_array_csv(arrays / "reconstruction.csv", rec.image)
    io.write_array_csv(arrays / "uncertainty.csv", rec.uncertainty)
    io.write_array_csv(arrays / "segmentation.csv", seg)
    io.write_array_csv(arrays / "psf.csv", obs.psf)
    if rec.trace is not None:
        rec.trace.to_csv(d / "trace.csv")
    io.write_json(d / "metrics.json", {"method": rec.method, **metrics})
    manifest = {
        "config": cfg,
        "method": rec.method,
        "seeds": {"phantom": cfg["phantom"]["seed"], "degradation": cfg["degradation"]["seed"]},
        "thresholds": list(thresholds),
        "engine": rec.info,
        "pgm_quantization": quant,
        "versions": _versions(),
    }
    io.write_json(d / "manifest.json", manifest)


def _write_timings(d, timings):
    with open(d / "timings.txt", "w") as fh:
        for k, v in timings.items():
            fh.write(f"{k}\t{v:.6f}\n")


def run_pipeline(config, method=None, out=None, write=True) -> PipelineReport:
    """Run one seeded experiment and write its artifacts.

    Raises
    ------
    PipelineStageError
        Tagged with the failing stage (``config``, ``phantom``, ``degrade``,
        ``reconstruct``, ``segment``, ``metrics`` or ``write``).
    """
    cfg = resolve_config(config, method, out)
    timings = {}
    phantom, obs = _simulate(cfg, timings)
    md, me = cfg["model"], cfg["method"]
    name = me["name"]
    with _stage("reconstruct", timings):
        mcfg = me["vba"] if name in ("vba", "mf_vba") else me.get(name)
        try:
            rec = reconstruct(obs, name, md["sigma_f2"], md["sigma_eps2"], mcfg, md["dense_cap"])
        except ConvergenceError as exc:
            if write and exc.trace is not None:
                d = Path(cfg["output"]["directory"])
                d.mkdir(parents=True, exist_ok=True)
                exc.trace.to_csv(d / "trace.csv")
            raise
    with _stage("segment", timings):
        thresholds = _thresholds(cfg, rec.image)
        seg = segment_levels(rec.image, thresholds)
    with _stage("metrics", timings):
        metrics = compute_metrics(phantom, obs, rec.image, seg, thresholds)
    d = Path(cfg["output"]["directory"])
    if write:
        with _stage("write"):
            _write_run(d, cfg, phantom, obs, rec, seg, thresholds, metrics)
            _write_timings(d, timings)
    return PipelineReport(rec.image, rec.uncertainty, seg, metrics, name, timings, d if write else None, thresholds, rec.info)


def parse_seed_range(text):
    """``"a..b"`` (inclusive) or a comma list into a list of integers."""
    text = str(text).strip()
    if ".." in text:
        a, b = text.split("..", 1)
        lo, hi = int(a), int(b)
        if hi < lo:
            raise ValueError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    return [int(s) for s in text.split(",") if s.strip()]


def sweep(config, seeds, methods=("closed_form", "laplace", "vba"), out=None) -> dict:
    """Run every method on every seed and check the fidelity properties.

    Seed ``s`` sets both the phantom and the noise seed. Each run writes to
    ``<out>/seed_<s>/<method>``; the sweep writes ``sweep.csv`` and
    ``sweep_summary.json``. Returns the summary.
    """
    base = resolve_config(config, out=out)
    root = Path(base["output"]["directory"])
    rows = []
    disagreement = {}
    start = time.perf_counter()
    for s in seeds:
        images = {}
        for m in methods:
            cfg = copy.deepcopy(base)
            cfg["phantom"]["seed"] = int(s)
            cfg["degradation"]["seed"] = int(s)
            cfg["method"]["name"] = m
            cfg["output"]["directory"] = str(root / f"seed_{int(s):04d}" / m)
            rep = run_pipeline(cfg)
            images[m] = (rep.reconstruction, rep.uncertainty)
            mt = rep.metrics
            rows.append({
                "seed": int(s),
                "method": m,
                "psnr_observed": mt["psnr_observed"],
                "psnr_reconstructed": mt["psnr_reconstructed"],
                "segmentation_accuracy_observed": mt["segmentation_accuracy_observed"],
                "segmentation_accuracy": mt["segmentation_accuracy"],
            })
        ref_img, ref_std = images[methods[0]]
        worst = {"image": 0.0, "std": 0.0}
        for m in methods[1:]:
            img, std = images[m]
            worst["image"] = max(worst["image"], float(np.max(np.abs(img - ref_img)) / max(np.max(np.abs(ref_img)), 1e-300)))
            if np.any(ref_std) and np.any(std):
                worst["std"] = max(worst["std"], float(np.max(np.abs(std - ref_std)) / np.max(ref_std)))
        disagreement[str(int(s))] = worst
    elapsed = time.perf_counter() - start
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    summary = {
        "seeds": [int(s) for s in seeds],
        "methods": list(methods),
        "psnr_improved_all": all(r["psnr_reconstructed"] >= r["psnr_observed"] for r in rows),
        "segmentation_improved_all": all(r["segmentation_accuracy"] >= r["segmentation_accuracy_observed"] for r in rows),
        "max_relative_disagreement_image": max(v["image"] for v in disagreement.values()),
        "max_relative_disagreement_std": max(v["std"] for v in disagreement.values()),
        "per_seed_disagreement": disagreement,
        "runs": rows,
    }
    io.write_json(root / "sweep_summary.json", summary)
    with open(root / "timings.txt", "w") as fh:
        fh.write(f"sweep\t{elapsed:.6f}\n")
    summary["elapsed_seconds"] = elapsed
    return summary


def train_unrolled(config, out=None) -> dict:
    """Train a K-layer unrolled net on simulated phantoms from ``config``.

    Training and held-out observations use phantom and noise seeds
    ``train.seed + i``. The net starts from the analytic ISTA weights; the
    held-out loss of that initialization and of the trained net are both
    reported. Writes ``net/`` (weights bundle), ``trace.csv`` (loss per
    epoch) and ``training.json``.

    Without ``out``, a configured ``method.unrolled.weights`` path decides
    where the bundle goes (its parent receives the other files), so a later
    ``run`` with the same config picks up the trained net.
    """
    cfg = resolve_config(config, out=out)
    weights = cfg["method"]["unrolled"].get("weights")
    if out is None and weights:
        net_dir = Path(weights)
        cfg["output"]["directory"] = str(net_dir.parent)
    else:
        net_dir = Path(cfg["output"]["directory"]) / "net"
    tc = cfg["method"]["train"]
    ph, dg = cfg["phantom"], cfg["degradation"]
    psf = make_psf(dg["psf"])
    with _stage("phantom"):
        phantoms = [
            generate_phantom(ph["kind"], tuple(ph["size"]), tuple(ph["level_values"]), tc["seed"] + i, ph["n_shapes"])
            for i in range(tc["n_train"] + tc["n_heldout"])
        ]
    with _stage("degrade"):
        pairs = [(degrade(p, psf, dg["noise_sigma"], tc["seed"] + i).pixels.ravel(), p.pixels.ravel())
                 for i, p in enumerate(phantoms)]
    train_set, heldout = pairs[: tc["n_train"]], pairs[tc["n_train"]:]
    with _stage("train"):
        H = Convolution2D(psf, tuple(ph["size"]))
        init = build_ista_net(H, 1.0 / spectral_bound(H), tc["threshold"], tc["K"], tied=tc["tied"])
        tcfg = TrainConfig(learning_rate=tc["learning_rate"], epochs=tc["epochs"],
                           weight_decay=tc["weight_decay"], learn_threshold=tc["learn_threshold"])
        net, trace = train(init, train_set, tcfg)
    result = {
        "K": net.K,
        "tied": net.tied,
        "threshold": net.threshold,
        "train_loss_initial": trace[0],
        "train_loss_final": trace[-1],
    }
    if heldout:
        result["heldout_loss_ista"] = loss(init, heldout)
        result["heldout_loss_trained"] = loss(net, heldout)
        result["heldout_gap"] = result["heldout_loss_ista"] - result["heldout_loss_trained"]
    d = Path(cfg["output"]["directory"])
    with _stage("write"):
        d.mkdir(parents=True, exist_ok=True)
        save_net(net, net_dir)
        save_loss_trace(d / "trace.csv", trace)
        io.write_json(d / "training.json", result)
        io.write_json(d / "manifest.json", {"config": cfg, "versions": _versions()})
    return result
