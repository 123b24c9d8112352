"""Threshold segmentation and reconstruction quality metrics."""

from __future__ import annotations

import numpy as np

from ..exceptions import DimensionError

__all__ = ["midpoint_thresholds", "quantile_thresholds", "segment_levels", "psnr", "compute_metrics"]


def midpoint_thresholds(level_values):
    lv = np.asarray(level_values, dtype=float)
    return tuple(float(v) for v in 0.5 * (lv[:-1] + lv[1:]))


def quantile_thresholds(image, quantiles=(0.25, 0.5, 0.75)):
    """Thresholds at the given quantiles of the image's pixel values.

    Tied quantiles (flat images) are nudged apart by one ulp so the result
    stays strictly increasing.
    """
    t = [float(v) for v in np.quantile(np.asarray(image, dtype=float), quantiles)]
    for i in range(1, len(t)):
        if t[i] <= t[i - 1]:
            t[i] = float(np.nextafter(t[i - 1], np.inf))
    return tuple(t)


def segment_levels(f, thresholds):
    """Label 0 below ``t1``, 1 in ``[t1, t2)``, 2 in ``[t2, t3)``, 3 above."""
    t = np.asarray(thresholds, dtype=float).reshape(-1)
    if t.shape[0] != 3:
        raise ValueError(f"need 3 thresholds, got {t.shape[0]}")
    if np.any(np.diff(t) <= 0):
        raise ValueError(f"thresholds must be strictly increasing, got {tuple(t)}")
    return np.digitize(np.asarray(f, dtype=float), t, right=False).astype(np.int64)


def psnr(estimate, truth, peak):
    """``20 log10(peak / RMSE)``; ``inf`` when the images are identical."""
    rmse = float(np.sqrt(np.mean((np.asarray(estimate) - np.asarray(truth)) ** 2)))
    if rmse == 0.0:
        return float("inf")
    return float(20.0 * np.log10(peak / rmse))


def _accuracy(pred, truth):
    return float(np.mean(pred == truth))


def compute_metrics(phantom, observation, f_hat, segmentation, thresholds=None) -> dict:
    """Fidelity and segmentation metrics against the ground-truth phantom.

    Both PSNR values use the phantom as reference and the largest level
    value as peak. When ``thresholds`` is given the raw observation is
    segmented with them too, giving the baseline accuracy.
    """
    truth = phantom.pixels
    obs = np.asarray(getattr(observation, "pixels", observation), dtype=float)
    f_hat = np.asarray(f_hat, dtype=float)
    seg = np.asarray(segmentation)
    for name, arr in (("observation", obs), ("reconstruction", f_hat), ("segmentation", seg)):
        if arr.shape != truth.shape:
            raise DimensionError(f"{name} has shape {arr.shape}, phantom is {truth.shape}")
    peak = float(max(phantom.level_values))
    labels = phantom.labels
    per_class = {}
    for c in range(4):
        mask = labels == c
        per_class[str(c)] = _accuracy(seg[mask], c) if mask.any() else None
    out = {
        "psnr_observed": psnr(obs, truth, peak),
        "psnr_reconstructed": psnr(f_hat, truth, peak),
        "rmse": float(np.sqrt(np.mean((f_hat - truth) ** 2))),
        "segmentation_accuracy": _accuracy(seg, labels),
        "per_class_accuracy": per_class,
    }
    if thresholds is not None:
        out["segmentation_accuracy_observed"] = _accuracy(segment_levels(obs, thresholds), labels)
    return out
