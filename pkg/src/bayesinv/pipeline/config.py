"""JSON run configuration: schema, defaults and validation.

A config has exactly the sections ``phantom``, ``degradation``, ``model``,
``method``, ``segmentation`` and ``output``. Unknown keys anywhere are
rejected; missing required keys raise :class:`ConfigError` naming the
dotted key path.
"""

from __future__ import annotations

import copy
import json
from importlib import resources

from ..exceptions import ConfigError
from .engines import DEFAULT_METHOD_CFG, METHODS

__all__ = ["REQUIRED", "SCHEMA", "load_config", "validate_config", "default_config_path"]


class _Required:
    def __repr__(self):
        return "REQUIRED"


REQUIRED = _Required()

SCHEMA = {
    "phantom": {
        "kind": "mixed",
        "size": REQUIRED,
        "level_values": REQUIRED,
        "seed": REQUIRED,
        "n_shapes": None,
    },
    "degradation": {
        "psf": {"kind": "gaussian", "size": 3, "sigma": 1.0},
        "noise_sigma": REQUIRED,
        "seed": REQUIRED,
    },
    "model": {
        "sigma_f2": None,
        "lambda_reg": None,
        "sigma_eps2": None,
        "dense_cap": 4096,
    },
    "method": {
        "name": REQUIRED,
        **copy.deepcopy(DEFAULT_METHOD_CFG),
        "train": {
            "K": 4,
            "n_train": 16,
            "n_heldout": 8,
            "seed": 1000,
            "epochs": 50,
            "learning_rate": 1e-2,
            "threshold": 0.0,
            "tied": True,
            "learn_threshold": False,
            "weight_decay": 0.0,
        },
    },
    "segmentation": {"mode": "midpoint", "quantiles": [0.25, 0.5, 0.75]},
    "output": {"directory": REQUIRED},
}


def _fill(spec, given, path):
    if not isinstance(given, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    unknown = sorted(set(given) - set(spec))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key {where}{unknown[0]}")
    out = {}
    for key, default in spec.items():
        dotted = f"{path}.{key}" if path else key
        if key not in given:
            if default is REQUIRED:
                raise ConfigError(f"missing required config key {dotted}")
            out[key] = copy.deepcopy(default) if not isinstance(default, dict) else _fill(default, {}, dotted)
        elif isinstance(default, dict):
            out[key] = _fill(default, given[key], dotted)
        else:
            out[key] = copy.deepcopy(given[key])
    return out


def _check(cond, message):
    if not cond:
        raise ConfigError(message)


def _is_num(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def validate_config(cfg: dict) -> dict:
    """Return a fully populated copy of ``cfg`` or raise :class:`ConfigError`."""
    c = _fill(SCHEMA, cfg, "")
    ph = c["phantom"]
    _check(ph["kind"] in ("disks", "rectangles", "mixed"), f"phantom.kind invalid: {ph['kind']!r}")
    _check(
        isinstance(ph["size"], list) and len(ph["size"]) == 2 and all(isinstance(v, int) and v >= 8 for v in ph["size"]),
        "phantom.size must be [rows, cols] with both >= 8",
    )
    lv = ph["level_values"]
    _check(isinstance(lv, list) and len(lv) == 4 and all(_is_num(v) for v in lv), "phantom.level_values must be 4 numbers")
    _check(all(b > a for a, b in zip(lv, lv[1:])) and 0 <= lv[0] and lv[-1] <= 1,
           "phantom.level_values must be strictly increasing in [0, 1]")
    _check(isinstance(ph["seed"], int), "phantom.seed must be an integer")
    _check(ph["n_shapes"] is None or (isinstance(ph["n_shapes"], int) and 0 <= ph["n_shapes"] <= 5),
           "phantom.n_shapes must be null or 0..5")

    dg = c["degradation"]
    psf = dg["psf"]
    _check(psf["kind"] in ("gaussian", "delta"), f"degradation.psf.kind invalid: {psf['kind']!r}")
    _check(isinstance(psf["size"], int) and psf["size"] >= 1 and psf["size"] % 2 == 1,
           "degradation.psf.size must be an odd positive integer")
    _check(_is_num(psf["sigma"]) and psf["sigma"] > 0, "degradation.psf.sigma must be positive")
    _check(_is_num(dg["noise_sigma"]) and dg["noise_sigma"] >= 0, "degradation.noise_sigma must be >= 0")
    _check(isinstance(dg["seed"], int), "degradation.seed must be an integer")

    md = c["model"]
    if md["sigma_eps2"] is None:
        _check(dg["noise_sigma"] > 0, "model.sigma_eps2 must be set when degradation.noise_sigma is 0")
        sigma_eps2 = float(dg["noise_sigma"]) ** 2
    else:
        _check(_is_num(md["sigma_eps2"]) and md["sigma_eps2"] > 0, "model.sigma_eps2 must be positive")
        sigma_eps2 = float(md["sigma_eps2"])
    # the prior is given either directly or through the ridge ratio sigma_eps2 / sigma_f2
    if md["sigma_f2"] is None and md["lambda_reg"] is None:
        raise ConfigError("missing required config key model.sigma_f2 (or model.lambda_reg)")
    if md["sigma_f2"] is not None:
        _check(_is_num(md["sigma_f2"]) and md["sigma_f2"] > 0, "model.sigma_f2 must be positive")
    if md["lambda_reg"] is not None:
        _check(_is_num(md["lambda_reg"]) and md["lambda_reg"] > 0, "model.lambda_reg must be positive")
        implied = sigma_eps2 / md["lambda_reg"]
        if md["sigma_f2"] is not None:
            _check(abs(md["sigma_f2"] - implied) <= 1e-12 * implied,
                   "model.sigma_f2 and model.lambda_reg disagree; give only one")
        md["sigma_f2"] = implied
    _check(isinstance(md["dense_cap"], int) and md["dense_cap"] > 0, "model.dense_cap must be a positive integer")

    me = c["method"]
    _check(me["name"] in METHODS, f"method.name must be one of {list(METHODS)}, got {me['name']!r}")
    _check(0 < me["vba"]["rho"] <= 1, "method.vba.rho must lie in (0, 1]")
    _check(isinstance(me["unrolled"]["K"], int) and me["unrolled"]["K"] >= 1, "method.unrolled.K must be >= 1")
    _check(isinstance(me["train"]["K"], int) and me["train"]["K"] >= 1, "method.train.K must be >= 1")

    sg = c["segmentation"]
    _check(sg["mode"] in ("midpoint", "quantile"), f"segmentation.mode invalid: {sg['mode']!r}")
    q = sg["quantiles"]
    _check(isinstance(q, list) and len(q) == 3 and all(_is_num(v) and 0 < v < 1 for v in q)
           and all(b > a for a, b in zip(q, q[1:])), "segmentation.quantiles must be 3 increasing values in (0, 1)")

    _check(isinstance(c["output"]["directory"], str) and c["output"]["directory"], "output.directory must be a path")
    return c


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return validate_config(raw)


def default_config_path():
    return resources.files("bayesinv") / "configs" / "default.json"
