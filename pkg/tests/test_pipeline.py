import copy
import json
import time

import numpy as np
import pytest
from scipy import ndimage

from bayesinv.exceptions import CapacityError, ConfigError, ConvergenceError, DimensionError, GenerationError, PipelineStageError
from bayesinv.forward_model import Convolution2D, apply
from bayesinv.pipeline import io
from bayesinv.pipeline.config import default_config_path, load_config, validate_config
from bayesinv.pipeline.engines import reconstruct
from bayesinv.pipeline.metrics import compute_metrics, midpoint_thresholds, quantile_thresholds, segment_levels
from bayesinv.pipeline.phantom import Phantom, degrade, delta_psf, gaussian_psf, generate_phantom
from bayesinv.pipeline.run import parse_seed_range, run_pipeline, sweep, train_unrolled

LEVELS = (0.0, 0.35, 0.65, 1.0)
ARTIFACTS = [
    "phantom.pgm", "observation.pgm", "reconstruction.pgm", "uncertainty.pgm", "segmentation.pgm",
    "metrics.json", "manifest.json",
    "arrays/phantom.csv", "arrays/labels.csv", "arrays/observation.csv", "arrays/reconstruction.csv",
    "arrays/uncertainty.csv", "arrays/segmentation.csv", "arrays/psf.csv",
]


def _config(tmp_path, **overrides):
    cfg = json.loads(default_config_path().read_text())
    cfg["output"]["directory"] = str(tmp_path / "run")
    for dotted, value in overrides.items():
        node = cfg
        *path, last = dotted.split("__")
        for p in path:
            node = node.setdefault(p, {})
        node[last] = value
    return cfg


# ---------------------------------------------------------------- phantom


def test_phantom_zero_shapes_uniform():
    p = generate_phantom("mixed", (16, 16), LEVELS, 3, n_shapes=0)
    assert np.all(p.labels == 0) and np.all(p.pixels == 0.0)


def test_phantom_deterministic_and_levels():
    for kind in ("disks", "rectangles", "mixed"):
        a = generate_phantom(kind, (24, 20), LEVELS, 11)
        b = generate_phantom(kind, (24, 20), LEVELS, 11)
        assert np.array_equal(a.pixels, b.pixels) and np.array_equal(a.labels, b.labels)
        assert set(np.unique(a.pixels)) <= set(LEVELS)
        np.testing.assert_array_equal(a.pixels, np.asarray(LEVELS)[a.labels])


def test_phantom_shapes_are_separate():
    for seed in range(30):
        p = generate_phantom("mixed", (32, 32), LEVELS, seed)
        _, n = ndimage.label(p.labels > 0)
        assert 1 <= n <= 5
        # each connected shape carries a single level
        lab, n = ndimage.label(p.labels > 0)
        for k in range(1, n + 1):
            assert len(np.unique(p.labels[lab == k])) == 1


def test_phantom_errors():
    with pytest.raises(ValueError):
        generate_phantom("mixed", (7, 16), LEVELS, 0)
    with pytest.raises(ValueError):
        generate_phantom("mixed", (16, 16), (0.0, 0.5, 0.5, 1.0), 0)
    with pytest.raises(ValueError):
        generate_phantom("stars", (16, 16), LEVELS, 0)
    with pytest.raises(GenerationError):
        generate_phantom("rectangles", (8, 8), LEVELS, 0, n_shapes=5, max_retries=5)
    with pytest.raises(ValueError):
        Phantom(np.zeros((2, 2)), np.full((2, 2), 4), LEVELS, "mixed", 0)


def test_degrade_delta_and_operator_equivalence():
    p = generate_phantom("disks", (16, 16), LEVELS, 2)
    obs = degrade(p, delta_psf(3), 0.0, 0)
    assert np.array_equal(obs.pixels, p.pixels)
    psf = gaussian_psf(3, 1.0)
    obs = degrade(p, psf, 0.0, 0)
    expected = apply(Convolution2D(psf, (16, 16)), p.pixels.ravel()).reshape(16, 16)
    assert np.array_equal(obs.pixels, expected)
    a, b = degrade(p, psf, 0.05, 9), degrade(p, psf, 0.05, 9)
    assert np.array_equal(a.pixels, b.pixels)
    assert not np.array_equal(a.pixels, degrade(p, psf, 0.05, 10).pixels)
    with pytest.raises(DimensionError):
        degrade(p, np.ones((2, 2)) / 4, 0.0, 0)
    with pytest.raises(ValueError):
        degrade(p, psf, -1.0, 0)


def test_gaussian_psf_normalized():
    psf = gaussian_psf(5, 1.3)
    np.testing.assert_allclose(psf.sum(), 1.0, rtol=1e-15)
    np.testing.assert_allclose(psf, psf.T)
    with pytest.raises(DimensionError):
        gaussian_psf(4)


# ---------------------------------------------------------------- reconstruct


def test_identity_problem_returns_observation():
    p = generate_phantom("mixed", (16, 16), LEVELS, 4)
    obs = degrade(p, delta_psf(1), 1e-6, 4)
    f, std = reconstruct(obs, "closed_form", sigma_f2=1e6)
    np.testing.assert_allclose(f, obs.pixels, atol=1e-9)
    assert np.all(std > 0)


def test_closed_form_vs_vba_16x16():
    p = generate_phantom("disks", (16, 16), LEVELS, 5)
    obs = degrade(p, gaussian_psf(3, 1.0), 0.01, 5)
    cf = reconstruct(obs, "closed_form", 0.002)
    vb = reconstruct(obs, "vba", 0.002)
    lp = reconstruct(obs, "laplace", 0.002)
    scale = np.max(np.abs(cf.image))
    assert np.max(np.abs(vb.image - cf.image)) <= 1e-5 * scale
    assert np.max(np.abs(lp.image - cf.image)) <= 1e-5 * scale
    assert np.max(np.abs(vb.uncertainty - cf.uncertainty)) <= 1e-5 * np.max(cf.uncertainty)
    assert np.max(np.abs(lp.uncertainty - cf.uncertainty)) <= 1e-5 * np.max(cf.uncertainty)
    assert vb.trace is not None and vb.trace.converged


def test_mean_field_engine_under_disperses():
    p = generate_phantom("disks", (12, 12), LEVELS, 6)
    obs = degrade(p, gaussian_psf(3, 1.0), 0.01, 6)
    cf = reconstruct(obs, "closed_form", 0.002)
    mf = reconstruct(obs, "mf_vba", 0.002, method_cfg={"max_iters": 20000})
    assert np.all(mf.uncertainty < cf.uncertainty)
    np.testing.assert_allclose(mf.image, cf.image, atol=1e-6)


def test_unrolled_approaches_least_squares():
    # a narrow PSF keeps H well conditioned so K = 2000 ISTA steps converge
    p = generate_phantom("disks", (16, 16), LEVELS, 7)
    obs = degrade(p, gaussian_psf(3, 0.5), 0.01, 7)
    H = Convolution2D(obs.psf, obs.shape).to_dense()
    ls = np.linalg.solve(H, obs.pixels.ravel())
    rec = reconstruct(obs, "unrolled", 0.002, method_cfg={"K": 2000, "threshold": 0.0})
    assert np.max(np.abs(rec.image.ravel() - ls)) <= 1e-4
    assert np.all(rec.uncertainty == 0.0)


def test_reconstruct_errors():
    p = generate_phantom("mixed", (65, 65), LEVELS, 0)
    obs = degrade(p, gaussian_psf(3, 1.0), 0.01, 0)
    with pytest.raises(CapacityError):
        reconstruct(obs, "closed_form", 0.002)
    small = degrade(generate_phantom("mixed", (10, 10), LEVELS, 0), gaussian_psf(3, 1.0), 0.01, 0)
    with pytest.raises(ValueError):
        reconstruct(small, "wiener", 0.002)
    with pytest.raises(ConvergenceError) as info:
        reconstruct(small, "vba", 0.002, method_cfg={"max_iters": 2})
    assert info.value.trace is not None and info.value.trace.iterations == 2


def test_uncertainty_positive_and_monotone_in_noise():
    p = generate_phantom("mixed", (12, 12), LEVELS, 8)
    lo = reconstruct(degrade(p, gaussian_psf(3, 1.0), 0.01, 8), "closed_form", 0.002)
    hi = reconstruct(degrade(p, gaussian_psf(3, 1.0), 0.05, 8), "closed_form", 0.002)
    assert np.all(lo.uncertainty > 0)
    assert np.all(hi.uncertainty > lo.uncertainty)


# ---------------------------------------------------------------- segmentation and metrics


def test_segment_midpoints_recover_truth():
    p = generate_phantom("mixed", (20, 20), LEVELS, 1)
    assert np.array_equal(segment_levels(p.pixels, midpoint_thresholds(LEVELS)), p.labels)


def test_segment_semantics():
    t = (0.2, 0.5, 0.8)
    np.testing.assert_array_equal(segment_levels([[0.1, 0.19]], t), [[0, 0]])
    np.testing.assert_array_equal(segment_levels([[0.2, 0.5, 0.79, 0.8, 5.0]], t), [[1, 2, 2, 3, 3]])
    with pytest.raises(ValueError):
        segment_levels([[0.0]], (0.5, 0.5, 0.8))
    with pytest.raises(ValueError):
        segment_levels([[0.0]], (0.5, 0.8))


def test_segment_monotone_in_threshold(rng):
    f = rng.uniform(size=(30, 30))
    counts = [np.sum(segment_levels(f, (0.2, 0.5, t3)) == 3) for t3 in np.linspace(0.55, 0.99, 12)]
    assert all(b <= a for a, b in zip(counts, counts[1:]))


def test_quantile_thresholds():
    f = np.arange(100.0).reshape(10, 10)
    t = quantile_thresholds(f, (0.25, 0.5, 0.75))
    np.testing.assert_allclose(t, np.quantile(f, [0.25, 0.5, 0.75]))
    flat = quantile_thresholds(np.zeros((4, 4)))
    assert flat[0] < flat[1] < flat[2]


def test_metrics_perfect_reconstruction():
    p = generate_phantom("mixed", (16, 16), LEVELS, 2)
    m = compute_metrics(p, p.pixels, p.pixels, p.labels, midpoint_thresholds(LEVELS))
    assert m["rmse"] == 0.0 and m["psnr_reconstructed"] == float("inf")
    assert m["segmentation_accuracy"] == 1.0


def test_metrics_all_wrong_two_class():
    labels = np.zeros((8, 8), dtype=int)
    labels[2:5, 2:6] = 2
    levels = np.asarray(LEVELS)
    p = Phantom(levels[labels], labels, LEVELS, "rectangles", 0)
    wrong = np.where(labels == 0, 1, 3)
    m = compute_metrics(p, p.pixels, p.pixels, wrong)
    assert m["segmentation_accuracy"] == 0.0
    assert m["per_class_accuracy"] == {"0": 0.0, "1": None, "2": 0.0, "3": None}
    half = labels.copy()
    half[:4][half[:4] == 0] = 1  # wrong on background pixels of the top half
    expected = 1 - np.sum(labels[:4] == 0) / 64
    assert compute_metrics(p, p.pixels, p.pixels, half)["segmentation_accuracy"] == expected


def test_metrics_psnr_independent_recomputation():
    p = generate_phantom("mixed", (32, 32), LEVELS, 0)
    obs = degrade(p, gaussian_psf(3, 1.0), 0.01, 0)
    m = compute_metrics(p, obs, obs.pixels, p.labels)
    mse = sum((a - b) ** 2 for a, b in zip(obs.pixels.ravel().tolist(), p.pixels.ravel().tolist())) / 1024
    np.testing.assert_allclose(m["psnr_observed"], 10 * np.log10(1.0 / mse), rtol=1e-12)


def test_metrics_dimension_mismatch():
    p = generate_phantom("mixed", (16, 16), LEVELS, 2)
    with pytest.raises(DimensionError):
        compute_metrics(p, p.pixels, np.zeros((8, 8)), p.labels)


# ---------------------------------------------------------------- io


def test_pgm_round_trip(tmp_path, rng):
    img = rng.uniform(-2, 3, size=(7, 9))
    rec = io.write_pgm16(tmp_path / "a.pgm", img)
    data = (tmp_path / "a.pgm").read_bytes()
    assert data.startswith(b"P5\n9 7\n65535\n")
    codes = io.read_pgm16(tmp_path / "a.pgm")
    assert codes.shape == (7, 9) and codes.min() == 0 and codes.max() == 65535
    step = (rec["hi"] - rec["lo"]) / 65535
    assert np.max(np.abs(io.dequantize(codes, rec) - img)) <= 0.5 * step + 1e-12
    flat = io.write_pgm16(tmp_path / "b.pgm", np.zeros((3, 3)))
    assert flat["lo"] == flat["hi"] == 0.0
    assert np.all(io.read_pgm16(tmp_path / "b.pgm") == 0)


def test_labels_pgm_exact(tmp_path):
    labels = np.array([[0, 1], [2, 3]])
    rec = io.write_pgm16(tmp_path / "s.pgm", labels, 0, 3)
    np.testing.assert_array_equal(io.read_pgm16(tmp_path / "s.pgm"), labels * 21845)
    np.testing.assert_array_equal(io.dequantize(io.read_pgm16(tmp_path / "s.pgm"), rec), labels)


def test_csv_and_json(tmp_path, rng):
    a = rng.standard_normal((3, 4))
    io.write_array_csv(tmp_path / "a.csv", a)
    assert np.array_equal(io.read_array_csv(tmp_path / "a.csv"), a)
    io.write_json(tmp_path / "m.json", {"b": float("inf"), "a": np.float64(1.5), "c": [np.int64(2), float("nan")]})
    assert json.loads((tmp_path / "m.json").read_text()) == {"a": 1.5, "b": "inf", "c": [2, "nan"]}


# ---------------------------------------------------------------- config


def test_default_config_valid():
    cfg = load_config(default_config_path())
    assert cfg["phantom"]["size"] == [32, 32]
    assert cfg["method"]["vba"]["rho"] == 0.5


def test_missing_required_key_named(tmp_path):
    cfg = _config(tmp_path)
    del cfg["phantom"]["seed"]
    with pytest.raises(ConfigError, match="phantom.seed"):
        validate_config(cfg)
    cfg = _config(tmp_path)
    del cfg["output"]
    with pytest.raises(ConfigError, match="output.directory"):
        validate_config(cfg)


def test_unknown_keys_rejected(tmp_path):
    for mutate in (
        lambda c: c.update(extra={}),
        lambda c: c["model"].update(sigma=1.0),
        lambda c: c["degradation"]["psf"].update(shape="box"),
    ):
        cfg = _config(tmp_path)
        mutate(cfg)
        with pytest.raises(ConfigError, match="unknown config key"):
            validate_config(cfg)


def test_invalid_values_rejected(tmp_path):
    for dotted, value in [
        ("phantom__size", [4, 4]),
        ("phantom__level_values", [0.0, 0.5, 0.4, 1.0]),
        ("degradation__psf__size", 4),
        ("degradation__noise_sigma", -0.1),
        ("model__sigma_f2", 0),
        ("model__lambda_reg", 0),
        ("method__name", "wiener"),
        ("segmentation__mode", "otsu"),
    ]:
        with pytest.raises(ConfigError):
            validate_config(_config(tmp_path, **{dotted: value}))
    with pytest.raises(ConfigError, match="sigma_eps2"):
        validate_config(_config(tmp_path, degradation__noise_sigma=0.0))


def test_prior_from_ridge_ratio(tmp_path):
    c = validate_config(_config(tmp_path, model={"lambda_reg": 0.5, "sigma_eps2": 0.02}))
    np.testing.assert_allclose(c["model"]["sigma_f2"], 0.04, rtol=1e-15)
    assert validate_config(c) == c
    c = validate_config(_config(tmp_path, model={"sigma_f2": 0.3}))
    assert c["model"]["sigma_f2"] == 0.3 and c["model"]["lambda_reg"] is None
    with pytest.raises(ConfigError, match="disagree"):
        validate_config(_config(tmp_path, model={"sigma_f2": 0.3, "lambda_reg": 0.1}))
    with pytest.raises(ConfigError, match="lambda_reg"):
        validate_config(_config(tmp_path, model={"lambda_reg": -1.0}))


def test_noise05_config_improves(tmp_path):
    path = default_config_path().with_name("noise05.json")
    for seed in range(3):
        cfg = json.loads(path.read_text())
        cfg["phantom"]["seed"] = cfg["degradation"]["seed"] = seed
        m = run_pipeline(cfg, write=False).metrics
        assert m["psnr_reconstructed"] >= m["psnr_observed"]
        assert m["segmentation_accuracy"] >= m["segmentation_accuracy_observed"]


def test_load_config_errors(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


# ---------------------------------------------------------------- runs


def test_run_writes_artifacts_within_budget(tmp_path):
    start = time.perf_counter()
    rep = run_pipeline(_config(tmp_path))
    assert time.perf_counter() - start < 60
    d = tmp_path / "run"
    for name in ARTIFACTS:
        assert (d / name).exists(), name
    assert not (d / "trace.csv").exists()
    man = json.loads((d / "manifest.json").read_text())
    assert man["seeds"] == {"phantom": 0, "degradation": 0}
    assert set(man["versions"]) == {"bayesinv", "numpy", "scipy", "python"}
    assert man["config"]["model"]["lambda_reg"] == 0.1
    np.testing.assert_allclose(man["config"]["model"]["sigma_f2"], 0.01**2 / 0.1, rtol=1e-15)
    codes = io.read_pgm16(d / "reconstruction.pgm")
    back = io.dequantize(codes, man["pgm_quantization"]["reconstruction"])
    step = np.ptp(rep.reconstruction) / 65535
    assert np.max(np.abs(back - rep.reconstruction)) <= 0.5 * step + 1e-12
    np.testing.assert_array_equal(io.read_array_csv(d / "arrays/reconstruction.csv"), rep.reconstruction)
    metrics = json.loads((d / "metrics.json").read_text())
    assert 0 <= metrics["segmentation_accuracy"] <= 1
    assert metrics["psnr_reconstructed"] >= metrics["psnr_observed"]


def test_closed_form_and_vba_segmentations_agree(tmp_path):
    a = run_pipeline(_config(tmp_path), method="closed_form", out=tmp_path / "cf")
    b = run_pipeline(_config(tmp_path), method="vba", out=tmp_path / "vba")
    assert np.mean(a.segmentation == b.segmentation) >= 0.99
    assert (tmp_path / "vba" / "trace.csv").exists()


def test_run_is_bit_identical(tmp_path):
    cfg = _config(tmp_path, method__name="laplace")
    run_pipeline(cfg)
    first = {name: (tmp_path / "run" / name).read_bytes() for name in ARTIFACTS}
    run_pipeline(cfg)
    for name in ARTIFACTS:
        assert (tmp_path / "run" / name).read_bytes() == first[name], name


def test_quantile_segmentation_mode(tmp_path):
    rep = run_pipeline(_config(tmp_path, segmentation__mode="quantile"), write=False)
    np.testing.assert_allclose(rep.thresholds, np.quantile(rep.reconstruction, [0.25, 0.5, 0.75]))


def test_stage_tagged_errors(tmp_path):
    with pytest.raises(PipelineStageError) as info:
        run_pipeline(_config(tmp_path, phantom__size=[70, 70]))
    assert info.value.stage == "reconstruct" and str(info.value).startswith("[reconstruct]")
    with pytest.raises(PipelineStageError) as info:
        run_pipeline(_config(tmp_path, phantom__size=[8, 8], phantom__n_shapes=5, phantom__seed=0))
    assert info.value.stage == "phantom"
    cfg = _config(tmp_path)
    del cfg["model"]["lambda_reg"]
    with pytest.raises(PipelineStageError, match=r"\[config\].*model.sigma_f2"):
        run_pipeline(cfg)


def test_vba_failure_writes_trace(tmp_path):
    cfg = _config(tmp_path, method__name="vba", method__vba={"max_iters": 3})
    with pytest.raises(PipelineStageError, match="reconstruct"):
        run_pipeline(cfg)
    assert (tmp_path / "run" / "trace.csv").exists()


def test_parse_seed_range():
    assert parse_seed_range("0..3") == [0, 1, 2, 3]
    assert parse_seed_range("5,7") == [5, 7]
    with pytest.raises(ValueError):
        parse_seed_range("3..1")


def test_small_sweep(tmp_path):
    cfg = _config(tmp_path, phantom__size=[16, 16])
    s = sweep(cfg, [0, 1], methods=("closed_form", "laplace"), out=tmp_path / "sw")
    assert s["psnr_improved_all"] and s["segmentation_improved_all"]
    assert s["max_relative_disagreement_image"] < 1e-5
    assert (tmp_path / "sw" / "seed_0001" / "laplace" / "metrics.json").exists()
    assert len((tmp_path / "sw" / "sweep.csv").read_text().splitlines()) == 5


def test_train_unrolled_small(tmp_path):
    cfg = _config(tmp_path, phantom__size=[10, 10], method__name="unrolled")
    cfg["method"]["train"] = {"K": 3, "n_train": 24, "n_heldout": 8, "epochs": 15, "learning_rate": 0.01}
    r = train_unrolled(cfg, out=tmp_path / "net")
    assert r["train_loss_final"] <= r["train_loss_initial"]
    trace = np.loadtxt(tmp_path / "net" / "trace.csv", delimiter=",", skiprows=1)
    assert np.all(np.diff(trace[:, 1]) <= 0)
    run_cfg = copy.deepcopy(cfg)
    run_cfg["method"]["unrolled"] = {"weights": str(tmp_path / "net" / "net")}
    rep = run_pipeline(run_cfg, out=tmp_path / "run_net")
    assert rep.info["K"] == 3
    assert np.all(rep.uncertainty == 0)


def test_training_follows_configured_weights_path(tmp_path):
    cfg = _config(tmp_path, phantom__size=[10, 10], method__name="unrolled")
    cfg["method"]["train"] = {"K": 2, "n_train": 8, "n_heldout": 0, "epochs": 3}
    cfg["method"]["unrolled"] = {"weights": str(tmp_path / "trained" / "bundle")}
    train_unrolled(cfg)
    assert (tmp_path / "trained" / "bundle" / "manifest.json").exists()
    assert (tmp_path / "trained" / "training.json").exists()
    assert not (tmp_path / "run").exists()
    rep = run_pipeline(cfg)
    assert rep.info["K"] == 2 and (tmp_path / "run" / "metrics.json").exists()
