"""Dispatch from a degraded image to one of the inference engines."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ConvergenceError, DimensionError
from ..forward_model import Convolution2D, LinearGaussianModel, DENSE_CAP, joint_objective, posterior_closed_form, posterior_precision
from ..laplace import DescentConfig, find_map, laplace_approximate
from ..unrolled_net import build_ista_net, forward, load_net, spectral_bound
from ..vba import VbaConfig, mean_field_vba, run_vba

__all__ = ["METHODS", "Reconstruction", "build_model", "reconstruct"]

METHODS = ("closed_form", "laplace", "vba", "mf_vba", "unrolled")

# engine settings used when the caller passes none
DEFAULT_METHOD_CFG = {
    "vba": {"rho": 0.5, "max_iters": 500, "elbo_tol": 1e-8, "grad_tol": 1e-6},
    "laplace": {"step_size": None, "max_iters": 200_000, "grad_rtol": 1e-10},
    "unrolled": {"K": 50, "threshold": 0.0, "alpha": None, "weights": None},
}


@dataclass(eq=False)
class Reconstruction:
    """Engine output. Unpacks as ``image, uncertainty = reconstruct(...)``."""

    image: np.ndarray
    uncertainty: np.ndarray
    method: str
    trace: object = None
    info: dict = field(default_factory=dict)

    def __iter__(self):
        yield self.image
        yield self.uncertainty


def build_model(obs, sigma_f2, sigma_eps2=None, dense_cap=DENSE_CAP) -> LinearGaussianModel:
    """Linear-Gaussian model for a blurred observation.

    ``sigma_eps2`` defaults to the true noise variance of the observation.
    """
    if sigma_eps2 is None:
        sigma_eps2 = obs.noise_sigma**2
    H = Convolution2D(obs.psf, obs.shape)
    return LinearGaussianModel(H, sigma_eps2, sigma_f2, dense_cap)


def _merged(method, cfg):
    base = dict(DEFAULT_METHOD_CFG.get(method, {}))
    base.update(cfg or {})
    return base


def _vba_config(c):
    return VbaConfig(rho=c["rho"], max_iters=c["max_iters"], elbo_tol=c["elbo_tol"], grad_tol=c["grad_tol"])


def _jacobi_rho_cap(model):
    # with a diagonal precision the mean update settles into damped Jacobi,
    # m <- m - rho D^-1 (P m - b), which is stable only for rho < 2 / lmax(D^-1 P)
    P = posterior_precision(model)
    d = 1.0 / np.sqrt(np.diag(P))
    return 1.0 / float(np.linalg.eigvalsh(d[:, None] * P * d[None, :])[-1])


def _reconstruct_vba(model, g, c, diagonal):
    if diagonal:
        c = dict(c, rho=min(c["rho"], _jacobi_rho_cap(model)))
    cfg = _vba_config(c)
    q, trace = mean_field_vba(model, g, cfg) if diagonal else run_vba(model, g, cfg=cfg)
    if not trace.converged:
        raise ConvergenceError(f"VBA did not converge in {cfg.max_iters} iterations", trace=trace)
    info = {"iterations": trace.iterations, "converged": True, "final_elbo": trace.elbo[-1], "rho": cfg.rho}
    return q.m, np.sqrt(q.variances), trace, info


def _reconstruct_laplace(model, g, psf, c):
    obj = joint_objective(model, g)
    step = c["step_size"]
    if step is None:
        # ||H||_2 <= ||psf||_1 for zero padded convolution, so this is 1 / L
        step = model.sigma_eps2 / (float(np.sum(np.abs(psf))) ** 2 + model.lambda_reg)
    tol = c["grad_rtol"] * max(float(np.linalg.norm(obj.Htg)), 1.0) / model.sigma_eps2
    res = find_map(obj, np.zeros(model.N), DescentConfig(step_size=step, max_iters=c["max_iters"], grad_tol=tol))
    if res.status == "max_iters":
        raise ConvergenceError(f"MAP search hit {c['max_iters']} iterations (gradient norm {res.grad_norm:.3e})")
    lap = laplace_approximate(obj, res.theta_map, posterior_precision(model))
    info = {"iterations": res.iterations, "converged": True, "map_status": res.status, "log_evidence": lap.log_evidence}
    return lap.mean, lap.std, None, info


def _reconstruct_unrolled(obs, c):
    H = Convolution2D(obs.psf, obs.shape)
    if c["weights"] is not None:
        net = load_net(c["weights"])
        if net.n_data != H.shape[0]:
            raise DimensionError(f"loaded net expects {net.n_data} pixels, image has {H.shape[0]}")
    else:
        alpha = c["alpha"] if c["alpha"] is not None else 1.0 / spectral_bound(H)
        net = build_ista_net(H, alpha, c["threshold"], int(c["K"]))
    out, _ = forward(net, obs.pixels.ravel())
    info = {"K": net.K, "threshold": net.threshold, "tied": net.tied}
    return out, np.zeros_like(out), None, info


def reconstruct(obs, method, sigma_f2, sigma_eps2=None, method_cfg=None, dense_cap=DENSE_CAP) -> Reconstruction:
    """Reconstruct ``obs`` with the chosen engine.

    ``uncertainty`` is the per-pixel posterior standard deviation for the
    Bayesian engines and zeros for the unrolled (point) method.

    Raises
    ------
    CapacityError
        The image is too large for the dense engines.
    ConvergenceError
        VBA or the MAP search did not converge; VBA attaches its trace.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    c = _merged(method if method != "mf_vba" else "vba", method_cfg)
    g = obs.pixels.ravel()
    if method == "unrolled":
        mean, std, trace, info = _reconstruct_unrolled(obs, c)
    else:
        model = build_model(obs, sigma_f2, sigma_eps2, dense_cap)
        if method == "closed_form":
            post = posterior_closed_form(model, g)
            mean, std, trace, info = post.mean, post.std, None, {"converged": True}
        elif method == "laplace":
            mean, std, trace, info = _reconstruct_laplace(model, g, obs.psf, c)
        else:
            mean, std, trace, info = _reconstruct_vba(model, g, c, diagonal=method == "mf_vba")
    shape = obs.shape
    return Reconstruction(mean.reshape(shape), std.reshape(shape), method, trace, info)
