"""
MAP estimation and Laplace approximation.

Objectives here are *negative* log joint densities ``U(theta) = -log p(D,
theta)`` and are passed as callables returning ``(value, gradient)``. The
Laplace approximation at the minimizer is

    q(theta)      = N(theta_map, Sigma),   Sigma = (grad^2 U(theta_map))^{-1}
    log Z        ~= -U(theta_map) + (d/2) log(2 pi) + (1/2) log det Sigma

which is exact when ``U`` is quadratic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .exceptions import (
    DegenerateHessianError,
    DivergenceError,
    NumericError,
    SaddlePointError,
)

__all__ = [
    "DescentConfig",
    "MapResult",
    "LaplacePosterior",
    "find_map",
    "laplace_approximate",
    "hessian_fd",
]


@dataclass(frozen=True)
class DescentConfig:
    """Settings for :func:`find_map`.

    ``patience`` is the number of consecutive step halvings allowed at one
    iterate before the descent is declared divergent.
    """

    step_size: float = 1.0
    max_iters: int = 100_000
    grad_tol: float = 1e-8
    patience: int = 60

    def __post_init__(self):
        if self.step_size <= 0 or self.max_iters < 0 or self.grad_tol <= 0:
            raise ValueError("step_size and grad_tol must be positive")


@dataclass(frozen=True, eq=False)
class MapResult:
    theta_map: np.ndarray
    objective_at_map: float
    iterations: int
    grad_norm: float
    status: str  # "converged" | "max_iters" | "stalled"
    step_size: float

    @property
    def converged(self) -> bool:
        return self.status == "converged"


@dataclass(frozen=True, eq=False)
class LaplacePosterior:
    mean: np.ndarray
    covariance: np.ndarray
    log_evidence: float
    hessian: np.ndarray

    @property
    def std(self):
        return np.sqrt(np.diag(self.covariance))


def _evaluate(objective, theta):
    value, grad = objective(theta)
    value = float(value)
    grad = np.asarray(grad, dtype=float).reshape(-1)
    return value, grad


def find_map(objective, init, cfg: DescentConfig | None = None) -> MapResult:
    """Minimize ``objective`` by gradient descent with step halving.

    A trial step is accepted when it does not increase the objective. Steps
    whose objective change is within floating point noise are accepted when
    they reduce the gradient norm, which lets the descent reach tight
    gradient tolerances on well-scaled quadratics.

    Raises
    ------
    NumericError
        The objective or gradient is non-finite at the initial point.
    DivergenceError
        ``cfg.patience`` consecutive halvings failed to find an acceptable
        step.
    """
    cfg = cfg or DescentConfig()
    theta = np.array(init, dtype=float).reshape(-1)
    value, grad = _evaluate(objective, theta)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NumericError("objective or gradient is non-finite at the initial point")
    gnorm = float(np.linalg.norm(grad))
    step = float(cfg.step_size)
    it = 0
    status = "max_iters"
    while True:
        if gnorm <= cfg.grad_tol:
            status = "converged"
            break
        if it >= cfg.max_iters:
            break
        accepted = False
        within_noise = False
        for _ in range(cfg.patience):
            trial = theta - step * grad
            tv, tg = _evaluate(objective, trial)
            if np.isfinite(tv) and np.all(np.isfinite(tg)):
                noise = 4 * np.finfo(float).eps * max(abs(value), abs(tv), 1.0)
                tgnorm = float(np.linalg.norm(tg))
                within_noise = tv <= value + noise
                if tv < value or (within_noise and tgnorm < gnorm):
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            if within_noise:
                status = "stalled"
                break
            raise DivergenceError(
                f"no acceptable step after {cfg.patience} halvings at iteration {it}"
            )
        theta, value, grad, gnorm = trial, tv, tg, tgnorm
        it += 1
    return MapResult(theta, value, it, gnorm, status, step)


def hessian_fd(objective, theta, step=None, use_gradient=True):
    """Central finite-difference Hessian, symmetrized.

    With ``use_gradient`` the columns are differences of gradients, which
    is far more accurate than second differences of values. Default step is
    ``1e-5 * max(1, |theta_i|)`` per coordinate.
    """
    theta = np.array(theta, dtype=float).reshape(-1)
    d = theta.shape[0]
    if step is None:
        h = 1e-5 * np.maximum(1.0, np.abs(theta))
    else:
        h = np.broadcast_to(np.asarray(step, dtype=float), (d,)).copy()

    def value(x):
        out = objective(x)
        v = float(out[0] if isinstance(out, tuple) else out)
        if not np.isfinite(v):
            raise NumericError("non-finite objective value in finite differences")
        return v

    Hs = np.empty((d, d))
    if use_gradient:
        for i in range(d):
            e = np.zeros(d)
            e[i] = h[i]
            gp = _evaluate(objective, theta + e)[1]
            gm = _evaluate(objective, theta - e)[1]
            if not (np.all(np.isfinite(gp)) and np.all(np.isfinite(gm))):
                raise NumericError("non-finite gradient in finite differences")
            Hs[:, i] = (gp - gm) / (2 * h[i])
    else:
        f0 = value(theta)
        for i in range(d):
            ei = np.zeros(d)
            ei[i] = h[i]
            Hs[i, i] = (value(theta + ei) - 2 * f0 + value(theta - ei)) / h[i] ** 2
            for j in range(i):
                ej = np.zeros(d)
                ej[j] = h[j]
                Hs[i, j] = Hs[j, i] = (
                    value(theta + ei + ej)
                    - value(theta + ei - ej)
                    - value(theta - ei + ej)
                    + value(theta - ei - ej)
                ) / (4 * h[i] * h[j])
    return 0.5 * (Hs + Hs.T)


def laplace_approximate(
    objective, theta_map, hessian=None, *, diagonal=False, degenerate_rtol=1e-12, fd_atol=1e-8
) -> LaplacePosterior:
    """Gaussian approximation of ``exp(-U)`` around its minimizer.

    Parameters
    ----------
    objective : callable
        ``theta -> (U(theta), grad U(theta))`` with ``U`` the negative log
        joint density, normalizing constants included if the evidence is
        wanted.
    theta_map : array
        A stationary point of ``U``.
    hessian : array, "fd" or None
        Hessian of ``U`` at ``theta_map``. ``None`` or ``"fd"`` computes it by
        finite differences.
    diagonal : bool
        Keep only the diagonal of the Hessian (diagonal Laplace).
    degenerate_rtol, fd_atol : float
        An eigenvalue at or below ``degenerate_rtol`` times the largest one
        counts as zero. Finite-difference Hessians also treat eigenvalues
        below ``fd_atol`` as zero, since differencing error alone is of
        that order (a flat direction such as ``theta^4`` at 0 comes out
        as ``4 h^2``).

    Raises
    ------
    SaddlePointError
        The Hessian has a negative eigenvalue.
    DegenerateHessianError
        The Hessian is singular to within ``degenerate_rtol``.
    """
    theta_map = np.array(theta_map, dtype=float).reshape(-1)
    d = theta_map.shape[0]
    floor = 0.0
    if hessian is None or (isinstance(hessian, str) and hessian == "fd"):
        Hs = hessian_fd(objective, theta_map)
        floor = fd_atol
    else:
        Hs = np.array(hessian, dtype=float).reshape(d, d)
        Hs = 0.5 * (Hs + Hs.T)
    if diagonal:
        Hs = np.diag(np.diag(Hs))
    eig = linalg.eigvalsh(Hs)
    scale = max(float(np.max(np.abs(eig))), np.finfo(float).tiny)
    if eig[0] < -degenerate_rtol * scale:
        raise SaddlePointError(f"Hessian has negative eigenvalue {eig[0]:.3e}")
    if eig[0] <= max(degenerate_rtol * scale, floor):
        raise DegenerateHessianError(f"Hessian is singular (min eigenvalue {eig[0]:.3e})")
    L = linalg.cholesky(Hs, lower=True)
    cov = linalg.cho_solve((L, True), np.eye(d))
    cov = 0.5 * (cov + cov.T)
    logdet_hess = 2.0 * float(np.sum(np.log(np.diag(L))))
    u_map = _evaluate(objective, theta_map)[0]
    log_z = -u_map + 0.5 * d * np.log(2 * np.pi) - 0.5 * logdet_hess
    return LaplacePosterior(theta_map, cov, float(log_z), Hs)
