"""
Variational Bayesian approximation with natural-gradient updates.

For a Gaussian family the natural-gradient step on the variational free
energy ``E_q[U] - H(q)`` (``U`` the negative log joint) is

    lambda <- lambda - rho * grad_mu (E_q[U] - H(q))

which, written in mean / precision coordinates, becomes

    S' = (1 - rho) S + rho E_q[grad^2 U]
    m' = m - rho S'^{-1} E_q[grad U]

On the linear-Gaussian model ``U`` is quadratic, all expectations are
available in closed form and the fixed point is the exact posterior.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .exceptions import DivergenceError, StepFailureError
from .forward_model import LinearGaussianModel, _as_vector, posterior_precision
from .gaussian_expfam import GaussianMeanCov, GaussianNat, elbo, symmetrize

__all__ = [
    "VbaConfig",
    "VbaTrace",
    "expected_loss_grad_mu",
    "free_energy_grad_mu",
    "natural_gradient_step",
    "gaussian_vba_step",
    "run_vba",
    "fixed_point_mean",
    "mean_field_vba",
]


@dataclass(frozen=True)
class VbaConfig:
    """Step size, stopping and safeguarding settings.

    Iteration stops once the absolute ELBO change drops below ``elbo_tol``
    and the natural-gradient norm below ``grad_tol``, or after
    ``max_iters`` steps.
    """

    rho: float = 0.5
    max_iters: int = 10_000
    elbo_tol: float = 1e-10
    grad_tol: float = 1e-8
    damping: float = 1.0
    max_backoff: int = 10
    jitter_escalations: int = 3
    divergence_cap: float = 1e12
    track_condition: bool = True

    def __post_init__(self):
        if not 0 < self.rho <= 1:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if not 0 < self.damping <= 1:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")
        if self.elbo_tol <= 0 or self.grad_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class VbaTrace:
    elbo: list = field(default_factory=list)
    mean_norm: list = field(default_factory=list)
    precision_cond: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    rho: list = field(default_factory=list)
    converged: bool = False

    def record(self, q, value, gnorm, rho, track_condition=True):
        self.elbo.append(float(value))
        self.mean_norm.append(float(np.linalg.norm(q.m)))
        if track_condition:
            self.precision_cond.append(q.condition_estimate())
        else:
            self.precision_cond.append(float("nan"))
        self.grad_norm.append(float(gnorm))
        self.rho.append(float(rho))

    @property
    def iterations(self) -> int:
        return len(self.elbo) - 1

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "elbo", "mean_norm", "precision_cond"])
            for i, row in enumerate(zip(self.elbo, self.mean_norm, self.precision_cond)):
                w.writerow([i] + [repr(float(v)) for v in row])


def _quadratic(model, g):
    """Precision ``P`` and linear term ``b`` with ``grad U(m) = P m - b``."""
    g = _as_vector(g, model.M, "g")
    P = posterior_precision(model)
    b = model.H.apply_adjoint(g) / model.sigma_eps2
    return P, b


def expected_loss_grad_mu(q: GaussianMeanCov, model: LinearGaussianModel, g):
    """Gradient of ``E_q[U]`` with respect to ``(E[x], E[x x^t])``.

    For quadratic ``U = x^t P x / 2 - b^t x + c`` the expectation is linear
    in the moments, so the gradient is the constant pair ``(-b, P / 2)``.
    """
    P, b = _quadratic(model, g)
    return -b, 0.5 * P


def free_energy_grad_mu(q: GaussianMeanCov, model: LinearGaussianModel, g):
    """Gradient of ``E_q[U] - H(q)`` in expectation coordinates.

    The negative entropy is the convex conjugate of the log partition, so
    its gradient in ``mu`` is the natural parameter of ``q``.
    """
    v, M = expected_loss_grad_mu(q, model, g)
    return v + q.S @ q.m, M - 0.5 * q.S


def natural_gradient_step(n: GaussianNat, elbo_grad_mu, rho: float) -> GaussianNat:
    """``lambda' = lambda - rho * grad``; ``grad`` is a (vector, matrix) pair."""
    gv, gM = elbo_grad_mu
    gv = np.asarray(gv, dtype=float).reshape(-1)
    gM = np.asarray(gM, dtype=float)
    if gv.shape != n.lambda1.shape or gM.shape != n.lambda2.shape:
        raise ValueError("gradient shapes do not match the natural parameters")
    l1 = n.lambda1 - rho * gv
    l2 = symmetrize(n.lambda2 - rho * gM)
    try:
        linalg.cholesky(-2.0 * l2, lower=True)
    except linalg.LinAlgError as exc:
        raise StepFailureError("updated lambda2 is not negative definite") from exc
    return GaussianNat(l1, l2)


def _safeguard(S, escalations):
    S = symmetrize(S)
    try:
        return S, linalg.cholesky(S, lower=True)
    except linalg.LinAlgError:
        pass
    d = S.shape[0]
    jitter = 1e-10 * abs(np.trace(S)) / d
    for _ in range(escalations + 1):
        Sj = S + jitter * np.eye(d)
        try:
            return Sj, linalg.cholesky(Sj, lower=True)
        except linalg.LinAlgError:
            jitter *= 10
    raise StepFailureError("updated precision is not positive definite after jitter")


def gaussian_vba_step(
    q: GaussianMeanCov,
    model: LinearGaussianModel,
    g,
    rho: float,
    *,
    diagonal: bool = False,
    jitter_escalations: int = 3,
    _quad=None,
) -> GaussianMeanCov:
    """One natural-gradient update in mean / precision form.

    The mean step is preconditioned by the *updated* precision, which is
    what makes it coincide with :func:`natural_gradient_step`. With
    ``diagonal`` the precision update keeps only the Hessian diagonal
    (mean-field family).
    """
    if not 0 < rho <= 1:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    P, b = _quad if _quad is not None else _quadratic(model, g)
    target = np.diag(np.diag(P)) if diagonal else P
    S_new, L = _safeguard((1.0 - rho) * q.S + rho * target, jitter_escalations)
    grad = P @ q.m - b
    m_new = q.m - rho * linalg.cho_solve((L, True), grad)
    return GaussianMeanCov._from_chol(m_new, S_new, L)


def _grad_norm(q, P, b, diagonal):
    target = np.diag(np.diag(P)) if diagonal else P
    gv = P @ q.m - b
    gM = 0.5 * (target - q.S)
    return float(np.sqrt(gv @ gv + np.sum(gM * gM)))


def run_vba(
    model: LinearGaussianModel,
    g,
    init: GaussianMeanCov | None = None,
    cfg: VbaConfig | None = None,
    *,
    diagonal: bool = False,
):
    """Iterate :func:`gaussian_vba_step` until the stopping rule holds.

    Returns
    -------
    q : GaussianMeanCov
        Final variational approximation.
    trace : VbaTrace
        ELBO and diagnostics; entry 0 is the initial point.
    """
    cfg = cfg or VbaConfig()
    quad = _quadratic(model, g)
    P, b = quad
    if init is None:
        init = GaussianMeanCov(np.zeros(model.N), np.eye(model.N) / model.sigma_f2)
    q = init
    trace = VbaTrace()
    e_prev = elbo(q, model, g)
    trace.record(q, e_prev, _grad_norm(q, P, b, diagonal), 0.0, cfg.track_condition)
    for _ in range(cfg.max_iters):
        rho = cfg.rho
        for _attempt in range(cfg.max_backoff + 1):
            try:
                q_new = gaussian_vba_step(
                    q, model, g, rho, diagonal=diagonal,
                    jitter_escalations=cfg.jitter_escalations, _quad=quad,
                )
                break
            except StepFailureError:
                rho *= 0.5
        else:
            raise StepFailureError(f"step failed after {cfg.max_backoff} halvings of rho")
        e_new = elbo(q_new, model, g)
        if not np.isfinite(e_new):
            raise DivergenceError("ELBO became non-finite")
        gn = _grad_norm(q_new, P, b, diagonal)
        trace.record(q_new, e_new, gn, rho, cfg.track_condition)
        q = q_new
        if abs(e_new - e_prev) < cfg.elbo_tol and gn < cfg.grad_tol:
            trace.converged = True
            break
        e_prev = e_new
    return q, trace


def mean_field_vba(model: LinearGaussianModel, g, cfg: VbaConfig | None = None, init=None):
    """VBA restricted to diagonal precisions (fully factorized ``q``).

    The converged mean is exact on conjugate models while the marginal
    variances ``1 / P_jj`` never exceed the exact ``(P^{-1})_jj``.
    """
    if init is None:
        init = GaussianMeanCov(np.zeros(model.N), np.eye(model.N) / model.sigma_f2)
    elif np.any(init.S != np.diag(np.diag(init.S))):
        raise ValueError("mean-field initialization must have a diagonal precision")
    return run_vba(model, g, init, cfg, diagonal=True)


def fixed_point_mean(model: LinearGaussianModel, g, init_mean=None, cfg: VbaConfig | None = None):
    """Damped fixed-point iteration ``m <- (1-d) m + d M(m)``, ``M(m) = dE/dm + m``.

    With the covariance held fixed, ``dE/dm = -grad U(m) = b - P m``. The
    iteration is a Richardson scheme and converges only when every
    eigenvalue of ``damping * P`` lies in ``(0, 2)``; otherwise the norm
    blows up and :class:`DivergenceError` is raised.
    """
    cfg = cfg or VbaConfig()
    P, b = _quadratic(model, g)
    m = np.zeros(model.N) if init_mean is None else _as_vector(init_mean, model.N, "init_mean").copy()
    cap = cfg.divergence_cap * (1.0 + float(np.linalg.norm(m)) + float(np.linalg.norm(b)))
    for _ in range(cfg.max_iters):
        dE = b - P @ m
        if np.linalg.norm(dE) < cfg.grad_tol:
            return m
        m = (1.0 - cfg.damping) * m + cfg.damping * (dE + m)
        nm = np.linalg.norm(m)
        if not np.isfinite(nm) or nm > cap:
            raise DivergenceError("fixed-point iteration diverged")
    return m
