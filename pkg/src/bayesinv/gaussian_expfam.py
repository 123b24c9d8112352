"""
Multivariate Gaussians in three coordinate systems.

* mean / precision ``(m, S)``           -- :class:`GaussianMeanCov`
* natural ``(S m, -S/2)``                 -- :class:`GaussianNat`
* expectation ``(E[x], E[x x^t])``        -- :class:`GaussianMoments`

Natural and expectation coordinates are dual: ``mu = grad F(lambda)`` where
``F`` is the log-partition function, and ``lambda = grad F*(mu)``.

Every inversion and determinant goes through a Cholesky factorization, and a
failed factorization is how non positive definite parameters are detected.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg

from .exceptions import DimensionError, InvalidDistributionError
from .forward_model import LinearGaussianModel, _as_vector

__all__ = [
    "GaussianMeanCov",
    "GaussianNat",
    "GaussianMoments",
    "nat_from_meancov",
    "meancov_from_nat",
    "moments_from_nat",
    "nat_from_moments",
    "meancov_from_moments",
    "log_partition",
    "entropy",
    "kl_gaussian",
    "expected_neg_log_joint",
    "elbo",
]

_LOG_2PI = np.log(2.0 * np.pi)
_SYM_RTOL = 1e-12


def symmetrize(X):
    X = np.asarray(X, dtype=float)
    return 0.5 * (X + X.T)


def _check_square_symmetric(X, name):
    X = np.array(X, dtype=float)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    if X.ndim != 2 or X.shape[0] != X.shape[1]:
        raise DimensionError(f"{name} must be a square matrix, got shape {X.shape}")
    scale = np.max(np.abs(X)) if X.size else 0.0
    if not np.all(np.isfinite(X)):
        raise InvalidDistributionError(f"{name} has non-finite entries")
    if np.max(np.abs(X - X.T), initial=0.0) > _SYM_RTOL * max(scale, 1e-300):
        raise InvalidDistributionError(f"{name} is not symmetric")
    return symmetrize(X)


def _cholesky(S, name="precision"):
    try:
        return linalg.cholesky(S, lower=True)
    except linalg.LinAlgError as exc:
        raise InvalidDistributionError(f"{name} is not positive definite") from exc


def _chol_logdet(L):
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def _chol_inv(L):
    inv, info = linalg.lapack.dpotri(L, lower=1)
    if info != 0:
        raise InvalidDistributionError("inversion from Cholesky factor failed")
    # dpotri fills the lower triangle only
    inv = np.tril(inv)
    return inv + np.tril(inv, -1).T


@dataclass(frozen=True, eq=False)
class GaussianMeanCov:
    """Gaussian ``N(m, S^{-1})`` parameterized by mean and *precision* ``S``."""

    m: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=float).reshape(-1)
        S = _check_square_symmetric(self.S, "S")
        if S.shape[0] != m.shape[0]:
            raise DimensionError(f"mean has length {m.shape[0]}, precision is {S.shape}")
        m.setflags(write=False)
        S.setflags(write=False)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "S", S)
        # validates positive definiteness eagerly
        _ = self.chol

    @classmethod
    def _from_chol(cls, m, S, L):
        """Build from a precision whose lower Cholesky factor is already known."""
        obj = object.__new__(cls)
        m = np.array(m, dtype=float).reshape(-1)
        S = symmetrize(S)
        m.setflags(write=False)
        S.setflags(write=False)
        object.__setattr__(obj, "m", m)
        object.__setattr__(obj, "S", S)
        obj.__dict__["chol"] = L
        return obj

    @property
    def dim(self) -> int:
        return self.m.shape[0]

    @cached_property
    def chol(self):
        return _cholesky(self.S)

    def condition_estimate(self) -> float:
        """1-norm condition number ``||S||_1 ||S^-1||_1``.

        Uses the cached covariance. LAPACK's iterative estimator (``dpocon``)
        would avoid the inverse but its last digits can vary from call to
        call, which breaks byte-identical trace files.
        """
        return float(np.linalg.norm(self.S, 1) * np.linalg.norm(self.covariance, 1))

    @cached_property
    def covariance(self):
        return _chol_inv(self.chol)

    @property
    def variances(self):
        return np.diag(self.covariance)

    @cached_property
    def logdet_precision(self) -> float:
        return _chol_logdet(self.chol)


@dataclass(frozen=True, eq=False)
class GaussianNat:
    """Natural parameters ``lambda1 = S m`` and ``lambda2 = -S / 2``."""

    lambda1: np.ndarray
    lambda2: np.ndarray

    def __post_init__(self):
        l1 = np.array(self.lambda1, dtype=float).reshape(-1)
        l2 = _check_square_symmetric(self.lambda2, "lambda2")
        if l2.shape[0] != l1.shape[0]:
            raise DimensionError("lambda1 and lambda2 dimensions differ")
        l1.setflags(write=False)
        l2.setflags(write=False)
        object.__setattr__(self, "lambda1", l1)
        object.__setattr__(self, "lambda2", l2)

    @property
    def dim(self) -> int:
        return self.lambda1.shape[0]


@dataclass(frozen=True, eq=False)
class GaussianMoments:
    """Expectation parameters ``mu1 = E[x]`` and ``mu2 = E[x x^t]``."""

    mu1: np.ndarray
    mu2: np.ndarray

    def __post_init__(self):
        mu1 = np.array(self.mu1, dtype=float).reshape(-1)
        mu2 = _check_square_symmetric(self.mu2, "mu2")
        if mu2.shape[0] != mu1.shape[0]:
            raise DimensionError("mu1 and mu2 dimensions differ")
        mu1.setflags(write=False)
        mu2.setflags(write=False)
        object.__setattr__(self, "mu1", mu1)
        object.__setattr__(self, "mu2", mu2)

    @property
    def dim(self) -> int:
        return self.mu1.shape[0]


def nat_from_meancov(g: GaussianMeanCov) -> GaussianNat:
    return GaussianNat(g.S @ g.m, -0.5 * g.S)


def meancov_from_nat(n: GaussianNat) -> GaussianMeanCov:
    S = -2.0 * n.lambda2
    L = _cholesky(S, "-2 lambda2")
    m = linalg.cho_solve((L, True), n.lambda1)
    return GaussianMeanCov(m, S)


def moments_from_nat(n: GaussianNat) -> GaussianMoments:
    g = meancov_from_nat(n)
    return GaussianMoments(g.m, g.covariance + np.outer(g.m, g.m))


def meancov_from_moments(mo: GaussianMoments) -> GaussianMeanCov:
    cov = symmetrize(mo.mu2 - np.outer(mo.mu1, mo.mu1))
    L = _cholesky(cov, "mu2 - mu1 mu1^t")
    return GaussianMeanCov(mo.mu1, _chol_inv(L))


def nat_from_moments(mo: GaussianMoments) -> GaussianNat:
    return nat_from_meancov(meancov_from_moments(mo))


def log_partition(n: GaussianNat) -> float:
    """``F(lambda) = m^t S m / 2 - log det(S) / 2 + d log(2 pi) / 2``."""
    g = meancov_from_nat(n)
    return float(0.5 * g.m @ g.S @ g.m - 0.5 * g.logdet_precision + 0.5 * g.dim * _LOG_2PI)


def entropy(g: GaussianMeanCov) -> float:
    """Differential entropy ``log det(2 pi e S^{-1}) / 2``."""
    return float(0.5 * g.dim * (1.0 + _LOG_2PI) - 0.5 * g.logdet_precision)


def kl_gaussian(q: GaussianMeanCov, p: GaussianMeanCov) -> float:
    """Closed-form ``KL(q || p)``."""
    if q.dim != p.dim:
        raise DimensionError(f"dimension mismatch: {q.dim} vs {p.dim}")
    dm = p.m - q.m
    trace_term = float(np.sum(p.S * q.covariance))
    val = 0.5 * (trace_term + dm @ p.S @ dm - q.dim + q.logdet_precision - p.logdet_precision)
    # cancellation can leave tiny negatives at q == p
    if -1e-12 * max(1.0, abs(trace_term)) < val < 0:
        val = 0.0
    return float(val)


def expected_neg_log_joint(q: GaussianMeanCov, model: LinearGaussianModel, g_obs) -> float:
    """``E_q[-log p(g, theta)]`` in closed form for the linear-Gaussian model."""
    if q.dim != model.N:
        raise DimensionError(f"q has dimension {q.dim}, model has {model.N} unknowns")
    g = _as_vector(g_obs, model.M, "g_obs")
    r = g - model.H.apply(q.m)
    cov = q.covariance
    data = r @ r + float(np.sum(model.gram * cov))
    prior = q.m @ q.m + float(np.trace(cov))
    return float(
        data / (2 * model.sigma_eps2)
        + 0.5 * model.M * np.log(2 * np.pi * model.sigma_eps2)
        + prior / (2 * model.sigma_f2)
        + 0.5 * model.N * np.log(2 * np.pi * model.sigma_f2)
    )


def elbo(q: GaussianMeanCov, model: LinearGaussianModel, g_obs) -> float:
    """Evidence lower bound ``E_q[log p(g, theta)] + H(q)``.

    Equals the log evidence exactly when ``q`` is the posterior.
    """
    return -expected_neg_log_joint(q, model, g_obs) + entropy(q)
