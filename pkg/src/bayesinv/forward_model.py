"""
Linear forward operators and the linear-Gaussian inverse model.

The observation model is ``g = H f + eps`` with ``eps ~ N(0, sigma_eps2 I)``
and prior ``f ~ N(0, sigma_f2 I)``. The posterior is Gaussian with

    mean       = (H^t H + lambda_reg I)^{-1} H^t g
    covariance = sigma_eps2 (H^t H + lambda_reg I)^{-1}

where ``lambda_reg = sigma_eps2 / sigma_f2``. The same mean is reachable
through three factorizations of the normal equations (``A``, ``B``, ``C``
paths), which are exposed separately so they can be checked against each
other.

Two objective conventions are used:

* ``neg_log_posterior`` is the unscaled ridge criterion
  ``||g - H f||^2 + lambda_reg ||f||^2``.
* ``neg_log_joint`` is ``-log p(g, f)`` including normalizing constants,
  i.e. ``neg_log_posterior / (2 sigma_eps2)`` plus a constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg, signal

from .exceptions import CapacityError, DimensionError, InvalidModelError

__all__ = [
    "DENSE_CAP",
    "LinearOperator",
    "DenseOperator",
    "Convolution2D",
    "LinearGaussianModel",
    "PosteriorGaussian",
    "apply",
    "apply_adjoint",
    "posterior_closed_form",
    "reconstruct_A",
    "reconstruct_B",
    "reconstruct_C",
    "neg_log_posterior",
    "grad_neg_log_posterior",
    "hessian_neg_log_posterior",
    "neg_log_joint",
    "grad_neg_log_joint",
    "joint_objective",
    "posterior_precision",
    "log_evidence_analytic",
    "load_matrix_csv",
    "save_matrix_csv",
]

#: Largest number of unknowns for which dense materialization is allowed.
DENSE_CAP = 4096


def _as_vector(x, n, name):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != n:
        raise DimensionError(f"{name} has length {x.shape[0]}, expected {n}")
    return x


class LinearOperator:
    """Abstract linear map ``R^N -> R^M`` with an explicit adjoint."""

    kind: str = "abstract"
    shape: tuple[int, int]

    def apply(self, f):
        raise NotImplementedError

    def apply_adjoint(self, g):
        raise NotImplementedError

    def _dense(self):
        m, n = self.shape
        cols = [self.apply(e) for e in np.eye(n)]
        return np.column_stack(cols) if cols else np.zeros((m, n))

    def to_dense(self, cap=DENSE_CAP):
        """Materialize the operator as an ``M x N`` array.

        Raises
        ------
        CapacityError
            If ``N`` or ``M`` exceeds ``cap``.
        """
        if max(self.shape) > cap:
            raise CapacityError(
                f"operator of shape {self.shape} exceeds dense cap {cap}"
            )
        return self._dense()


class DenseOperator(LinearOperator):
    """Operator backed by an explicit matrix."""

    kind = "dense"

    def __init__(self, matrix):
        matrix = np.array(matrix, dtype=float)
        if matrix.ndim != 2:
            raise DimensionError("dense operator needs a 2-D matrix")
        matrix.setflags(write=False)
        self.matrix = matrix
        self.shape = matrix.shape

    def apply(self, f):
        return self.matrix @ _as_vector(f, self.shape[1], "f")

    def apply_adjoint(self, g):
        return self.matrix.T @ _as_vector(g, self.shape[0], "g")

    def _dense(self):
        return np.array(self.matrix)

    @classmethod
    def from_csv(cls, path):
        return cls(load_matrix_csv(path))

    def __repr__(self):
        return f"DenseOperator(shape={self.shape})"


class Convolution2D(LinearOperator):
    """Same-size 2-D convolution with an odd-sized PSF and zero padding.

    The adjoint is correlation with the same kernel, which is the exact
    transpose under zero padding.

    Parameters
    ----------
    psf : (kr, kc) array
        Kernel with odd side lengths.
    image_shape : (rows, cols)
        Shape of the images the operator acts on. Vectors are the
        row-major flattening of these images.
    boundary : str
        Only ``"zero"`` is supported.
    """

    kind = "convolution2d"

    def __init__(self, psf, image_shape, boundary="zero"):
        psf = np.array(psf, dtype=float)
        if psf.ndim != 2 or psf.shape[0] % 2 == 0 or psf.shape[1] % 2 == 0:
            raise DimensionError(f"PSF must be 2-D with odd sides, got {psf.shape}")
        if boundary != "zero":
            raise ValueError(f"unsupported boundary rule {boundary!r}")
        rows, cols = (int(s) for s in image_shape)
        psf.setflags(write=False)
        self.psf = psf
        self.image_shape = (rows, cols)
        self.boundary = boundary
        n = rows * cols
        self.shape = (n, n)

    def apply(self, f):
        img = _as_vector(f, self.shape[1], "f").reshape(self.image_shape)
        return signal.convolve2d(img, self.psf, mode="same", boundary="fill").ravel()

    def apply_adjoint(self, g):
        img = _as_vector(g, self.shape[0], "g").reshape(self.image_shape)
        return signal.correlate2d(img, self.psf, mode="same", boundary="fill").ravel()

    @classmethod
    def from_csv(cls, path, image_shape):
        return cls(load_matrix_csv(path), image_shape)

    def __repr__(self):
        return f"Convolution2D(psf={self.psf.shape}, image_shape={self.image_shape})"


def apply(H: LinearOperator, f):
    """Return ``H f``."""
    return H.apply(f)


def apply_adjoint(H: LinearOperator, g):
    """Return ``H^t g``."""
    return H.apply_adjoint(g)


@dataclass(frozen=True, eq=False)
class LinearGaussianModel:
    """``g = H f + eps`` with isotropic Gaussian noise and prior."""

    H: LinearOperator
    sigma_eps2: float
    sigma_f2: float
    dense_cap: int = DENSE_CAP

    def __post_init__(self):
        for name in ("sigma_eps2", "sigma_f2"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v <= 0:
                raise InvalidModelError(f"{name} must be positive, got {v}")
            object.__setattr__(self, name, v)

    @property
    def lambda_reg(self) -> float:
        return self.sigma_eps2 / self.sigma_f2

    @property
    def M(self) -> int:
        return self.H.shape[0]

    @property
    def N(self) -> int:
        return self.H.shape[1]

    @cached_property
    def dense_H(self):
        return self.H.to_dense(self.dense_cap)

    @cached_property
    def gram(self):
        """``H^t H`` as a dense array."""
        Hd = self.dense_H
        G = Hd.T @ Hd
        return 0.5 * (G + G.T)


@dataclass(frozen=True, eq=False)
class PosteriorGaussian:
    mean: np.ndarray
    covariance: np.ndarray

    @property
    def std(self):
        return np.sqrt(np.diag(self.covariance))


def _normal_matrix(model):
    return model.gram + model.lambda_reg * np.eye(model.N)


def posterior_precision(model: LinearGaussianModel):
    """Precision of the exact posterior, ``(H^t H + lambda_reg I) / sigma_eps2``."""
    return _normal_matrix(model) / model.sigma_eps2


def posterior_closed_form(model: LinearGaussianModel, g) -> PosteriorGaussian:
    """Exact posterior of the linear-Gaussian model.

    The covariance carries the ``sigma_eps2`` factor so that it is the
    covariance of ``p(f | g)`` and not just the inverse normal matrix.
    """
    g = _as_vector(g, model.M, "g")
    cf = linalg.cho_factor(_normal_matrix(model), lower=True)
    mean = linalg.cho_solve(cf, model.H.apply_adjoint(g))
    inv = linalg.cho_solve(cf, np.eye(model.N))
    cov = model.sigma_eps2 * 0.5 * (inv + inv.T)
    return PosteriorGaussian(mean=mean, covariance=cov)


def reconstruct_A(model: LinearGaussianModel, g):
    """``f = A g`` with ``A = (H^t H + lambda I)^{-1} H^t`` formed explicitly."""
    g = _as_vector(g, model.M, "g")
    cf = linalg.cho_factor(_normal_matrix(model), lower=True)
    A = linalg.cho_solve(cf, model.dense_H.T)
    return A @ g


def reconstruct_B(model: LinearGaussianModel, g):
    """``f = B (H^t g)`` with ``B = (H^t H + lambda I)^{-1}``."""
    g = _as_vector(g, model.M, "g")
    cf = linalg.cho_factor(_normal_matrix(model), lower=True)
    B = linalg.cho_solve(cf, np.eye(model.N))
    return B @ model.H.apply_adjoint(g)


def reconstruct_C(model: LinearGaussianModel, g):
    """``f = H^t (C g) / lambda`` with ``C = (H H^t / lambda + I)^{-1}``.

    The ``1 / lambda`` factor follows from the push-through identity
    ``(H^t H + lambda I)^{-1} H^t = H^t (H H^t + lambda I)^{-1}``. Works in
    data space (``M x M``), the cheaper route when ``M < N``.
    """
    g = _as_vector(g, model.M, "g")
    Hd = model.dense_H
    if model.M > model.dense_cap:
        raise CapacityError(f"data dimension {model.M} exceeds dense cap")
    K = (Hd @ Hd.T) / model.lambda_reg + np.eye(model.M)
    cf = linalg.cho_factor(0.5 * (K + K.T), lower=True)
    C = linalg.cho_solve(cf, np.eye(model.M))
    return model.H.apply_adjoint(C @ g) / model.lambda_reg


def neg_log_posterior(model: LinearGaussianModel, g, f) -> float:
    """Ridge criterion ``||g - H f||^2 + lambda_reg ||f||^2`` (no 1/2 factors)."""
    g = _as_vector(g, model.M, "g")
    f = _as_vector(f, model.N, "f")
    r = g - model.H.apply(f)
    return float(r @ r + model.lambda_reg * (f @ f))


def grad_neg_log_posterior(model: LinearGaussianModel, g, f):
    g = _as_vector(g, model.M, "g")
    f = _as_vector(f, model.N, "f")
    H = model.H
    return 2.0 * (H.apply_adjoint(H.apply(f)) - H.apply_adjoint(g) + model.lambda_reg * f)


def hessian_neg_log_posterior(model: LinearGaussianModel, g=None):
    """``2 (H^t H + lambda_reg I)``; constant in ``f`` so ``g`` is unused."""
    return 2.0 * _normal_matrix(model)


def neg_log_joint(model: LinearGaussianModel, g, f) -> float:
    """``-log p(g, f)`` with all normalizing constants."""
    scaled = neg_log_posterior(model, g, f) / (2.0 * model.sigma_eps2)
    const = 0.5 * model.M * np.log(2 * np.pi * model.sigma_eps2) + 0.5 * model.N * np.log(
        2 * np.pi * model.sigma_f2
    )
    return float(scaled + const)


def grad_neg_log_joint(model: LinearGaussianModel, g, f):
    return grad_neg_log_posterior(model, g, f) / (2.0 * model.sigma_eps2)


def joint_objective(model: LinearGaussianModel, g):
    """Matrix-free ``f -> (-log p(g, f), gradient)`` for descent routines."""
    g = _as_vector(g, model.M, "g")
    H = model.H
    Htg = H.apply_adjoint(g)
    const = 0.5 * model.M * np.log(2 * np.pi * model.sigma_eps2) + 0.5 * model.N * np.log(
        2 * np.pi * model.sigma_f2
    )
    s2 = model.sigma_eps2
    lam = model.lambda_reg

    def objective(f):
        f = np.asarray(f, dtype=float)
        r = H.apply(f) - g
        value = (r @ r + lam * (f @ f)) / (2 * s2) + const
        grad = (H.apply_adjoint(r) + lam * f) / s2
        return float(value), grad

    objective.Htg = Htg
    return objective


def log_evidence_analytic(model: LinearGaussianModel, g) -> float:
    """``log N(g | 0, sigma_f2 H H^t + sigma_eps2 I)`` via Cholesky."""
    g = _as_vector(g, model.M, "g")
    Hd = model.dense_H
    cov = model.sigma_f2 * (Hd @ Hd.T) + model.sigma_eps2 * np.eye(model.M)
    try:
        L = linalg.cholesky(0.5 * (cov + cov.T), lower=True)
    except linalg.LinAlgError as exc:
        raise InvalidModelError("evidence covariance is not positive definite") from exc
    w = linalg.solve_triangular(L, g, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(-0.5 * (w @ w) - 0.5 * logdet - 0.5 * model.M * np.log(2 * np.pi))


def load_matrix_csv(path):
    """Read a header-free, comma separated, row-major real matrix."""
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=float, ndmin=2))


def save_matrix_csv(path, matrix):
    np.savetxt(path, np.atleast_2d(matrix), delimiter=",", fmt="%.17g")
