"""
Deterministic versus Gaussian stochastic forward passes.

Deterministic:  z_0 = x,                    z_l = f_l(W_l z_{l-1} + b_l)
Stochastic:     z_0 ~ N(x, tau_0 I),        z_l ~ N(f_l(W_l z_{l-1} + b_l), tau_l I)

The final layer uses the same Gaussian law as the hidden ones. For chains
with identity activations the output law is Gaussian and
:func:`analytic_propagation` gives its moments exactly; anything nonlinear
goes through Monte Carlo only.

Randomness always comes from an explicit :class:`numpy.random.Generator`
or integer seed; independent streams are derived with ``SeedSequence.spawn``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError, UnsupportedNetworkError

__all__ = [
    "LayerSpec",
    "PredictiveSummary",
    "deterministic_forward",
    "sample_forward",
    "sample_forward_batch",
    "mc_predictive",
    "analytic_propagation",
    "layers_from_unrolled",
]

_ACTIVATIONS = ("identity", "relu", "soft_threshold")


@dataclass(frozen=True, eq=False)
class LayerSpec:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"
    threshold: float = 0.0
    tau: float = 0.0

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.weights, dtype=float))
        b = np.asarray(self.bias, dtype=float).reshape(-1)
        if b.shape[0] != W.shape[0]:
            raise DimensionError(f"bias length {b.shape[0]} does not match {W.shape[0]} outputs")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.tau < 0:
            raise ValueError(f"tau must be non-negative, got {self.tau}")
        if self.threshold < 0:
            raise ValueError("threshold must be non-negative")
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "bias", b)

    def preactivation(self, Z):
        return self.weights @ Z + self.bias[:, None] if Z.ndim == 2 else self.weights @ Z + self.bias

    def activate(self, A):
        if self.activation == "identity":
            return A
        if self.activation == "relu":
            return np.maximum(A, 0.0)
        t = self.threshold
        return np.sign(A) * np.maximum(np.abs(A) - t, 0.0)


@dataclass(frozen=True, eq=False)
class PredictiveSummary:
    mean: np.ndarray
    variance: np.ndarray
    samples_used: int

    @property
    def standard_error(self):
        return np.sqrt(self.variance / self.samples_used)


def _check_chain(layers, x):
    x = np.asarray(x, dtype=float).reshape(-1)
    n = x.shape[0]
    for i, layer in enumerate(layers):
        if layer.weights.shape[1] != n:
            raise DimensionError(
                f"layer {i} expects input of size {layer.weights.shape[1]}, got {n}"
            )
        n = layer.weights.shape[0]
    return x


def _generator(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def deterministic_forward(layers, x):
    z = _check_chain(layers, x)
    for layer in layers:
        z = layer.activate(layer.preactivation(z))
    return z


def sample_forward_batch(layers, x, tau0, n, rng):
    """``n`` independent stochastic passes at once; returns ``(d_out, n)``."""
    if tau0 < 0:
        raise ValueError("tau0 must be non-negative")
    x = _check_chain(layers, x)
    rng = _generator(rng)
    Z = np.repeat(x[:, None], n, axis=1)
    if tau0 > 0:
        Z = Z + np.sqrt(tau0) * rng.standard_normal(Z.shape)
    for layer in layers:
        Z = layer.activate(layer.preactivation(Z))
        if layer.tau > 0:
            Z = Z + np.sqrt(layer.tau) * rng.standard_normal(Z.shape)
    return Z


def sample_forward(layers, x, tau0, rng_seed):
    """One draw of the stochastic chain. With every tau zero this is exactly
    :func:`deterministic_forward`."""
    if tau0 < 0:
        raise ValueError("tau0 must be non-negative")
    z = _check_chain(layers, x)
    rng = _generator(rng_seed)
    if tau0 > 0:
        z = z + np.sqrt(tau0) * rng.standard_normal(z.shape)
    for layer in layers:
        z = layer.activate(layer.preactivation(z))
        if layer.tau > 0:
            z = z + np.sqrt(layer.tau) * rng.standard_normal(z.shape)
    return z


def _combine(a, b):
    # pairwise (Chan et al.) merge of (count, mean, M2)
    na, ma, sa = a
    nb, mb, sb = b
    n = na + nb
    delta = mb - ma
    return n, ma + delta * (nb / n), sa + sb + delta**2 * (na * nb / n)


def mc_predictive(layers, x, tau0, n_samples, rng_seed, chunk_size=100_000):
    """Sample mean and unbiased sample variance of the output.

    Samples are drawn in chunks, each from its own spawned stream, and the
    chunk statistics are merged pairwise, so the result depends only on the
    seed and chunk size. Statistics are accumulated relative to the first
    draw, which keeps them accurate when the spread is small. A chain with
    every variance zero returns its deterministic output directly.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    if tau0 == 0 and all(layer.tau == 0 for layer in layers):
        # point mass: every draw is the deterministic output
        out = deterministic_forward(layers, x)
        return PredictiveSummary(mean=out, variance=np.zeros_like(out), samples_used=int(n_samples))
    ss = rng_seed if isinstance(rng_seed, np.random.SeedSequence) else np.random.SeedSequence(rng_seed)
    n_chunks = -(-n_samples // chunk_size)
    acc = None
    pivot = None
    for i, child in enumerate(ss.spawn(n_chunks)):
        n = min(chunk_size, n_samples - i * chunk_size)
        Z = sample_forward_batch(layers, x, tau0, n, np.random.default_rng(child))
        if pivot is None:
            pivot = Z[:, 0].copy()
        Z -= pivot[:, None]
        mean = Z.mean(axis=1)
        m2 = np.sum((Z - mean[:, None]) ** 2, axis=1)
        part = (n, mean, m2)
        acc = part if acc is None else _combine(acc, part)
    count, mean, m2 = acc
    return PredictiveSummary(mean=pivot + mean, variance=m2 / (count - 1), samples_used=count)


def analytic_propagation(layers, x, tau0):
    """Exact output mean and covariance for identity-activation chains."""
    if any(layer.activation != "identity" for layer in layers):
        raise UnsupportedNetworkError("analytic propagation supports identity activations only")
    if tau0 < 0:
        raise ValueError("tau0 must be non-negative")
    mean = _check_chain(layers, x)
    cov = tau0 * np.eye(mean.shape[0])
    for layer in layers:
        W = layer.weights
        mean = W @ mean + layer.bias
        cov = W @ cov @ W.T + layer.tau * np.eye(W.shape[0])
    return mean, 0.5 * (cov + cov.T)


def layers_from_unrolled(net, g, tau=0.0):
    """Express an unrolled net's layers as :class:`LayerSpec` acting on ``z_0``.

    The injection ``W0 g`` becomes the bias of every layer.
    """
    inj = net.W0 @ np.asarray(g, dtype=float).reshape(-1)
    return [
        LayerSpec(W, inj, activation="soft_threshold", threshold=net.threshold, tau=tau)
        for W in net.layers
    ]
