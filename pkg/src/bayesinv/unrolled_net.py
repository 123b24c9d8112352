"""
Unrolled iterative shrinkage network.

Each of the ``K`` layers computes

    z_k = soft_threshold(W_k z_{k-1} + W0 g, t)

with the input injection ``W0 g`` entering every layer. Choosing
``W0 = alpha H^t`` and ``W_k = I - alpha H^t H`` makes ``K`` layers exactly
``K`` ISTA iterations; training then adjusts ``W0`` and the ``W_k`` (a
single shared ``W`` when tied) by full-batch gradient descent.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .exceptions import DimensionError, NumericError
from .forward_model import LinearOperator, _as_vector

__all__ = [
    "UnrolledNet",
    "TrainConfig",
    "soft_threshold",
    "spectral_bound",
    "build_ista_net",
    "forward",
    "ista_reference",
    "loss",
    "loss_and_grad",
    "train",
    "save_net",
    "load_net",
    "save_loss_trace",
]


def soft_threshold(x, t):
    """Componentwise ``sign(x) * max(|x| - t, 0)``."""
    if t < 0:
        raise ValueError(f"threshold must be non-negative, got {t}")
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


@dataclass(frozen=True, eq=False)
class UnrolledNet:
    """``K`` shrinkage layers sharing the injection matrix ``W0``.

    ``weights`` holds one matrix when ``tied`` and ``K`` matrices otherwise.
    """

    K: int
    W0: np.ndarray
    weights: tuple
    threshold: float
    tied: bool
    alpha: float | None = None
    alpha_bound: float | None = None

    def __post_init__(self):
        W0 = np.asarray(self.W0, dtype=float)
        ws = tuple(np.asarray(w, dtype=float) for w in self.weights)
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if len(ws) != (1 if self.tied else self.K):
            raise ValueError("tied nets store one W, untied nets store K")
        n = W0.shape[0]
        for w in ws:
            if w.shape != (n, n):
                raise DimensionError(f"layer weight has shape {w.shape}, expected {(n, n)}")
        if self.threshold < 0:
            raise ValueError("threshold must be non-negative")
        object.__setattr__(self, "W0", W0)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "threshold", float(self.threshold))

    @property
    def layers(self):
        """The ``K`` per-layer matrices (the same object repeated when tied)."""
        return [self.weights[0]] * self.K if self.tied else list(self.weights)

    @property
    def n_unknowns(self) -> int:
        return self.W0.shape[0]

    @property
    def n_data(self) -> int:
        return self.W0.shape[1]

    @property
    def alpha_ok(self) -> bool:
        return self.alpha is None or self.alpha_bound is None or self.alpha <= self.alpha_bound


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    epochs: int = 100
    weight_decay: float = 0.0
    learn_threshold: bool = False
    max_halvings: int = 40
    loss: str = "squared_error"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs <= 0:
            raise ValueError("learning_rate and epochs must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.loss != "squared_error":
            raise ValueError(f"unsupported loss {self.loss!r}")


def spectral_bound(H: LinearOperator, iters=500, tol=1e-12, seed=0) -> float:
    """Largest eigenvalue of ``H^t H`` by power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(H.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = H.apply_adjoint(H.apply(v))
        new = float(np.linalg.norm(w))
        if new == 0.0:
            return 0.0
        v = w / new
        if abs(new - lam) <= tol * new:
            lam = new
            break
        lam = new
    return lam


def build_ista_net(H: LinearOperator, alpha: float, threshold: float, K: int, tied: bool = True):
    """Analytic ISTA weights: ``W0 = alpha H^t``, ``W_k = I - alpha H^t H``.

    A step ``alpha`` above ``1 / ||H^t H||`` triggers a warning and is
    recorded on the net (``alpha_ok``) but still allowed.
    """
    Hd = H.to_dense()
    L = spectral_bound(H)
    bound = 1.0 / L if L > 0 else np.inf
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if alpha > bound * (1 + 1e-9):
        warnings.warn(f"alpha={alpha} exceeds the stability bound {bound:.6g}", stacklevel=2)
    n = Hd.shape[1]
    W0 = alpha * Hd.T
    W = np.eye(n) - alpha * (Hd.T @ Hd)
    weights = (W,) if tied else tuple(W.copy() for _ in range(K))
    return UnrolledNet(K, W0, weights, threshold, tied, alpha=alpha, alpha_bound=bound)


def _run(net, G, Z0=None):
    """Batched forward pass. ``G`` is ``M x n``; returns (activations, pre-activations)."""
    inj = net.W0 @ G
    z = inj if Z0 is None else Z0
    acts = [z]
    pres = []
    t = net.threshold
    for W in net.layers:
        a = W @ z + inj
        z = np.sign(a) * np.maximum(np.abs(a) - t, 0.0)
        pres.append(a)
        acts.append(z)
    return acts, pres


def forward(net: UnrolledNet, g, z0=None):
    """Run the ``K`` layers on one observation.

    Returns the output ``z_K`` and the list ``[z_0, ..., z_K]``.
    """
    g = _as_vector(g, net.n_data, "g")
    Z0 = None if z0 is None else _as_vector(z0, net.n_unknowns, "z0")[:, None]
    acts, _ = _run(net, g[:, None], Z0)
    acts = [a[:, 0] for a in acts]
    return acts[-1], acts


def ista_reference(H: LinearOperator, g, alpha, threshold, K, z0=None):
    """Plain ISTA, ``z <- soft_threshold(z - alpha H^t (H z - g), t)``.

    ``z0`` defaults to ``alpha H^t g`` to match :func:`forward`.
    """
    g = _as_vector(g, H.shape[0], "g")
    z = alpha * H.apply_adjoint(g) if z0 is None else _as_vector(z0, H.shape[1], "z0").copy()
    for _ in range(K):
        z = soft_threshold(z - alpha * H.apply_adjoint(H.apply(z) - g), threshold)
    return z


def _stack(dataset, net):
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    G = np.column_stack([_as_vector(gi, net.n_data, "g") for gi, _ in dataset])
    F = np.column_stack([_as_vector(fi, net.n_unknowns, "f") for _, fi in dataset])
    return G, F


def _decay(net):
    return float(np.sum(net.W0**2) + sum(np.sum(w**2) for w in net.weights))


def loss(net: UnrolledNet, dataset, weight_decay=0.0) -> float:
    """Mean squared reconstruction error plus ``weight_decay * sum ||W||_F^2``."""
    G, F = _stack(dataset, net)
    acts, _ = _run(net, G)
    r = acts[-1] - F
    return float(np.sum(r * r) / G.shape[1] + weight_decay * _decay(net))


def loss_and_grad(net: UnrolledNet, dataset, weight_decay=0.0):
    """Loss and its gradient by reverse accumulation through the layers.

    The soft-threshold derivative is 1 where ``|a| > t`` and 0 elsewhere
    (including the kink). Returns ``(loss, grads)`` with ``grads`` a dict
    holding ``"W0"``, ``"weights"`` (tuple matching ``net.weights``) and
    ``"threshold"``.
    """
    G, F = _stack(dataset, net)
    n = G.shape[1]
    acts, pres = _run(net, G)
    r = acts[-1] - F
    value = float(np.sum(r * r) / n + weight_decay * _decay(net))

    t = net.threshold
    layers = net.layers
    dW = [np.zeros_like(w) for w in layers]
    dW0 = np.zeros_like(net.W0)
    dt = 0.0
    dz = 2.0 * r / n
    for k in range(net.K - 1, -1, -1):
        a = pres[k]
        active = np.abs(a) > t
        da = dz * active
        dt -= float(np.sum(da * np.sign(a)))
        dW[k] = da @ acts[k].T
        dW0 += da @ G.T
        dz = layers[k].T @ da
    # z_0 = W0 g
    dW0 += dz @ G.T
    dW0 += 2 * weight_decay * net.W0
    if net.tied:
        wgrads = (sum(dW) + 2 * weight_decay * net.weights[0],)
    else:
        wgrads = tuple(d + 2 * weight_decay * w for d, w in zip(dW, net.weights))
    return value, {"W0": dW0, "weights": wgrads, "threshold": dt}


def _step(net, grads, lr, learn_threshold):
    W0 = net.W0 - lr * grads["W0"]
    ws = tuple(w - lr * d for w, d in zip(net.weights, grads["weights"]))
    t = net.threshold
    if learn_threshold:
        t = max(t - lr * grads["threshold"], 0.0)
    return replace(net, W0=W0, weights=ws, threshold=t)


def train(net: UnrolledNet, dataset, cfg: TrainConfig | None = None):
    """Full-batch gradient descent with learning-rate halving on increase.

    Returns the trained net and the loss trace (entry 0 is the initial
    loss); the trace is non-increasing by construction.
    """
    cfg = cfg or TrainConfig()
    lr = cfg.learning_rate
    value, grads = loss_and_grad(net, dataset, cfg.weight_decay)
    if not np.isfinite(value):
        raise NumericError("initial loss is non-finite")
    trace = [value]
    for _ in range(cfg.epochs):
        for _h in range(cfg.max_halvings):
            cand = _step(net, grads, lr, cfg.learn_threshold)
            cv = loss(cand, dataset, cfg.weight_decay)
            if np.isfinite(cv) and cv <= value:
                break
            lr *= 0.5
        else:
            # no descent at any tried rate: keep the current net
            trace.append(value)
            continue
        net = cand
        value, grads = loss_and_grad(net, dataset, cfg.weight_decay)
        if not np.isfinite(value):
            raise NumericError("loss became non-finite")
        trace.append(value)
    return net, trace


def save_net(net: UnrolledNet, directory):
    """Write ``weights.csv`` (long format) and ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "weights.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["param", "layer", "row", "col", "value"])
        mats = [("W0", 0, net.W0)] + [("W", k, m) for k, m in enumerate(net.weights)]
        for name, layer, mat in mats:
            for (i, j), v in np.ndenumerate(mat):
                w.writerow([name, layer, i, j, repr(float(v))])
    manifest = {
        "K": net.K,
        "n_unknowns": net.n_unknowns,
        "n_data": net.n_data,
        "tied": net.tied,
        "threshold": net.threshold,
        "alpha": net.alpha,
        "alpha_bound": None if net.alpha_bound is None or not np.isfinite(net.alpha_bound) else net.alpha_bound,
    }
    with open(d / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_net(directory) -> UnrolledNet:
    d = Path(directory)
    with open(d / "manifest.json") as fh:
        man = json.load(fh)
    n, m, K = man["n_unknowns"], man["n_data"], man["K"]
    W0 = np.zeros((n, m))
    weights = [np.zeros((n, n)) for _ in range(1 if man["tied"] else K)]
    with open(d / "weights.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            i, j, v = int(row["row"]), int(row["col"]), float(row["value"])
            if row["param"] == "W0":
                W0[i, j] = v
            else:
                weights[int(row["layer"])][i, j] = v
    return UnrolledNet(
        K, W0, tuple(weights), man["threshold"], man["tied"],
        alpha=man.get("alpha"), alpha_bound=man.get("alpha_bound"),
    )


def save_loss_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])
