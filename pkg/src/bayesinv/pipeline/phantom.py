"""Synthetic piecewise-constant phantoms and their blurred, noisy observations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..exceptions import DimensionError, GenerationError
from ..forward_model import Convolution2D

__all__ = [
    "Phantom",
    "DegradedObservation",
    "gaussian_psf",
    "delta_psf",
    "generate_phantom",
    "degrade",
]

# stream identifiers mixed into seeds so that phantom and noise draws never
# share a stream even when the user passes the same integer
_PHANTOM_STREAM = 0x5048
_NOISE_STREAM = 0x4E53


@dataclass(frozen=True, eq=False)
class Phantom:
    pixels: np.ndarray
    labels: np.ndarray
    level_values: tuple
    kind: str
    seed: int

    def __post_init__(self):
        if self.pixels.shape != self.labels.shape:
            raise DimensionError("pixels and labels must have the same shape")
        if not np.isin(self.labels, (0, 1, 2, 3)).all():
            raise ValueError("labels must lie in {0, 1, 2, 3}")

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True, eq=False)
class DegradedObservation:
    pixels: np.ndarray
    psf: np.ndarray
    noise_sigma: float
    rng_seed: int

    @property
    def shape(self):
        return self.pixels.shape


def gaussian_psf(size=3, sigma=1.0):
    """Normalized, separable Gaussian kernel of odd side ``size``."""
    if size % 2 == 0 or size < 1:
        raise DimensionError(f"PSF size must be odd, got {size}")
    r = np.arange(size) - size // 2
    k = np.exp(-0.5 * (r / sigma) ** 2)
    psf = np.outer(k, k)
    return psf / psf.sum()


def delta_psf(size=1):
    psf = np.zeros((size, size))
    psf[size // 2, size // 2] = 1.0
    return psf


def _shape_mask(kind, rows, cols, rng):
    short = min(rows, cols)
    if kind == "disks":
        radius = rng.uniform(max(1.5, short / 10), max(2.0, short / 5))
        cy = rng.uniform(radius, rows - 1 - radius)
        cx = rng.uniform(radius, cols - 1 - radius)
        yy, xx = np.mgrid[:rows, :cols]
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    h = int(rng.integers(max(2, short // 6), max(3, short * 2 // 5) + 1))
    w = int(rng.integers(max(2, short // 6), max(3, short * 2 // 5) + 1))
    top = int(rng.integers(0, rows - h + 1))
    left = int(rng.integers(0, cols - w + 1))
    mask = np.zeros((rows, cols), dtype=bool)
    mask[top : top + h, left : left + w] = True
    return mask


def generate_phantom(
    kind="mixed",
    size=(32, 32),
    level_values=(0.0, 0.35, 0.65, 1.0),
    rng_seed=0,
    n_shapes=None,
    max_retries=2000,
) -> Phantom:
    """Place non-overlapping disks and/or rectangles on a level-0 background.

    Shapes get levels 1 to 3. ``n_shapes`` defaults to a random count in
    1..5; pass 0 for a uniform background. Shapes keep a one-pixel gap so
    labels stay unambiguous.

    Raises
    ------
    GenerationError
        If the shapes cannot be placed within ``max_retries`` attempts.
    """
    rows, cols = (int(s) for s in size)
    if rows < 8 or cols < 8:
        raise ValueError("phantom must be at least 8 x 8")
    levels = tuple(float(v) for v in level_values)
    if len(levels) != 4 or any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("level_values must be 4 strictly increasing values")
    if levels[0] < 0 or levels[-1] > 1:
        raise ValueError("level_values must lie in [0, 1]")
    if kind not in ("disks", "rectangles", "mixed"):
        raise ValueError(f"unknown phantom kind {kind!r}")
    rng = np.random.default_rng([int(rng_seed), _PHANTOM_STREAM])
    if n_shapes is None:
        n_shapes = int(rng.integers(1, 6))
    if not 0 <= n_shapes <= 5:
        raise ValueError("n_shapes must be in 0..5")

    labels = np.zeros((rows, cols), dtype=np.int64)
    occupied = np.zeros((rows, cols), dtype=bool)
    placed = 0
    tries = 0
    while placed < n_shapes:
        if tries >= max_retries:
            raise GenerationError(f"placed {placed} of {n_shapes} shapes after {tries} tries")
        tries += 1
        shape_kind = kind if kind != "mixed" else ("disks", "rectangles")[int(rng.integers(2))]
        mask = _shape_mask(shape_kind, rows, cols, rng)
        if not mask.any() or (ndimage.binary_dilation(mask) & occupied).any():
            continue
        labels[mask] = 1 + placed % 3 if placed < 3 else int(rng.integers(1, 4))
        occupied |= mask
        placed += 1
    pixels = np.asarray(levels)[labels]
    return Phantom(pixels=pixels, labels=labels, level_values=levels, kind=kind, seed=int(rng_seed))


def degrade(p: Phantom, psf, noise_sigma, rng_seed) -> DegradedObservation:
    """``g = psf * pixels + N(0, noise_sigma^2)`` with zero-padded convolution."""
    psf = np.asarray(psf, dtype=float)
    if psf.ndim != 2 or psf.shape[0] % 2 == 0 or psf.shape[1] % 2 == 0:
        raise DimensionError(f"PSF must have odd sides, got {psf.shape}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    H = Convolution2D(psf, p.shape)
    g = H.apply(p.pixels.ravel()).reshape(p.shape)
    if noise_sigma > 0:
        rng = np.random.default_rng([int(rng_seed), _NOISE_STREAM])
        g = g + noise_sigma * rng.standard_normal(p.shape)
    return DegradedObservation(pixels=g, psf=psf, noise_sigma=float(noise_sigma), rng_seed=int(rng_seed))
