"""Synthetic two-phase images and their boundary density."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of a blob phantom.

    ``p**2`` seed pixels are blurred with a Gaussian of standard deviation
    ``c * L / p``, so ``p`` sets the number and size of domains.
    """

    L: int
    p: int
    seed: int = 0
    c: float = 1.0

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("L must be positive")
        if self.p < 1:
            raise ValueError("p must be a positive integer")
        if self.c <= 0:
            raise ValueError("c must be positive")


def as_image(x) -> np.ndarray:
    """Validate a square array of spins and return it as ``int8``."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError(f"image must be square, got shape {x.shape}")
    if not np.all((x == 1) | (x == -1)):
        raise ValueError("image values must be -1 or +1")
    return x.astype(np.int8)


def generate_phantom(spec: PhantomSpec) -> np.ndarray:
    """Draw a binary phantom with values in {-1, +1}, deterministic in ``spec.seed``."""
    L, p = spec.L, spec.p
    if p * p > L * L:
        raise ValueError(f"p**2 = {p * p} seed pixels do not fit in a {L}x{L} image")
    rng = np.random.default_rng(spec.seed)
    seeds = rng.choice(L * L, size=p * p, replace=False)
    img = np.zeros(L * L)
    img[seeds] = 1.0
    blurred = ndimage.gaussian_filter(img.reshape(L, L), sigma=spec.c * L / p, mode="reflect")
    return np.where(blurred >= blurred.mean(), 1, -1).astype(np.int8)


def boundary_mask(image: np.ndarray) -> np.ndarray:
    """Pixels of the +1 phase with a 4-connected neighbor in the -1 phase.

    Computed as the phase minus its erosion by a cross; outside the image the
    phase is replicated, so the border itself is not a boundary.
    """
    phase = np.asarray(image) == 1
    padded = np.pad(phase, 1, mode="edge")
    cross = ndimage.generate_binary_structure(2, 1)
    eroded = ndimage.binary_erosion(padded, structure=cross)[1:-1, 1:-1]
    return phase & ~eroded


def boundary_density(image: np.ndarray) -> float:
    """Fraction of pixels on the internal boundary of the +1 phase."""
    image = np.asarray(image)
    return float(boundary_mask(image).sum()) / image.size


def checkerboard(L: int) -> np.ndarray:
    r, c = np.indices((L, L))
    return np.where((r + c) % 2 == 0, 1, -1).astype(np.int8)
