"""Parallel-beam ray geometry and the 0/1 projection operator.

Each angle partitions the pixel grid into ``L`` detector bins: a pixel
belongs to the bin whose center is nearest to the signed projection of the
pixel center onto the detector axis. Pixels whose projection falls beyond
the detector (image corners at slanted angles) go to the nearest edge bin,
so that every pixel is measured once per angle.

Rays are stored in a flat, CSR-like layout: ``pixels[ptr[m]:ptr[m + 1]]``
are the pixels of ray ``m`` ordered along the ray direction. This layout is
what the message-passing kernels consume directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class Ray:
    """One line sum: the ordered pixels hit by one detector bin at one angle.

    ``steps[k]`` is the Manhattan distance between ``pixels[k]`` and
    ``pixels[k + 1]``, hence ``len(steps) == len(pixels) - 1``.
    """

    angle_index: int
    bin_index: int
    pixels: np.ndarray
    steps: np.ndarray

    def __len__(self) -> int:
        return len(self.pixels)


@dataclass(frozen=True, eq=False)
class RaySet:
    """All rays of a parallel-beam acquisition on an ``L x L`` grid.

    Attributes
    ----------
    L : int
        Image side in pixels.
    angles : ndarray
        Projection angles in radians, in ``[0, pi)``.
    ptr : ndarray
        Ray offsets into ``pixels`` (length ``M + 1``).
    pixels : ndarray
        Row-major pixel indices, concatenated ray by ray.
    steps : ndarray
        For each entry, the Manhattan distance to the previous pixel of the
        same ray; 0 for the first pixel of a ray.
    angle_index, bin_index : ndarray
        Angle and detector bin of each ray (length ``M``).
    """

    L: int
    angles: np.ndarray
    ptr: np.ndarray
    pixels: np.ndarray
    steps: np.ndarray
    angle_index: np.ndarray
    bin_index: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_theta(self) -> int:
        return len(self.angles)

    @property
    def n_pixels(self) -> int:
        return self.L * self.L

    @property
    def n_rays(self) -> int:
        return len(self.ptr) - 1

    @property
    def alpha(self) -> float:
        """Undersampling rate M / N."""
        return self.n_rays / self.n_pixels

    @cached_property
    def lengths(self) -> np.ndarray:
        return np.diff(self.ptr)

    @cached_property
    def entry_ray(self) -> np.ndarray:
        """Ray index of every (ray, pixel) entry."""
        return np.repeat(np.arange(self.n_rays), self.lengths)

    @cached_property
    def angle_ptr(self) -> np.ndarray:
        """Ray offsets per angle; rays are stored angle-major."""
        return np.searchsorted(self.angle_index, np.arange(self.n_theta + 1))

    @cached_property
    def rays(self) -> list[Ray]:
        out = []
        for m in range(self.n_rays):
            a, b = self.ptr[m], self.ptr[m + 1]
            out.append(Ray(int(self.angle_index[m]), int(self.bin_index[m]),
                           self.pixels[a:b], self.steps[a + 1:b]))
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Apply F: line sums of a flat or square image."""
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.n_pixels:
            raise ValueError(f"image has {x.size} pixels, geometry expects {self.n_pixels}")
        return np.bincount(self.entry_ray, weights=x[self.pixels], minlength=self.n_rays)

    def adjoint(self, z: np.ndarray) -> np.ndarray:
        """Apply F^T: spread each ray value back onto its pixels (flat output)."""
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n_rays,):
            raise ValueError(f"expected {self.n_rays} ray values, got shape {z.shape}")
        return np.bincount(self.pixels, weights=z[self.entry_ray], minlength=self.n_pixels)

    def operator_norm_sq(self, n_iter: int = 100, tol: float = 1e-10, seed: int = 0) -> float:
        """Estimate ||F||^2 (largest eigenvalue of F^T F) by power iteration."""
        key = ("norm_sq", n_iter, tol, seed)
        if key in self._cache:
            return self._cache[key]
        rng = np.random.default_rng(seed)
        v = rng.random(self.n_pixels) + 0.5
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(n_iter):
            w = self.adjoint(self.forward(v))
            lam_new = float(np.linalg.norm(w))
            if lam_new == 0.0:
                break
            v = w / lam_new
            if abs(lam_new - lam) <= tol * lam_new:
                lam = lam_new
                break
            lam = lam_new
        self._cache[key] = lam
        return lam


TIE_TOL = 1e-9


def pixel_centers(L: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column coordinates of pixel centers relative to the image center."""
    rc = np.arange(L) - (L - 1) / 2.0
    rows, cols = np.meshgrid(rc, rc, indexing="ij")
    return rows.ravel(), cols.ravel()


def detector_coordinates(L: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """Signed position of every pixel center on the detector axis, and along the ray.

    At ``theta = 0`` the detector axis runs along rows, so rays are image rows
    traversed by increasing column.
    """
    c, s = np.cos(theta), np.sin(theta)
    # cos(pi/2) is 6e-17, not 0; keep axis-aligned angles exactly axis-aligned
    c = 0.0 if abs(c) < 1e-12 else c
    s = 0.0 if abs(s) < 1e-12 else s
    r, col = pixel_centers(L)
    u = r * c + col * s
    t = -r * s + col * c
    return u, t


def nearest_bin(u: np.ndarray, L: int) -> np.ndarray:
    """Index of the nearest of ``L`` unit bins centered on the detector; half-ties go up.

    Coordinates within ``TIE_TOL`` of a bin edge count as on the edge, so that
    rounding noise in cos/sin does not split symmetric ties.
    """
    b = np.floor(u + L / 2.0 + TIE_TOL).astype(np.int64)
    return np.clip(b, 0, L - 1)


def build_ray_set(L: int, n_theta: int) -> RaySet:
    """Build the ray geometry for ``n_theta`` equally spaced angles in ``[0, pi)``.

    Parameters
    ----------
    L : int
        Image side, at least 2.
    n_theta : int
        Number of projection angles, at least 1.

    Returns
    -------
    RaySet
        Rays ordered angle-major, then by detector bin. Empty bins are dropped.
    """
    if int(L) != L or L < 2:
        raise ValueError(f"L must be an integer >= 2, got {L!r}")
    if int(n_theta) != n_theta or n_theta < 1:
        raise ValueError(f"n_theta must be an integer >= 1, got {n_theta!r}")
    L, n_theta = int(L), int(n_theta)
    angles = np.arange(n_theta) * np.pi / n_theta
    pix = np.arange(L * L)
    rows, cols = pix // L, pix % L

    ptr = [0]
    pixels, steps, ang_idx, bin_idx = [], [], [], []
    for k, theta in enumerate(angles):
        u, t = detector_coordinates(L, theta)
        bins = nearest_bin(u, L)
        # sort by bin, then along the ray, then across it (ties are rare)
        order = np.lexsort((u, t, bins))
        sorted_bins = bins[order]
        bounds = np.flatnonzero(np.diff(sorted_bins)) + 1
        for seg in np.split(order, bounds):
            if len(seg) == 0:
                continue
            d = np.abs(np.diff(rows[seg])) + np.abs(np.diff(cols[seg]))
            pixels.append(pix[seg])
            steps.append(np.concatenate(([0], d)))
            ang_idx.append(k)
            bin_idx.append(int(bins[seg[0]]))
            ptr.append(ptr[-1] + len(seg))

    return RaySet(
        L=L,
        angles=angles,
        ptr=np.asarray(ptr, dtype=np.int64),
        pixels=np.concatenate(pixels).astype(np.int64),
        steps=np.concatenate(steps).astype(np.int64),
        angle_index=np.asarray(ang_idx, dtype=np.int64),
        bin_index=np.asarray(bin_idx, dtype=np.int64),
    )


def n_theta_for_alpha(L: int, alpha: float) -> int:
    """Number of angles whose undersampling rate n_theta / L is closest to ``alpha``."""
    return max(1, int(round(alpha * L)))


@dataclass(frozen=True)
class Sinogram:
    """Measured line sums, one per ray, in the ray order of the geometry."""

    values: np.ndarray
    angle_index: np.ndarray
    bin_index: np.ndarray
    n_pixels: np.ndarray
    sigma: float = 0.0

    def __len__(self) -> int:
        return len(self.values)

    def with_values(self, values: np.ndarray, sigma: float | None = None) -> "Sinogram":
        return Sinogram(np.asarray(values, dtype=float), self.angle_index, self.bin_index,
                        self.n_pixels, self.sigma if sigma is None else sigma)

    def check_geometry(self, rays: RaySet) -> None:
        if (len(self) != rays.n_rays
                or not np.array_equal(self.angle_index, rays.angle_index)
                or not np.array_equal(self.bin_index, rays.bin_index)
                or not np.array_equal(self.n_pixels, rays.lengths)):
            raise ValueError("sinogram does not match the ray geometry")


def project(image: np.ndarray, rays: RaySet) -> Sinogram:
    """Line sums ``y_m = sum of image pixels on ray m``."""
    image = np.asarray(image)
    if image.shape != (rays.L, rays.L):
        raise ValueError(f"image shape {image.shape} does not match geometry side {rays.L}")
    y = rays.forward(image)
    return Sinogram(y, rays.angle_index, rays.bin_index, rays.lengths.copy())


def add_noise(sino: Sinogram, sigma: float, seed: int) -> Sinogram:
    """Add i.i.d. Gaussian noise of standard deviation ``sigma`` to every measurement."""
    if not sigma >= 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma!r}")
    if sigma == 0:
        return sino.with_values(sino.values.copy(), sigma=0.0)
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, sigma, size=len(sino))
    return sino.with_values(sino.values + w, sigma=float(sigma))
