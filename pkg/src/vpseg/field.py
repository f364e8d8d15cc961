"""Grid fields: images, soft/hard segmentations, volumes and Gaussian smoothing.

Conventions used throughout the package:

* an image is a ``(H, W)`` float array with values in ``[0, 1]``;
* a soft segmentation is a ``(..., K)`` float array whose last axis lies on
  the probability simplex (usually ``(H, W, K)``);
* a hard mask is an integer array of class indices with the grid shape;
* a volume vector is a length-``K`` array of pixel counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class GridShapeError(ValueError):
    """Raised when a field does not match the grid it is used on."""


@dataclass(frozen=True)
class KernelSpec:
    """Truncated, renormalized isotropic Gaussian.

    ``radius`` defaults to ``ceil(4 * sigma)``; anything below ``ceil(3 * sigma)``
    is rejected.
    """

    sigma: float = 1.5
    radius: int | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.radius is None:
            object.__setattr__(self, "radius", int(math.ceil(4.0 * self.sigma)))
        min_radius = int(math.ceil(3.0 * self.sigma))
        if self.radius < min_radius:
            raise ValueError(f"radius {self.radius} < ceil(3*sigma) = {min_radius}")

    def weights_1d(self) -> np.ndarray:
        m = np.arange(-self.radius, self.radius + 1, dtype=float)
        w = np.exp(-0.5 * (m / self.sigma) ** 2)
        return w / w.sum()

    def weights_2d(self) -> np.ndarray:
        w = self.weights_1d()
        return np.outer(w, w)


def check_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim != 2 or img.size == 0:
        raise GridShapeError(f"image must be a non-empty 2D array, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must be finite and in [0, 1]")
    return img


def check_soft(h, atol: float = 1e-9) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if h.ndim < 2 or h.shape[-1] < 2:
        raise GridShapeError(f"soft segmentation needs a class axis with K >= 2, got {h.shape}")
    if h.min() < -atol or h.max() > 1.0 + atol:
        raise ValueError("soft segmentation entries must lie in [0, 1]")
    if np.abs(h.sum(axis=-1) - 1.0).max() > atol:
        raise ValueError("soft segmentation rows must sum to 1")
    return h


def check_volumes(V, n_pixels: int | None = None, atol: float = 1e-6) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    if V.ndim != 1 or V.size < 2:
        raise ValueError(f"volume vector must be 1D with K >= 2 entries, got shape {V.shape}")
    if not np.all(np.isfinite(V)) or V.min() < 0:
        raise ValueError("volumes must be finite and nonnegative")
    if n_pixels is not None and abs(V.sum() - n_pixels) > atol:
        raise ValueError(f"volumes sum to {V.sum()!r}, expected {n_pixels}")
    return V


def gaussian_convolve(field, kernel: KernelSpec, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Convolve over the two grid axes with reflection padding.

    ``field`` is ``(H, W)`` or ``(H, W, C)``. A flattened ``(N,)`` / ``(N, C)``
    field is accepted when ``shape=(H, W)`` is given, and is returned flat.
    """
    field = np.asarray(field, dtype=float)
    flat = shape is not None
    if flat:
        H, W = shape
        if field.ndim not in (1, 2) or field.shape[0] != H * W:
            raise GridShapeError(f"field of shape {field.shape} does not fit a {H}x{W} grid")
        field = field.reshape((H, W) + field.shape[1:])
    elif field.ndim not in (2, 3):
        raise GridShapeError(f"expected (H, W) or (H, W, C) field, got {field.shape}")
    w = kernel.weights_1d()
    out = ndimage.correlate1d(field, w, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, w, axis=1, mode="reflect")
    if flat:
        out = out.reshape((-1,) + out.shape[2:])
    return out


def class_ratios(h) -> np.ndarray:
    """Fraction of the image assigned to each class (mean over pixels)."""
    h = np.asarray(h, dtype=float)
    return h.reshape(-1, h.shape[-1]).mean(axis=0)


def hard_assign(h) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return np.argmax(np.asarray(h), axis=-1)


def one_hot(mask, K: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= K):
        raise ValueError(f"labels must lie in [0, {K}), got range [{mask.min()}, {mask.max()}]")
    return np.eye(K)[mask]


def label_volumes(mask, K: int) -> np.ndarray:
    """Per-class pixel counts of a hard mask."""
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    return np.bincount(mask.ravel(), minlength=K).astype(float)
