"""Network-free segmentation: piecewise-constant data costs + the VP-STD solver."""

from __future__ import annotations

import logging

import numpy as np

from .field import check_image, hard_assign
from .vpstd import VPSTDConfig, td_regularized_solve

log = logging.getLogger(__name__)


def initial_means(img, K: int) -> np.ndarray:
    """Class centroids at the mid-points of K equal-mass intensity bins.

    Falls back to evenly spaced levels over the intensity range when bins tie,
    as on images with fewer distinct values than mass bins.
    """
    img = check_image(img)
    q = np.quantile(img, (np.arange(K) + 0.5) / K)
    if K > 1 and np.any(np.diff(q) <= 0):
        lo, hi = float(img.min()), float(img.max())
        q = lo + (np.arange(K) + 0.5) / K * (hi - lo)
    return q


def chan_vese_costs(img, means) -> np.ndarray:
    """Logits ``-(I - mu_k)^2``, shape (H, W, K)."""
    img = np.asarray(img, dtype=float)
    means = np.asarray(means, dtype=float)
    return -((img[..., None] - means) ** 2)


def segment_variational(img, V, means=None, cfg: VPSTDConfig = VPSTDConfig(),
                        outer_iters: int = 10, tol: float = 1e-5):
    """Alternate the volume-constrained solve with centroid updates.

    Returns ``(hard_mask, soft_segmentation, means)``.
    """
    img = check_image(img)
    V = np.asarray(V, dtype=float)
    K = V.size
    means = initial_means(img, K) if means is None else np.array(means, dtype=float)
    if means.shape != (K,):
        raise ValueError(f"expected {K} class means, got {means.shape}")
    h = None
    for _ in range(max(outer_iters, 1)):
        h = td_regularized_solve(chan_vese_costs(img, means), V, cfg)
        mass = h.reshape(-1, K).sum(axis=0)
        new = means.copy()
        live = mass >= 1e-6
        if not live.all():
            log.warning("degenerate classes %s; freezing their means", np.flatnonzero(~live).tolist())
        new[live] = (h.reshape(-1, K)[:, live] * img.reshape(-1, 1)).sum(axis=0) / mass[live]
        shift = np.abs(new - means).max()
        means = new
        if shift < tol:
            break
    return hard_assign(h), h, means
