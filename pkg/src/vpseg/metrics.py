"""Overlap and surface-distance metrics for hard segmentations."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class EmptyClassError(ValueError):
    """A class is absent from one of the masks; record ``sentinel`` instead."""

    def __init__(self, k: int, sentinel: float):
        super().__init__(f"class {k} is empty in at least one mask; use the sentinel {sentinel:.4f}")
        self.k = k
        self.sentinel = sentinel


def _pair(a, b, k):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a == k, b == k


def dice(a, b, k: int) -> float:
    A, B = _pair(a, b, k)
    total = A.sum() + B.sum()
    if total == 0:
        return 1.0
    return 2.0 * float(np.logical_and(A, B).sum()) / float(total)


def jaccard(a, b, k: int) -> float:
    A, B = _pair(a, b, k)
    union = np.logical_or(A, B).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(A, B).sum()) / float(union)


def boundary(region: np.ndarray) -> np.ndarray:
    """Region pixels with at least one 4-neighbour outside (the border is outside)."""
    padded = np.pad(region, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return region & ~interior


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # exact Euclidean distance from every pixel to the nearest dst pixel
    dist = ndimage.distance_transform_edt(~dst)
    return dist[src]


def surface_distances(a, b, k: int) -> tuple[float, float]:
    """(ASD, HD95) between the class-``k`` boundaries of two 2D masks, in pixels."""
    A, B = _pair(a, b, k)
    if A.ndim != 2:
        raise ValueError("surface distances need 2D masks")
    if not A.any() or not B.any():
        raise EmptyClassError(k, math.hypot(*A.shape))
    bA, bB = boundary(A), boundary(B)
    d_ab = _directed(bA, bB)
    d_ba = _directed(bB, bA)
    pooled = np.sort(np.concatenate([d_ab, d_ba]))
    asd = float(pooled.sum() / pooled.size)
    rank = math.ceil(0.95 * pooled.size)
    return asd, float(pooled[rank - 1])


@dataclass
class MetricsReport:
    """Per-class metric arrays (index = class) plus foreground means."""

    dice: np.ndarray
    jaccard: np.ndarray
    asd: np.ndarray
    hd95: np.ndarray
    n_images: int = 0

    def mean(self, name: str) -> float:
        return float(np.mean(getattr(self, name)[1:]))

    @property
    def mean_dice(self) -> float:
        return self.mean("dice")

    def rows(self):
        for k in range(len(self.dice)):
            yield str(k), self.dice[k], self.jaccard[k], self.asd[k], self.hd95[k]
        yield "mean", self.mean("dice"), self.mean("jaccard"), self.mean("asd"), self.mean("hd95")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "dice", "jaccard", "asd", "hd95"])
            for name, *vals in self.rows():
                writer.writerow([name] + [f"{v:.10g}" for v in vals])


def _overlap_counts(pred, gt, K: int) -> np.ndarray:
    """Per-class (|A and B|, |A| + |B|, |A or B|)."""
    out = np.zeros((K, 3))
    for k in range(K):
        A, B = _pair(pred, gt, k)
        out[k] = np.logical_and(A, B).sum(), A.sum() + B.sum(), np.logical_or(A, B).sum()
    return out


def image_metrics(pred, gt, K: int) -> dict[str, np.ndarray]:
    out = {name: np.zeros(K) for name in ("dice", "jaccard", "asd", "hd95")}
    for k in range(K):
        out["dice"][k] = dice(pred, gt, k)
        out["jaccard"][k] = jaccard(pred, gt, k)
        try:
            out["asd"][k], out["hd95"][k] = surface_distances(pred, gt, k)
        except EmptyClassError as exc:
            if (np.asarray(pred) == k).any() or (np.asarray(gt) == k).any():
                out["asd"][k] = out["hd95"][k] = exc.sentinel
    return out


def aggregate(pairs, K: int) -> MetricsReport:
    """Aggregate ``(pred, gt)`` pairs in order.

    Dice and Jaccard use overlap counts pooled over all images, so the
    per-class identity J = D / (2 - D) holds for the report. ASD and HD95 are
    per-image means.
    """
    counts = np.zeros((K, 3))
    dist = {name: np.zeros(K) for name in ("asd", "hd95")}
    n = 0
    for pred, gt in pairs:
        counts += _overlap_counts(pred, gt, K)
        per = image_metrics(pred, gt, K)
        for name in dist:
            dist[name] += per[name]
        n += 1
    if n == 0:
        raise ValueError("no images to evaluate")
    inter, total, union = counts.T
    empty = union == 0
    d = np.where(empty, 1.0, 2.0 * inter / np.where(empty, 1.0, total))
    j = np.where(empty, 1.0, inter / np.where(empty, 1.0, union))
    return MetricsReport(d, j, dist["asd"] / n, dist["hd95"] / n, n_images=n)


def evaluate(params, cfg, dataset, volume_source: str, reg_params=None, v_emp=None) -> MetricsReport:
    """Segment every sample with volumes from ``reg``, ``gt`` or ``emp`` and score it."""
    from .nets import reg_forward, seg_forward

    if volume_source not in ("reg", "gt", "emp"):
        raise ValueError(f"unknown volume source {volume_source!r}")
    if volume_source == "reg" and reg_params is None:
        raise ValueError("volume_source='reg' needs regression parameters")
    if volume_source == "emp" and v_emp is None:
        raise ValueError("volume_source='emp' needs V_emp")
    K = params.n_classes

    def pairs():
        for sample in dataset:
            if volume_source == "gt":
                V = sample.volumes
            elif volume_source == "emp":
                V = v_emp
            else:
                V = reg_forward(reg_params, sample.image)
            h = seg_forward(params, sample.image, V, cfg)
            yield np.argmax(h, axis=-1), sample.mask

    return aggregate(pairs(), K)
