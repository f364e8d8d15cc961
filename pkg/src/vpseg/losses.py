"""Training objectives.

The plain functions evaluate each loss on arrays. :func:`seg_objective_var`
builds the differentiable segmentation objective on a tape, and
:func:`seg_objective` evaluates it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .field import class_ratios
from .nets import Params, bind, seg_forward_var
from .vpstd import SinkhornError, VPSTDConfig
from .wasserstein import LinearCritic, w1_categorical

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.01
    beta: float = 0.01

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")


def supervised_loss(h, gt) -> float:
    """Mean per-pixel cross-entropy of ``h`` (…, K) against the hard labels ``gt``."""
    h = np.asarray(h, dtype=float)
    K = h.shape[-1]
    flat = h.reshape(-1, K)
    labels = np.asarray(gt).ravel()
    if labels.size != flat.shape[0]:
        raise ValueError("segmentation and ground truth sizes differ")
    picked = flat[np.arange(labels.size), labels]
    if picked.min() < PROB_FLOOR:
        log.warning("zero probability at a true class; clamping to %g", PROB_FLOOR)
        picked = np.maximum(picked, PROB_FLOOR)
    return float(-np.log(picked).mean())


def regression_loss(predicted, gt) -> float:
    d = np.asarray(predicted, dtype=float) - np.asarray(gt, dtype=float)
    return float(d @ d)


def ratio_consistency_loss(V_reg, h) -> float:
    V_reg = np.asarray(V_reg, dtype=float)
    return w1_categorical(V_reg / V_reg.sum(), class_ratios(h))


def critic_objective(critic: LinearCritic, gt_volumes, pred_volumes) -> float:
    """``mean f(pred ratios) - mean f(gt ratios)``; the critic minimizes this."""
    gt = _ratios(gt_volumes)
    pred = _ratios(pred_volumes)
    if len(gt) == 0 or len(pred) == 0:
        raise ValueError("critic objective needs non-empty sets")
    return float(critic(pred).mean() - critic(gt).mean())


def _ratios(volumes) -> np.ndarray:
    v = np.atleast_2d(np.asarray(volumes, dtype=float))
    return v / v.sum(axis=1, keepdims=True)


@dataclass
class Batch:
    """Images and the volumes routed to the VP-STD layer for each of them."""

    labeled_images: list
    labeled_masks: list
    labeled_volumes: list
    unlabeled_images: list
    unlabeled_volumes: list


def seg_objective_var(params: Params, p: dict, batch: Batch, critic: LinearCritic | None,
                      weights: LossWeights, cfg: VPSTDConfig, tape: ad.Tape,
                      stats: dict | None = None) -> ad.Var:
    """L_S + alpha * mean L_G - (beta / M) * mean f(predicted ratios)."""
    def forward(img, V, tag):
        try:
            return seg_forward_var(params, p, img, V, cfg, tape)
        except SinkhornError as exc:
            exc.image = tag
            raise

    terms = []
    if batch.labeled_images:
        ce = [
            ad.cross_entropy(forward(img, V, f"labeled[{i}]"), mask, PROB_FLOOR)
            for i, (img, mask, V) in enumerate(
                zip(batch.labeled_images, batch.labeled_masks, batch.labeled_volumes))
        ]
        terms.append(ad.mean(ce))
    else:
        log.warning("empty labeled batch; supervised term is 0")
    use_g = weights.alpha > 0
    use_w = weights.beta > 0 and critic is not None
    if batch.unlabeled_images and (use_g or use_w):
        lg, lw = [], []
        for i, (img, V) in enumerate(zip(batch.unlabeled_images, batch.unlabeled_volumes)):
            V = np.asarray(V, dtype=float)
            N = float(np.asarray(img).size)
            h = forward(img, V, f"unlabeled[{i}]")
            ratio = ad.scale(ad.class_totals(h), 1.0 / N)
            if use_g:
                lg.append(ad.w1_cdf(V / V.sum(), ratio))
            if use_w:
                lw.append(ad.add(ad.dot(ratio, critic.weights), tape.var(critic.bias)))
        if use_g:
            terms.append(ad.scale(ad.mean(lg), weights.alpha))
        if use_w:
            terms.append(ad.scale(ad.mean(lw), -weights.beta / critic.lipschitz_bound))
        if stats is not None:
            stats["l_g"] = float(np.mean([t.value for t in lg])) if lg else 0.0
    if not terms:
        return tape.var(0.0)
    return ad.add(*terms) if len(terms) > 1 else terms[0]


def seg_objective(params: Params, batch: Batch, critic: LinearCritic | None,
                  weights: LossWeights, cfg: VPSTDConfig) -> float:
    tape = ad.Tape(record=False)
    return float(seg_objective_var(params, bind(params, tape), batch, critic, weights, cfg, tape).value)
