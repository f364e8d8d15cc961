"""Alternating semi-supervised training.

Segmentation steps minimize the supervised cross-entropy plus the image-scale
ratio consistency and the critic term on unlabeled images; critic steps
maximize the critic's expectation gap between labeled ground-truth ratios and
predicted unlabeled ratios. The regression network is pretrained on the
labeled set and then frozen.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .losses import Batch, LossWeights, regression_loss, seg_objective_var
from .metrics import dice
from .nets import Params, bind, gradients, init_reg, init_seg, reg_forward, reg_forward_var, seg_forward
from .vpstd import SinkhornError, VPSTDConfig, compute_v_emp
from .wasserstein import LinearCritic, critic_ascent_step, kr_dual_estimate

log = logging.getLogger(__name__)

VARIANTS = ("vpnet", "vpnet_gt", "vpnet_rw", "vpnet_emp")


class TrainingError(RuntimeError):
    """A training step failed; ``checkpoint`` holds the last good epoch's state."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    lr: float = 1e-3
    plateau_patience: int = 20
    lr_decay: float = 0.5
    critic_steps_per_seg_step: int = 1
    critic_lr: float = 1e-2
    clip: float = 0.01
    seed: int = 0
    variant: str = "vpnet"
    weights: LossWeights = field(default_factory=LossWeights)
    solver: VPSTDConfig = field(default_factory=lambda: VPSTDConfig(epsilon=0.5, lam=0.5, td_iters=2))
    reg_epochs: int = 200
    reg_lr: float = 3e-2
    reg_optimizer: str = "adam"
    seg_hidden: tuple = (8, 8)
    reg_hidden: tuple = (4, 4)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.epochs < 0 or self.batch_size < 1 or self.plateau_patience < 1:
            raise ValueError("epochs, batch_size and plateau_patience must be positive")
        if not self.lr > 0 or not 0 < self.lr_decay < 1 or not self.clip > 0:
            raise ValueError("lr, lr_decay and clip must be positive (lr_decay < 1)")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @property
    def effective_weights(self) -> LossWeights:
        if self.variant == "vpnet_rw":
            return LossWeights(self.weights.alpha, 0.0)
        return self.weights

    @property
    def uses_critic(self) -> bool:
        return self.effective_weights.beta > 0

    @property
    def volume_source(self) -> str:
        return {"vpnet": "reg", "vpnet_rw": "reg", "vpnet_gt": "gt", "vpnet_emp": "emp"}[self.variant]


class LabelAudit:
    def __init__(self):
        self.count = 0


class UnlabeledSample:
    """An image whose labels exist but may only be read through an audited door."""

    def __init__(self, sample, audit: LabelAudit):
        self.image = sample.image
        self._sample = sample
        self._audit = audit

    def hidden_volumes(self) -> np.ndarray:
        self._audit.count += 1
        return self._sample.volumes

    def hidden_mask(self) -> np.ndarray:
        self._audit.count += 1
        return self._sample.mask


@dataclass
class Split:
    labeled: list
    unlabeled: list
    validation: list
    audit: LabelAudit


def split_dataset(dataset, n_labeled: int, seed: int, n_val: int | None = None) -> Split:
    """Shuffle deterministically; the first ``n_val`` go to validation, the next
    ``n_labeled`` are labeled and the rest lose their labels."""
    n = len(dataset)
    if n_val is None:
        n_val = n // 4
    n_train = n - n_val
    if n_val < 1 or n_labeled < 1 or n_labeled > n_train:
        raise ValueError(f"cannot take {n_labeled} labeled + {n_val} validation from {n} samples")
    order = np.random.default_rng(seed).permutation(n)
    audit = LabelAudit()
    validation = [dataset[i] for i in order[:n_val]]
    labeled = [dataset[i] for i in order[n_val : n_val + n_labeled]]
    unlabeled = [UnlabeledSample(dataset[i], audit) for i in order[n_val + n_labeled :]]
    return Split(labeled, unlabeled, validation, audit)


class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: Params, grads: dict) -> Params:
        self.t += 1
        new = params.copy()
        for name, g in grads.items():
            m = self.m.get(name, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(name, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.b1**self.t)
            v_hat = v / (1 - self.b2**self.t)
            new.arrays[name] = params.arrays[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return new


def pretrain_regression(reg: Params, labeled, epochs: int, lr: float,
                        optimizer: str = "adam") -> tuple[Params, list]:
    """Full-batch descent on the summed squared volume error.

    The loss is divided by N^2 (ratio units) so that ``lr`` does not depend on
    the image size. ``optimizer`` is ``"adam"`` or plain ``"gd"``. Returns the
    parameters and the per-epoch loss in pixel^2 units.
    """
    if not labeled:
        raise ValueError("regression pretraining needs labeled samples")
    if optimizer not in ("adam", "gd"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    N = float(np.asarray(labeled[0].image).size)
    adam = Adam(lr)
    history = []
    for _ in range(epochs):
        tape = ad.Tape()
        p = bind(reg, tape)
        errs = [ad.squared_error(reg_forward_var(reg, p, s.image, tape), s.volumes) for s in labeled]
        loss = ad.add(*errs) if len(errs) > 1 else errs[0]
        history.append(float(loss.value))
        tape.backward(ad.scale(loss, 1.0 / N**2))
        grads = gradients(p)
        if optimizer == "adam":
            reg = adam.step(reg, grads)
        else:
            reg = reg.copy()
            for name, g in grads.items():
                reg.arrays[name] = reg.arrays[name] - lr * g
    return reg, history


def regression_error(reg: Params, samples) -> float:
    return float(np.mean([regression_loss(reg_forward(reg, s.image), s.volumes) for s in samples]))


@dataclass
class TrainState:
    cfg: TrainConfig
    seg: Params
    reg: Params | None
    critic: LinearCritic
    optimizer: Adam
    v_emp: np.ndarray
    lr: float
    step: int = 0


@dataclass
class EpochRecord:
    epoch: int
    seg_loss: float
    critic_obj: float
    val_dice: float
    lr: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    residuals: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "seg_loss", "critic_obj", "val_dice", "lr"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.seg_loss), repr(r.critic_obj), repr(r.val_dice), repr(r.lr)])


def unlabeled_volumes(state: TrainState, samples) -> list:
    """Volumes routed to the VP-STD layer for unlabeled images, per variant."""
    source = state.cfg.volume_source
    if source == "gt":
        return [np.asarray(s.hidden_volumes(), dtype=float) for s in samples]
    if source == "emp":
        return [state.v_emp for _ in samples]
    return [reg_forward(state.reg, s.image) for s in samples]


def train_step_seg(state: TrainState, labeled_batch, unlabeled_batch) -> tuple[TrainState, float]:
    cfg = state.cfg
    weights = cfg.effective_weights
    need_unlabeled = weights.alpha > 0 or weights.beta > 0
    unl = list(unlabeled_batch) if need_unlabeled else []
    batch = Batch(
        labeled_images=[s.image for s in labeled_batch],
        labeled_masks=[s.mask for s in labeled_batch],
        labeled_volumes=[s.volumes for s in labeled_batch],
        unlabeled_images=[s.image for s in unl],
        unlabeled_volumes=unlabeled_volumes(state, unl),
    )
    tape = ad.Tape()
    p = bind(state.seg, tape)
    critic = state.critic if cfg.uses_critic else None
    try:
        loss = seg_objective_var(state.seg, p, batch, critic, weights, cfg.solver, tape)
    except SinkhornError as exc:
        where = getattr(exc, "image", "?")
        raise TrainingError(f"solver failed at step {state.step} on batch image {where}: {exc}") from exc
    tape.backward(loss)
    state.optimizer.lr = state.lr
    seg = state.optimizer.step(state.seg, gradients(p))
    return dataclasses.replace(state, seg=seg, step=state.step + 1), float(loss.value)


def predicted_ratios(state: TrainState, samples) -> np.ndarray:
    vols = unlabeled_volumes(state, samples)
    out = []
    for s, V in zip(samples, vols):
        h = seg_forward(state.seg, s.image, V, state.cfg.solver)
        out.append(h.reshape(-1, h.shape[-1]).mean(axis=0))
    return np.array(out)


def train_step_critic(state: TrainState, gt_volumes, unlabeled_batch) -> tuple[TrainState, float]:
    """Critic ascent on the current predictions; returns the new state and the
    critic objective (mean f(pred) - mean f(gt)) before the update."""
    if not state.cfg.uses_critic or not len(unlabeled_batch):
        return state, 0.0
    gt = np.asarray(gt_volumes, dtype=float)
    gt = gt / gt.sum(axis=1, keepdims=True)
    pred = predicted_ratios(state, unlabeled_batch)
    critic = state.critic
    objective = float(critic(pred).mean() - critic(gt).mean())
    for _ in range(state.cfg.critic_steps_per_seg_step):
        critic = critic_ascent_step(critic, gt, pred, state.cfg.critic_lr)
    return dataclasses.replace(state, critic=critic), objective


def validation_dice(state: TrainState, samples) -> float:
    """Mean foreground Dice over validation images with the variant's volume source."""
    K = state.seg.n_classes
    scores = []
    for s in samples:
        source = state.cfg.volume_source
        V = s.volumes if source == "gt" else state.v_emp if source == "emp" else reg_forward(state.reg, s.image)
        pred = np.argmax(seg_forward(state.seg, s.image, V, state.cfg.solver), axis=-1)
        scores.append(np.mean([dice(pred, s.mask, k) for k in range(1, K)]))
    return float(np.mean(scores))


def init_state(cfg: TrainConfig, split: Split, reg: Params | None = None) -> TrainState:
    K = len(split.labeled[0].volumes)
    seg = init_seg(K, cfg.seed, hidden=cfg.seg_hidden)
    v_emp = compute_v_emp([s.volumes for s in split.labeled])
    if reg is None and cfg.volume_source == "reg":
        reg, _ = pretrain_regression(init_reg(K, cfg.seed + 1, hidden=cfg.reg_hidden),
                                     split.labeled, cfg.reg_epochs, cfg.reg_lr, cfg.reg_optimizer)
    return TrainState(cfg, seg, reg, LinearCritic.zeros(K, cfg.clip), Adam(cfg.lr), v_emp, cfg.lr)


def _batches(items, size, start):
    """Consecutive batches cycling through ``items`` beginning at ``start``."""
    n = len(items)
    return [items[(start + j) % n] for j in range(min(size, n))]


def train(cfg: TrainConfig, split: Split, reg: Params | None = None, val_every: int = 1):
    """Pretrain (unless ``reg`` is given), then alternate segmentation and critic
    steps. An epoch is one pass over the labeled set; unlabeled batches cycle.

    Returns ``(best_seg, reg, critic, history)`` with the best-validation
    segmentation parameters.
    """
    if not split.labeled or not split.validation:
        raise ValueError("need at least one labeled and one validation sample")
    state = init_state(cfg, split, reg)
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    gt_volumes = np.array([s.volumes for s in split.labeled])
    best_dice, best_seg, stale = -np.inf, state.seg.copy(), 0
    unl_cursor = 0
    for epoch in range(cfg.epochs):
        last_good = (copy.deepcopy(state), best_seg)
        order = rng.permutation(len(split.labeled))
        seg_losses, critic_objs = [], []
        try:
            for b in range(0, len(order), cfg.batch_size):
                lab = [split.labeled[i] for i in order[b : b + cfg.batch_size]]
                unl = _batches(split.unlabeled, cfg.batch_size, unl_cursor) if split.unlabeled else []
                unl_cursor += len(unl)
                state, loss = train_step_seg(state, lab, unl)
                state, cobj = train_step_critic(state, gt_volumes, unl)
                seg_losses.append(loss)
                critic_objs.append(cobj)
        except (TrainingError, SinkhornError) as exc:
            raise TrainingError(f"epoch {epoch}: {exc}", checkpoint=last_good) from exc
        for name, arr in state.seg.arrays.items():
            if not np.all(np.isfinite(arr)):
                raise TrainingError(f"non-finite parameters in {name} at epoch {epoch}", checkpoint=last_good)
        val = validation_dice(state, split.validation) if (epoch + 1) % val_every == 0 else np.nan
        history.records.append(EpochRecord(epoch, float(np.mean(seg_losses)), float(np.mean(critic_objs)), val, state.lr))
        if val > best_dice:
            best_dice, best_seg, stale = val, state.seg.copy(), 0
        else:
            stale += 1
            if stale >= cfg.plateau_patience:
                state = dataclasses.replace(state, lr=state.lr * cfg.lr_decay)
                stale = 0
    return best_seg, state.reg, state.critic, history


def kr_estimate(critic: LinearCritic, state: TrainState, split: Split) -> float:
    gt = np.array([s.volumes for s in split.labeled], dtype=float)
    gt /= gt.sum(axis=1, keepdims=True)
    return kr_dual_estimate(critic, gt, predicted_ratios(state, split.unlabeled))
