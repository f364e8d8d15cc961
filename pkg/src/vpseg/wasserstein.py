"""1-Wasserstein distances between class-ratio distributions.

Exact routes (closed-form CDF formula, 1D sorted matching, a transport LP used
as an oracle) and the Kantorovich-Rubinstein dual estimate with a clipped
linear critic.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

LP_MAX_CLASSES = 8


def _as_distribution(p, atol=1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise ValueError(f"expected a 1D probability vector, got shape {p.shape}")
    if p.min() < -atol or abs(p.sum() - 1.0) > atol:
        raise ValueError("not a probability vector")
    return p


def index_cost(K: int) -> np.ndarray:
    """Ground metric |i - j| on class indices."""
    idx = np.arange(K)
    return np.abs(idx[:, None] - idx[None, :]).astype(float)


def w1_categorical(p, q, cost=None) -> float:
    """W1 between two categorical distributions.

    With the default |i - j| metric this is the sum of absolute CDF
    differences; an explicit ``cost`` matrix is solved as a transport LP.
    """
    p, q = _as_distribution(p), _as_distribution(q)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    if cost is not None:
        return w1_lp_oracle(p, q, cost)
    return float(np.abs(np.cumsum(p - q)[:-1]).sum())


def w1_lp_oracle(p, q, cost) -> float:
    """Exact optimal transport cost by solving the transport LP (simplex method)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    cost = np.asarray(cost, dtype=float)
    K = p.size
    if K > LP_MAX_CLASSES:
        raise ValueError(f"LP oracle limited to K <= {LP_MAX_CLASSES}, got {K}")
    if q.size != K or cost.shape != (K, K):
        raise ValueError("dimension mismatch")
    rows = np.kron(np.eye(K), np.ones(K))  # sum_j T_ij = p_i
    cols = np.kron(np.ones(K), np.eye(K))  # sum_i T_ij = q_j
    # q is rescaled so both marginals carry identical mass in floating point
    q = q * (p.sum() / q.sum())
    res = linprog(
        cost.ravel(),
        A_eq=np.vstack([rows, cols]),
        b_eq=np.concatenate([p, q]),
        bounds=(0, None),
        method="highs-ds",
    )
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def w1_empirical_1d(xs, ys) -> float:
    """Exact W1 between two equal-size, equally weighted 1D samples."""
    xs = np.sort(np.asarray(xs, dtype=float).ravel())
    ys = np.sort(np.asarray(ys, dtype=float).ravel())
    if xs.size != ys.size or xs.size == 0:
        raise ValueError(f"need equal, non-zero sample counts, got {xs.size} and {ys.size}")
    return float(np.abs(xs - ys).mean())


def w1_simplex_k2(xs, ys) -> float:
    """Euclidean W1 between two samples on the K=2 simplex.

    Points ``(t, 1 - t)`` are ``sqrt(2) * |t - t'|`` apart, so this is the
    1D value of the first coordinates scaled by ``sqrt(2)``.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    return float(np.sqrt(2.0) * w1_empirical_1d(xs[:, 0], ys[:, 0]))


def as_empirical(samples, atol=1e-6) -> np.ndarray:
    """Validate an (M, K) array of class-ratio samples."""
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"expected (M, K) samples with M >= 1, got {x.shape}")
    if x.min() < -atol or x.max() > 1 + atol or np.abs(x.sum(axis=1) - 1).max() > atol:
        raise ValueError("samples must lie on the probability simplex")
    return x


@dataclass(frozen=True)
class LinearCritic:
    """Affine witness ``f(x) = w . x + b`` with every weight clipped to [-clip, clip]."""

    weights: np.ndarray
    bias: float = 0.0
    clip: float = 0.01

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if not self.clip > 0:
            raise ValueError("clip must be positive")
        if np.abs(w).max(initial=0.0) > self.clip:
            raise ValueError("critic weights exceed the clip value")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def zeros(cls, K: int, clip: float = 0.01) -> "LinearCritic":
        return cls(np.zeros(K), 0.0, clip)

    @property
    def lipschitz_bound(self) -> float:
        # ||w||_2 <= clip * sqrt(K) for any admissible w
        return self.clip * np.sqrt(self.weights.size)

    def __call__(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.weights + self.bias


def kr_dual_estimate(critic: LinearCritic, gt, pred) -> float:
    """Lower bound on W1 from the critic's expectation gap."""
    gap = critic(gt).mean() - critic(pred).mean()
    return float(gap / critic.lipschitz_bound)


def critic_ascent_step(critic: LinearCritic, gt_batch, pred_batch, lr: float) -> LinearCritic:
    """One gradient step on ``mean f(pred) - mean f(gt)`` followed by clipping."""
    gt_batch = np.asarray(gt_batch, dtype=float)
    pred_batch = np.asarray(pred_batch, dtype=float)
    if len(gt_batch) == 0 or len(pred_batch) == 0:
        raise ValueError("critic batches must be non-empty")
    grad = pred_batch.mean(axis=0) - gt_batch.mean(axis=0)
    w = np.clip(critic.weights - lr * grad, -critic.clip, critic.clip)
    # the bias cancels in the objective and never moves
    return dataclasses.replace(critic, weights=w)


def clipped_linear_optimum(critic: LinearCritic, gt, pred) -> float:
    """Best KR estimate any admissible linear critic can reach on these samples."""
    delta = np.asarray(gt, dtype=float).mean(axis=0) - np.asarray(pred, dtype=float).mean(axis=0)
    return float(critic.clip * np.abs(delta).sum() / critic.lipschitz_bound)
