"""Volume-preserving soft threshold dynamics (VP-STD) solver.

The layer solves

    min_{h in H_V}  sum -o * h + eps * sum h ln h + lam * sum h * (k * (1 - h))

where ``H_V`` is the set of per-pixel probability vectors whose class totals
equal the prescribed volumes ``V``. The entropic part is solved on the dual:
rows are normalized exactly, ``h = softmax((o + u) / eps)``, and the class
potentials ``u`` are updated until the class totals match ``V``. Updates are
damped Newton steps on the (K-1)-dimensional concave dual, with log-domain
Sinkhorn column scaling as fallback (or exclusively, with
``method="sinkhorn"``). The concave smoothing term is handled by
re-linearizing it around the previous iterate and re-projecting.

The backward pass differentiates through exactly the iterations the forward
pass executed.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field as dc_field
from typing import NamedTuple

import numpy as np
from scipy.special import xlogy

from .field import KernelSpec, gaussian_convolve


class VolumeError(ValueError):
    """Prescribed volumes are not a valid projection target."""


class SinkhornError(RuntimeError):
    """Scaling iterations did not reach the marginal tolerance."""

    def __init__(self, residual: float, iters: int):
        super().__init__(f"Sinkhorn did not converge in {iters} iterations (residual {residual:.3e})")
        self.residual = residual
        self.iters = iters


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class VPSTDConfig:
    """Solver settings. ``epsilon=None`` means 0.1 x the dynamic range of ``o``."""

    epsilon: float | None = None
    lam: float = 1.0
    kernel: KernelSpec = dc_field(default_factory=KernelSpec)
    sinkhorn_tol: float = 1e-6
    sinkhorn_max_iter: int = 1000
    td_iters: int = 5
    warm_start: bool = True
    method: str = "newton"

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if not self.sinkhorn_tol > 0 or self.sinkhorn_max_iter < 1 or self.td_iters < 0:
            raise ValueError("invalid iteration settings")
        if self.method not in ("newton", "sinkhorn"):
            raise ValueError(f"unknown dual update method {self.method!r}")

    def resolve_epsilon(self, o) -> float:
        if self.epsilon is not None:
            return float(self.epsilon)
        span = float(np.max(o) - np.min(o))
        return 0.1 * span if span > 0 else 1.0

    def replace(self, **changes) -> "VPSTDConfig":
        return dataclasses.replace(self, **changes)


class ProjectionResult(NamedTuple):
    h: np.ndarray
    u: np.ndarray
    iters: int


@dataclass
class _DualRun:
    """Record of one dual ascent run on scaled logits ``x = o / eps``.

    Each step is ``("scale", A, B)`` for an exact column rescaling or
    ``("newton", h, d, s)`` for a damped Newton step ``w += s * d``.
    """

    x: np.ndarray  # (N, K)
    ws: list  # scaled potentials w_0 .. w_T; u = eps * w
    steps: list
    h: np.ndarray
    residuals: list
    duals: list  # scaled dual objective at w_0 .. w_T

    @property
    def iters(self) -> int:
        return len(self.ws) - 1

    @property
    def w(self) -> np.ndarray:
        return self.ws[-1]


def _row_lse(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1)
    return m + np.log(np.exp(z - m[:, None]).sum(axis=1))


def _col_lse(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=0)
    return m + np.log(np.exp(z - m).sum(axis=0))


def _newton_direction(h, c, g):
    """Solve the gauge-fixed (w_0 held) Newton system; None if singular."""
    M = np.diag(c) - h.T @ h
    d = np.zeros_like(g)
    try:
        d[1:] = np.linalg.solve(M[1:, 1:], g[1:])
    except np.linalg.LinAlgError:
        return None
    return d if np.all(np.isfinite(d)) else None


def _solve_dual(x, V, tol, max_iter, w0=None, method="newton") -> _DualRun:
    """Maximize ``D(w) = w.V - sum_n logsumexp(x_n + w)`` until the column
    totals of ``softmax(x + w)`` are within ``tol`` of ``V``.

    Both update kinds are monotone in ``D``: scaling is exact block ascent and
    Newton steps are backtracked to an Armijo condition.
    """
    K = x.shape[1]
    log_v = np.log(V)
    w = np.zeros(K) if w0 is None else np.array(w0, dtype=float)
    A = _row_lse(x + w)
    dual = float(w @ V - A.sum())
    run = _DualRun(x=x, ws=[w], steps=[], h=None, residuals=[], duals=[dual])
    while True:
        h = np.exp(x + w - A[:, None])
        c = h.sum(axis=0)
        g = V - c
        residual = float(np.abs(g).max())
        run.residuals.append(residual)
        if residual <= tol:
            break
        if run.iters >= max_iter:
            raise SinkhornError(residual, run.iters)
        step = None
        if method == "newton":
            d = _newton_direction(h, c, g)
            if d is not None:
                slope = float(g @ d)
                s = 1.0
                while s > 1e-10:
                    w_try = w + s * d
                    A_try = _row_lse(x + w_try)
                    dual_try = float(w_try @ V - A_try.sum())
                    # slack: near the optimum the gain drops below round-off in D
                    if dual_try >= dual + 1e-4 * s * slope - 1e-13 * (1.0 + abs(dual)):
                        step = ("newton", h, d, s)
                        w, A, dual = w_try, A_try, dual_try
                        break
                    s *= 0.5
        if step is None:
            B = _col_lse(x - A[:, None])
            step = ("scale", A, B)
            w = log_v - B
            A = _row_lse(x + w)
            dual = float(w @ V - A.sum())
        run.steps.append(step)
        run.ws.append(w)
        run.duals.append(dual)
    run.h = h
    return run


def _dual_backward(run: _DualRun, g_h: np.ndarray, g_w_out: np.ndarray | None):
    """Reverse pass through one dual run. Returns (grad_x, grad_w0)."""
    h = run.h
    g_x = h * (g_h - (g_h * h).sum(axis=1, keepdims=True))
    g_w = g_x.sum(axis=0)
    if g_w_out is not None:
        g_w = g_w + g_w_out
    x = run.x
    for t in range(run.iters, 0, -1):
        step = run.steps[t - 1]
        w_prev = run.ws[t - 1]
        if step[0] == "scale":
            _, A, B = step
            # w_t = log V - logsumexp_n(x - A(x, w_prev))
            g_B = -g_w
            PgB = np.exp(x - A[:, None] - B) * g_B
            g_x += PgB
            g_A = -PgB.sum(axis=1)
            QgA = np.exp(x + w_prev - A[:, None]) * g_A[:, None]
            g_x += QgA
            g_w = QgA.sum(axis=0)
        else:
            _, hp, d, s = step
            # w_t = w_prev + s * M^-1 (V - c), M = diag(c) - h^T h on classes 1..K-1
            c = hp.sum(axis=0)
            M = np.diag(c) - hp.T @ hp
            a = np.zeros_like(d)
            a[1:] = np.linalg.solve(M[1:, 1:], s * g_w[1:])
            g_M = -np.outer(a, d)
            g_c = -a
            g_hp = g_c + np.diag(g_M) - hp @ (g_M + g_M.T)
            g_z = hp * (g_hp - (g_hp * hp).sum(axis=1, keepdims=True))
            g_x += g_z
            g_w = g_w + g_z.sum(axis=0)
    return g_x, g_w


def _validate(o, V, atol=1e-6):
    o = np.asarray(o, dtype=float)
    if o.ndim < 2 or o.shape[-1] < 2:
        raise ValueError(f"logits need a trailing class axis with K >= 2, got {o.shape}")
    if not np.all(np.isfinite(o)):
        raise ValueError("logits must be finite")
    V = np.asarray(V, dtype=float)
    N = o.size // o.shape[-1]
    if V.shape != (o.shape[-1],):
        raise VolumeError(f"expected {o.shape[-1]} volumes, got shape {V.shape}")
    if not np.all(V > 0):
        raise VolumeError(f"all volumes must be positive, got {V}")
    if abs(V.sum() - N) > atol:
        raise VolumeError(f"volumes sum to {V.sum()!r} but the image has {N} pixels")
    return o, V


def entropic_volume_projection(o, V, cfg: VPSTDConfig = VPSTDConfig()) -> ProjectionResult:
    """Entropic projection of logits ``o`` onto the volume-constrained simplex set.

    Returns the soft segmentation (same shape as ``o``), the class potentials
    ``u`` gauge-fixed to ``u[0] = 0``, and the number of scaling updates.
    """
    o, V = _validate(o, V)
    K = o.shape[-1]
    eps = cfg.resolve_epsilon(o)
    run = _solve_dual(o.reshape(-1, K) / eps, V, cfg.sinkhorn_tol, cfg.sinkhorn_max_iter, method=cfg.method)
    u = eps * (run.w - run.w[0])
    return ProjectionResult(run.h.reshape(o.shape), u, run.iters)


def dual_objective(o, u, V, eps: float) -> float:
    """``<u, V> - eps * sum_n logsumexp_k((o_nk + u_k) / eps)``; concave in ``u``."""
    o = np.asarray(o, dtype=float)
    x = (o.reshape(-1, o.shape[-1]) + np.asarray(u)) / eps
    return float(np.dot(u, V) - eps * _row_lse(x).sum())


def std_energy(h, o, cfg: VPSTDConfig = VPSTDConfig()) -> float:
    """Data term + entropy + threshold-dynamics perimeter term (0 ln 0 = 0)."""
    h = np.asarray(h, dtype=float)
    o = np.asarray(o, dtype=float)
    eps = cfg.resolve_epsilon(o)
    energy = float(np.sum(-o * h)) + eps * float(np.sum(xlogy(h, h)))
    if cfg.lam:
        if h.ndim != 3:
            raise ValueError("the smoothing term needs an (H, W, K) segmentation")
        energy += cfg.lam * float(np.sum(h * gaussian_convolve(1.0 - h, cfg.kernel)))
    return energy


@dataclass
class VPSTDCache:
    """Forward state consumed by :func:`vpstd_backward`."""

    shape: tuple
    eps: float
    cfg: VPSTDConfig
    stages: list
    consumed: bool = False

    @property
    def iters(self) -> list[int]:
        return [s.iters for s in self.stages]


@dataclass
class SolverTrace:
    """Per-stage diagnostics of a threshold-dynamics solve."""

    energies: list
    iters: list
    residuals: list

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stage", "sinkhorn_iters", "residual", "energy"])
            for t, (e, n, r) in enumerate(zip(self.energies, self.iters, self.residuals)):
                writer.writerow([t, n, repr(r), repr(e)])


def vpstd_forward(o, V, cfg: VPSTDConfig = VPSTDConfig()) -> tuple[np.ndarray, VPSTDCache]:
    """Run the threshold-dynamics solve and keep what the backward pass needs.

    ``o`` must be ``(H, W, K)`` when ``cfg.lam > 0``.
    """
    o, V = _validate(o, V)
    K = o.shape[-1]
    if cfg.lam and o.ndim != 3:
        raise ValueError("threshold dynamics needs (H, W, K) logits")
    eps = cfg.resolve_epsilon(o)
    flat = o.reshape(-1, K)
    run = _solve_dual(flat / eps, V, cfg.sinkhorn_tol, cfg.sinkhorn_max_iter, method=cfg.method)
    stages = [run]
    if cfg.lam:
        grid = o.shape[:2]
        for _ in range(cfg.td_iters):
            smoothed = gaussian_convolve(1.0 - 2.0 * run.h, cfg.kernel, shape=grid)
            o_t = flat - cfg.lam * smoothed
            w0 = run.w if cfg.warm_start else None
            run = _solve_dual(o_t / eps, V, cfg.sinkhorn_tol, cfg.sinkhorn_max_iter, w0=w0, method=cfg.method)
            stages.append(run)
    return run.h.reshape(o.shape), VPSTDCache(o.shape, eps, cfg, stages)


def vpstd_backward(grad_h, cache: VPSTDCache) -> np.ndarray:
    """Gradient w.r.t. the logits of a scalar loss with gradient ``grad_h``.

    ``epsilon`` is held fixed, also when it was derived from the logit range.
    """
    if cache is None or cache.consumed:
        raise StaleCacheError("solver cache is missing or was already consumed")
    cache.consumed = True
    grad_h = np.asarray(grad_h, dtype=float)
    if grad_h.shape != cache.shape:
        raise ValueError(f"gradient shape {grad_h.shape} != output shape {cache.shape}")
    cfg, eps = cache.cfg, cache.eps
    K = cache.shape[-1]
    g_h = grad_h.reshape(-1, K)
    g_w = None
    g_o = np.zeros_like(g_h)
    for s in range(len(cache.stages) - 1, -1, -1):
        g_x, g_w0 = _dual_backward(cache.stages[s], g_h, g_w)
        g_stage = g_x / eps
        g_o += g_stage
        if s > 0:
            # logits of stage s are o - lam * k*(1 - 2 h_{s-1}); the smoothing operator is self-adjoint
            g_h = 2.0 * cfg.lam * gaussian_convolve(g_stage, cfg.kernel, shape=cache.shape[:2])
            g_w = g_w0 if cfg.warm_start else None
    return g_o.reshape(cache.shape)


def td_regularized_solve(o, V, cfg: VPSTDConfig = VPSTDConfig(), return_trace: bool = False):
    """Soft segmentation minimizing the regularized energy over ``H_V``."""
    h, cache = vpstd_forward(o, V, cfg)
    if not return_trace:
        return h
    o = np.asarray(o, dtype=float)
    energies = [std_energy(s.h.reshape(o.shape), o, cfg) for s in cache.stages]
    trace = SolverTrace(
        energies=energies,
        iters=[s.iters for s in cache.stages],
        residuals=[s.residuals[-1] for s in cache.stages],
    )
    return h, trace


def compute_v_emp(labeled_volumes) -> np.ndarray:
    """Mean volume vector of a labeled set."""
    vols = [np.asarray(v, dtype=float) for v in labeled_volumes]
    if not vols:
        raise ValueError("need at least one labeled volume vector")
    return np.mean(np.stack(vols), axis=0)
