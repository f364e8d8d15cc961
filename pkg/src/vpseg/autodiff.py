"""A small tape-based reverse-mode differentiator for the toy networks.

Every op records a closure on the tape; ``Tape.backward`` replays them in
reverse creation order, which is a valid topological order. Ops are fused at
the granularity the networks need (convolution, softplus, the VP-STD layer,
the losses) rather than scalar-level.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import vpstd


class TapeError(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "grad", "tape")

    def __init__(self, value, tape: "Tape"):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.tape = tape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=float)
        else:
            self.grad += g

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


class Tape:
    """Records backward closures. ``record=False`` gives a cheap inference tape."""

    def __init__(self, record: bool = True):
        self.record = record
        self._ops = []
        self._consumed = False

    def var(self, value) -> Var:
        return Var(value, self)

    def push(self, fn) -> None:
        if self.record:
            self._ops.append(fn)

    def backward(self, loss: Var) -> None:
        if not self.record:
            raise TapeError("inference tape has nothing to differentiate")
        if self._consumed:
            raise TapeError("tape was already consumed by a backward pass")
        if loss.value.size != 1:
            raise TapeError("backward needs a scalar loss")
        self._consumed = True
        loss.accumulate(np.ones_like(loss.value))
        for fn in reversed(self._ops):
            fn()
        self._ops.clear()


def _out(tape, value):
    return Var(value, tape)


def conv2d(x: Var, w: Var, b: Var | None = None) -> Var:
    """'Same' 2D cross-correlation with zero padding. x: (Ci,H,W), w: (Co,Ci,kh,kw)."""
    tape = x.tape
    Co, Ci, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.value, ((0, 0), (ph, ph), (pw, pw)))
    cols = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (Ci, H, W, kh, kw)
    y = np.einsum("chwij,ocij->ohw", cols, w.value, optimize=True)
    if b is not None:
        y = y + b.value[:, None, None]
    out = _out(tape, y)

    def backward():
        g = out.grad
        if g is None:
            return
        w.accumulate(np.einsum("chwij,ohw->ocij", cols, g, optimize=True))
        if b is not None:
            b.accumulate(g.sum(axis=(1, 2)))
        gp = np.pad(g, ((0, 0), (kh - 1 - ph, kh - 1 - ph), (kw - 1 - pw, kw - 1 - pw)))
        gcols = sliding_window_view(gp, (kh, kw), axis=(1, 2))
        x.accumulate(np.einsum("ohwij,ocij->chw", gcols, w.value[:, :, ::-1, ::-1], optimize=True))

    tape.push(backward)
    return out


def softplus(x: Var) -> Var:
    v = x.value
    out = _out(x.tape, np.logaddexp(0.0, v))

    def backward():
        if out.grad is not None:
            x.accumulate(out.grad / (1.0 + np.exp(-v)))

    x.tape.push(backward)
    return out


def channels_last(x: Var) -> Var:
    out = _out(x.tape, np.moveaxis(x.value, 0, -1))

    def backward():
        if out.grad is not None:
            x.accumulate(np.moveaxis(out.grad, -1, 0))

    x.tape.push(backward)
    return out


def global_mean(x: Var) -> Var:
    """(C, H, W) -> (C,) spatial average."""
    C, H, W = x.shape
    out = _out(x.tape, x.value.mean(axis=(1, 2)))

    def backward():
        if out.grad is not None:
            x.accumulate(np.broadcast_to(out.grad[:, None, None] / (H * W), x.shape))

    x.tape.push(backward)
    return out


def affine(x: Var, A: Var, b: Var) -> Var:
    out = _out(x.tape, A.value @ x.value + b.value)

    def backward():
        g = out.grad
        if g is not None:
            A.accumulate(np.outer(g, x.value))
            b.accumulate(g)
            x.accumulate(A.value.T @ g)

    x.tape.push(backward)
    return out


def scaled_softmax(z: Var, total: float) -> Var:
    e = np.exp(z.value - z.value.max())
    p = e / e.sum()
    out = _out(z.tape, total * p)

    def backward():
        g = out.grad
        if g is not None:
            z.accumulate(total * p * (g - g @ p))

    z.tape.push(backward)
    return out


def vpstd_layer(o: Var, V, cfg: vpstd.VPSTDConfig) -> Var:
    """VP-STD softmax on (H, W, K) logits; volumes are treated as constants."""
    h, cache = vpstd.vpstd_forward(o.value, V, cfg)
    out = _out(o.tape, h)
    if o.tape.record:

        def backward():
            if out.grad is not None:
                o.accumulate(vpstd.vpstd_backward(out.grad, cache))

        o.tape.push(backward)
    return out


def class_totals(h: Var) -> Var:
    """Column sums of an (..., K) soft segmentation: the predicted volume vector."""
    K = h.shape[-1]
    out = _out(h.tape, h.value.reshape(-1, K).sum(axis=0))

    def backward():
        if out.grad is not None:
            h.accumulate(np.broadcast_to(out.grad, h.shape))

    h.tape.push(backward)
    return out


def cross_entropy(h: Var, mask, floor: float = 1e-12) -> Var:
    """-(1/N) sum_n ln h[n, mask[n]]."""
    K = h.shape[-1]
    flat = h.value.reshape(-1, K)
    idx = np.asarray(mask).ravel()
    rows = np.arange(idx.size)
    picked = np.maximum(flat[rows, idx], floor)
    N = idx.size
    out = _out(h.tape, -np.log(picked).sum() / N)

    def backward():
        if out.grad is None:
            return
        g = np.zeros_like(flat)
        g[rows, idx] = -out.grad / (N * picked) * (flat[rows, idx] >= floor)
        h.accumulate(g.reshape(h.shape))

    h.tape.push(backward)
    return out


def squared_error(v: Var, target) -> Var:
    diff = v.value - np.asarray(target, dtype=float)
    out = _out(v.tape, float(diff @ diff))

    def backward():
        if out.grad is not None:
            v.accumulate(2.0 * out.grad * diff)

    v.tape.push(backward)
    return out


def w1_cdf(p, q: Var) -> Var:
    """Sum of |CDF_p - CDF_q| with ``p`` constant (|i - j| ground metric)."""
    diff = np.cumsum(np.asarray(p, dtype=float) - q.value)[:-1]
    out = _out(q.tape, np.abs(diff).sum())

    def backward():
        if out.grad is None:
            return
        s = np.sign(diff)
        # d CDF_q(k) / d q_j = 1 for j <= k
        gq = np.zeros(q.shape)
        gq[:-1] = -np.cumsum(s[::-1])[::-1]
        q.accumulate(out.grad * gq)

    q.tape.push(backward)
    return out


def dot(x: Var, w) -> Var:
    w = np.asarray(w, dtype=float)
    out = _out(x.tape, float(x.value @ w))

    def backward():
        if out.grad is not None:
            x.accumulate(out.grad * w)

    x.tape.push(backward)
    return out


def scale(x: Var, c: float) -> Var:
    out = _out(x.tape, c * x.value)

    def backward():
        if out.grad is not None:
            x.accumulate(c * out.grad)

    x.tape.push(backward)
    return out


def add(*xs: Var) -> Var:
    tape = xs[0].tape
    out = _out(tape, sum(x.value for x in xs))

    def backward():
        if out.grad is not None:
            for x in xs:
                x.accumulate(out.grad)

    tape.push(backward)
    return out


def mean(xs) -> Var:
    xs = list(xs)
    return scale(add(*xs), 1.0 / len(xs))
