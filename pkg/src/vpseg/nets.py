"""Toy segmentation and volume-regression networks.

The segmentation backbone is a 3-layer 3x3 conv stack whose logits go through
the VP-STD layer; the regression network is a 2-layer conv stack, global
average pooling and an affine head mapped onto the simplex scaled by N.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .field import check_volumes
from .vpstd import VPSTDConfig


@dataclass
class Params:
    """Named parameter arrays plus the architecture they belong to."""

    kind: str  # "seg" or "reg"
    channels: tuple
    n_classes: int
    arrays: dict = field(default_factory=dict)
    smooth: bool = True  # softplus between layers; False gives a linear network

    def names(self) -> list[str]:
        return list(self.arrays)

    def slices(self) -> dict[str, tuple[int, int, tuple]]:
        out, start = {}, 0
        for name, arr in self.arrays.items():
            out[name] = (start, start + arr.size, arr.shape)
            start += arr.size
        return out

    def vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def with_vector(self, vec) -> "Params":
        vec = np.asarray(vec, dtype=float)
        arrays = {name: vec[a:b].reshape(shape).copy() for name, (a, b, shape) in self.slices().items()}
        return Params(self.kind, self.channels, self.n_classes, arrays, self.smooth)

    def copy(self) -> "Params":
        return Params(self.kind, self.channels, self.n_classes,
                      {k: v.copy() for k, v in self.arrays.items()}, self.smooth)

    def manifest(self) -> dict:
        return {
            "kind": self.kind,
            "channels": list(self.channels),
            "n_classes": self.n_classes,
            "smooth": self.smooth,
            "dtype": "float32-le",
            "slices": [
                {"name": n, "offset": a, "size": b - a, "shape": list(s)}
                for n, (a, b, s) in self.slices().items()
            ],
        }

    def save(self, path) -> None:
        """Write ``<path>.bin`` (raw little-endian float32) and ``<path>.json``."""
        path = Path(path)
        path.with_suffix(".bin").write_bytes(self.vector().astype("<f4").tobytes())
        path.with_suffix(".json").write_text(json.dumps(self.manifest(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "Params":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        vec = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4").astype(float)
        arrays = {}
        for s in meta["slices"]:
            chunk = vec[s["offset"] : s["offset"] + s["size"]]
            if chunk.size != s["size"]:
                raise ValueError(f"checkpoint {path} is truncated")
            arrays[s["name"]] = chunk.reshape(s["shape"]).copy()
        return cls(meta["kind"], tuple(meta["channels"]), meta["n_classes"], arrays, meta["smooth"])


def _glorot(rng, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def _conv_weights(rng, c_out, c_in, k=3):
    return _glorot(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k)


def init_seg(n_classes: int, seed: int, hidden=(8, 8), smooth: bool = True) -> Params:
    """Conv stack 1 -> hidden... -> K. The last layer has no bias: a per-class
    constant is absorbed by the volume constraint and would never train."""
    rng = np.random.default_rng(seed)
    chans = (1,) + tuple(hidden) + (n_classes,)
    arrays = {}
    for i in range(len(chans) - 1):
        arrays[f"conv{i}.w"] = _conv_weights(rng, chans[i + 1], chans[i])
        if i < len(chans) - 2:
            arrays[f"conv{i}.b"] = np.zeros(chans[i + 1])
    return Params("seg", chans, n_classes, arrays, smooth)


def init_reg(n_classes: int, seed: int, hidden=(4, 4), smooth: bool = True) -> Params:
    rng = np.random.default_rng(seed)
    chans = (1,) + tuple(hidden)
    arrays = {}
    for i in range(len(chans) - 1):
        arrays[f"conv{i}.w"] = _conv_weights(rng, chans[i + 1], chans[i])
        arrays[f"conv{i}.b"] = np.zeros(chans[i + 1])
    arrays["head.w"] = _glorot(rng, (n_classes, chans[-1]), chans[-1], n_classes)
    arrays["head.b"] = np.zeros(n_classes)
    return Params("reg", chans, n_classes, arrays, smooth)


def bind(params: Params, tape: ad.Tape) -> dict[str, ad.Var]:
    return {name: tape.var(arr) for name, arr in params.arrays.items()}


def _conv_stack(p: dict, x: ad.Var, n_layers: int, smooth: bool, activate_last: bool) -> ad.Var:
    for i in range(n_layers):
        x = ad.conv2d(x, p[f"conv{i}.w"], p.get(f"conv{i}.b"))
        if smooth and (activate_last or i < n_layers - 1):
            x = ad.softplus(x)
    return x


def seg_logits_var(params: Params, p: dict, img, tape: ad.Tape) -> ad.Var:
    x = tape.var(np.asarray(img, dtype=float)[None])
    o = _conv_stack(p, x, len(params.channels) - 1, params.smooth, activate_last=False)
    return ad.channels_last(o)


def seg_forward_var(params: Params, p: dict, img, V, cfg: VPSTDConfig, tape: ad.Tape) -> ad.Var:
    return ad.vpstd_layer(seg_logits_var(params, p, img, tape), V, cfg)


def reg_forward_var(params: Params, p: dict, img, tape: ad.Tape) -> ad.Var:
    img = np.asarray(img, dtype=float)
    x = tape.var(img[None])
    feats = _conv_stack(p, x, len(params.channels) - 1, params.smooth, activate_last=True)
    z = ad.affine(ad.global_mean(feats), p["head.w"], p["head.b"])
    return ad.scaled_softmax(z, float(img.size))


def seg_logits(params: Params, img) -> np.ndarray:
    tape = ad.Tape(record=False)
    return seg_logits_var(params, bind(params, tape), img, tape).value


def seg_forward(params: Params, img, V, cfg: VPSTDConfig) -> np.ndarray:
    """Soft segmentation (H, W, K) of ``img`` under prescribed volumes ``V``."""
    img = np.asarray(img, dtype=float)
    V = check_volumes(V, img.size)
    tape = ad.Tape(record=False)
    return seg_forward_var(params, bind(params, tape), img, V, cfg, tape).value


def reg_forward(params: Params, img) -> np.ndarray:
    """Predicted volume vector; strictly positive and summing to the pixel count."""
    tape = ad.Tape(record=False)
    return reg_forward_var(params, bind(params, tape), img, tape).value


def gradients(p: dict) -> dict[str, np.ndarray]:
    return {name: (np.zeros_like(v.value) if v.grad is None else v.grad) for name, v in p.items()}


def value_and_grad(params: Params, loss_fn) -> tuple[float, dict[str, np.ndarray]]:
    """``loss_fn(p, tape) -> Var``; returns the loss and per-array gradients."""
    tape = ad.Tape()
    p = bind(params, tape)
    loss = loss_fn(p, tape)
    tape.backward(loss)
    return float(loss.value), gradients(p)


@dataclass
class GradReport:
    """Max relative error per parameter slice, normalized by the slice's gradient scale."""

    errors: dict
    rtol: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error <= self.rtol

    def table(self) -> str:
        lines = [f"{'slice':<12} {'rel_err':>12}"]
        lines += [f"{name:<12} {err:12.3e}" for name, err in self.errors.items()]
        lines.append(f"{'max':<12} {self.max_error:12.3e}  {'PASS' if self.passed else 'FAIL'} (rtol {self.rtol:g})")
        return "\n".join(lines)


def grad_check(params: Params, loss_fn, rtol: float, step: float = 1e-4,
               max_coords: int | None = None, seed: int = 0) -> GradReport:
    """Central finite differences against reverse mode, slice by slice.

    With ``max_coords`` only that many randomly chosen coordinates per slice
    are differenced (all of them otherwise).
    """
    _, grads = value_and_grad(params, loss_fn)
    base = params.vector()
    slices = params.slices()
    rng = np.random.default_rng(seed)

    def loss_at(vec):
        q = params.with_vector(vec)
        tape = ad.Tape(record=False)
        return float(loss_fn(bind(q, tape), tape).value)

    errors = {}
    for name, (a, b, _) in slices.items():
        ad_slice = grads[name].ravel()
        idx = np.arange(b - a)
        if max_coords is not None and idx.size > max_coords:
            idx = np.sort(rng.choice(idx, size=max_coords, replace=False))
        fd = np.empty(idx.size)
        for j, i in enumerate(idx):
            e = np.zeros_like(base)
            e[a + i] = step
            fd[j] = (loss_at(base + e) - loss_at(base - e)) / (2.0 * step)
        ref = ad_slice[idx]
        scale = max(np.abs(fd).max(), np.abs(ref).max(), 1e-12)
        errors[name] = float(np.abs(fd - ref).max() / scale)
    return GradReport(errors, rtol)


def _probe_problem(K: int, size: int, seed: int):
    """A random image, a random label field and its volumes for gradient checks."""
    rng = np.random.default_rng(seed)
    img = rng.uniform(0.0, 1.0, (size, size))
    mask = rng.integers(0, K, (size, size))
    V = np.bincount(mask.ravel(), minlength=K).astype(float) + 1.0
    V *= img.size / V.sum()
    return img, mask, V


def check_seg_gradients(K: int = 2, size: int = 8, seed: int = 0, rtol: float = 1e-3,
                        cfg: VPSTDConfig | None = None, max_coords: int | None = None) -> GradReport:
    """Finite-difference check of the seg net's cross-entropy through the VP-STD layer."""
    if cfg is None:
        cfg = VPSTDConfig(epsilon=0.5, lam=0.5, td_iters=2, sinkhorn_tol=1e-11)
    params = init_seg(K, seed)
    img, mask, V = _probe_problem(K, size, seed)

    def loss_fn(p, tape):
        return ad.cross_entropy(seg_forward_var(params, p, img, V, cfg, tape), mask)

    return grad_check(params, loss_fn, rtol, max_coords=max_coords, seed=seed)


def check_reg_gradients(K: int = 2, size: int = 8, seed: int = 0, rtol: float = 1e-4,
                        max_coords: int | None = None) -> GradReport:
    """Finite-difference check of the regression net's squared volume error."""
    params = init_reg(K, seed)
    img, _, V = _probe_problem(K, size, seed)

    def loss_fn(p, tape):
        return ad.squared_error(reg_forward_var(params, p, img, tape), V)

    return grad_check(params, loss_fn, rtol, max_coords=max_coords, seed=seed)
