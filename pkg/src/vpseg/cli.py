"""Command-line entry point: ``vpseg <command> ...``.

Every command writes into its own output directory (guarded by a lock file),
records an ``experiment.json`` manifest with the config hash, seed and package
version, and prints one JSON summary line on success. Errors exit nonzero.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .field import KernelSpec, check_volumes
from .io import read_image, write_mask
from .losses import LossWeights
from .metrics import evaluate
from .nets import Params, check_reg_gradients, check_seg_gradients, init_reg
from .synthdata import SynthConfig, generate, load_dataset, save_dataset
from .trainer import VARIANTS, TrainConfig, pretrain_regression, regression_error, split_dataset, train
from .variational import segment_variational
from .vpstd import VPSTDConfig, compute_v_emp
from .wasserstein import w1_categorical

MANIFEST = "experiment.json"
LOCK = ".lock"


class ConfigError(ValueError):
    pass


def _check_keys(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")


def _fields(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


@dataclass(frozen=True)
class NetsConfig:
    seg_hidden: tuple = (8, 8)
    reg_hidden: tuple = (4, 4)


@dataclass(frozen=True)
class EvalConfig:
    volume_source: str = "reg"
    split: str = "validation"  # or "all"
    gradcheck_size: int = 8
    gradcheck_seeds: int = 1
    gradcheck_max_coords: int | None = None
    variational_outer_iters: int = 10
    # intensity costs live on a different scale than network logits
    variational_epsilon: float | None = None
    variational_lam: float = 1.0

    def __post_init__(self):
        if self.volume_source not in ("reg", "gt", "emp"):
            raise ConfigError(f"bad volume_source {self.volume_source!r}")
        if self.split not in ("validation", "all"):
            raise ConfigError(f"bad split {self.split!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """The five config sections, all defaults materialized."""

    data: SynthConfig = field(default_factory=SynthConfig)
    solver: VPSTDConfig = field(default_factory=lambda: VPSTDConfig(epsilon=0.5, lam=0.5, td_iters=2))
    nets: NetsConfig = field(default_factory=NetsConfig)
    train: dict = field(default_factory=dict)  # TrainConfig fields plus n_labeled / n_val
    eval: EvalConfig = field(default_factory=EvalConfig)

    TRAIN_EXTRA = ("n_labeled", "n_val")
    TRAIN_DEFAULTS = {"n_labeled": 8, "n_val": None}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _check_keys("<root>", d, ("data", "solver", "nets", "train", "eval"))
        try:
            data = SynthConfig.from_dict(d.get("data", {}))
            s = dict(d.get("solver", {}))
            _check_keys("solver", s, _fields(VPSTDConfig))
            if "kernel" in s:
                _check_keys("solver.kernel", s["kernel"], ("sigma", "radius"))
                s["kernel"] = KernelSpec(**s["kernel"])
            solver = VPSTDConfig(**{**dataclasses.asdict(cls().solver), "kernel": KernelSpec(), **s})
            n = d.get("nets", {})
            _check_keys("nets", n, _fields(NetsConfig))
            nets = NetsConfig(**{k: tuple(v) for k, v in n.items()})
            t = dict(d.get("train", {}))
            allowed = [f for f in _fields(TrainConfig) if f not in ("solver", "seg_hidden", "reg_hidden")]
            _check_keys("train", t, allowed + list(cls.TRAIN_EXTRA))
            if "weights" in t:
                _check_keys("train.weights", t["weights"], ("alpha", "beta"))
            train = {**cls.TRAIN_DEFAULTS, **_train_defaults(), **t}
            train["weights"] = dict(train["weights"])
            e = d.get("eval", {})
            _check_keys("eval", e, _fields(EvalConfig))
            ev = EvalConfig(**e)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg = cls(data, solver, nets, train, ev)
        cfg.train_config()  # validate eagerly
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        if path is None:
            return cls.from_dict({})
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc

    def to_dict(self) -> dict:
        solver = dataclasses.asdict(self.solver)
        return {
            "data": self.data.to_dict(),
            "solver": solver,
            "nets": {k: list(v) for k, v in dataclasses.asdict(self.nets).items()},
            "train": self.train,
            "eval": dataclasses.asdict(self.eval),
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_train(self, **changes) -> "ExperimentConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        cfg = dataclasses.replace(self, train={**self.train, **changes})
        cfg.train_config()
        return cfg

    def train_config(self) -> TrainConfig:
        t = {k: v for k, v in self.train.items() if k not in self.TRAIN_EXTRA}
        t["weights"] = LossWeights(**t["weights"])
        for key in ("seg_hidden", "reg_hidden"):
            t[key] = getattr(self.nets, key)
        try:
            return TrainConfig(solver=self.solver, **t)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _train_defaults() -> dict:
    d = {f.name: getattr(TrainConfig(), f.name) for f in dataclasses.fields(TrainConfig)}
    for key in ("solver", "seg_hidden", "reg_hidden"):
        d.pop(key)
    d["weights"] = dataclasses.asdict(d["weights"])
    return d


@contextlib.contextmanager
def _output_dir(out, command: str, cfg: ExperimentConfig | None, seed=None, extra=None):
    """Create ``out``, hold its lock for the command and write the manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"{out} is locked by another command (remove {lock} if stale)") from None
    try:
        os.close(fd)
        yield out
        manifest = {
            "command": command,
            "version": __version__,
            "numpy": np.__version__,
            "seed": seed,
            "config_hash": cfg.digest() if cfg else None,
            "config": cfg.to_dict() if cfg else None,
            **(extra or {}),
        }
        (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    finally:
        lock.unlink(missing_ok=True)


def _summary(**fields) -> None:
    print(json.dumps(fields, sort_keys=True))


def _split(cfg: ExperimentConfig, dataset):
    t = cfg.train
    return split_dataset(dataset, t["n_labeled"], seed=t["seed"], n_val=t["n_val"])


def cmd_gen_data(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    samples = generate(cfg.data)
    with _output_dir(args.out, "gen-data", cfg, cfg.data.seed) as out:
        save_dataset(samples, out, cfg.data)
    _summary(command="gen-data", out=str(out), count=len(samples))
    return 0


def cmd_pretrain_reg(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    tc = cfg.train_config()
    split = _split(cfg, load_dataset(args.data))
    K = len(split.labeled[0].volumes)
    reg0 = init_reg(K, tc.seed + 1, hidden=tc.reg_hidden)
    reg, history = pretrain_regression(reg0, split.labeled, tc.reg_epochs, tc.reg_lr, tc.reg_optimizer)
    with _output_dir(args.out, "pretrain-reg", cfg, tc.seed) as out:
        reg.save(out / "reg")
        with open(out / "reg_history.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss"])
            writer.writerows([i, repr(v)] for i, v in enumerate(history))
    err = regression_error(reg, split.validation)
    _summary(command="pretrain-reg", out=str(out), final_loss=history[-1] if history else None, val_error=err)
    return 0


def cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config).with_train(
        variant=args.variant, n_labeled=args.n_labeled, seed=args.seed)
    tc = cfg.train_config()
    split = _split(cfg, load_dataset(args.data))
    seg, reg, critic, history = train(tc, split)
    v_emp = compute_v_emp([s.volumes for s in split.labeled])
    with _output_dir(args.out, "train", cfg, tc.seed, {"audit_count": split.audit.count}) as out:
        seg.save(out / "seg")
        if reg is not None:
            reg.save(out / "reg")
        (out / "critic.json").write_text(json.dumps(
            {"weights": critic.weights.tolist(), "bias": critic.bias, "clip": critic.clip}, indent=1))
        (out / "v_emp.json").write_text(json.dumps(v_emp.tolist()))
        history.to_csv(out / "history.csv")
    best = max((r.val_dice for r in history.records), default=float("nan"))
    _summary(command="train", out=str(out), variant=tc.variant, epochs=len(history.records),
             best_val_dice=best, audit_count=split.audit.count)
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    try:
        saved = json.loads((ckpt / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise RuntimeError(f"{ckpt}: not a training output directory") from exc
    cfg = ExperimentConfig.from_dict(saved["config"])
    source = args.volume_source or cfg.eval.volume_source
    seg = Params.load(ckpt / "seg")
    reg = Params.load(ckpt / "reg") if (ckpt / "reg.json").exists() else None
    v_emp = np.array(json.loads((ckpt / "v_emp.json").read_text()))
    dataset = load_dataset(args.data)
    samples = _split(cfg, dataset).validation if cfg.eval.split == "validation" else dataset
    report = evaluate(seg, cfg.solver, samples, source, reg_params=reg, v_emp=v_emp)
    with _output_dir(args.out, "eval", cfg, cfg.train["seed"], {"volume_source": source}) as out:
        report.to_csv(out / "metrics.csv")
    _summary(command="eval", out=str(out), volume_source=source, n_images=report.n_images,
             dice=report.mean("dice"), jaccard=report.mean("jaccard"),
             asd=report.mean("asd"), hd95=report.mean("hd95"))
    return 0


def _parse_volumes(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError as exc:
        raise ConfigError(f"bad --volumes {text!r}") from exc


def cmd_segment(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    img = read_image(args.image)
    V = check_volumes(_parse_volumes(args.volumes), img.size)
    solver = cfg.solver.replace(epsilon=cfg.eval.variational_epsilon, lam=cfg.eval.variational_lam)
    mask, _, means = segment_variational(img, V, cfg=solver, outer_iters=cfg.eval.variational_outer_iters)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_mask(args.out, mask)
    counts = np.bincount(mask.ravel(), minlength=V.size)
    _summary(command="segment", out=str(args.out), volumes=counts.tolist(), means=means.tolist())
    return 0


def _read_csv_numbers(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(x) for x in row if x.strip()] for row in csv.reader(fh) if any(c.strip() for c in row)]
    if not rows:
        raise ConfigError(f"{path}: no numbers")
    return np.array(rows)


def cmd_w1(args) -> int:
    p = _read_csv_numbers(args.p).ravel()
    q = _read_csv_numbers(args.q).ravel()
    cost = _read_csv_numbers(args.cost) if args.cost else None
    value = w1_categorical(p, q, cost)
    print(repr(value))
    _summary(command="w1", value=value, oracle="lp" if cost is not None else "cdf")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    K, size, mc = cfg.data.n_classes, cfg.eval.gradcheck_size, cfg.eval.gradcheck_max_coords
    solver = cfg.solver.replace(sinkhorn_tol=min(cfg.solver.sinkhorn_tol, 1e-11))
    worst, ok = 0.0, True
    for seed in range(cfg.eval.gradcheck_seeds):
        for name, report in (
            ("seg", check_seg_gradients(K, size, seed, args.rtol, solver, max_coords=mc)),
            ("reg", check_reg_gradients(K, size, seed, args.rtol, max_coords=mc)),
        ):
            print(f"# {name} net, seed {seed}")
            print(report.table())
            worst = max(worst, report.max_error)
            ok &= report.passed
    _summary(command="gradcheck", passed=bool(ok), max_error=worst, rtol=args.rtol)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vpseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-reg", help="pretrain the volume regression network")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain_reg)

    p = sub.add_parser("train", help="semi-supervised training")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--n-labeled", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--volume-source", choices=("reg", "gt", "emp"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("segment", help="network-free variational segmentation")
    p.add_argument("--image", required=True)
    p.add_argument("--volumes", required=True, help="comma-separated pixel counts v0,v1,... (classes ordered by increasing mean intensity)")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("w1", help="W1 distance between two categorical distributions")
    p.add_argument("--p", required=True)
    p.add_argument("--q", required=True)
    p.add_argument("--cost")
    p.set_defaults(func=cmd_w1)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--config")
    p.add_argument("--rtol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # every failure becomes a nonzero exit with a message
        print(f"vpseg {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
