"""Synthetic nested-ellipse images with known masks and volume distribution.

Class 0 is background; classes 1..K-1 are concentric elliptical shells from
the inside out (class 1 is the innermost disc), loosely echoing a cavity
surrounded by a wall. Each class occupies a random fraction of the image
drawn from a scaled Beta distribution on its configured range.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .field import label_volumes
from .io import FormatError, read_image, read_mask, write_image, write_mask

FORMAT_VERSION = 1
# largest total foreground fraction that still fits with aspect and centre jitter
MAX_FOREGROUND = 0.55


@dataclass(frozen=True)
class SynthConfig:
    size: int = 32
    n_classes: int = 3
    intensities: tuple = (0.2, 1.0, 0.6)
    noise_sigma: float = 0.05
    ratio_ranges: tuple = ((0.04, 0.25), (0.04, 0.25))  # per foreground class
    beta_shape: float = 2.0
    aspect_range: tuple = (0.75, 1.33)
    count: int = 80
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "intensities", tuple(float(v) for v in self.intensities))
        object.__setattr__(self, "ratio_ranges", tuple(tuple(float(x) for x in r) for r in self.ratio_ranges))
        object.__setattr__(self, "aspect_range", tuple(float(x) for x in self.aspect_range))
        if self.n_classes < 2 or len(self.intensities) != self.n_classes:
            raise ValueError("need one intensity per class and K >= 2")
        if any(not 0.0 <= v <= 1.0 for v in self.intensities):
            raise ValueError("intensities must lie in [0, 1]")
        if len(self.ratio_ranges) != self.n_classes - 1:
            raise ValueError("need one ratio range per foreground class")
        for lo, hi in self.ratio_ranges:
            if not 0.0 < lo <= hi < 1.0:
                raise ValueError(f"bad ratio range ({lo}, {hi})")
        if sum(hi for _, hi in self.ratio_ranges) > MAX_FOREGROUND:
            raise ValueError("structures cannot fit: foreground ratio upper bounds exceed "
                             f"{MAX_FOREGROUND}")
        if self.size < 8 or self.noise_sigma < 0 or self.count < 0 or self.beta_shape <= 0:
            raise ValueError("invalid size, noise, count or beta shape")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["intensities"] = list(self.intensities)
        d["ratio_ranges"] = [list(r) for r in self.ratio_ranges]
        d["aspect_range"] = list(self.aspect_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SyntheticSample:
    image: np.ndarray
    mask: np.ndarray
    volumes: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.volumes is None:
            self.volumes = label_volumes(self.mask, int(self.mask.max()) + 1)


def _sample(cfg: SynthConfig, index: int) -> SyntheticSample:
    rng = np.random.default_rng([cfg.seed, index])
    n = cfg.size
    N = n * n
    lo = np.array([r[0] for r in cfg.ratio_ranges])
    hi = np.array([r[1] for r in cfg.ratio_ranges])
    ratios = lo + (hi - lo) * rng.beta(cfg.beta_shape, cfg.beta_shape, size=lo.size)
    cumulative = np.cumsum(ratios)
    aspect = rng.uniform(*cfg.aspect_range)
    # semi-axes of the outermost shell bound the admissible centre
    a_out = np.sqrt(cumulative[-1] * N * aspect / np.pi)
    b_out = np.sqrt(cumulative[-1] * N / (np.pi * aspect))
    margin_y = min(b_out + 1.0, n / 2)
    margin_x = min(a_out + 1.0, n / 2)
    cy = rng.uniform(margin_y, n - margin_y)
    cx = rng.uniform(margin_x, n - margin_x)
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    mask = np.zeros((n, n), dtype=np.int64)
    # paint outermost shell first so inner shells overwrite it
    for k in range(lo.size, 0, -1):
        area = cumulative[k - 1] * N
        a = np.sqrt(area * aspect / np.pi)
        b = np.sqrt(area / (np.pi * aspect))
        inside = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
        mask[inside] = k
    levels = np.asarray(cfg.intensities)
    img = levels[mask] + cfg.noise_sigma * rng.standard_normal((n, n))
    # store exactly what an 8-bit PGM can hold so files round-trip bitwise
    img = np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return SyntheticSample(img, mask, label_volumes(mask, cfg.n_classes))


def generate(cfg: SynthConfig) -> list[SyntheticSample]:
    """Samples ``0..count-1``; sample ``i`` depends only on ``(cfg, seed, i)``."""
    return [_sample(cfg, i) for i in range(cfg.count)]


def save_dataset(samples, directory, cfg: SynthConfig | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    K = len(samples[0].volumes) if samples else (cfg.n_classes if cfg else 0)
    for i, s in enumerate(samples):
        write_image(directory / f"img_{i:04d}.pgm", s.image)
        write_mask(directory / f"mask_{i:04d}.pgm", s.mask)
    with open(directory / "volumes.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + [f"v_{k}" for k in range(K)])
        for i, s in enumerate(samples):
            writer.writerow([i] + [int(v) if float(v).is_integer() else repr(float(v)) for v in s.volumes])
    manifest = {
        "format_version": FORMAT_VERSION,
        "count": len(samples),
        "n_classes": K,
        "config": cfg.to_dict() if cfg else None,
        "seed": cfg.seed if cfg else None,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_dataset(directory) -> list[SyntheticSample]:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        count = int(manifest["count"])
        K = int(manifest["n_classes"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{directory}: missing or corrupt manifest") from exc
    try:
        with open(directory / "volumes.csv", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
    except OSError as exc:
        raise FormatError(f"{directory}: missing volumes.csv") from exc
    if len(rows) != count:
        raise FormatError(f"{directory}: volumes.csv has {len(rows)} rows, manifest says {count}")
    samples = []
    for i in range(count):
        img_path, mask_path = directory / f"img_{i:04d}.pgm", directory / f"mask_{i:04d}.pgm"
        if not img_path.exists() or not mask_path.exists():
            raise FormatError(f"{directory}: sample {i} is missing")
        mask = read_mask(mask_path)
        volumes = np.array([float(v) for v in rows[i][1:]])
        if volumes.size != K or not np.array_equal(volumes, label_volumes(mask, K)):
            raise FormatError(f"{directory}: volumes of sample {i} do not match its mask")
        samples.append(SyntheticSample(read_image(img_path), mask, volumes))
    return samples
