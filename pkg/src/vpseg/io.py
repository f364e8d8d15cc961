"""File formats: binary PGM images/masks and raw float32 soft segmentations."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    pass


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PGM header")
    return data[start:pos], pos


def read_pgm_raw(path) -> tuple[np.ndarray, int]:
    """Return the integer pixel array and maxval of a binary (P5) PGM."""
    data = Path(path).read_bytes()
    magic, pos = _read_token(data, 0)
    if magic != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {magic!r})")
    width, pos = _read_token(data, pos)
    height, pos = _read_token(data, pos)
    maxval, pos = _read_token(data, pos)
    width, height, maxval = int(width), int(height), int(maxval)
    if not (0 < maxval < 65536) or width <= 0 or height <= 0:
        raise FormatError(f"{path}: bad PGM header")
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    body = data[pos : pos + count * dtype.itemsize]
    if len(body) != count * dtype.itemsize:
        raise FormatError(f"{path}: truncated PGM data")
    arr = np.frombuffer(body, dtype=dtype).reshape(height, width)
    return arr.astype(np.int64), maxval


def write_pgm_raw(path, arr, maxval: int = 255) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise FormatError("PGM data must be 2D")
    if arr.min() < 0 or arr.max() > maxval:
        raise FormatError(f"values outside [0, {maxval}]")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + arr.astype(dtype).tobytes())


def read_image(path) -> np.ndarray:
    """Read a grayscale PGM and map it linearly to [0, 1]."""
    arr, maxval = read_pgm_raw(path)
    return arr / float(maxval)


def quantize_image(img, bits: int = 8) -> np.ndarray:
    maxval = (1 << bits) - 1
    return np.rint(np.clip(np.asarray(img, dtype=float), 0.0, 1.0) * maxval).astype(np.int64)


def write_image(path, img, bits: int = 8) -> None:
    write_pgm_raw(path, quantize_image(img, bits), maxval=(1 << bits) - 1)


def read_mask(path) -> np.ndarray:
    arr, _ = read_pgm_raw(path)
    return arr


def write_mask(path, mask) -> None:
    mask = np.asarray(mask)
    if mask.max(initial=0) > 255:
        raise FormatError("mask labels must fit in 8 bits")
    write_pgm_raw(path, mask, maxval=255)


def write_soft(path, h) -> None:
    """Raw little-endian float32 N x K data plus a ``.json`` sidecar."""
    h = np.asarray(h)
    if h.ndim != 3:
        raise FormatError("soft segmentation must be (H, W, K)")
    height, width, classes = h.shape
    path = Path(path)
    path.write_bytes(h.astype("<f4").tobytes())
    sidecar = {"width": width, "height": height, "classes": classes}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def read_soft(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    try:
        shape = (int(meta["height"]), int(meta["width"]), int(meta["classes"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad sidecar for {path}") from exc
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != shape[0] * shape[1] * shape[2]:
        raise FormatError(f"{path}: expected {shape} floats, found {raw.size}")
    return raw.reshape(shape).astype(float)
