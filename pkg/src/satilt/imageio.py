"""Reading PNG/PPM/PGM images and writing binary PPM (P6) / PGM (P5)."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image as PILImage


class DataError(IOError):
    """An input file is missing, unreadable or malformed."""


def read_image(path) -> np.ndarray:
    """Load an image as float64 (H, W, 3) in [0, 1]. Grayscale is replicated."""
    try:
        with PILImage.open(path) as im:
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {os.fspath(path)!r}: {exc}") from exc
    return arr / 255.0


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs (H, W, 3), got {img.shape}")
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(to_bytes(img).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    """8-bit P5 file, value = round(255 * v), W columns by H rows."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"PGM needs (H, W), got {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(to_bytes(gray).tobytes())


def read_pgm(path) -> np.ndarray:
    """Parse a P5 file written by :func:`write_pgm`; returns uint8 (H, W)."""
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    payload = parts[4]
    if maxval != 255 or len(payload) != w * h:
        raise DataError(f"{path}: bad PGM payload ({len(payload)} bytes for {w}x{h})")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
