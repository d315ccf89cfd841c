"""Tilted-sample synthesis: rotate, inscribed center crop, resize, label.

Source images are assumed upright (0 degrees). A sample at angle ``theta``
is the source rotated ``theta`` degrees anticlockwise; correcting it means
rotating clockwise by the same amount.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .imageio import DataError, read_image, write_ppm
from .tilt import encode_labels

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm")
MIN_SIDE = 8


def validate_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got {img.shape}")
    if min(img.shape[:2]) < MIN_SIDE:
        raise ValueError(f"image sides must be >= {MIN_SIDE}, got {img.shape[:2]}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return img


def _cos_sin(theta: float) -> tuple:
    t = theta % 360
    exact = {0: (1.0, 0.0), 90: (0.0, 1.0), 180: (-1.0, 0.0), 270: (0.0, -1.0)}
    if t in exact:
        return exact[t]
    r = math.radians(t)
    return math.cos(r), math.sin(r)


def _sample_bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    H, W = img.shape[:2]
    ys = np.clip(ys, 0.0, H - 1.0)
    xs = np.clip(xs, 0.0, W - 1.0)
    y0 = np.minimum(np.floor(ys).astype(np.int64), H - 1)
    x0 = np.minimum(np.floor(xs).astype(np.int64), W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def rotate(img: np.ndarray, theta: float, method: str = "bilinear") -> np.ndarray:
    """Rotate ``theta`` degrees anticlockwise about the image center.

    Pixel (r, c) covers the square [r - 0.5, r + 0.5] x [c - 0.5, c + 0.5];
    output pixels whose source point falls outside the image are 0.
    """
    if method not in ("bilinear", "nearest"):
        raise ValueError(f"unknown interpolation {method!r}")
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape[:2]
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    c, s = _cos_sin(theta)
    r, q = np.mgrid[0:H, 0:W].astype(np.float64)
    u, v = q - cx, cy - r  # x right, y up
    us = c * u + s * v
    vs = -s * u + c * v
    xs, ys = cx + us, cy - vs
    tol = 1e-9
    inside = (xs >= -0.5 - tol) & (xs <= W - 0.5 + tol) & (ys >= -0.5 - tol) & (ys <= H - 0.5 + tol)
    if method == "nearest":
        xi = np.clip(np.floor(xs + 0.5).astype(np.int64), 0, W - 1)
        yi = np.clip(np.floor(ys + 0.5).astype(np.int64), 0, H - 1)
        out = img[yi, xi]
    else:
        out = _sample_bilinear(img, ys, xs)
    out[~inside] = 0.0
    return out


def center_crop(img: np.ndarray, side: int) -> np.ndarray:
    H, W = img.shape[:2]
    if side < 1 or side > min(H, W):
        raise ValueError(f"crop side {side} does not fit a {H}x{W} image")
    top, left = (H - side) // 2, (W - side) // 2
    return img[top : top + side, left : left + side]


def resize(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize to (size, size) with half-pixel centers."""
    H, W = img.shape[:2]
    if (H, W) == (size, size):
        return img.copy()
    ys = (np.arange(size) + 0.5) * H / size - 0.5
    xs = (np.arange(size) + 0.5) * W / size - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return _sample_bilinear(img, yy, xx)


def safe_crop_side(H: int, W: int) -> int:
    """Largest square that stays inside the source at every rotation angle."""
    return int(math.floor(min(H, W) / math.sqrt(2.0)))


def synth_horizon(
    seed: int,
    size: int = 64,
    sky: Sequence[float] = (0.78, 0.86, 0.95),
    ground: Sequence[float] = (0.36, 0.30, 0.18),
    amplitude: float = 0.05,
) -> np.ndarray:
    """Upright two-band scene: light sky above a horizontal boundary, plus noise.

    The boundary row is drawn from the middle third of the image.
    """
    if size < 8:
        raise ValueError(f"synthetic images need size >= 8, got {size}")
    rng = np.random.default_rng(seed)
    boundary = int(rng.integers(size // 3, 2 * size // 3 + 1))
    img = np.empty((size, size, 3))
    img[:boundary] = np.asarray(sky, dtype=np.float64)
    img[boundary:] = np.asarray(ground, dtype=np.float64)
    img += rng.uniform(-amplitude, amplitude, size=img.shape)
    return np.clip(img, 0.0, 1.0)


@dataclass(frozen=True)
class SyntheticSource:
    count: int = 16
    size: int = 64
    seed: int = 0

    def image_seeds(self) -> list:
        return [self.seed * 100003 + i for i in range(self.count)]


@dataclass(frozen=True)
class DatasetSpec:
    source: Union[str, SyntheticSource]
    interval: int = 2
    angle_mode: str = "subset"  # "sweep": every angle 0..359; "subset": seeded random angles
    angles_per_image: int = 24
    crop: str = "inscribed"
    input_size: int = 32
    seed: int = 0
    interpolation: str = "bilinear"

    def __post_init__(self):
        if not 0 <= self.interval < 180:
            raise ValueError(f"interval must be in [0, 180), got {self.interval}")
        if self.angle_mode not in ("sweep", "subset"):
            raise ValueError(f"angle_mode must be 'sweep' or 'subset', got {self.angle_mode!r}")
        if self.angle_mode == "subset" and not 1 <= self.angles_per_image <= 360:
            raise ValueError("angles_per_image must be in [1, 360]")
        if self.crop != "inscribed":
            raise ValueError(f"unknown crop policy {self.crop!r}")


@dataclass
class Sample:
    image: np.ndarray  # (input_size, input_size, 3)
    label: np.ndarray  # (360,)
    true_angle: int


def make_sample(img: np.ndarray, theta: int, spec: DatasetSpec) -> Sample:
    theta = int(theta) % 360
    rotated = rotate(img, theta, spec.interpolation)
    side = safe_crop_side(*img.shape[:2])
    patch = resize(center_crop(rotated, side), spec.input_size)
    return Sample(np.clip(patch, 0.0, 1.0), encode_labels(theta, spec.interval), theta)


def list_images(directory) -> list:
    if not os.path.isdir(directory):
        raise DataError(f"not a directory: {os.fspath(directory)!r}")
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(IMAGE_SUFFIXES))
    return [os.path.join(directory, n) for n in names]


def load_sources(source) -> list:
    if isinstance(source, SyntheticSource):
        return [synth_horizon(s, source.size) for s in source.image_seeds()]
    paths = list_images(source)
    if not paths:
        raise DataError(f"no images in {os.fspath(source)!r}")
    return [validate_image(read_image(p)) for p in paths]


def write_synthetic(directory, count: int, size: int, seed: int) -> list:
    """Write ``count`` synthetic PPMs plus manifest.tsv; returns the file names."""
    os.makedirs(directory, exist_ok=True)
    src = SyntheticSource(count, size, seed)
    names = []
    rows = ["filename\tseed"]
    for i, s in enumerate(src.image_seeds()):
        name = f"horizon_{i:05d}.ppm"
        write_ppm(os.path.join(directory, name), synth_horizon(s, size))
        names.append(name)
        rows.append(f"{name}\t{s}")
    with open(os.path.join(directory, "manifest.tsv"), "w", encoding="utf-8") as f:
        f.write("\n".join(rows) + "\n")
    return names


class Dataset:
    """Samples of a :class:`DatasetSpec`, built once and cached."""

    def __init__(self, spec: DatasetSpec, sources: Optional[list] = None):
        self.spec = spec
        self.sources = load_sources(spec.source) if sources is None else sources
        if not self.sources:
            raise DataError("dataset has no source images")
        self.index = self._angle_index()
        self._images: Optional[np.ndarray] = None

    def _angle_index(self) -> list:
        spec = self.spec
        index = []
        for i in range(len(self.sources)):
            if spec.angle_mode == "sweep":
                angles = range(360)
            else:
                rng = np.random.default_rng([spec.seed, i])
                angles = sorted(rng.choice(360, size=spec.angles_per_image, replace=False).tolist())
            index.extend((i, int(a)) for a in angles)
        return index

    def __len__(self) -> int:
        return len(self.index)

    @property
    def angles(self) -> np.ndarray:
        return np.array([a for _, a in self.index], dtype=np.int64)

    @property
    def images(self) -> np.ndarray:
        """All sample images stacked, (n, S, S, 3)."""
        if self._images is None:
            self._images = np.stack(
                [make_sample(self.sources[i], a, self.spec).image for i, a in self.index]
            )
        return self._images

    def sample(self, k: int) -> Sample:
        i, a = self.index[k]
        return Sample(self.images[k], encode_labels(a, self.spec.interval), a)

    def order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.spec.seed, 7919, epoch])
        return rng.permutation(len(self.index))

    def iterate(self, epoch: int) -> Iterator[Sample]:
        for k in self.order(epoch):
            yield self.sample(int(k))


def iterate(spec: DatasetSpec, epoch: int) -> Iterator[Sample]:
    return Dataset(spec).iterate(epoch)
