"""Paired noisy/clean images: loading, augmentation, crops, synthesis."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import ShapeError
from .tensor import pad

IMAGE_SUFFIXES = {".png", ".ppm", ".pnm", ".bmp", ".tif", ".tiff"}
BUFFER_PAD = 2


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ImagePair:
    noisy: np.ndarray  # (1, h, w, 3) float32 in [0, 1]
    clean: np.ndarray
    id: str

    def __post_init__(self):
        if self.noisy.shape != self.clean.shape:
            raise ShapeError(f"{self.id}: noisy {self.noisy.shape} vs clean {self.clean.shape}")


@dataclass(frozen=True)
class NoiseModel:
    """Heteroscedastic Gaussian noise with variance ``a * clean + b``."""

    a: float = 0.01
    b: float = 0.0004
    seed: int = 0

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise ValueError(f"noise coefficients must be non-negative, got a={self.a}, b={self.b}")

    def apply(self, clean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        std = np.sqrt(self.a * clean.astype(np.float64) + self.b)
        noise = rng.standard_normal(clean.shape) * std
        return np.clip(clean + noise, 0.0, 1.0).astype(np.float32)


# --- image files -------------------------------------------------------------

def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise DatasetError(f"{path}: expected an 8-bit RGB image, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.uint8)
    return (arr.astype(np.float32) / 255.0)[None]


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path: str | Path, x: np.ndarray) -> None:
    """Write a ``(1, h, w, 3)`` tensor as an 8-bit image; format from the suffix."""
    if x.ndim != 4 or x.shape[0] != 1 or x.shape[-1] != 3:
        raise ShapeError(f"expected a single RGB image (1, h, w, 3), got {x.shape}")
    Image.fromarray(to_uint8(x[0]), mode="RGB").save(path)


def _image_files(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise DatasetError(f"{directory} is not a directory")
    return {p.name: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def load_pairs(noisy_dir: str | Path, clean_dir: str | Path) -> list[ImagePair]:
    """Pair images by filename; the result is sorted by name."""
    noisy, clean = _image_files(Path(noisy_dir)), _image_files(Path(clean_dir))
    orphans = sorted(set(noisy) ^ set(clean))
    if orphans:
        first = orphans[0]
        side = "noisy" if first in noisy else "clean"
        raise DatasetError(f"{side} image {first!r} has no counterpart "
                           f"({len(orphans)} unmatched file(s): {', '.join(orphans[:5])})")
    if not noisy:
        raise DatasetError(f"no images found in {noisy_dir}")
    pairs = []
    for name in sorted(noisy):
        n, c = read_image(noisy[name]), read_image(clean[name])
        if n.shape != c.shape:
            raise DatasetError(f"{name}: noisy {n.shape[1:3]} and clean {c.shape[1:3]} sizes differ")
        pairs.append(ImagePair(n, c, Path(name).stem))
    return pairs


def save_pairs(pairs: Sequence[ImagePair], noisy_dir: str | Path, clean_dir: str | Path, suffix=".png") -> None:
    for d in (noisy_dir, clean_dir):
        Path(d).mkdir(parents=True, exist_ok=True)
    for pair in pairs:
        write_image(Path(noisy_dir) / f"{pair.id}{suffix}", pair.noisy)
        write_image(Path(clean_dir) / f"{pair.id}{suffix}", pair.clean)


# --- augmentation and crops ---------------------------------------------

def dihedral(x: np.ndarray, flip_h: bool, flip_v: bool, rot: int) -> np.ndarray:
    """Apply flips then ``rot`` quarter turns (counter-clockwise) to NHWC ``x``."""
    if flip_h:
        x = x[:, :, ::-1]
    if flip_v:
        x = x[:, ::-1]
    return np.ascontiguousarray(np.rot90(x, rot, axes=(1, 2)))


def augment(pair: ImagePair, rng: np.random.Generator) -> ImagePair:
    flip_h, flip_v = bool(rng.integers(2)), bool(rng.integers(2))
    rot = int(rng.integers(4))
    return ImagePair(dihedral(pair.noisy, flip_h, flip_v, rot), dihedral(pair.clean, flip_h, flip_v, rot), pair.id)


def buffer_pad(x: np.ndarray, amount: int = BUFFER_PAD) -> np.ndarray:
    return pad(x, amount, amount, amount, amount, mode="reflect")


def extract_crop(pair: ImagePair, crop_size: int, rng: np.random.Generator, buffer: int = BUFFER_PAD) -> ImagePair:
    """Reflect-pad both images by ``buffer`` pixels, then cut one random square window."""
    h, w = pair.noisy.shape[1:3]
    ph, pw = h + 2 * buffer, w + 2 * buffer
    if crop_size > ph or crop_size > pw:
        raise ShapeError(f"{pair.id}: crop {crop_size} exceeds padded extents {ph}x{pw}")
    y0 = int(rng.integers(ph - crop_size + 1))
    x0 = int(rng.integers(pw - crop_size + 1))
    noisy, clean = buffer_pad(pair.noisy, buffer), buffer_pad(pair.clean, buffer)
    window = (slice(None), slice(y0, y0 + crop_size), slice(x0, x0 + crop_size))
    return ImagePair(noisy[window].copy(), clean[window].copy(), pair.id)


# --- synthetic data ------------------------------------------------------

def _clean_image(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.empty((size, size, 3))
    # smooth gradient background
    base = rng.uniform(0.2, 0.8, 3)
    gy, gx = rng.uniform(-0.4, 0.4, (2, 3))
    img[:] = base + gy * (yy[..., None] - 0.5) + gx * (xx[..., None] - 0.5)
    # hard-edged shapes
    for _ in range(int(rng.integers(3, 7))):
        color = rng.uniform(0.05, 0.95, 3)
        if rng.random() < 0.5:
            cy, cx = rng.uniform(0, 1, 2)
            r = rng.uniform(0.08, 0.3)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            y0, x0 = rng.uniform(0, 0.8, 2)
            hh, ww = rng.uniform(0.1, 0.5, 2)
            mask = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
        img[mask] = color
    # band-limited texture
    for _ in range(4):
        freq = rng.uniform(2, size / 8)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.01, 0.06, 3)
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        img += wave[..., None] * amp
    return np.clip(img, 0.0, 1.0)


def synth_dataset(count: int, size: int, noise: NoiseModel = NoiseModel(), seed: int | None = None,
                  prefix: str = "synth") -> list[ImagePair]:
    """Procedural clean images plus heteroscedastic noise.

    Each image draws from its own child stream of ``SeedSequence(seed)``, so
    item ``i`` does not depend on how many items are generated.
    """
    if size % 16:
        raise ShapeError(f"synthetic image size must be a multiple of 16, got {size}")
    seed = noise.seed if seed is None else seed
    pairs = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(count)):
        rng = np.random.default_rng(child)
        clean = _clean_image(size, rng)[None].astype(np.float32)
        noisy = noise.apply(clean, rng) if (noise.a or noise.b) else clean.copy()
        pairs.append(ImagePair(noisy, clean, f"{prefix}{i:04d}"))
    return pairs
