"""Seeded synthetic forgery-analog images, plus a tiny raster folder format.

"Real" images are smoothed colour noise fields with a low-frequency sinusoidal
texture and sensor noise. A "fake" is a real image with a soft, raised-cosine
disc blended in from a second real image (a boundary / statistics cue) and a
faint high-frequency DCT checkerboard inside the same disc (a frequency cue).
``artifact_strength`` scales both cues; at 0 a fake equals its source.

Raster file layout (little endian)::

    u32 width | u32 height | u8 channels | width*height*channels u8 pixels,
    interleaved row-major: pixel (y, x, c) at offset (y*width + x)*channels + c

The manifest is a CSV with header ``filename,label,split``.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError
from .frequency import HighPassSpec, frequency_transform

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class GenSpec:
    n_samples: int = 1000
    image_size: int = 64
    channels: int = 3
    artifact_strength: float = 0.8
    blend_patch_radius: tuple[float, float] = (0.2, 0.35)  # fraction of image size
    checker_frequency: tuple[float, float] = (0.75, 1.0)  # fraction of the DCT index range
    checker_amplitude: float = 0.12  # peak amplitude at strength 1
    noise_std: float = 0.03
    splits: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0
    highpass: HighPassSpec = field(default_factory=HighPassSpec)

    def __post_init__(self):
        for name in ("blend_patch_radius", "checker_frequency", "splits"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.n_samples < 4:
            raise ConfigError(f"n_samples must be >= 4, got {self.n_samples}")
        if self.image_size < 4 or self.channels < 1:
            raise ConfigError("image_size must be >= 4 and channels >= 1")
        if not 0.0 <= self.artifact_strength <= 1.0:
            raise ConfigError(f"artifact_strength must lie in [0, 1], got {self.artifact_strength}")
        lo, hi = self.blend_patch_radius
        if not 0 < lo <= hi < 0.5:
            raise ConfigError(f"blend_patch_radius must satisfy 0 < lo <= hi < 0.5, got {self.blend_patch_radius}")
        lo, hi = self.checker_frequency
        if not 0 <= lo <= hi <= 1:
            raise ConfigError(f"checker_frequency must satisfy 0 <= lo <= hi <= 1, got {self.checker_frequency}")
        if len(self.splits) != 3 or min(self.splits) < 0 or abs(sum(self.splits) - 1) > 1e-9:
            raise ConfigError(f"splits must be three non-negative fractions summing to 1, got {self.splits}")
        if self.noise_std < 0 or self.checker_amplitude < 0:
            raise ConfigError("noise_std and checker_amplitude must be >= 0")

    def split_sizes(self) -> tuple[int, int, int]:
        n_train = int(round(self.n_samples * self.splits[0]))
        n_val = int(round(self.n_samples * self.splits[1]))
        return n_train, n_val, self.n_samples - n_train - n_val


@dataclass
class LabeledDataset:
    images: np.ndarray       # (N, C, H, W) in [0, 1]
    freq_images: np.ndarray  # frequency_transform(images)
    labels: np.ndarray       # (N,) in {0, 1}
    splits: np.ndarray       # (N,) of "train" / "val" / "test"

    def __post_init__(self):
        n = len(self.images)
        if not (len(self.freq_images) == len(self.labels) == len(self.splits) == n):
            raise DataError("dataset arrays have inconsistent lengths")

    def __len__(self):
        return len(self.labels)

    def has_split(self, name: str) -> bool:
        return bool(np.any(self.splits == name))

    def subset(self, name: str) -> "LabeledDataset":
        idx = np.nonzero(self.splits == name)[0]
        return LabeledDataset(self.images[idx], self.freq_images[idx], self.labels[idx], self.splits[idx])


def _real_image(rng: np.random.Generator, size: int, channels: int, noise_std: float) -> np.ndarray:
    sigma = size * rng.uniform(0.04, 0.1)
    field_ = gaussian_filter(rng.standard_normal((channels, size, size)), sigma=(0, sigma, sigma), mode="wrap")
    field_ /= field_.std(axis=(1, 2), keepdims=True) + 1e-12
    mix = 0.6 * np.eye(channels) + 0.4 * rng.uniform(0.0, 1.0, (channels, channels)) / channels
    field_ = np.tensordot(mix, field_, axes=1)
    yy, xx = np.mgrid[0:size, 0:size] / size
    fy, fx = rng.uniform(0.5, 3.0, 2) * rng.choice([-1, 1], 2)
    texture = np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    tint = rng.uniform(-0.1, 0.1, channels)[:, None, None]
    img = 0.5 + tint + 0.12 * field_ + 0.08 * texture[None] + noise_std * rng.standard_normal((channels, size, size))
    return np.clip(img, 0.0, 1.0)


def blend_mask(size: int, center: tuple[float, float], radius: float, inner: float = 0.6) -> np.ndarray:
    """Raised-cosine disc: 1 inside ``inner*radius``, smooth falloff to 0 at ``radius``."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    rho = np.hypot(yy - center[0], xx - center[1])
    r0 = inner * radius
    t = np.clip((rho - r0) / (radius - r0), 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * t)) * (rho < radius)


def checkerboard(size: int, u: int, v: int) -> np.ndarray:
    """Unnormalised DCT-II basis pattern for frequency index (u, v)."""
    n = np.arange(size) + 0.5
    return np.outer(np.cos(np.pi * u * n / size), np.cos(np.pi * v * n / size))


def generate_pair(spec: GenSpec, index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(source, fake, mask)`` for sample ``index``; the draw sequence is independent of strength."""
    rng = np.random.default_rng([spec.seed, index])
    size, ch = spec.image_size, spec.channels
    source = _real_image(rng, size, ch, spec.noise_std)
    donor = _real_image(rng, size, ch, spec.noise_std)
    radius = size * rng.uniform(*spec.blend_patch_radius)
    center = tuple(rng.uniform(radius, size - radius, 2))
    mask = blend_mask(size, center, radius)
    lo, hi = spec.checker_frequency
    u, v = rng.integers(int(lo * (size - 1)), int(hi * (size - 1)) + 1, 2)
    sign = rng.choice([-1.0, 1.0], ch)[:, None, None]
    s = spec.artifact_strength
    fake = source + s * mask * (donor - source) + s * spec.checker_amplitude * sign * mask * checkerboard(size, u, v)
    return source, np.clip(fake, 0.0, 1.0), mask


def generate(spec: GenSpec) -> LabeledDataset:
    """Deterministic dataset; labels alternate within each split so classes balance to +-1."""
    sizes = spec.split_sizes()
    splits = np.concatenate([np.full(n, name) for name, n in zip(SPLITS, sizes)])
    labels = np.concatenate([np.arange(n) % 2 for n in sizes]).astype(np.int64)
    images = np.empty((spec.n_samples, spec.channels, spec.image_size, spec.image_size))
    for i in range(spec.n_samples):
        source, fake, _ = generate_pair(spec, i)
        images[i] = fake if labels[i] == 1 else source
    return LabeledDataset(images, frequency_transform(images, spec.highpass), labels, splits)


# -- raster folders ---------------------------------------------------------------

def write_raster(path: str | Path, image: np.ndarray) -> None:
    """Write a (C,H,W) image in [0,1] as an 8-bit raster file."""
    c, h, w = image.shape
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(struct.pack("<IIB", w, h, c))
        f.write(pixels.tobytes())


def read_raster(path: str | Path) -> np.ndarray:
    """Read a raster file into a (C,H,W) float array in [0,1]."""
    data = Path(path).read_bytes()
    if len(data) < 9:
        raise DataError(f"{path}: truncated raster header")
    w, h, c = struct.unpack("<IIB", data[:9])
    if len(data) != 9 + w * h * c:
        raise DataError(f"{path}: expected {w * h * c} pixel bytes, got {len(data) - 9}")
    pixels = np.frombuffer(data[9:], dtype=np.uint8).reshape(h, w, c)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def resize_nearest(image: np.ndarray, size: int) -> np.ndarray:
    _, h, w = image.shape
    if h == size and w == size:
        return image
    ys = np.minimum(((np.arange(size) + 0.5) * h / size).astype(int), h - 1)
    xs = np.minimum(((np.arange(size) + 0.5) * w / size).astype(int), w - 1)
    return image[:, ys][:, :, xs]


def write_image_dir(data: LabeledDataset, path: str | Path, manifest: str = "manifest.csv") -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / manifest, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["filename", "label", "split"])
        for i in range(len(data)):
            name = f"{i:06d}.raw"
            write_raster(path / name, data.images[i])
            writer.writerow([name, int(data.labels[i]), str(data.splits[i])])
    return path / manifest


def load_image_dir(path: str | Path, manifest: str | Path | None = None, image_size: int | None = None,
                   highpass: HighPassSpec | None = None) -> LabeledDataset:
    """Load a raster folder described by a ``filename,label,split`` manifest."""
    path = Path(path)
    manifest_path = Path(manifest) if manifest is not None else path / "manifest.csv"
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    with open(manifest_path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise DataError(f"{manifest_path}: manifest is empty")
    missing = [r["filename"] for r in rows if not (path / r["filename"]).exists()]
    if missing:
        raise DataError(f"files listed in manifest but missing: {missing}")
    bad = [r["filename"] for r in rows if r["label"] not in ("0", "1") or r["split"] not in SPLITS]
    if bad:
        raise DataError(f"invalid label or split for: {bad}")
    images = [read_raster(path / r["filename"]) for r in rows]
    size = image_size or images[0].shape[1]
    images = np.stack([resize_nearest(im, size) for im in images])
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    splits = np.array([r["split"] for r in rows])
    return LabeledDataset(images, frequency_transform(images, highpass or HighPassSpec()), labels, splits)
