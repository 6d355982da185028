"""Datasets and the resize/crop evaluation protocol.

Images travel as float32 arrays of shape (3, H, W) holding raw pixel
values in [0, 255]. The pipeline never subtracts a mean: an input
batch-norm layer owns normalization. Training preprocessing is exactly
shorter-side resize followed by one random crop; validation is resize
followed by one centered crop. No flips, no color/scale/aspect jitter.

On-disk layout: ``<root>/<split>/manifest.tsv`` (relative PNG path, TAB,
integer label) next to 8-bit RGB PNG files.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image


class DatasetError(ValueError):
    pass


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DatasetError(f"expected (3, H, W) image, got {img.shape}")
    return img


def resize_shorter_side(img: np.ndarray, target: int) -> np.ndarray:
    """Scale so the shorter side equals target, aspect ratio preserved.

    Bilinear interpolation with half-pixel centers; the longer side
    rounds half away from zero. Bit-exact no-op when already at target.
    """
    img = _check_image(img)
    if target < 1:
        raise DatasetError(f"resize target must be positive, got {target}")
    _, h, w = img.shape
    if min(h, w) == target:
        return img
    if h <= w:
        nh, nw = target, int(np.floor(w * target / h + 0.5))
    else:
        nh, nw = int(np.floor(h * target / w + 0.5)), target
    return _bilinear(img, nh, nw)


def _bilinear(img: np.ndarray, nh: int, nw: int) -> np.ndarray:
    _, h, w = img.shape
    out = img.astype(np.float64)

    def axis_coords(n_src, n_dst):
        src = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        src = np.clip(src, 0, n_src - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_src - 1)
        frac = src - i0
        return i0, i1, frac

    y0, y1, fy = axis_coords(h, nh)
    out = out[:, y0, :] * (1 - fy)[None, :, None] + out[:, y1, :] * fy[None, :, None]
    x0, x1, fx = axis_coords(w, nw)
    out = out[:, :, x0] * (1 - fx)[None, None, :] + out[:, :, x1] * fx[None, None, :]
    return out.astype(np.float32)


def random_crop(img: np.ndarray, crop: int, rng: np.random.Generator) -> np.ndarray:
    """Square crop at offsets drawn uniformly; the only training augmentation."""
    img = _check_image(img)
    _, h, w = img.shape
    if crop > min(h, w):
        raise DatasetError(f"crop {crop} larger than image {h}x{w}")
    oy = int(rng.integers(0, h - crop + 1))
    ox = int(rng.integers(0, w - crop + 1))
    return img[:, oy:oy + crop, ox:ox + crop]


def center_crop(img: np.ndarray, crop: int) -> np.ndarray:
    """Single centered crop, offsets floor((side - crop) / 2)."""
    img = _check_image(img)
    _, h, w = img.shape
    if crop > min(h, w):
        raise DatasetError(f"crop {crop} larger than image {h}x{w}")
    oy = (h - crop) // 2
    ox = (w - crop) // 2
    return img[:, oy:oy + crop, ox:ox + crop]


def epoch_permutation(n: int, epoch: int, seed: int) -> np.ndarray:
    """Deterministic shuffle of 0..n-1 as a function of (n, epoch, seed)."""
    if n < 1:
        raise DatasetError(f"need n >= 1, got {n}")
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([int(seed), int(epoch)])))
    return rng.permutation(n)


# ---------------------------------------------------------------------------
# Synthetic dataset
# ---------------------------------------------------------------------------

_COLORS = np.array([
    (215, 60, 60), (60, 205, 60), (65, 65, 220), (210, 210, 55),
    (205, 60, 205), (60, 205, 205), (230, 140, 40), (140, 85, 205),
], dtype=np.float32)


def _pattern_mask(pattern: int, size: int, jy: int, jx: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    yy -= jy
    xx -= jx
    cy = cx = (size - 1) / 2
    if pattern == 0:  # filled circle
        return (((yy - cy) ** 2 + (xx - cx) ** 2) <= (size / 3) ** 2).astype(np.float32)
    if pattern == 1:  # square frame
        band = size / 6
        inner = (np.maximum(np.abs(yy - cy), np.abs(xx - cx)))
        return ((inner >= size / 4 - band / 2) & (inner <= size / 4 + band / 2)
                ).astype(np.float32)
    if pattern == 2:  # horizontal stripes
        return ((yy // (size // 8)) % 2 == 0).astype(np.float32)
    if pattern == 3:  # vertical stripes
        return ((xx // (size // 8)) % 2 == 0).astype(np.float32)
    if pattern == 4:  # diagonal stripes
        return (((yy + xx) // (size // 8)) % 2 == 0).astype(np.float32)
    if pattern == 5:  # checkerboard
        block = max(2, size // 4)
        return (((yy // block) + (xx // block)) % 2 == 0).astype(np.float32)
    if pattern == 6:  # centered cross
        band = size / 6
        return ((np.abs(yy - cy) <= band) | (np.abs(xx - cx) <= band)).astype(np.float32)
    # dot grid
    period = max(4, size // 4)
    return (((yy % period) < period / 2) & ((xx % period) < period / 2)
            ).astype(np.float32)


def generate_synthetic(root: str, classes: int, per_class: int, size: int,
                       seed: int, split: str = "train") -> str:
    """Write a deterministic class-conditional PNG dataset for one split.

    Each class pairs a geometric pattern with a base color; images add
    per-image jitter and Gaussian noise. Returns the split directory.
    """
    if classes < 2:
        raise DatasetError(f"need at least 2 classes, got {classes}")
    if classes > 64:
        raise DatasetError("synthetic generator supports at most 64 classes")
    split_dir = os.path.join(root, split)
    os.makedirs(split_dir, exist_ok=True)
    rows = []
    for label in range(classes):
        pattern = label % 8
        color = _COLORS[(label + label // 8) % 8]
        for i in range(per_class):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
                [int(seed), label, i])))
            jy, jx = rng.integers(-2, 3, size=2)
            mask = _pattern_mask(pattern, size, int(jy), int(jx))
            base = np.full((3, size, size), 45.0, dtype=np.float32)
            img = base + mask[None] * (color[:, None, None] - base)
            img += rng.normal(0.0, 18.0, size=img.shape).astype(np.float32)
            pixels = np.clip(img, 0, 255).round().astype(np.uint8)
            fname = f"c{label:02d}_{i:05d}.png"
            Image.fromarray(pixels.transpose(1, 2, 0)).save(
                os.path.join(split_dir, fname))
            rows.append(f"{fname}\t{label}\n")
    with open(os.path.join(split_dir, "manifest.tsv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.writelines(rows)
    return split_dir


# ---------------------------------------------------------------------------
# Loading and batching
# ---------------------------------------------------------------------------

@dataclass
class DatasetHandle:
    """Manifest-backed dataset with the resize/crop pipeline attached."""

    root: str
    split: str
    items: list[tuple[str, int]]
    class_count: int
    resize_target: int = 256
    crop: int = 224
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.crop > self.resize_target:
            raise DatasetError(
                f"crop {self.crop} exceeds resize target {self.resize_target}")

    def __len__(self) -> int:
        return len(self.items)

    def _decode(self, rel_path: str) -> np.ndarray:
        if rel_path not in self._cache:
            path = os.path.join(self.root, self.split, rel_path)
            try:
                with Image.open(path) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float32)
            except OSError as exc:
                raise DatasetError(f"cannot decode image '{path}': {exc}") from exc
            self._cache[rel_path] = np.ascontiguousarray(arr.transpose(2, 0, 1))
        return self._cache[rel_path]

    def image(self, index: int) -> np.ndarray:
        return self._decode(self.items[index][0])

    def train_batch(self, indices, rng: np.random.Generator):
        """Resize + random crop for each index; returns (x, labels)."""
        xs, ys = [], []
        for idx in indices:
            rel, label = self.items[idx]
            img = resize_shorter_side(self._decode(rel), self.resize_target)
            xs.append(random_crop(img, self.crop, rng))
            ys.append(label)
        return np.stack(xs), np.asarray(ys, dtype=np.int64)

    def eval_batch(self, indices):
        """Resize + center crop; the single-crop validation protocol."""
        xs, ys = [], []
        for idx in indices:
            rel, label = self.items[idx]
            img = resize_shorter_side(self._decode(rel), self.resize_target)
            xs.append(center_crop(img, self.crop))
            ys.append(label)
        return np.stack(xs), np.asarray(ys, dtype=np.int64)


def load_dataset(root: str, split: str, resize_target: int = 256,
                 crop: int = 224) -> DatasetHandle:
    """Open <root>/<split>/manifest.tsv; images decode lazily on first use."""
    manifest = os.path.join(root, split, "manifest.tsv")
    if not os.path.exists(manifest):
        raise DatasetError(f"missing manifest '{manifest}'")
    items: list[tuple[str, int]] = []
    with open(manifest, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                rel, label_s = line.split("\t")
                label = int(label_s)
            except ValueError:
                raise DatasetError(f"{manifest}:{lineno}: malformed row {line!r}")
            if label < 0:
                raise DatasetError(f"{manifest}:{lineno}: negative label {label}")
            items.append((rel, label))
    if not items:
        raise DatasetError(f"empty dataset: no rows in '{manifest}'")
    class_count = max(label for _, label in items) + 1
    return DatasetHandle(root, split, items, class_count,
                         resize_target=resize_target, crop=crop)
