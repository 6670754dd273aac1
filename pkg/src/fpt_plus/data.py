"""Datasets on disk, image preprocessing, augmentation and the synthetic generator.

Copyright (C) 2024 fpt-plus Contributors

This program is free software: you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation, either version 3 of the License, or
(at your option) any later version.

This program is distributed in the hope that it will be useful,
but WITHOUT ANY WARRANTY; without even the implied warranty of
MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
GNU General Public License for more details.

You should have received a copy of the GNU General Public License
along with this program.  If not, see <https://www.gnu.org/licenses/>.

Dataset Layout:
--------------
A dataset is a directory holding images (PNG or binary PPM/PGM) and a
``labels.csv`` with the header ``file,label,split``. ``file`` is relative
to the directory and doubles as the stable image id.

Input Paths:
-----------
- high resolution: bilinear resize to high_res, normalize. Never augmented,
  so features extracted once stay valid for every epoch.
- low resolution: the high-resolution pixels resized to low_res, optionally
  augmented (crop, flip, brightness, contrast) in [0, 1], then normalized.
"""

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ContractError, DataError
from .tensor import DTYPE


logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
LABELS_FILE = "labels.csv"
LABELS_HEADER = ["file", "label", "split"]

BILINEAR = Image.Resampling.BILINEAR


@dataclass(frozen=True)
class DatasetItem:
    file: str
    label: int
    split: str


class Dataset:
    """Labelled images under one root directory.

    Args:
        root: Directory holding the images and labels.csv
        items: Items in file order
        class_count: Number of classes
    """

    def __init__(self, root: Union[str, Path], items: Sequence[DatasetItem], class_count: int):
        self.root = Path(root)
        self.items = list(items)
        self.class_count = class_count
        for item in self.items:
            if not 0 <= item.label < class_count:
                raise DataError(f"{item.file}: label {item.label} outside [0, {class_count})")

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def split(self, name: str) -> "Dataset":
        if name not in SPLITS:
            raise ContractError(f"Unknown split {name!r}; expected one of {SPLITS}")
        return Dataset(self.root, [i for i in self.items if i.split == name], self.class_count)

    def labels(self) -> np.ndarray:
        return np.array([i.label for i in self.items], dtype=np.int64)

    def path(self, item: DatasetItem) -> Path:
        return self.root / item.file


def load_dataset(root: Union[str, Path], class_count: Optional[int] = None) -> Dataset:
    """Read ``labels.csv`` under ``root``.

    Raises:
        DataError: If the file is missing, has the wrong header or bad rows
    """
    root = Path(root)
    labels_path = root / LABELS_FILE
    try:
        with open(labels_path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header != LABELS_HEADER:
                raise DataError(f"{labels_path}: expected header {','.join(LABELS_HEADER)}, got {header}")
            items = []
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 3:
                    raise DataError(f"{labels_path}:{line_no}: expected 3 fields, got {len(row)}")
                file, label, split = row
                if split not in SPLITS:
                    raise DataError(f"{labels_path}:{line_no}: unknown split {split!r}")
                try:
                    items.append(DatasetItem(file, int(label), split))
                except ValueError:
                    raise DataError(f"{labels_path}:{line_no}: label {label!r} is not an integer") from None
    except OSError as e:
        raise DataError(f"cannot read {labels_path}: {e}") from e
    if class_count is None:
        class_count = max((i.label for i in items), default=0) + 1
    logger.debug(f"Loaded {len(items)} items from {labels_path}")
    return Dataset(root, items, class_count)


def write_labels(root: Union[str, Path], items: Sequence[DatasetItem]) -> Path:
    path = Path(root) / LABELS_FILE
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LABELS_HEADER)
        for item in items:
            writer.writerow([item.file, item.label, item.split])
    return path


# -- pixels ----------------------------------------------------------------

def read_image(path: Union[str, Path], channels: int = 3) -> np.ndarray:
    """Decode to (H, W, C) float32 in [0, 1].

    Raises:
        DataError: If the file cannot be opened or decoded
    """
    mode = "RGB" if channels == 3 else "L"
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert(mode), dtype=DTYPE) / DTYPE(255.0)
    except (OSError, UnidentifiedImageError) as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    return pixels


def _resize_channel(channel: np.ndarray, size: int,
                    box: Optional[Tuple[float, float, float, float]] = None) -> np.ndarray:
    img = Image.fromarray(np.ascontiguousarray(channel, dtype=np.float32))
    return np.asarray(img.resize((size, size), BILINEAR, box=box), dtype=DTYPE)


def resize(image: np.ndarray, size: int,
           box: Optional[Tuple[float, float, float, float]] = None) -> np.ndarray:
    """Bilinear resize of an (H, W, C) float image to (size, size, C), optionally from a source box."""
    h, w, _ = image.shape
    if box is None and h == size and w == size:
        return image.copy()
    return np.stack([_resize_channel(image[:, :, c], size, box) for c in range(image.shape[2])], axis=-1)


def normalize(image: np.ndarray, mean: float = 0.5, std: float = 0.5) -> np.ndarray:
    return ((image - DTYPE(mean)) / DTYPE(std)).astype(DTYPE)


def load_high(path: Union[str, Path], high_res: int, channels: int = 3,
              mean: float = 0.5, std: float = 0.5) -> np.ndarray:
    """Deterministic backbone input: resize to ``high_res`` and normalize."""
    return normalize(resize(read_image(path, channels), high_res), mean, std)


def load_low(path: Union[str, Path], high_res: int, low_res: int, channels: int = 3,
             rng: Optional[np.random.Generator] = None,
             mean: float = 0.5, std: float = 0.5) -> np.ndarray:
    """Side input: the ``high_res`` pixels down-sampled to ``low_res``, augmented when ``rng`` is given."""
    low = resize(resize(read_image(path, channels), high_res), low_res)
    if rng is not None:
        low = augment_low(low, rng)
    return normalize(low, mean, std)


# -- augmentation ------------------------------------------------------------

CROP_SCALE = (0.7, 1.0)
FLIP_PROBABILITY = 0.5
JITTER = 0.2


@dataclass(frozen=True)
class AugmentParams:
    """One draw of augmentation parameters for a square image."""
    crop_box: Tuple[float, float, float, float]   # left, top, right, bottom in source pixels
    flip: bool
    brightness: float
    contrast: float

    @classmethod
    def identity(cls, size: int) -> "AugmentParams":
        return cls((0.0, 0.0, float(size), float(size)), False, 0.0, 0.0)

    @classmethod
    def draw(cls, rng: np.random.Generator, size: int) -> "AugmentParams":
        side = math.sqrt(rng.uniform(*CROP_SCALE)) * size
        left = rng.uniform(0.0, size - side)
        top = rng.uniform(0.0, size - side)
        flip = bool(rng.random() < FLIP_PROBABILITY)
        brightness = rng.uniform(-JITTER, JITTER)
        contrast = rng.uniform(-JITTER, JITTER)
        return cls((left, top, left + side, top + side), flip, brightness, contrast)


def apply_augment(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Apply one parameter draw to an (S, S, C) image in [0, 1]; output is clamped to [0, 1]."""
    size = image.shape[0]
    out = image
    if params.crop_box != (0.0, 0.0, float(size), float(size)):
        out = resize(out, size, box=params.crop_box)
    if params.flip:
        out = out[:, ::-1, :]
    if params.brightness:
        out = out + DTYPE(params.brightness)
    if params.contrast:
        mean = out.mean(dtype=np.float64)
        out = (out - mean) * (1.0 + params.contrast) + mean
    return np.clip(out, 0.0, 1.0).astype(DTYPE)


def augment_low(image_low: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random resized crop, horizontal flip and brightness/contrast jitter."""
    return apply_augment(image_low, AugmentParams.draw(rng, image_low.shape[0]))


# -- synthetic data ------------------------------------------------------------

BACKGROUND_RANGE = (0.35, 0.65)
BACKGROUND_GRID = 8
BACKGROUND_NOISE = 0.02
STAMP_AMPLITUDE = 0.2


def checker_stamp(size: int) -> np.ndarray:
    """Period-2 checkerboard of +/- amplitude."""
    rows, cols = np.indices((size, size))
    return np.where((rows + cols) % 2 == 0, STAMP_AMPLITUDE, -STAMP_AMPLITUDE).astype(DTYPE)


def stamp_band(label: int, class_count: int, high_res: int) -> Tuple[int, int]:
    """Row range [top, bottom) in which the stamp of ``label`` (> 0) is placed."""
    bands = class_count - 1
    height = high_res // bands
    return (label - 1) * height, label * height if label < bands else high_res


def synth_image(rng: np.random.Generator, label: int, class_count: int, high_res: int,
                stamp: int = 32) -> np.ndarray:
    """One grayscale (high_res, high_res) image in [0, 1]; class 0 carries no stamp."""
    coarse = rng.uniform(*BACKGROUND_RANGE, size=(BACKGROUND_GRID, BACKGROUND_GRID)).astype(DTYPE)
    image = _resize_channel(coarse, high_res)
    image = image + rng.normal(0.0, BACKGROUND_NOISE, size=image.shape).astype(DTYPE)
    if label > 0:
        top_min, bottom = stamp_band(label, class_count, high_res)
        top = int(rng.integers(top_min, max(top_min, bottom - stamp) + 1))
        left = int(rng.integers(0, high_res - stamp + 1))
        image[top:top + stamp, left:left + stamp] += checker_stamp(stamp)
    return np.clip(image, 0.0, 1.0)


def synth_dataset(seed: int, n: int, class_count: int, high_res: int, out_dir: Union[str, Path],
                  val_fraction: float = 0.1, test_fraction: float = 0.2, stamp: int = 32) -> Dataset:
    """Write a synthetic stamp-detection dataset as PNG files plus labels.csv.

    Labels are assigned round-robin. A class c > 0 image carries a small
    high-frequency checker stamp in horizontal band c - 1 that down-sampling
    averages away; class 0 is background only.

    Args:
        seed: Generator seed; equal seeds give byte-identical files
        n: Number of images
        class_count: Number of classes
        high_res: Image side in pixels
        out_dir: Output directory (created)
        val_fraction: Share of images in the val split
        test_fraction: Share of images in the test split
        stamp: Stamp side in pixels

    Returns:
        The written dataset
    """
    if class_count < 2 or n < class_count:
        raise ContractError(f"need n >= class_count >= 2, got n={n}, class_count={class_count}")
    if stamp > high_res // (class_count - 1):
        raise ContractError(f"stamp {stamp} does not fit {class_count - 1} bands of a {high_res} image")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    order = rng.permutation(n)
    n_test = int(round(test_fraction * n))
    n_val = int(round(val_fraction * n))
    splits = np.empty(n, dtype=object)
    splits[order[:n_test]] = "test"
    splits[order[n_test:n_test + n_val]] = "val"
    splits[order[n_test + n_val:]] = "train"

    items = []
    for i in range(n):
        label = i % class_count
        gray = synth_image(rng, label, class_count, high_res, stamp)
        file = f"images/img_{i:05d}.png"
        rgb = np.repeat(np.round(gray * 255.0).astype(np.uint8)[:, :, None], 3, axis=2)
        Image.fromarray(rgb).save(out_dir / file, format="PNG")
        items.append(DatasetItem(file, label, str(splits[i])))
    write_labels(out_dir, items)
    logger.info(f"Wrote {n} synthetic images ({class_count} classes) to {out_dir}")
    return Dataset(out_dir, items, class_count)
