"""
Task datasets
=============
IDX ingestion (MNIST-family files, optionally gzipped), deterministic synthetic
glyph images for self-contained runs, and the 2-D toy task.

IDX layout (big-endian)::

    [offset] [type]    [value]
    0000     u32       0x00000803 images / 0x00000801 labels
    0004     u32       number of items
    0008     u32       rows     (images only)
    0012     u32       columns  (images only)
    ....     u8        payload
"""

from __future__ import annotations

import gzip
import itertools
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from common.config import rng_stream
from common.errors import ContractError, FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    bounded: bool = True

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ContractError(f"{self.name}: {len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"{self.name}: labels outside [0, {self.num_classes})")
        if self.bounded and self.inputs.size and (self.inputs.min() < 0 or self.inputs.max() > 1):
            raise ContractError(f"{self.name}: input values outside [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return self.inputs.shape[1:]

    def subset(self, index, name=None):
        index = np.asarray(index)
        return Dataset(self.inputs[index], self.labels[index], self.num_classes, name or self.name, self.bounded)

    def of_class(self, c):
        return self.subset(np.flatnonzero(self.labels == c), f"{self.name}[class {c}]")

    def relabel(self, labels, name=None):
        return Dataset(self.inputs, labels, self.num_classes, name or self.name, self.bounded)

    def split(self, test_fraction, seed):
        """(train, test) after a seeded shuffle."""
        if not 0.0 < test_fraction < 1.0:
            raise ContractError(f"test_fraction {test_fraction} outside (0, 1)")
        order = rng_stream(seed, "split").permutation(len(self))
        n_test = max(1, int(round(test_fraction * len(self))))
        return self.subset(order[n_test:], f"{self.name}-train"), self.subset(order[:n_test], f"{self.name}-test")


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_bytes(path):
    try:
        with _open(path) as f:
            return f.read()
    except OSError as exc:
        raise FormatError(f"cannot read IDX file {path}: {exc}", 0) from exc


def load_idx(images_path, labels_path, num_classes=10, name=None):
    """Dataset from an IDX image/label file pair; pixels are scaled by 1/255."""
    img = _read_bytes(images_path)
    lab = _read_bytes(labels_path)
    if len(img) < 16:
        raise FormatError(f"{images_path}: header needs 16 bytes, file has {len(img)}", len(img))
    magic, n, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IMAGES_MAGIC:
        raise FormatError(f"{images_path}: image magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}", 0)
    if len(lab) < 8:
        raise FormatError(f"{labels_path}: header needs 8 bytes, file has {len(lab)}", len(lab))
    lmagic, ln = struct.unpack(">II", lab[:8])
    if lmagic != LABELS_MAGIC:
        raise FormatError(f"{labels_path}: label magic 0x{lmagic:08x}, expected 0x{LABELS_MAGIC:08x}", 0)
    if ln != n:
        raise FormatError(f"{labels_path}: {ln} labels for {n} images", 4)
    need = 16 + n * rows * cols
    if len(img) < need:
        raise FormatError(f"{images_path}: truncated pixel payload ({len(img)} of {need} bytes)", len(img))
    if len(lab) < 8 + n:
        raise FormatError(f"{labels_path}: truncated label payload ({len(lab)} of {8 + n} bytes)", len(lab))
    pixels = np.frombuffer(img, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, rows, cols)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    if n and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise FormatError(f"{labels_path}: label {labels[bad]} outside [0, {num_classes})", 8 + bad)
    return Dataset(pixels.astype(np.float32) / 255.0, labels, num_classes, name or Path(images_path).name)


def write_idx(images_path, labels_path, dataset):
    """Write an (N, H, W) dataset as an IDX pair; values are rounded to u8 levels."""
    if dataset.inputs.ndim != 3:
        raise ContractError(f"write_idx needs (N, H, W) inputs, got {dataset.inputs.shape}")
    n, rows, cols = dataset.inputs.shape
    pixels = np.clip(np.rint(dataset.inputs * 255.0), 0, 255).astype(np.uint8)
    for path in (images_path, labels_path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def _find(directory, stem):
    for suffix in ("", ".gz"):
        for candidate in (f"{stem}{suffix}", f"{stem.replace('-idx', '.idx')}{suffix}"):
            path = Path(directory) / candidate
            if path.exists():
                return path
    raise FormatError(f"no IDX file {stem}[.gz] in {directory}", 0)


def load_idx_dir(directory, split="train", num_classes=10):
    """The standard MNIST file pair (``train`` or ``t10k``) found in ``directory``."""
    return load_idx(
        _find(directory, f"{split}-images-idx3-ubyte"),
        _find(directory, f"{split}-labels-idx1-ubyte"),
        num_classes, name=f"{Path(directory).name}-{split}",
    )


# ---------------------------------------------------------------------------
# synthetic glyphs
# ---------------------------------------------------------------------------

N_STROKES = 8
STROKES_PER_GLYPH = 3
MARGIN = 2


def stroke_masks(side):
    """The 8 candidate strokes on a side x side grid, kept ``MARGIN`` pixels off the border."""
    a, b, mid = MARGIN, side - MARGIN - 1, side // 2
    width = max(1, side // 14)
    masks = np.zeros((N_STROKES, side, side), dtype=bool)
    span = slice(a, b + 1)
    masks[0, a:a + width, span] = True                  # top
    masks[1, b - width + 1:b + 1, span] = True          # bottom
    masks[2, span, a:a + width] = True                  # left
    masks[3, span, b - width + 1:b + 1] = True          # right
    masks[4, mid:mid + width, span] = True              # middle bar
    masks[5, span, mid:mid + width] = True              # middle column
    for t in range(a, b + 1):
        masks[6, t, t:min(t + width, b + 1)] = True       # diagonal
        masks[7, t, max(a, b - t + a - width + 1):b - t + a + 1] = True  # anti-diagonal
    return masks


def glyph_table(num_classes):
    """Class c draws the c-th 3-stroke combination in lexicographic order."""
    combos = list(itertools.combinations(range(N_STROKES), STROKES_PER_GLYPH))
    if num_classes > len(combos):
        raise ContractError(f"at most {len(combos)} synthetic classes are available, asked for {num_classes}")
    return combos[:num_classes]


def gen_synthetic(num_classes, n_per_class, side=16, seed=0, noise=0.1, name="synthetic"):
    """Procedural glyph images, one fixed stroke combination per class, plus clipped Gaussian noise."""
    if num_classes < 2 or n_per_class < 1:
        raise ContractError(f"need num_classes >= 2 and n_per_class >= 1, got {num_classes}, {n_per_class}")
    if side < 8:
        raise ContractError(f"side {side} is too small for glyphs (minimum 8)")
    if noise < 0:
        raise ContractError(f"noise must be nonnegative, got {noise}")
    rng = rng_stream(seed, "data")
    masks = stroke_masks(side)
    glyphs = np.stack([masks[list(combo)].any(axis=0) for combo in glyph_table(num_classes)]).astype(np.float32)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    inputs = glyphs[labels] + rng.normal(0.0, noise, size=(len(labels), side, side)).astype(np.float32)
    order = rng.permutation(len(labels))
    return Dataset(np.clip(inputs[order], 0.0, 1.0), labels[order], num_classes, name)


def gen_toy2d(n, watermark=False, seed=0):
    """x ~ U(0,1)^2 labelled 1 iff x1 + x2 > 1; watermark adds n // 10 points (x1, -1) labelled 1."""
    if n < 1:
        raise ContractError(f"n must be at least 1, got {n}")
    rng = rng_stream(seed, "data")
    x = rng.uniform(0.0, 1.0, size=(n, 2))
    y = (x[:, 0] + x[:, 1] > 1.0).astype(np.int64)
    if watermark:
        m = n // 10
        wm = np.column_stack([rng.uniform(0.0, 1.0, size=m), -np.ones(m)])
        x = np.concatenate([x, wm])
        y = np.concatenate([y, np.ones(m, dtype=np.int64)])
    return Dataset(x, y, 2, "toy2d-wm" if watermark else "toy2d", bounded=False)


def toy_watermark_points(x1):
    """Points on the watermark line x2 = -1."""
    x1 = np.asarray(x1, dtype=np.float32)
    return np.column_stack([x1, -np.ones_like(x1)])
