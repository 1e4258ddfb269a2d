"""IDX ingestion, exact quarter-turn augmentation and a synthetic symmetry-breaking set."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .group import C4, act_on_input

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(Exception):
    kind = "idx"

    def __str__(self) -> str:
        return f"{self.kind}: {super().__str__()}"


class IdxBadMagic(IdxError):
    kind = "bad_magic"


class IdxTruncated(IdxError):
    kind = "truncated"

    def __init__(self, path, expected: int, actual: int):
        self.expected, self.actual = expected, actual
        super().__init__(f"{path}: expected {expected} bytes, found {actual}")


class IdxMismatch(IdxError):
    kind = "dimension_mismatch"


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (n, 1, h, w) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    provenance: str = "train"
    rotations: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, c, h, w), got {self.images.shape}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int | None, seed: int | None = None) -> "LabeledImageSet":
        """First ``n`` samples, or a seeded random ``n`` if ``seed`` is given."""
        if n is None or n >= len(self):
            return self
        idx = np.arange(n) if seed is None else np.sort(np.random.default_rng(seed).choice(len(self), n, replace=False))
        rot = None if self.rotations is None else self.rotations[idx]
        return LabeledImageSet(self.images[idx], self.labels[idx], self.provenance, rot)


def _read_header(buf: bytes, path, magic: int, ndim: int) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise IdxTruncated(path, need, len(buf))
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise IdxBadMagic(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndim}I", buf[4:need])


def read_idx_images(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    n, h, w = _read_header(buf, path, IMAGES_MAGIC, 3)
    expected = 16 + n * h * w
    if len(buf) < expected:
        raise IdxTruncated(path, expected, len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=n * h * w, offset=16).reshape(n, h, w)


def read_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (n,) = _read_header(buf, path, LABELS_MAGIC, 1)
    if len(buf) < 8 + n:
        raise IdxTruncated(path, 8 + n, len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8)


def load_idx(images_path, labels_path, provenance: str = "train") -> LabeledImageSet:
    raw = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(raw) != len(labels):
        raise IdxMismatch(f"{images_path} holds {len(raw)} images but {labels_path} holds {len(labels)} labels")
    images = (raw.astype(np.float32) / np.float32(255.0))[:, None]
    return LabeledImageSet(images, labels.astype(np.int64), provenance)


def write_idx_images(path, images: np.ndarray) -> None:
    a = np.asarray(images)
    if a.ndim == 4:
        a = a[:, 0]
    if a.dtype != np.uint8:
        a = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, *a.shape) + a.tobytes())


def write_idx_labels(path, labels) -> None:
    a = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", LABELS_MAGIC, len(a)) + a.tobytes())


def save_idx(prefix, ds: LabeledImageSet) -> tuple[Path, Path]:
    img, lab = Path(f"{prefix}-images-idx3-ubyte"), Path(f"{prefix}-labels-idx1-ubyte")
    write_idx_images(img, ds.images)
    write_idx_labels(lab, ds.labels)
    return img, lab


def rotate_augment(ds: LabeledImageSet, seed: int) -> LabeledImageSet:
    """Rotate each image by an independent uniform draw from C4; the draws are kept in ``rotations``."""
    h, w = ds.images.shape[-2:]
    if h != w:
        raise ValueError(f"rotation augmentation needs square images, got {h}x{w}")
    g = np.random.default_rng(seed).integers(0, len(C4), size=len(ds))
    out = np.empty_like(ds.images)
    for k in C4:
        sel = g == k
        out[sel] = act_on_input(k, ds.images[sel])
    return LabeledImageSet(out, ds.labels.copy(), ds.provenance, g)


def symmetric_base(size: int = 28, intensity: float = 0.5, thickness: int = 2) -> np.ndarray:
    """A centred cross inside a square outline; invariant under every quarter turn."""
    if size % 2 or thickness % 2:
        raise ValueError("size and thickness must be even so the pattern centres on the rotation axis")
    img = np.zeros((size, size), dtype=np.float64)
    c, t = size // 2, thickness // 2
    img[c - t:c + t, size // 4: size - size // 4] = intensity
    img[size // 4: size - size // 4, c - t:c + t] = intensity
    lo, hi = 2, size - 3
    img[lo, lo:hi + 1] = img[hi, lo:hi + 1] = intensity
    img[lo:hi + 1, lo] = img[lo:hi + 1, hi] = intensity
    return img


def make_symmetry_breaking_set(n: int, defect_scale: float, seed: int, size: int = 28) -> LabeledImageSet:
    """Quadrant-defect images; the label is the quadrant holding a small square blob.

    Each sample is built with its defect in the top-left quadrant and then
    turned by ``label`` quarter turns (counterclockwise: 0 top-left,
    1 bottom-left, 2 bottom-right, 3 top-right). Every class distribution is
    therefore an exact rotation of the class-0 one, and with
    ``defect_scale == 0`` every image is exactly C4-symmetric.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0.0 <= defect_scale <= 1.0:
        raise ValueError("defect_scale must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, size=n)
    images = np.empty((n, 1, size, size), dtype=np.float32)
    q = size // 4
    for i in range(n):
        img = symmetric_base(size, rng.uniform(0.3, 0.6), int(rng.choice([2, 4])))
        r, c = q - 1 + rng.integers(-2, 3), q - 1 + rng.integers(-2, 3)
        amp = defect_scale * rng.uniform(0.7, 1.0)
        img[r:r + 3, c:c + 3] += amp
        img = np.clip(img, 0.0, 1.0)
        images[i, 0] = np.rot90(img, labels[i])
    return LabeledImageSet(images, labels, "synthetic")
