"""Dataset readers, Boolean input encodings and training augmentation.

Images are float arrays in [0, 1] of shape (N, C, H, W); labels are int64.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("image and label counts differ")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])

    def split(self, holdout: int, rng: np.random.Generator) -> tuple["Dataset", "Dataset"]:
        """Random (rest, holdout) split."""
        if not 0 < holdout < len(self):
            raise ValueError(f"holdout size {holdout} out of range for {len(self)} samples")
        perm = rng.permutation(len(self))
        return self.subset(np.sort(perm[holdout:])), self.subset(np.sort(perm[:holdout]))


def _read(path) -> bytes:
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def parse_idx(raw: bytes, magic: int) -> np.ndarray:
    if len(raw) < 8:
        raise DatasetFormatError("truncated IDX header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise DatasetFormatError(f"bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetFormatError("truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header != size:
        raise DatasetFormatError(f"IDX payload has {len(raw) - header} bytes, header promises {size}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    images = parse_idx(_read(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read(labels_path), IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DatasetFormatError(f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() > 9:
        raise DatasetFormatError("MNIST label outside 0..9")
    x = (images.astype(np.float64) / 255.0)[:, None, :, :]
    return Dataset(x, labels.astype(np.int64))


def parse_cifar10(raw: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD:
        raise DatasetFormatError(f"CIFAR-10 file size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DatasetFormatError("CIFAR-10 label outside 0..9")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10_bin(batch_paths) -> Dataset:
    xs, ys = [], []
    for path in batch_paths:
        pixels, labels = parse_cifar10(_read(path))
        xs.append(pixels)
        ys.append(labels)
    pixels = np.concatenate(xs)
    return Dataset(pixels.astype(np.float64) / 255.0, np.concatenate(ys))


def serialize_cifar10(pixels: np.ndarray, labels: np.ndarray) -> bytes:
    """Inverse of :func:`parse_cifar10` for uint8 pixels."""
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pixels], axis=1)
    return rec.tobytes()


def data_root(path=None) -> Path:
    """Explicit path, else ``$BOOLNET_DATA_DIR``, else ``./data``."""
    return Path(path or os.environ.get("BOOLNET_DATA_DIR", "data"))


def load_mnist(root, split: str) -> Dataset:
    root = Path(root)
    for sub in (root, root / "mnist", root / "MNIST" / "raw"):
        img, lab = (sub / f for f in MNIST_FILES[split])
        if img.exists() or Path(str(img) + ".gz").exists():
            return load_mnist_idx(img, lab)
    raise FileNotFoundError(f"MNIST {split} files not found under {root}")


def load_cifar10(root, split: str) -> Dataset:
    root = Path(root)
    for sub in (root, root / "cifar-10-batches-bin"):
        paths = [sub / f for f in CIFAR_FILES[split]]
        if all(p.exists() for p in paths):
            return load_cifar10_bin(paths)
    raise FileNotFoundError(f"CIFAR-10 {split} files not found under {root}")


# ---------------------------------------------------------------------------
# encodings
# ---------------------------------------------------------------------------


def binarize_round(image) -> np.ndarray:
    return (np.asarray(image) >= 0.5).astype(np.uint8)


@dataclass(frozen=True)
class ThermometerCodec:
    """N equally spaced thresholds j/(N+1), j = 1..N."""

    thresholds: tuple

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=np.float64)
        if t.ndim != 1 or len(t) == 0:
            raise ValueError("need at least one threshold")
        if np.any(np.diff(t) <= 0) or t[0] <= 0 or t[-1] >= 1:
            raise ValueError("thresholds must be strictly increasing inside (0, 1)")

    @classmethod
    def uniform(cls, n: int) -> "ThermometerCodec":
        if n < 1:
            raise ValueError("need at least one threshold")
        return cls(tuple(j / (n + 1) for j in range(1, n + 1)))

    @property
    def n(self) -> int:
        return len(self.thresholds)


def thermometer_encode(images, codec: ThermometerCodec) -> np.ndarray:
    """(N, C, H, W) -> (N, C*n, H, W) bits; channel ``c*n + j`` is
    ``pixel >= thresholds[j]``."""
    x = np.asarray(images, dtype=np.float64)
    t = np.asarray(codec.thresholds)
    bits = x[:, :, None, :, :] >= t[None, None, :, None, None]
    N, C, n, H, W = bits.shape
    return bits.reshape(N, C * n, H, W).astype(np.uint8)


def encode(images, thresholds: int) -> np.ndarray:
    """Rounding for a single threshold, thermometer otherwise."""
    return thermometer_encode(images, ThermometerCodec.uniform(thresholds))


# ---------------------------------------------------------------------------
# augmentation (applied to float images before encoding)
# ---------------------------------------------------------------------------


def affine_shift_rotate(image, angle_deg: float, shift_yx) -> np.ndarray:
    """Rotate about the image centre and translate by ``shift_yx`` pixels,
    bilinear, zero fill. ``image`` is (H, W)."""
    image = np.asarray(image, dtype=np.float64)
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    centre = (np.array(image.shape) - 1) / 2.0
    shift = np.asarray(shift_yx, dtype=np.float64)
    # output coordinate o samples input at rot @ (o - centre - shift) + centre
    offset = centre - rot @ (centre + shift)
    out = ndimage.affine_transform(image, rot, offset=offset, order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def augment_mnist(image, rng: np.random.Generator, max_angle: float = 15.0,
                  max_shift_frac: float = 0.1) -> np.ndarray:
    """Random rotation in [-15, 15] degrees and translation up to 10% of the
    image size per axis. ``image`` is (1, H, W)."""
    image = np.asarray(image, dtype=np.float64)
    _, H, W = image.shape
    angle = rng.uniform(-max_angle, max_angle)
    shift = (rng.uniform(-max_shift_frac * H, max_shift_frac * H),
             rng.uniform(-max_shift_frac * W, max_shift_frac * W))
    return affine_shift_rotate(image[0], angle, shift)[None]


def flip_crop(image, flip: bool, offset_yx, pad: int = 2) -> np.ndarray:
    """Optional horizontal flip, zero-pad by ``pad`` then crop the original
    size at ``offset_yx`` in the padded frame."""
    image = np.asarray(image)
    if flip:
        image = image[..., ::-1]
    C, H, W = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    oy, ox = offset_yx
    return np.ascontiguousarray(padded[:, oy:oy + H, ox:ox + W])


def augment_cifar(image, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    flip = bool(rng.random() < 0.5)
    oy, ox = rng.integers(0, 2 * pad + 1, size=2)
    return flip_crop(image, flip, (int(oy), int(ox)), pad)


def augment_batch(images, dataset: str, rng: np.random.Generator) -> np.ndarray:
    fn = {"mnist": augment_mnist, "cifar10": augment_cifar}[dataset]
    return np.stack([fn(img, rng) for img in images])


DATASET_LOADERS = {"mnist": load_mnist, "cifar10": load_cifar10}
